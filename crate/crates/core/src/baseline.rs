//! Plain full-batch back-propagation on the same networks, kept only as a
//! point of comparison. Every layer moves every epoch.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::network::{forward, Dataset, NetSpec, WeightSet};
use crate::polarize::{assess, TerminationMode};
use crate::report::{sample_reports, Outcome, ProbeRecord, TrainReport};
use crate::{Error, Execution, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Seed of the initial weights, echoed in reports.
    pub seed: u64,
    /// Condition used for the final per-sample margins.
    pub mode: TerminationMode,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 10_000,
            seed: 0,
            mode: TerminationMode::default(),
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        self.mode.validate()
    }
}

fn one_hot(classes: usize, essence: usize) -> DVector<f64> {
    DVector::from_fn(classes, |q, _| if q + 1 == essence { 1.0 } else { 0.0 })
}

/// `(1/φ) Σ ½ |h^[n](x) - onehot(y)|²`.
pub fn loss(spec: &NetSpec, weights: &WeightSet, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in dataset.samples() {
        let t = forward(spec, weights, s.surface())?;
        total += 0.5 * (t.output() - one_hot(spec.classes(), s.essence())).norm_squared();
    }
    Ok(total / dataset.len() as f64)
}

/// Loss and its gradient with respect to every weight matrix.
pub fn loss_gradient(spec: &NetSpec, weights: &WeightSet, dataset: &Dataset) -> Result<(f64, Vec<DMatrix<f64>>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = spec.depth();
    let scale = 1.0 / dataset.len() as f64;
    let mut grads: Vec<DMatrix<f64>> = weights
        .layers()
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut total = 0.0;
    for s in dataset.samples() {
        let t = forward(spec, weights, s.surface())?;
        let err = t.output() - one_hot(spec.classes(), s.essence());
        total += 0.5 * err.norm_squared();
        let mut delta = err.component_mul(t.c(n)) * scale;
        for u in (1..=n).rev() {
            grads[u - 1] += &delta * t.h(u - 1).transpose();
            if u > 1 {
                delta = (weights.layer(u).transpose() * &delta).component_mul(t.c(u - 1));
            }
        }
    }
    Ok((total * scale, grads))
}

/// Weights and per-epoch loss of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct BpRun {
    pub weights: WeightSet,
    /// Loss before each epoch, then the final loss.
    pub losses: Vec<f64>,
    pub diverged: bool,
}

pub fn bp_train(dataset: &Dataset, spec: &NetSpec, weights: &WeightSet, config: &BpConfig) -> Result<BpRun> {
    config.validate()?;
    dataset.validate_for(spec)?;
    weights.check(spec)?;
    let n = spec.depth();
    let mut w = weights.clone();
    let mut losses = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (l, grads) = match loss_gradient(spec, &w, dataset) {
            Ok(v) => v,
            Err(Error::InvalidArgument(_)) => return Ok(diverged(w, losses)),
            Err(e) => return Err(e),
        };
        if !l.is_finite() {
            return Ok(diverged(w, losses));
        }
        losses.push(l);
        if config.learning_rate == 0.0 {
            continue;
        }
        for u in 1..=n {
            let next = w.layer(u) - &grads[u - 1] * config.learning_rate;
            if next.iter().any(|x| !x.is_finite()) {
                return Ok(diverged(w, losses));
            }
            w.set_layer(u, next)?;
        }
    }
    match loss(spec, &w, dataset) {
        Ok(l) if l.is_finite() => {
            losses.push(l);
            Ok(BpRun {
                weights: w,
                losses,
                diverged: false,
            })
        }
        Ok(_) | Err(Error::InvalidArgument(_)) => Ok(diverged(w, losses)),
        Err(e) => Err(e),
    }
}

fn diverged(weights: WeightSet, losses: Vec<f64>) -> BpRun {
    BpRun {
        weights,
        losses,
        diverged: true,
    }
}

/// Runs [`bp_train`] and reports in the EI schema.
pub fn bp_fit(dataset: &Dataset, spec: &NetSpec, weights: &WeightSet, config: &BpConfig) -> Result<TrainReport> {
    let run = bp_train(dataset, spec, weights, config)?;
    let all: Vec<usize> = (0..dataset.len()).collect();
    let samples = if run.diverged {
        Vec::new()
    } else {
        let evals = assess(spec, &run.weights, dataset, &config.mode, Execution::Sequential)?;
        sample_reports(dataset, &all, &evals)
    };
    let correct = samples
        .iter()
        .filter(|s| threshold_correct(&s.outputs, s.essence))
        .count();
    Ok(TrainReport {
        method: "bp".into(),
        mode: config.mode,
        outcome: if run.diverged {
            Outcome::Diverged
        } else {
            Outcome::Completed
        },
        stage_history: Vec::new(),
        updated_layers: weights.changed_layers(&run.weights),
        samples,
        weights: run.weights.to_rows(),
        loss: run.losses.last().copied(),
        probes: vec![ProbeRecord {
            name: "threshold-accuracy".into(),
            pass: Some(!run.diverged && correct == dataset.len()),
            detail: format!("{correct}/{} samples on the correct side of 0.5", dataset.len()),
        }],
    })
}

/// Label unit above 0.5 and every other unit below.
pub fn threshold_correct(outputs: &[f64], essence: usize) -> bool {
    outputs
        .iter()
        .enumerate()
        .all(|(q, &h)| if q + 1 == essence { h > 0.5 } else { h < 0.5 })
}

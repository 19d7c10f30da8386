//! The descending-stage fit loop and read-only probes.
//!
//! `fit` tries stage `n` first, where only the output layer moves. If no
//! particular solution polarizes, it descends one layer at a time, each
//! stage `u` replacing `W[u..=n]` and leaving everything below untouched.

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::calculus::{input_hessian, trace_and_jacobians, DEFAULT_STEP};
use crate::linsys::{assemble_stage_n, assemble_stage_u, evaluate_dataset, rank_nullspace, Assembly, DEFAULT_RANK_TOL};
use crate::network::{forward, Dataset, NetSpec, WeightSet};
use crate::polarize::{
    assess, effective_variant, polarize_deep, polarize_stage_n, PolarizeOutcome, Problem, SearchBudget, TerminationMode,
};
use crate::report::{sample_reports, Outcome, ProbeRecord, StageAttempt, TrainReport};
use crate::{Error, Execution, Result};

/// Eigenvalues within this of zero make a stationary point degenerate.
pub const DEFAULT_EIG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TerminationMode,
    /// Deepest stage to attempt.
    pub stage_floor: usize,
    pub variant: Assembly,
    pub budget: SearchBudget,
    pub rank_tol: f64,
    pub exec: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TerminationMode::default(),
            stage_floor: 1,
            variant: Assembly::CCorrected,
            budget: SearchBudget::default(),
            rank_tol: DEFAULT_RANK_TOL,
            exec: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &NetSpec) -> Result<()> {
        self.mode.validate()?;
        self.budget.validate()?;
        if self.stage_floor == 0 || self.stage_floor > spec.depth() {
            return Err(Error::InvalidArgument(format!(
                "stage floor {} outside 1..={}",
                self.stage_floor,
                spec.depth()
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::InvalidArgument("rank tolerance must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Runs the EI loop from stage `n` down to `config.stage_floor`.
pub fn fit(dataset: &Dataset, spec: &NetSpec, weights: &WeightSet, config: &TrainConfig) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    config.validate(spec)?;
    dataset.validate_for(spec)?;
    weights.check(spec)?;
    if let Some(u) = (1..=spec.depth()).find(|&u| weights.layer(u).iter().all(|&w| w == 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "layer {u} is all zero; initialize weights first"
        )));
    }
    let exec = config.exec;
    let n = spec.depth();
    let problem = Problem {
        spec,
        weights,
        dataset,
        mode: &config.mode,
    };
    let (traces, jacs) = evaluate_dataset(spec, weights, dataset, exec)?;
    let classes = spec.classes();
    let mut history = Vec::new();

    for u in (config.stage_floor..=n).rev() {
        let variant = effective_variant(spec, u, config.variant);
        let system = if u == n {
            assemble_stage_n(dataset, &traces, &jacs, spec, exec)?
        } else {
            assemble_stage_u(u, dataset, &traces, &jacs, spec, variant, exec)?
        };
        let basis = rank_nullspace(system.block(), config.rank_tol)?;
        let outcome = if u == n {
            polarize_stage_n(&problem, &basis, &traces, &config.budget, exec)?
        } else {
            polarize_deep(&problem, &system, &basis, &config.budget, exec)?
        };
        let mut attempt = StageAttempt {
            stage: u,
            variant,
            equations: system.equations(),
            unknowns: system.unknowns(),
            rank: basis.rank * classes,
            nullity: basis.nullity() * classes,
            found: outcome.is_found(),
            restarts: 0,
            best_correct: 0,
            targets: dataset.len() * classes,
            frozen_residual: None,
            pre_repair_residual: None,
        };
        match outcome {
            PolarizeOutcome::NotFound(d) => {
                attempt.restarts = d.restarts;
                attempt.best_correct = d.best_correct;
                attempt.frozen_residual = d.frozen_residual;
                attempt.pre_repair_residual = d.pre_repair_residual;
                history.push(attempt);
            }
            PolarizeOutcome::Found(sol) => {
                attempt.best_correct = attempt.targets;
                attempt.frozen_residual = sol.frozen_residual;
                attempt.pre_repair_residual = sol.pre_repair_residual;
                history.push(attempt);
                let indices: Vec<usize> = (0..dataset.len()).collect();
                let mut report = TrainReport {
                    method: "ei".into(),
                    mode: config.mode,
                    outcome: Outcome::Success { stage: u },
                    stage_history: history,
                    updated_layers: (u..=n).collect(),
                    samples: sample_reports(dataset, &indices, &sol.samples),
                    weights: sol.weights.to_rows(),
                    loss: None,
                    probes: Vec::new(),
                };
                let pass = vanishing_probe(&report, weights, &sol.weights)?;
                report.probes.push(ProbeRecord {
                    name: "vanishing".into(),
                    pass: Some(pass),
                    detail: if u == 1 {
                        "stage 1 updates every layer".into()
                    } else {
                        format!("layers 1..={} bitwise unchanged", u - 1)
                    },
                });
                return Ok(report);
            }
        }
    }

    let evals = assess(spec, weights, dataset, &config.mode, exec)?;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    Ok(TrainReport {
        method: "ei".into(),
        mode: config.mode,
        outcome: Outcome::Exhausted,
        stage_history: history,
        updated_layers: Vec::new(),
        samples: sample_reports(dataset, &indices, &evals),
        weights: weights.to_rows(),
        loss: None,
        probes: Vec::new(),
    })
}

/// True iff every layer below the success stage is bitwise identical to
/// its initial value.
pub fn vanishing_probe(report: &TrainReport, initial: &WeightSet, fitted: &WeightSet) -> Result<bool> {
    let stage = report
        .success_stage()
        .ok_or_else(|| Error::InvalidArgument("vanishing probe needs a successful EI fit".into()))?;
    if initial.depth() != fitted.depth() {
        return Err(Error::Shape("weight sets have different depth".into()));
    }
    Ok((1..stage).all(|u| initial.layer_bits_equal(fitted, u)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityCurve {
    /// Nullity of the stage-`n` system on the first `k` samples, `k = 1..`.
    pub nullities: Vec<usize>,
    pub unknowns: usize,
    /// Smallest `k` reaching nullity 0.
    pub capacity: Option<usize>,
}

/// Stage-`n` nullity as samples are appended one at a time.
pub fn capacity_probe(
    spec: &NetSpec,
    weights: &WeightSet,
    stream: &Dataset,
    max_phi: usize,
    rank_tol: f64,
    exec: Execution,
) -> Result<CapacityCurve> {
    stream.validate_for(spec)?;
    let k_max = max_phi.min(stream.len());
    let (traces, jacs) = evaluate_dataset(spec, weights, stream, exec)?;
    let full = assemble_stage_n(stream, &traces, &jacs, spec, exec)?;
    let m = spec.input_dim();
    let classes = spec.classes();
    let nullities = exec.map(k_max, |k| {
        let rows = full.block().rows(0, (k + 1) * m).into_owned();
        rank_nullspace(&rows, rank_tol).map(|b| b.nullity() * classes)
    });
    let nullities = nullities.into_iter().collect::<Result<Vec<usize>>>()?;
    let capacity = nullities.iter().position(|&z| z == 0).map(|k| k + 1);
    Ok(CapacityCurve {
        nullities,
        unknowns: full.unknowns(),
        capacity,
    })
}

/// Smallest single-hidden-layer width with more parameters than
/// training equations: `m l + l l_n > φ m l_n`.
pub fn size_rule(m: usize, phi: usize, l_n: usize) -> Result<usize> {
    if m == 0 || phi == 0 || l_n == 0 {
        return Err(Error::InvalidArgument("size rule needs m, φ, l_n >= 1".into()));
    }
    Ok(phi * m * l_n / (m + l_n) + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    LocalMax,
    LocalMin,
    Saddle,
    Degenerate,
}

impl Classification {
    /// Strictly mixed signs are a saddle even if another eigenvalue is
    /// near zero; otherwise any near-zero eigenvalue is degenerate.
    pub fn from_eigenvalues(eigs: &[f64], tol: f64) -> Self {
        let pos = eigs.iter().any(|&l| l > tol);
        let neg = eigs.iter().any(|&l| l < -tol);
        if pos && neg {
            Classification::Saddle
        } else if eigs.iter().any(|l| l.abs() <= tol) {
            Classification::Degenerate
        } else if neg {
            Classification::LocalMax
        } else {
            Classification::LocalMin
        }
    }

    pub fn is_strict_extremum(self) -> bool {
        matches!(self, Classification::LocalMax | Classification::LocalMin)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPointReport {
    pub location: Vec<f64>,
    /// 1-based output unit.
    pub class: usize,
    /// `max |dh_v/dx|`.
    pub gradient_residual: f64,
    pub eigenvalues: Vec<f64>,
    pub classification: Classification,
    /// Nearest training sample within `γ`, if any.
    pub occupancy: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremumTolerances {
    pub fd_step: f64,
    pub eig_tol: f64,
}

impl Default for ExtremumTolerances {
    fn default() -> Self {
        Self {
            fd_step: DEFAULT_STEP,
            eig_tol: DEFAULT_EIG_TOL,
        }
    }
}

/// Gradient residual and Hessian classification of `h_v` at `x`.
pub fn verify_extremum(
    spec: &NetSpec,
    weights: &WeightSet,
    x: &[f64],
    v: usize,
    tol: &ExtremumTolerances,
) -> Result<StationaryPointReport> {
    let (_, jac) = trace_and_jacobians(spec, weights, x)?;
    let grad = jac.output_gradient(v)?;
    let hess = input_hessian(spec, weights, v, x, tol.fd_step)?;
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(hess.matrix).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.total_cmp(b));
    Ok(StationaryPointReport {
        location: x.to_vec(),
        class: v,
        gradient_residual: grad.iter().fold(0.0, |m, g| m.max(g.abs())),
        classification: Classification::from_eigenvalues(&eigenvalues, tol.eig_tol),
        eigenvalues,
        occupancy: None,
    })
}

/// Axis-aligned scan region and resolution (cells per axis).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusGrid {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: usize,
}

impl CensusGrid {
    pub fn cube(m: usize, lo: f64, hi: f64, cells: usize) -> Self {
        Self {
            lower: vec![lo; m],
            upper: vec![hi; m],
            cells,
        }
    }

    pub fn cell_width(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / self.cells as f64
    }

    fn node(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.lower[a] + self.cell_width(a) * i as f64)
            .collect()
    }
}

const GRAD_TOL: f64 = 1e-8;

fn unravel(mut flat: usize, radix: usize, dims: usize) -> Vec<usize> {
    let mut idx = vec![0; dims];
    for slot in idx.iter_mut() {
        *slot = flat % radix;
        flat /= radix;
    }
    idx
}

fn ravel(idx: &[usize], radix: usize) -> usize {
    idx.iter().rev().fold(0, |acc, &i| acc * radix + i)
}

fn gradient(spec: &NetSpec, weights: &WeightSet, v: usize, x: &[f64]) -> Result<Vec<f64>> {
    trace_and_jacobians(spec, weights, x)?.1.output_gradient(v)
}

/// Finds a zero of the gradient inside a bracketing cell: bisection in one
/// dimension, damped Newton on the finite-difference Hessian otherwise.
fn refine(
    spec: &NetSpec,
    weights: &WeightSet,
    v: usize,
    lo: &[f64],
    hi: &[f64],
    step: f64,
) -> Result<Option<Vec<f64>>> {
    if lo.len() == 1 {
        let (mut a, mut b) = (lo[0], hi[0]);
        let mut ga = gradient(spec, weights, v, &[a])?[0];
        let gb = gradient(spec, weights, v, &[b])?[0];
        if ga.abs() <= GRAD_TOL {
            return Ok(Some(vec![a]));
        }
        if gb.abs() <= GRAD_TOL {
            return Ok(Some(vec![b]));
        }
        if ga * gb > 0.0 {
            return Ok(None);
        }
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            let gm = gradient(spec, weights, v, &[mid])?[0];
            if gm.abs() <= GRAD_TOL || b - a <= 1e-15 * (1.0 + mid.abs()) {
                return Ok(Some(vec![mid]));
            }
            if ga * gm <= 0.0 {
                b = mid;
            } else {
                a = mid;
                ga = gm;
            }
        }
        return Ok(Some(vec![0.5 * (a + b)]));
    }
    let width: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| b - a).collect();
    let mut x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    for _ in 0..60 {
        let g = DVector::from_vec(gradient(spec, weights, v, &x)?);
        if g.amax() <= GRAD_TOL {
            let inside = x
                .iter()
                .zip(lo.iter().zip(hi))
                .zip(&width)
                .all(|((xi, (a, b)), w)| *xi >= a - 0.5 * w && *xi <= b + 0.5 * w);
            return Ok(inside.then_some(x));
        }
        let h = input_hessian(spec, weights, v, &x, step)?.matrix;
        let Some(delta) = h.clone().lu().solve(&g) else {
            return Ok(None);
        };
        // Damp to at most half a cell per axis.
        let ratio = delta
            .iter()
            .zip(&width)
            .map(|(d, w)| d.abs() / (0.5 * w))
            .fold(1.0, f64::max);
        for (xi, d) in x.iter_mut().zip(delta.iter()) {
            *xi -= d / ratio;
        }
    }
    Ok(None)
}

/// Grid scan for stationary points of `h_v`.
///
/// A cell is a candidate when every gradient component takes both signs
/// (or zero) over its corners. Candidates are refined, deduplicated and
/// classified. With a dataset, each point records the nearest sample within
/// `gamma`.
pub fn extrema_census(
    spec: &NetSpec,
    weights: &WeightSet,
    v: usize,
    grid: &CensusGrid,
    occupancy: Option<(&Dataset, f64)>,
    tol: &ExtremumTolerances,
    exec: Execution,
) -> Result<Vec<StationaryPointReport>> {
    let m = spec.input_dim();
    if m > 3 {
        return Err(Error::CensusDimension(m));
    }
    if grid.lower.len() != m || grid.upper.len() != m {
        return Err(Error::Shape("census box dimension differs from the input".into()));
    }
    if grid.cells < 3 {
        return Err(Error::InvalidArgument(format!(
            "census needs at least 3 cells per axis (got {})",
            grid.cells
        )));
    }
    if grid
        .lower
        .iter()
        .zip(&grid.upper)
        .any(|(a, b)| a.partial_cmp(b) != Some(std::cmp::Ordering::Less))
    {
        return Err(Error::InvalidArgument("census box is empty".into()));
    }
    if v == 0 || v > spec.classes() {
        return Err(Error::OutOfRange(format!("class {v}")));
    }
    let nodes = grid.cells + 1;
    let grads: Vec<Vec<f64>> = exec
        .map(nodes.pow(m as u32), |k| {
            gradient(spec, weights, v, &grid.node(&unravel(k, nodes, m)))
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let cell_count = grid.cells.pow(m as u32);
    let found: Vec<Option<Vec<f64>>> = exec
        .map(cell_count, |c| {
            let base = unravel(c, grid.cells, m);
            let corners: Vec<usize> = (0..1usize << m)
                .map(|mask| {
                    let idx: Vec<usize> = base.iter().enumerate().map(|(a, &i)| i + ((mask >> a) & 1)).collect();
                    ravel(&idx, nodes)
                })
                .collect();
            let brackets = (0..m).all(|t| {
                let lo = corners.iter().map(|&k| grads[k][t]).fold(f64::INFINITY, f64::min);
                let hi = corners.iter().map(|&k| grads[k][t]).fold(f64::NEG_INFINITY, f64::max);
                lo <= 0.0 && hi >= 0.0
            });
            if !brackets {
                return Ok(None);
            }
            let lo = grid.node(&base);
            let hi: Vec<f64> = lo.iter().enumerate().map(|(a, x)| x + grid.cell_width(a)).collect();
            refine(spec, weights, v, &lo, &hi, tol.fd_step)
        })
        .into_iter()
        .collect::<Result<_>>()?;

    let merge = 0.5 * (0..m).map(|a| grid.cell_width(a)).fold(f64::INFINITY, f64::min);
    let mut points: Vec<Vec<f64>> = Vec::new();
    for p in found.into_iter().flatten() {
        if !points.iter().any(|q| euclid(q, &p) < merge) {
            points.push(p);
        }
    }
    let reports: Vec<StationaryPointReport> = exec
        .map(points.len(), |i| verify_extremum(spec, weights, &points[i], v, tol))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(reports
        .into_iter()
        .map(|mut r| {
            if let Some((data, gamma)) = occupancy {
                r.occupancy = nearest_within(data, &r.location, gamma);
            }
            r
        })
        .collect())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn nearest_within(data: &Dataset, x: &[f64], gamma: f64) -> Option<usize> {
    data.samples()
        .iter()
        .enumerate()
        .map(|(i, s)| (i, euclid(s.surface(), x)))
        .filter(|(_, d)| *d <= gamma)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    /// `|noise|_2`, the distance between clean and noisy surfaces.
    pub distance: f64,
    /// Noisy surface within `γ` of some training sample with the same essence.
    pub within_gamma: bool,
    /// The pattern of outputs above 0.5 changed.
    pub prediction_changed: bool,
    pub clean_outputs: Vec<f64>,
    pub noisy_outputs: Vec<f64>,
}

/// Compares the model's response to sample `index` with and without noise.
pub fn noise_probe(
    spec: &NetSpec,
    weights: &WeightSet,
    dataset: &Dataset,
    index: usize,
    noise: &[f64],
    gamma: f64,
) -> Result<NoiseReport> {
    if index >= dataset.len() {
        return Err(Error::OutOfRange(format!("sample {index}")));
    }
    let sample = dataset.get(index);
    if noise.len() != sample.surface().len() {
        return Err(Error::Shape("noise dimension differs from the surface".into()));
    }
    let noisy: Vec<f64> = sample.surface().iter().zip(noise).map(|(x, d)| x + d).collect();
    let clean_outputs: Vec<f64> = forward(spec, weights, sample.surface())?
        .output()
        .iter()
        .copied()
        .collect();
    let noisy_outputs: Vec<f64> = forward(spec, weights, &noisy)?.output().iter().copied().collect();
    let within_gamma = dataset
        .samples()
        .iter()
        .any(|s| s.essence() == sample.essence() && euclid(s.surface(), &noisy) <= gamma);
    let pattern = |o: &[f64]| o.iter().map(|h| *h > 0.5).collect::<Vec<bool>>();
    Ok(NoiseReport {
        distance: noise.iter().map(|d| d * d).sum::<f64>().sqrt(),
        within_gamma,
        prediction_changed: pattern(&clean_outputs) != pattern(&noisy_outputs),
        clean_outputs,
        noisy_outputs,
    })
}

//! The one report schema shared by every trainer.

use serde::{Deserialize, Serialize};

use crate::linsys::Assembly;
use crate::network::{Dataset, NetSpec, WeightSet};
use crate::polarize::{SampleEval, TerminationMode};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Outcome {
    /// EI found a solution at this stage.
    Success { stage: usize },
    /// EI tried every permitted stage without a feasible solution.
    Exhausted,
    /// The baseline ran all its epochs.
    Completed,
    /// The baseline produced a non-finite loss.
    Diverged,
}

/// One row of the per-stage history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAttempt {
    pub stage: usize,
    pub variant: Assembly,
    pub equations: usize,
    pub unknowns: usize,
    pub rank: usize,
    pub nullity: usize,
    pub found: bool,
    pub restarts: usize,
    pub best_correct: usize,
    pub targets: usize,
    pub frozen_residual: Option<f64>,
    pub pre_repair_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub index: usize,
    pub essence: usize,
    pub outputs: Vec<f64>,
    pub margin: f64,
    pub pass: bool,
    pub stationarity_residual: f64,
    pub jacobian_scale: f64,
}

/// Result of a read-only probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub name: String,
    pub pass: Option<bool>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// `"ei"` or `"bp"`.
    pub method: String,
    pub mode: TerminationMode,
    pub outcome: Outcome,
    pub stage_history: Vec<StageAttempt>,
    pub updated_layers: Vec<usize>,
    pub samples: Vec<SampleReport>,
    /// Final weights, `weights[u-1][row][col]`.
    pub weights: Vec<Vec<Vec<f64>>>,
    pub loss: Option<f64>,
    pub probes: Vec<ProbeRecord>,
}

impl TrainReport {
    pub fn is_success(&self) -> bool {
        matches!(self.outcome, Outcome::Success { .. } | Outcome::Completed)
    }

    pub fn success_stage(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Success { stage } => Some(stage),
            _ => None,
        }
    }

    pub fn passed(&self) -> usize {
        self.samples.iter().filter(|s| s.pass).count()
    }

    pub fn final_weights(&self, spec: &NetSpec) -> Result<WeightSet> {
        WeightSet::from_rows(spec, &self.weights)
    }

    pub fn min_margin(&self) -> f64 {
        self.samples.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Pairs evaluations with the samples they came from. `indices` maps
/// evaluation `k` to its dataset position.
pub fn sample_reports(dataset: &Dataset, indices: &[usize], evals: &[SampleEval]) -> Vec<SampleReport> {
    indices
        .iter()
        .zip(evals)
        .map(|(&i, e)| SampleReport {
            index: i,
            essence: dataset.get(i).essence(),
            outputs: e.outputs.clone(),
            margin: e.margin,
            pass: e.pass,
            stationarity_residual: e.residual,
            jacobian_scale: e.jacobian_scale,
        })
        .collect()
}

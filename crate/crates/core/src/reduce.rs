//! Neighborhood sample reduction.
//!
//! Samples of one essence that sit close together should get close outputs,
//! so only a representative per neighborhood is trained. The rest are
//! checked afterwards and any that fail join the training set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::network::{Dataset, NetSpec, Sample, WeightSet};
use crate::polarize::assess;
use crate::report::{sample_reports, ProbeRecord, TrainReport};
use crate::trainer::{fit, TrainConfig};
use crate::{Error, Result};

/// Euclidean distance between two surfaces.
pub fn distance(a: &Sample, b: &Sample) -> Result<f64> {
    surface_distance(a.surface(), b.surface())
}

fn surface_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "surfaces of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterRule {
    /// Smallest `k` with every member strictly within `γ` of its center.
    Radius,
    /// Fixed number of clusters per class (capped at the class size).
    Count(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborhoodConfig {
    pub gamma: f64,
    pub rule: ClusterRule,
    pub seed: u64,
}

impl NeighborhoodConfig {
    pub fn radius(gamma: f64) -> Self {
        Self {
            gamma,
            rule: ClusterRule::Radius,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("γ must be > 0, got {}", self.gamma)));
        }
        if self.rule == ClusterRule::Count(0) {
            return Err(Error::InvalidArgument("cluster count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cluster {
    /// Dataset index of the representative.
    pub center: usize,
    /// Dataset indices, center included.
    pub members: Vec<usize>,
}

const LLOYD_ITERS: usize = 100;

/// Seeded k-means++ followed by Lloyd iterations; returns assignments.
fn kmeans(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = points.len();
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| dist(p, c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].to_vec());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        (0..centers.len())
            .min_by(|&a, &b| dist(p, &centers[a]).total_cmp(&dist(p, &centers[b])))
            .expect("k >= 1")
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..LLOYD_ITERS {
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&&[f64]> = points
                .iter()
                .zip(&assign)
                .filter(|(_, a)| **a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for (t, slot) in center.iter_mut().enumerate().take(dim) {
                *slot = members.iter().map(|p| p[t]).sum::<f64>() / members.len() as f64;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Clusters the given members (one essence) and snaps every cluster to the
/// member nearest its mean; members are then assigned to the nearest
/// representative.
fn cluster_k(dataset: &Dataset, members: &[usize], k: usize, seed: u64) -> Vec<Cluster> {
    let points: Vec<&[f64]> = members.iter().map(|&i| dataset.get(i).surface()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let assign = kmeans(&points, k, &mut rng);
    let dim = points[0].len();
    let mut centers: Vec<usize> = Vec::new();
    for c in 0..k {
        let group: Vec<usize> = (0..points.len()).filter(|&i| assign[i] == c).collect();
        if group.is_empty() {
            continue;
        }
        let mean: Vec<f64> = (0..dim)
            .map(|t| group.iter().map(|&i| points[i][t]).sum::<f64>() / group.len() as f64)
            .collect();
        let snap = *group
            .iter()
            .min_by(|&&a, &&b| dist(points[a], &mean).total_cmp(&dist(points[b], &mean)))
            .expect("non-empty group");
        if !centers.contains(&snap) {
            centers.push(snap);
        }
    }
    centers.sort_unstable();
    let mut clusters: Vec<Cluster> = centers
        .iter()
        .map(|&c| Cluster {
            center: members[c],
            members: Vec::new(),
        })
        .collect();
    for (i, p) in points.iter().enumerate() {
        let best = (0..centers.len())
            .min_by(|&a, &b| dist(p, points[centers[a]]).total_cmp(&dist(p, points[centers[b]])))
            .expect("at least one center");
        clusters[best].members.push(members[i]);
    }
    clusters
}

/// Representatives for the samples of one essence.
pub fn cluster_centers(dataset: &Dataset, members: &[usize], config: &NeighborhoodConfig) -> Result<Vec<Cluster>> {
    config.validate()?;
    if members.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = members.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::OutOfRange(format!("sample {bad}")));
    }
    let essence = dataset.get(members[0]).essence();
    if members.iter().any(|&i| dataset.get(i).essence() != essence) {
        return Err(Error::InvalidArgument("cluster members must share one essence".into()));
    }
    match config.rule {
        ClusterRule::Count(k) => Ok(cluster_k(dataset, members, k.min(members.len()), config.seed)),
        ClusterRule::Radius => {
            for k in 1..=members.len() {
                let clusters = cluster_k(dataset, members, k, config.seed);
                let covered = clusters.iter().all(|c| {
                    let center = dataset.get(c.center).surface();
                    c.members
                        .iter()
                        .all(|&i| dist(dataset.get(i).surface(), center) < config.gamma)
                });
                if covered {
                    return Ok(clusters);
                }
            }
            // Every sample its own center always covers.
            Ok(members
                .iter()
                .map(|&i| Cluster {
                    center: i,
                    members: vec![i],
                })
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Dataset indices trained this round.
    pub trained: Vec<usize>,
    /// Non-central samples that failed verification, in sample order.
    pub promoted: Vec<usize>,
    pub fit_success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionState {
    pub central: Vec<usize>,
    pub non_central: Vec<usize>,
    pub rounds: Vec<RoundRecord>,
}

impl ReductionState {
    pub fn round_count(&self) -> usize {
        self.rounds.len()
    }

    /// Rounds that promoted at least one sample.
    pub fn promotion_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| !r.promoted.is_empty()).count()
    }
}

/// Train on centers, verify the rest with the training condition, promote
/// failures and repeat. The returned report evaluates the final weights on
/// the full dataset.
pub fn reduction_loop(
    dataset: &Dataset,
    spec: &NetSpec,
    weights: &WeightSet,
    train: &TrainConfig,
    neighborhood: &NeighborhoodConfig,
) -> Result<(TrainReport, ReductionState)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    neighborhood.validate()?;
    let mut central = Vec::new();
    for essence in 1..=dataset.max_essence() {
        let members: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.get(i).essence() == essence)
            .collect();
        if members.is_empty() {
            continue;
        }
        central.extend(
            cluster_centers(dataset, &members, neighborhood)?
                .into_iter()
                .map(|c| c.center),
        );
    }
    central.sort_unstable();
    let mut rounds = Vec::new();
    loop {
        let subset = dataset.subset(&central);
        let mut report = fit(&subset, spec, weights, train)?;
        for s in report.samples.iter_mut() {
            s.index = central[s.index];
        }
        let non_central: Vec<usize> = (0..dataset.len())
            .filter(|i| central.binary_search(i).is_err())
            .collect();
        if !report.is_success() {
            rounds.push(RoundRecord {
                trained: central.clone(),
                promoted: Vec::new(),
                fit_success: false,
            });
            let state = ReductionState {
                central,
                non_central,
                rounds,
            };
            return Ok((report, state));
        }
        let fitted = report.final_weights(spec)?;
        let evals = assess(spec, &fitted, dataset, &train.mode, train.exec)?;
        let promoted: Vec<usize> = non_central.iter().copied().filter(|&i| !evals[i].pass).collect();
        rounds.push(RoundRecord {
            trained: central.clone(),
            promoted: promoted.clone(),
            fit_success: true,
        });
        if promoted.is_empty() || non_central.is_empty() {
            let all: Vec<usize> = (0..dataset.len()).collect();
            report.samples = sample_reports(dataset, &all, &evals);
            report.probes.push(ProbeRecord {
                name: "reduction".into(),
                pass: Some(promoted.is_empty()),
                detail: format!(
                    "{} rounds, {} of {} samples trained",
                    rounds.len(),
                    central.len(),
                    dataset.len()
                ),
            });
            let state = ReductionState {
                central,
                non_central,
                rounds,
            };
            return Ok((report, state));
        }
        central.extend(promoted);
        central.sort_unstable();
    }
}

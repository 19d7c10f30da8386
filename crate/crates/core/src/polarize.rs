//! Choosing a particular solution from the general solution.
//!
//! Any null-space vector keeps every training surface stationary; what is
//! left is to flip each extremum to the right side of the output range.
//! Output-unit signs are invariant under positive scaling, so the search
//! first looks for a coefficient vector with every pre-activation correctly
//! signed, and only then amplifies with a common scale.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calculus::{inf_norm, trace_and_jacobians};
use crate::linsys::{
    assemble_stage_n, evaluate_dataset, rank_nullspace, Assembly, HomogeneousSystem, MonomialIndex, NullSpaceBasis,
    DEFAULT_RANK_TOL,
};
use crate::network::{ActivationTrace, Dataset, NetSpec, WeightSet};
use crate::{Error, Execution, Result};

/// Relative stationarity tolerance: a sample passes when every output
/// gradient entry is at most `STATIONARITY_TOL * (1 + |J^[n-1]|_inf)`.
pub const STATIONARITY_TOL: f64 = 1e-8;

/// Relative tolerance for reproducing a monomial vector from weights.
pub const REALIZE_TOL: f64 = 1e-6;

const PROJECTION_ITERS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TerminationMode {
    /// Target outputs within `epsilon` of 1 and 0.
    Ideal { epsilon: f64 },
    /// Correct side of the 0.5 midpoint with margin `delta`.
    Weakened { delta: f64 },
    /// Ratio form: `1 - h_y / Σh < alpha`, `h_q / Σh < beta`.
    Softmax { alpha: f64, beta: f64 },
}

impl Default for TerminationMode {
    fn default() -> Self {
        TerminationMode::Weakened { delta: 0.05 }
    }
}

impl TerminationMode {
    pub fn ideal(epsilon: f64) -> Result<Self> {
        let m = TerminationMode::Ideal { epsilon };
        m.validate()?;
        Ok(m)
    }

    pub fn weakened(delta: f64) -> Result<Self> {
        let m = TerminationMode::Weakened { delta };
        m.validate()?;
        Ok(m)
    }

    pub fn softmax(alpha: f64, beta: f64) -> Result<Self> {
        let m = TerminationMode::Softmax { alpha, beta };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TerminationMode::Ideal { epsilon } => epsilon > 0.0 && epsilon < 0.5,
            TerminationMode::Weakened { delta } => (0.0..0.5).contains(&delta),
            TerminationMode::Softmax { alpha, beta } => alpha > 0.0 && alpha < 1.0 && beta > 0.0 && beta < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid termination mode {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TerminationMode::Ideal { .. } => "ideal",
            TerminationMode::Weakened { .. } => "weakened",
            TerminationMode::Softmax { .. } => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub pass: bool,
    /// Signed distance to the binding constraint; positive means satisfied.
    pub margin: f64,
}

/// Tests one sample's outputs against the termination condition.
pub fn check_condition(outputs: &[f64], label: usize, mode: &TerminationMode) -> Result<ConditionCheck> {
    mode.validate()?;
    if label == 0 || label > outputs.len() {
        return Err(Error::OutOfRange(format!(
            "label {label} outside 1..={}",
            outputs.len()
        )));
    }
    if let Some(bad) = outputs.iter().find(|h| !(**h > 0.0 && **h < 1.0)) {
        return Err(Error::OutOfRange(format!("output {bad} outside (0, 1)")));
    }
    let y = label - 1;
    let others = || {
        outputs
            .iter()
            .enumerate()
            .filter(move |(q, _)| *q != y)
            .map(|(_, h)| *h)
    };
    let check = match *mode {
        TerminationMode::Ideal { epsilon } => {
            let margin = others().fold(epsilon - (1.0 - outputs[y]), |m, h| m.min(epsilon - h));
            ConditionCheck {
                pass: margin >= 0.0,
                margin,
            }
        }
        TerminationMode::Weakened { delta } => {
            let margin = others().fold(outputs[y] - (0.5 + delta), |m, h| m.min((0.5 - delta) - h));
            ConditionCheck {
                pass: margin > 0.0,
                margin,
            }
        }
        TerminationMode::Softmax { alpha, beta } => {
            let total: f64 = outputs.iter().sum();
            let margin = others().fold(alpha - (1.0 - outputs[y] / total), |m, h| m.min(beta - h / total));
            ConditionCheck {
                pass: margin > 0.0,
                margin,
            }
        }
    };
    Ok(check)
}

/// How hard the search tries before giving up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchBudget {
    /// Restarts per output unit at stage `n`.
    pub draws: usize,
    pub climb_steps: usize,
    /// Restarts for deeper stages; each one runs a full stage-`n` repair.
    pub deep_draws: usize,
    pub deep_climb_steps: usize,
    /// Levenberg-Marquardt iterations that re-solve the c-corrected deep
    /// stage with coefficients tracking the weights; 0 keeps them frozen.
    pub refine_iters: usize,
    pub repair_draws: usize,
    pub repair_climb_steps: usize,
    /// The scale sweep covers `2^0 ..= 2^scale_max_exponent`.
    pub scale_max_exponent: u32,
    /// Restarts evaluated per parallel batch.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self {
            draws: 10_000,
            climb_steps: 100,
            deep_draws: 48,
            deep_climb_steps: 2,
            refine_iters: 200,
            repair_draws: 400,
            repair_climb_steps: 60,
            scale_max_exponent: 10,
            chunk: 64,
            seed: 0,
        }
    }
}

impl SearchBudget {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::InvalidArgument("search chunk must be >= 1".into()));
        }
        if self.scale_max_exponent > 60 {
            return Err(Error::InvalidArgument("scale exponent must be <= 60".into()));
        }
        Ok(())
    }

    fn repair(&self, seed: u64) -> SearchBudget {
        SearchBudget {
            draws: self.repair_draws,
            climb_steps: self.repair_climb_steps,
            seed,
            ..self.clone()
        }
    }
}

/// Fresh-forward-pass evaluation of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub outputs: Vec<f64>,
    pub margin: f64,
    pub pass: bool,
    /// `max |dh^[n]/dx|`.
    pub residual: f64,
    /// `|J^[n-1]|_inf`, the scale the residual is judged against.
    pub jacobian_scale: f64,
    pub saturated: bool,
}

impl SampleEval {
    pub fn stationary(&self) -> bool {
        self.residual <= STATIONARITY_TOL * (1.0 + self.jacobian_scale)
    }
}

/// Evaluates every sample: condition margin plus stationarity residual.
pub fn assess(
    spec: &NetSpec,
    weights: &WeightSet,
    dataset: &Dataset,
    mode: &TerminationMode,
    exec: Execution,
) -> Result<Vec<SampleEval>> {
    let n = spec.depth();
    exec.map(dataset.len(), |i| {
        let s = dataset.get(i);
        let (trace, jac) = trace_and_jacobians(spec, weights, s.surface())?;
        let outputs: Vec<f64> = trace.output().iter().copied().collect();
        let check = check_condition(&outputs, s.essence(), mode)?;
        Ok(SampleEval {
            outputs,
            margin: check.margin,
            pass: check.pass,
            residual: jac.output().amax(),
            jacobian_scale: inf_norm(jac.layer(n - 1)),
            saturated: trace.is_saturated(),
        })
    })
    .into_iter()
    .collect()
}

/// Chosen output scale and the sweep it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleChoice {
    pub lambda: f64,
    pub min_margin: f64,
    /// `(lambda, min margin)` for every candidate scale.
    pub sweep: Vec<(f64, f64)>,
}

/// Picks `λ ∈ {2^0, .., 2^K}` for `W[n]` maximizing the minimum margin
/// (smallest `λ` on ties).
pub fn scale_search(
    spec: &NetSpec,
    weights: &WeightSet,
    dataset: &Dataset,
    mode: &TerminationMode,
    max_exponent: u32,
    exec: Execution,
) -> Result<ScaleChoice> {
    let n = spec.depth();
    let mut sweep = Vec::with_capacity(max_exponent as usize + 1);
    for e in 0..=max_exponent {
        let lambda = (1u64 << e) as f64;
        let mut w = weights.clone();
        w.set_layer(n, weights.layer(n) * lambda)?;
        let evals = assess(spec, &w, dataset, mode, exec)?;
        let min_margin = evals.iter().map(|e| e.margin).fold(f64::INFINITY, f64::min);
        sweep.push((lambda, min_margin));
    }
    let (lambda, min_margin) =
        sweep.iter().copied().fold(
            (1.0, f64::NEG_INFINITY),
            |best, cur| if cur.1 > best.1 { cur } else { best },
        );
    Ok(ScaleChoice {
        lambda,
        min_margin,
        sweep,
    })
}

/// Everything needed to evaluate a candidate: the network, its current
/// weights, the data and the target condition.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub spec: &'a NetSpec,
    pub weights: &'a WeightSet,
    pub dataset: &'a Dataset,
    pub mode: &'a TerminationMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticularSolution {
    pub stage: usize,
    /// Null-space coefficients per output unit.
    pub coefficients: Vec<Vec<f64>>,
    pub lambda: f64,
    /// Complete weights; only layers `stage..=n` differ from the input.
    pub weights: WeightSet,
    pub samples: Vec<SampleEval>,
    pub min_margin: f64,
    /// `max |A q|` with `A` frozen at the pre-stage weights (deep stages).
    pub frozen_residual: Option<f64>,
    /// True c-divided output residual before the stage-`n` re-solve.
    pub pre_repair_residual: Option<f64>,
}

/// Best effort when no candidate satisfied every constraint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchDiagnostics {
    pub restarts: usize,
    /// Correctly signed output pre-activations of the best candidate.
    pub best_correct: usize,
    pub targets: usize,
    pub best_softmin: f64,
    pub frozen_residual: Option<f64>,
    pub pre_repair_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolarizeOutcome {
    Found(Box<ParticularSolution>),
    NotFound(SearchDiagnostics),
}

impl PolarizeOutcome {
    pub fn is_found(&self) -> bool {
        matches!(self, PolarizeOutcome::Found(_))
    }

    pub fn solution(&self) -> Option<&ParticularSolution> {
        match self {
            PolarizeOutcome::Found(s) => Some(s),
            PolarizeOutcome::NotFound(_) => None,
        }
    }
}

fn restart_rng(seed: u64, lane: u64, restart: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((lane << 32) ^ restart);
    rng
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct SignScore {
    correct: usize,
    softmin: f64,
}

/// Sign score of `z = F a` against targets `s`.
fn sign_score(f: &DMatrix<f64>, row_norms: &[f64], signs: &[f64], a: &[f64]) -> SignScore {
    let av = DVector::from_column_slice(a);
    let an = av.norm().max(f64::MIN_POSITIVE);
    let z = f * &av;
    let mut correct = 0;
    let mut softmin = f64::INFINITY;
    for i in 0..z.len() {
        let sz = signs[i] * z[i];
        if sz > 0.0 {
            correct += 1;
        }
        let norm = if row_norms[i] > 0.0 {
            sz / (row_norms[i] * an)
        } else {
            0.0
        };
        softmin = softmin.min(norm);
    }
    SignScore { correct, softmin }
}

struct Candidate {
    index: usize,
    coeffs: Vec<f64>,
    score: SignScore,
}

/// Restarted coordinate hill-climb for one output unit. Returns the winner
/// of the first batch containing a correctly signed candidate, or the best
/// candidate overall with `None`.
fn search_unit(
    f: &DMatrix<f64>,
    signs: &[f64],
    budget: &SearchBudget,
    lane: u64,
    exec: Execution,
) -> (Option<Candidate>, SignScore, usize) {
    let d = f.ncols();
    let phi = f.nrows();
    let row_norms: Vec<f64> = (0..phi).map(|i| f.row(i).norm()).collect();
    let mut best = SignScore {
        correct: 0,
        softmin: f64::NEG_INFINITY,
    };
    let mut done = 0;
    while done < budget.draws {
        let size = budget.chunk.min(budget.draws - done);
        let batch = exec.map(size, |k| {
            let index = done + k;
            let mut rng = restart_rng(budget.seed, lane, index as u64);
            let mut a = normal_vec(&mut rng, d);
            let mut score = sign_score(f, &row_norms, signs, &a);
            for step in 0..budget.climb_steps {
                if score.correct == phi {
                    break;
                }
                let j = step % d;
                let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let delta: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5 * norm / (d as f64).sqrt();
                a[j] += delta;
                let trial = sign_score(f, &row_norms, signs, &a);
                if trial >= score {
                    score = trial;
                } else {
                    a[j] -= delta;
                }
            }
            Candidate {
                index,
                coeffs: a,
                score,
            }
        });
        done += size;
        for c in &batch {
            if c.score > best {
                best = c.score;
            }
        }
        let winner =
            batch
                .into_iter()
                .filter(|c| c.score.correct == phi)
                .reduce(|w, c| if better_candidate(&c, &w) { c } else { w });
        if winner.is_some() {
            return (winner, best, done);
        }
    }
    (None, best, done)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Higher softmin, then smaller coefficient norm, then lower restart index.
fn better_candidate(c: &Candidate, w: &Candidate) -> bool {
    if c.score.softmin != w.score.softmin {
        return c.score.softmin > w.score.softmin;
    }
    let (nc, nw) = (norm(&c.coeffs), norm(&w.coeffs));
    if nc != nw {
        return nc < nw;
    }
    c.index < w.index
}

/// Stage-`n` polarization. `basis` is the null space of the shared block of
/// `L(n, -, Φ)` at `problem.weights`, and `traces` the matching forward
/// passes. Output units are searched independently since each owns its
/// own block of unknowns.
pub fn polarize_stage_n(
    problem: &Problem,
    basis: &NullSpaceBasis,
    traces: &[ActivationTrace],
    budget: &SearchBudget,
    exec: Execution,
) -> Result<PolarizeOutcome> {
    budget.validate()?;
    let Problem {
        spec,
        weights,
        dataset,
        mode,
    } = *problem;
    let n = spec.depth();
    let classes = spec.classes();
    let phi = dataset.len();
    if traces.len() != phi {
        return Err(Error::Shape("one trace per sample required".into()));
    }
    if basis.unknowns() != spec.width(n - 1) {
        return Err(Error::Shape("basis does not match the stage-n block".into()));
    }
    let targets = phi * classes;
    if basis.nullity() == 0 {
        return Ok(PolarizeOutcome::NotFound(SearchDiagnostics {
            restarts: 0,
            best_correct: 0,
            targets,
            best_softmin: f64::NEG_INFINITY,
            frozen_residual: None,
            pre_repair_residual: None,
        }));
    }
    let mut h = DMatrix::zeros(phi, spec.width(n - 1));
    for (i, t) in traces.iter().enumerate() {
        h.set_row(i, &t.h(n - 1).transpose());
    }
    let f = &h * &basis.basis;

    let mut w_n = DMatrix::zeros(classes, spec.width(n - 1));
    let mut coefficients = Vec::with_capacity(classes);
    let mut correct_total = 0;
    let mut softmin = f64::INFINITY;
    let mut restarts = 0;
    let mut all_found = true;
    for v in 0..classes {
        let signs: Vec<f64> = dataset
            .samples()
            .iter()
            .map(|s| if s.essence() == v + 1 { 1.0 } else { -1.0 })
            .collect();
        let (winner, best, used) = search_unit(&f, &signs, budget, v as u64, exec);
        restarts += used;
        correct_total += best.correct;
        softmin = softmin.min(best.softmin);
        let Some(winner) = winner else {
            all_found = false;
            continue;
        };
        let w = &basis.basis * DVector::from_column_slice(&winner.coeffs);
        let z = &h * &w;
        let min_sz = (0..phi).map(|i| signs[i] * z[i]).fold(f64::INFINITY, f64::min);
        w_n.set_row(v, &(w / min_sz).transpose());
        coefficients.push(winner.coeffs.iter().map(|c| c / min_sz).collect());
    }
    let diag = SearchDiagnostics {
        restarts,
        best_correct: correct_total,
        targets,
        best_softmin: softmin,
        frozen_residual: None,
        pre_repair_residual: None,
    };
    if !all_found {
        return Ok(PolarizeOutcome::NotFound(diag));
    }

    let mut candidate = weights.clone();
    candidate.set_layer(n, w_n.clone())?;
    let choice = scale_search(spec, &candidate, dataset, mode, budget.scale_max_exponent, exec)?;
    candidate.set_layer(n, w_n * choice.lambda)?;
    let samples = assess(spec, &candidate, dataset, mode, exec)?;
    if !samples.iter().all(|s| s.pass && s.stationary()) {
        return Ok(PolarizeOutcome::NotFound(diag));
    }
    let min_margin = samples.iter().map(|s| s.margin).fold(f64::INFINITY, f64::min);
    Ok(PolarizeOutcome::Found(Box::new(ParticularSolution {
        stage: n,
        coefficients,
        lambda: choice.lambda,
        weights: candidate,
        samples,
        min_margin,
        frozen_residual: None,
        pre_repair_residual: None,
    })))
}

/// Factor chain `[W[u], .., W[n]]` reproducing a monomial vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub chain: Vec<DMatrix<f64>>,
    /// `|expand(chain) - q|_2`.
    pub residual: f64,
}

fn rank_one(m: &DMatrix<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    let svd = crate::svd::thin(m)?;
    let sigma = if svd.s.is_empty() { 0.0 } else { svd.s[0] };
    if sigma <= 0.0 {
        return Ok((DVector::zeros(m.nrows()), DVector::zeros(m.ncols())));
    }
    let mut u: DVector<f64> = svd.u.column(0).into_owned();
    let mut v: DVector<f64> = svd.v.column(0).into_owned();
    if u[u.iamax()] < 0.0 {
        u.neg_mut();
        v.neg_mut();
    }
    let s = sigma.sqrt();
    Ok((u * s, v * s))
}

/// Un-bundles monomials into per-layer weights.
///
/// Path products are peeled from the output end: fixing the node index at
/// layer `n-1`, the slice over `(v, rest of path)` must be a rank-1 outer
/// product of `W[n][:, k]` and the remaining chain, and so on down. The
/// aggregate form is factored through the narrowest
/// interior layer.
pub fn realize_weights(monomials: &DVector<f64>, index: &MonomialIndex, spec: &NetSpec) -> Result<Realization> {
    if monomials.len() != index.len() {
        return Err(Error::Shape(format!(
            "{} monomials for an index of {}",
            monomials.len(),
            index.len()
        )));
    }
    let u = index.stage();
    let mut chain = if index.is_path_product() {
        peel(monomials, index)?
    } else {
        factor_aggregate(monomials, spec, u)?
    };
    for (k, w) in chain.iter_mut().enumerate() {
        if w.shape() != (spec.width(u + k), spec.width(u + k - 1)) {
            return Err(Error::Shape("realized layer has wrong shape".into()));
        }
    }
    let residual = (index.expand_chain(&chain) - monomials).norm();
    if residual > REALIZE_TOL * monomials.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Infeasible(format!(
            "monomials not reproducible by weights (residual {residual:.3e})"
        )));
    }
    Ok(Realization { chain, residual })
}

/// `s = W[n] .. W[u]` for an `l_n x l_{u-1}` aggregate.
fn factor_aggregate(monomials: &DVector<f64>, spec: &NetSpec, u: usize) -> Result<Vec<DMatrix<f64>>> {
    let n = spec.depth();
    let (rows, cols) = (spec.width(n), spec.width(u - 1));
    let s = DMatrix::from_fn(rows, cols, |v, p| monomials[v * cols + p]);
    let r_min = (u..n).map(|k| spec.width(k)).min().unwrap_or(usize::MAX);
    let embed = |k: usize, top: &DMatrix<f64>| {
        let mut w = DMatrix::zeros(spec.width(k), spec.width(k - 1));
        w.view_mut((0, 0), top.shape()).copy_from(top);
        w
    };
    // Carry `r` coordinates through identity blocks between `bottom` and `top`.
    let build = |r: usize, bottom: DMatrix<f64>, top: DMatrix<f64>| {
        let mut chain = vec![embed(u, &bottom)];
        for k in u + 1..n {
            chain.push(embed(k, &DMatrix::identity(r, r)));
        }
        chain.push(embed(n, &top));
        chain
    };
    if cols <= r_min {
        Ok(build(cols, DMatrix::identity(cols, cols), s))
    } else if rows <= r_min {
        Ok(build(rows, s, DMatrix::identity(rows, rows)))
    } else {
        let svd = crate::svd::thin(&s)?;
        let sigma = &svd.s;
        let smax = sigma.max();
        let keep: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > 1e-12 * smax).collect();
        if keep.len() > r_min {
            return Err(Error::Infeasible(format!(
                "aggregate has rank {} but the narrowest interior layer has {r_min} units",
                keep.len()
            )));
        }
        let (uu, vv) = (&svd.u, &svd.v);
        let r = keep.len();
        let mut top = DMatrix::zeros(rows, r);
        let mut bottom = DMatrix::zeros(r, cols);
        for (j, &i) in keep.iter().enumerate() {
            let sq = sigma[i].sqrt();
            top.set_column(j, &(uu.column(i) * sq));
            bottom.set_row(j, &(vv.column(i).transpose() * sq));
        }
        Ok(build(r, bottom, top))
    }
}

/// Rescales each interior unit `k` of layer `j`: row `k` of `W[j]` by `g`
/// and column `k` of `W[j+1]` by `1/g`. Every path product is unchanged.
pub fn exchange(chain: &mut [DMatrix<f64>], gains: &[Vec<f64>]) -> Result<()> {
    if gains.len() + 1 != chain.len() {
        return Err(Error::Shape("one gain vector per interior layer".into()));
    }
    for (j, g) in gains.iter().enumerate() {
        if g.len() != chain[j].nrows() || g.iter().any(|x| *x == 0.0 || !x.is_finite()) {
            return Err(Error::InvalidArgument("gains must be finite and nonzero".into()));
        }
        for (k, &gk) in g.iter().enumerate() {
            chain[j].row_mut(k).scale_mut(gk);
            chain[j + 1].column_mut(k).scale_mut(1.0 / gk);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct DeepScore {
    found: bool,
    correct: usize,
    margin: f64,
}

struct DeepCandidate {
    index: usize,
    coeffs: Vec<f64>,
    score: DeepScore,
    outcome: PolarizeOutcome,
}

/// Projects a block-structured monomial vector onto the shared null space.
fn project(q: &DVector<f64>, basis: &NullSpaceBasis, classes: usize) -> DVector<f64> {
    let bl = basis.unknowns();
    let mut out = DVector::zeros(q.len());
    for v in 0..classes {
        let part = q.rows(v * bl, bl);
        let c = basis.basis.transpose() * part;
        out.rows_mut(v * bl, bl).copy_from(&(&basis.basis * c));
    }
    out
}

fn initial_monomials(coeffs: &[f64], basis: &NullSpaceBasis, classes: usize) -> DVector<f64> {
    let d = basis.nullity();
    let bl = basis.unknowns();
    let mut q = DVector::zeros(bl * classes);
    for v in 0..classes {
        let a = DVector::from_column_slice(&coeffs[v * d..(v + 1) * d]);
        q.rows_mut(v * bl, bl).copy_from(&(&basis.basis * a));
    }
    q
}

/// Alternates realization and null-space projection; the result is always
/// realizable.
fn realizable_near_kernel(
    q0: DVector<f64>,
    system: &HomogeneousSystem,
    basis: &NullSpaceBasis,
    spec: &NetSpec,
) -> Result<Vec<DMatrix<f64>>> {
    let index = system.index();
    let classes = spec.classes();
    let mut q = q0;
    let mut chain = Vec::new();
    let iters = if index.is_path_product() { PROJECTION_ITERS } else { 1 };
    for it in 0..iters {
        let nq = q.norm();
        if nq == 0.0 {
            return Err(Error::Infeasible("monomial vector collapsed to zero".into()));
        }
        q /= nq;
        let r = match realize_weights(&q, index, spec) {
            Ok(r) => r,
            Err(Error::Infeasible(_)) if index.is_path_product() => Realization {
                chain: peel(&q, index)?,
                residual: f64::NAN,
            },
            Err(e) => return Err(e),
        };
        chain = r.chain;
        if it + 1 == iters {
            break;
        }
        let expanded = index.expand_chain(&chain);
        let next = project(&expanded, basis, classes);
        if (&next - &expanded).amax() <= 1e-13 * expanded.amax() {
            break;
        }
        q = next;
    }
    Ok(chain)
}

/// Best rank-1 chain, top layer peeled first; no residual check.
fn peel(q: &DVector<f64>, index: &MonomialIndex) -> Result<Vec<DMatrix<f64>>> {
    let mut top_down = Vec::new();
    let mut cur: Vec<f64> = q.iter().copied().collect();
    let mut dims = index.dims().to_vec();
    while dims.len() > 2 {
        let (d0, d1) = (dims[0], dims[1]);
        let rest: usize = dims[2..].iter().product();
        let mut w = DMatrix::zeros(d0, d1);
        let mut next = vec![0.0; d1 * rest];
        for k in 0..d1 {
            let slice = DMatrix::from_fn(d0, rest, |a, r| cur[(a * d1 + k) * rest + r]);
            let (left, right) = rank_one(&slice)?;
            w.set_column(k, &left);
            next[k * rest..(k + 1) * rest].copy_from_slice(right.as_slice());
        }
        top_down.push(w);
        cur = next;
        dims.remove(0);
    }
    top_down.push(DMatrix::from_row_slice(dims[0], dims[1], &cur));
    top_down.reverse();
    Ok(top_down)
}

/// Largest c-divided output gradient entry over the dataset.
fn c_divided_residual(spec: &NetSpec, weights: &WeightSet, dataset: &Dataset, exec: Execution) -> Result<f64> {
    let n = spec.depth();
    let per = exec.map(dataset.len(), |i| {
        let (_, jac) = trace_and_jacobians(spec, weights, dataset.get(i).surface())?;
        Ok((weights.layer(n) * jac.layer(n - 1)).amax())
    });
    per.into_iter()
        .collect::<Result<Vec<f64>>>()
        .map(|v| v.into_iter().fold(0.0, f64::max))
}

const HINGE: f64 = 0.05;

/// Residuals of the exact stage-`u` problem at `weights`: c-divided output
/// gradients at every sample, a sign hinge on every output pre-activation
/// and a unit-norm condition per output row.
fn exact_residuals(spec: &NetSpec, weights: &WeightSet, dataset: &Dataset) -> Result<Vec<f64>> {
    let n = spec.depth();
    let w_n = weights.layer(n);
    let mut r = Vec::new();
    for s in dataset.samples() {
        let (trace, jac) = trace_and_jacobians(spec, weights, s.surface())?;
        r.extend((w_n * jac.layer(n - 1)).iter());
        for (v, z) in trace.z(n).iter().enumerate() {
            let sign = if s.essence() == v + 1 { 1.0 } else { -1.0 };
            r.push((HINGE - sign * z).max(0.0));
        }
    }
    r.extend(w_n.row_iter().map(|row| row.norm_squared() - 1.0));
    Ok(r)
}

fn pack(weights: &WeightSet, u: usize) -> Vec<f64> {
    weights.layers()[u - 1..]
        .iter()
        .flat_map(|w| w.transpose().iter().copied().collect::<Vec<_>>())
        .collect()
}

fn unpack(base: &WeightSet, u: usize, theta: &[f64]) -> Result<WeightSet> {
    let mut out = base.clone();
    let mut at = 0;
    for k in u..=base.depth() {
        let (r, c) = base.layer(k).shape();
        out.set_layer(k, DMatrix::from_row_slice(r, c, &theta[at..at + r * c]))?;
        at += r * c;
    }
    Ok(out)
}

/// Levenberg-Marquardt on [`exact_residuals`] over `W[u..=n]`, with a
/// central-difference Jacobian. Layers below `u` are never touched.
fn refine_exact(spec: &NetSpec, start: &WeightSet, u: usize, dataset: &Dataset, iters: usize) -> Result<WeightSet> {
    let eval = |theta: &[f64]| -> Result<Option<DVector<f64>>> {
        let w = unpack(start, u, theta)?;
        match exact_residuals(spec, &w, dataset) {
            Ok(r) => Ok(Some(DVector::from_vec(r))),
            Err(Error::InvalidArgument(_)) => Ok(None),
            Err(e) => Err(e),
        }
    };
    let mut theta = pack(start, u);
    let Some(mut r) = eval(&theta)? else {
        return Ok(start.clone());
    };
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let p = theta.len();
    for _ in 0..iters {
        if cost <= 1e-30 {
            break;
        }
        let mut jac = DMatrix::zeros(r.len(), p);
        for j in 0..p {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut t = theta.clone();
            t[j] = theta[j] + h;
            let up = eval(&t)?;
            t[j] = theta[j] - h;
            let down = eval(&t)?;
            let (Some(up), Some(down)) = (up, down) else {
                return unpack(start, u, &theta);
            };
            jac.set_column(j, &((up - down) / (2.0 * h)));
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let mut improved = false;
        while mu < 1e12 {
            let mut a = jtj.clone();
            for d in 0..p {
                a[(d, d)] += mu * (jtj[(d, d)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
                mu *= 4.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
            if let Some(rt) = eval(&trial)? {
                let ct = rt.norm_squared();
                if ct < cost {
                    theta = trial;
                    r = rt;
                    cost = ct;
                    mu = (mu / 3.0).max(1e-15);
                    improved = true;
                    break;
                }
            }
            mu *= 4.0;
        }
        if !improved {
            break;
        }
    }
    unpack(start, u, &theta)
}

/// Realizes a stage-`u` candidate, applies the interior exchange, then
/// re-solves stage `n` on the refreshed Jacobians.
fn deep_candidate(
    problem: &Problem,
    system: &HomogeneousSystem,
    basis: &NullSpaceBasis,
    coeffs: &[f64],
    rng: &mut ChaCha8Rng,
    repair: &SearchBudget,
) -> Result<(DeepScore, PolarizeOutcome)> {
    let spec = problem.spec;
    let u = system.stage();
    let n = spec.depth();
    let q0 = initial_monomials(coeffs, basis, spec.classes());
    let mut chain = match realizable_near_kernel(q0, system, basis, spec) {
        Ok(c) => c,
        Err(Error::Infeasible(_)) => {
            let diag = SearchDiagnostics {
                restarts: 0,
                best_correct: 0,
                targets: problem.dataset.len() * spec.classes(),
                best_softmin: f64::NEG_INFINITY,
                frozen_residual: None,
                pre_repair_residual: None,
            };
            let score = DeepScore {
                found: false,
                correct: 0,
                margin: f64::NEG_INFINITY,
            };
            return Ok((score, PolarizeOutcome::NotFound(diag)));
        }
        Err(e) => return Err(e),
    };
    let expanded = system.index().expand_chain(&chain);
    let frozen = system.residual(&expanded) / expanded.norm().max(f64::MIN_POSITIVE);

    let gains: Vec<Vec<f64>> = (u..n)
        .map(|k| {
            (0..spec.width(k))
                .map(|_| {
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    sign * rng.random_range(0.25f64.ln()..4f64.ln()).exp()
                })
                .collect()
        })
        .collect();
    exchange(&mut chain, &gains)?;

    let mut weights = problem.weights.clone();
    for (k, w) in chain.into_iter().enumerate() {
        weights.set_layer(u + k, w)?;
    }
    // Sequential inside: the caller already runs candidates in parallel.
    let exec = Execution::Sequential;
    if system.variant() == Assembly::CCorrected && repair.refine_iters > 0 {
        weights = refine_exact(spec, &weights, u, problem.dataset, repair.refine_iters)?;
    }
    let pre_repair = c_divided_residual(spec, &weights, problem.dataset, exec)?;
    let (traces, jacs) = evaluate_dataset(spec, &weights, problem.dataset, exec)?;
    let stage_n = assemble_stage_n(problem.dataset, &traces, &jacs, spec, exec)?;
    let nb = stage_n.solve_block(DEFAULT_RANK_TOL)?;
    let sub = Problem {
        weights: &weights,
        ..*problem
    };
    let outcome = polarize_stage_n(&sub, &nb, &traces, repair, exec)?;
    Ok(match outcome {
        PolarizeOutcome::Found(mut sol) => {
            sol.stage = u;
            sol.frozen_residual = Some(frozen);
            sol.pre_repair_residual = Some(pre_repair);
            let score = DeepScore {
                found: true,
                correct: sol.samples.len() * spec.classes(),
                margin: sol.min_margin,
            };
            (score, PolarizeOutcome::Found(sol))
        }
        PolarizeOutcome::NotFound(mut d) => {
            d.frozen_residual = Some(frozen);
            d.pre_repair_residual = Some(pre_repair);
            let score = DeepScore {
                found: false,
                correct: d.best_correct,
                margin: d.best_softmin,
            };
            (score, PolarizeOutcome::NotFound(d))
        }
    })
}

/// Stage `u < n` polarization with the mandatory stage-`n` repair.
///
/// `system` is `L(u, -, Φ)` assembled at `problem.weights` and `basis` the
/// null space of its shared block. The returned weights differ from
/// `problem.weights` only in layers `u..=n`.
pub fn polarize_deep(
    problem: &Problem,
    system: &HomogeneousSystem,
    basis: &NullSpaceBasis,
    budget: &SearchBudget,
    exec: Execution,
) -> Result<PolarizeOutcome> {
    budget.validate()?;
    let spec = problem.spec;
    let u = system.stage();
    if u >= spec.depth() {
        return Err(Error::InvalidArgument("deep polarization needs u < n".into()));
    }
    let targets = problem.dataset.len() * spec.classes();
    let empty = SearchDiagnostics {
        restarts: 0,
        best_correct: 0,
        targets,
        best_softmin: f64::NEG_INFINITY,
        frozen_residual: None,
        pre_repair_residual: None,
    };
    if basis.nullity() == 0 {
        return Ok(PolarizeOutcome::NotFound(empty));
    }
    let dim = basis.nullity() * spec.classes();
    let lane = 1000 + u as u64;
    let mut best: Option<DeepCandidate> = None;
    let mut done = 0;
    while done < budget.deep_draws {
        let size = budget.chunk.min(budget.deep_draws - done);
        let batch: Vec<Result<DeepCandidate>> = exec.map(size, |k| {
            let index = done + k;
            let mut rng = restart_rng(budget.seed, lane, index as u64);
            let repair = budget.repair(budget.seed ^ ((index as u64 + 1) << 20));
            let mut coeffs = normal_vec(&mut rng, dim);
            let (mut score, mut outcome) = deep_candidate(problem, system, basis, &coeffs, &mut rng, &repair)?;
            for step in 0..budget.deep_climb_steps {
                if score.found {
                    break;
                }
                let j = step % dim;
                let delta: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5 * norm(&coeffs) / (dim as f64).sqrt();
                coeffs[j] += delta;
                let (s, o) = deep_candidate(problem, system, basis, &coeffs, &mut rng, &repair)?;
                if s >= score {
                    score = s;
                    outcome = o;
                } else {
                    coeffs[j] -= delta;
                }
            }
            Ok(DeepCandidate {
                index,
                coeffs,
                score,
                outcome,
            })
        });
        done += size;
        for c in batch {
            let c = c?;
            let replace = match &best {
                None => true,
                Some(b) => deep_better(&c, b),
            };
            if replace {
                best = Some(c);
            }
        }
        if best.as_ref().is_some_and(|b| b.score.found) {
            break;
        }
    }
    let Some(best) = best else {
        return Ok(PolarizeOutcome::NotFound(empty));
    };
    Ok(match best.outcome {
        PolarizeOutcome::NotFound(mut d) => {
            d.restarts = done;
            PolarizeOutcome::NotFound(d)
        }
        found => found,
    })
}

fn deep_better(c: &DeepCandidate, b: &DeepCandidate) -> bool {
    if c.score != b.score {
        return c.score > b.score;
    }
    let (nc, nb) = (norm(&c.coeffs), norm(&b.coeffs));
    if nc != nb {
        return nc < nb;
    }
    c.index < b.index
}

/// Stage-`n` convenience: evaluate, assemble, solve and polarize.
pub fn solve_stage_n(
    problem: &Problem,
    budget: &SearchBudget,
    exec: Execution,
) -> Result<(NullSpaceBasis, PolarizeOutcome)> {
    let (traces, jacs) = evaluate_dataset(problem.spec, problem.weights, problem.dataset, exec)?;
    let system = assemble_stage_n(problem.dataset, &traces, &jacs, problem.spec, exec)?;
    let basis = rank_nullspace(system.block(), DEFAULT_RANK_TOL)?;
    let outcome = polarize_stage_n(problem, &basis, &traces, budget, exec)?;
    Ok((basis, outcome))
}

/// Which assembly produced a candidate; stage `n` is variant-free.
pub fn effective_variant(spec: &NetSpec, stage: usize, variant: Assembly) -> Assembly {
    if stage == spec.depth() {
        Assembly::CCorrected
    } else {
        variant
    }
}

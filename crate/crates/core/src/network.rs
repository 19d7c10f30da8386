//! Bias-free fully connected sigmoid networks.
//!
//! Layers are numbered the usual way: layer 0 is the input surface `x`,
//! layers `1..n-1` are hidden and layer `n` is the output. `W[u]` maps layer
//! `u-1` to layer `u` and has shape `l_u x l_{u-1}`. Class labels (essences)
//! are 1-based, output unit `v` answers "is this class `v`?".

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pre-activations beyond this magnitude are clamped and the trace is
/// flagged as saturated.
pub const SATURATION_LIMIT: f64 = 500.0;

/// Largest `f64` strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function `1 / (1 + e^-theta)`.
pub fn sigmoid(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("sigmoid of non-finite value {theta}")));
    }
    Ok(activate(theta).0)
}

/// Returns `(h, c, saturated)` with `h = S(theta)` strictly inside (0, 1)
/// and `c = S(theta) * S(-theta)` strictly positive.
///
/// `c` is computed from `theta` rather than from `h`, because `1 - h` loses
/// all precision once `h` rounds to one (around `theta > 36.7`).
pub(crate) fn activate(theta: f64) -> (f64, f64, bool) {
    let mut saturated = false;
    let t = if theta.abs() > SATURATION_LIMIT {
        saturated = true;
        theta.signum() * SATURATION_LIMIT
    } else {
        theta
    };
    let e = (-t.abs()).exp();
    let denom = 1.0 + e;
    let mut h = if t >= 0.0 { 1.0 / denom } else { e / denom };
    if h >= 1.0 {
        h = ONE_MINUS;
        saturated = true;
    }
    let c = e / (denom * denom);
    (h, c, saturated)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    input_dim: usize,
    layer_sizes: Vec<usize>,
}

impl NetSpec {
    /// `layer_sizes` lists `l_1 .. l_n`; the last entry is the class count.
    pub fn new(input_dim: usize, layer_sizes: Vec<usize>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input dimension must be >= 1".into()));
        }
        if layer_sizes.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        if let Some(u) = layer_sizes.iter().position(|&l| l == 0) {
            return Err(Error::InvalidArgument(format!("layer {} has zero width", u + 1)));
        }
        Ok(Self { input_dim, layer_sizes })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Number of weight layers `n`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Width `l_u` of layer `u`, with `l_0 = m`.
    pub fn width(&self, u: usize) -> usize {
        if u == 0 {
            self.input_dim
        } else {
            self.layer_sizes[u - 1]
        }
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn parameter_count(&self) -> usize {
        (1..=self.depth()).map(|u| self.width(u) * self.width(u - 1)).sum()
    }
}

/// Per-layer weight matrices `W[1] .. W[n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    layers: Vec<DMatrix<f64>>,
}

impl WeightSet {
    pub fn zeros(spec: &NetSpec) -> Self {
        let layers = (1..=spec.depth())
            .map(|u| DMatrix::zeros(spec.width(u), spec.width(u - 1)))
            .collect();
        Self { layers }
    }

    /// Uniform on `[-1, -0.1] ∪ [0.1, 1]`: every entry is non-zero and the
    /// initial pre-activations stay far from saturation.
    pub fn random<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let layers = (1..=spec.depth())
            .map(|u| {
                DMatrix::from_fn(spec.width(u), spec.width(u - 1), |_, _| {
                    let magnitude = rng.random_range(0.1..=1.0);
                    if rng.random_bool(0.5) {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(spec: &NetSpec, layers: Vec<DMatrix<f64>>) -> Result<Self> {
        let set = Self { layers };
        set.check(spec)?;
        Ok(set)
    }

    /// Builds from nested rows: `rows[u-1][v][k] = w_{v,k}^[u]`.
    pub fn from_rows(spec: &NetSpec, rows: &[Vec<Vec<f64>>]) -> Result<Self> {
        if rows.len() != spec.depth() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                spec.depth(),
                rows.len()
            )));
        }
        let mut layers = Vec::with_capacity(rows.len());
        for (u, layer) in rows.iter().enumerate() {
            let (r, c) = (spec.width(u + 1), spec.width(u));
            if layer.len() != r || layer.iter().any(|row| row.len() != c) {
                return Err(Error::Shape(format!("layer {} must be {r}x{c}", u + 1)));
            }
            layers.push(DMatrix::from_fn(r, c, |i, j| layer[i][j]));
        }
        Self::from_layers(spec, layers)
    }

    pub fn to_rows(&self) -> Vec<Vec<Vec<f64>>> {
        self.layers
            .iter()
            .map(|m| (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect())
            .collect()
    }

    /// Validates shapes against `spec` and finiteness of every entry.
    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.layers.len() != spec.depth() {
            return Err(Error::Shape(format!(
                "weights have {} layers, network has {}",
                self.layers.len(),
                spec.depth()
            )));
        }
        for (i, m) in self.layers.iter().enumerate() {
            let u = i + 1;
            if m.shape() != (spec.width(u), spec.width(u - 1)) {
                return Err(Error::Shape(format!(
                    "W[{u}] is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    spec.width(u),
                    spec.width(u - 1)
                )));
            }
            if m.iter().any(|w| !w.is_finite()) {
                return Err(Error::InvalidArgument(format!("W[{u}] has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `W[u]`, 1-based.
    pub fn layer(&self, u: usize) -> &DMatrix<f64> {
        &self.layers[u - 1]
    }

    pub fn set_layer(&mut self, u: usize, matrix: DMatrix<f64>) -> Result<()> {
        if u == 0 || u > self.layers.len() {
            return Err(Error::OutOfRange(format!("layer {u}")));
        }
        if matrix.shape() != self.layers[u - 1].shape() {
            return Err(Error::Shape(format!("replacement for W[{u}] has wrong shape")));
        }
        self.layers[u - 1] = matrix;
        Ok(())
    }

    pub fn layers(&self) -> &[DMatrix<f64>] {
        &self.layers
    }

    /// True when `W[u]` of both sets is identical bit for bit.
    pub fn layer_bits_equal(&self, other: &WeightSet, u: usize) -> bool {
        let (a, b) = (self.layer(u), other.layer(u));
        a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    /// 1-based layers whose bits differ between the two sets.
    pub fn changed_layers(&self, other: &WeightSet) -> Vec<usize> {
        (1..=self.depth())
            .filter(|&u| !self.layer_bits_equal(other, u))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    surface: Vec<f64>,
    essence: usize,
}

impl Sample {
    pub fn new(surface: Vec<f64>, essence: usize) -> Result<Self> {
        if essence == 0 {
            return Err(Error::OutOfRange("essence labels are 1-based".into()));
        }
        if surface.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("surface has non-finite entries".into()));
        }
        Ok(Self { surface, essence })
    }

    pub fn surface(&self) -> &[f64] {
        &self.surface
    }

    /// 1-based class label.
    pub fn essence(&self) -> usize {
        self.essence
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let m = first.surface.len();
            if let Some(i) = samples.iter().position(|s| s.surface.len() != m) {
                return Err(Error::Shape(format!(
                    "sample {} has dimension {}, expected {m}",
                    i + 1,
                    samples[i].surface.len()
                )));
            }
        }
        Ok(Self { samples })
    }

    /// Convenience constructor from `(surface, essence)` pairs.
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (Vec<f64>, usize)>,
    {
        let samples = pairs
            .into_iter()
            .map(|(x, y)| Sample::new(x, y))
            .collect::<Result<Vec<_>>>()?;
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.surface.len())
    }

    pub fn max_essence(&self) -> usize {
        self.samples.iter().map(|s| s.essence).max().unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(m) = self.input_dim() {
            if sample.surface.len() != m {
                return Err(Error::Shape("sample dimension differs from dataset".into()));
            }
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Checks the dataset is usable for training `spec`.
    pub fn validate_for(&self, spec: &NetSpec) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.surface.len() != spec.input_dim() {
                return Err(Error::Shape(format!(
                    "sample {} has dimension {}, network expects {}",
                    i + 1,
                    s.surface.len(),
                    spec.input_dim()
                )));
            }
            if s.essence > spec.classes() {
                return Err(Error::OutOfRange(format!(
                    "sample {} has essence {} but the network has {} classes",
                    i + 1,
                    s.essence,
                    spec.classes()
                )));
            }
        }
        Ok(())
    }
}

/// Everything the forward pass computes for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pre: Vec<DVector<f64>>,
    act: Vec<DVector<f64>>,
    deriv: Vec<DVector<f64>>,
    saturated: bool,
}

impl ActivationTrace {
    pub fn depth(&self) -> usize {
        self.pre.len()
    }

    /// `z^[u]` for `u` in `1..=n`.
    pub fn z(&self, u: usize) -> &DVector<f64> {
        &self.pre[u - 1]
    }

    /// `h^[u]` for `u` in `0..=n`; `h^[0]` is the input.
    pub fn h(&self, u: usize) -> &DVector<f64> {
        &self.act[u]
    }

    /// `c^[u] = h (1 - h)` for `u` in `1..=n`.
    pub fn c(&self, u: usize) -> &DVector<f64> {
        &self.deriv[u - 1]
    }

    pub fn input(&self) -> &DVector<f64> {
        &self.act[0]
    }

    pub fn output(&self) -> &DVector<f64> {
        &self.act[self.pre.len()]
    }

    /// `h_v^[n]` for 1-based class `v`.
    pub fn output_unit(&self, v: usize) -> Result<f64> {
        let out = self.output();
        if v == 0 || v > out.len() {
            return Err(Error::OutOfRange(format!("class {v} outside 1..={}", out.len())));
        }
        Ok(out[v - 1])
    }

    /// Set when any pre-activation was clamped or any output rounded to one.
    pub fn is_saturated(&self) -> bool {
        self.saturated
    }
}

pub fn forward(spec: &NetSpec, weights: &WeightSet, x: &[f64]) -> Result<ActivationTrace> {
    weights.check(spec)?;
    if x.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has dimension {}, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    let n = spec.depth();
    let mut pre = Vec::with_capacity(n);
    let mut act = Vec::with_capacity(n + 1);
    let mut deriv = Vec::with_capacity(n);
    let mut saturated = false;
    act.push(DVector::from_column_slice(x));
    for u in 1..=n {
        let z = weights.layer(u) * &act[u - 1];
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite pre-activation in layer {u}"
            )));
        }
        let mut h = DVector::zeros(z.len());
        let mut c = DVector::zeros(z.len());
        for (i, &theta) in z.iter().enumerate() {
            let (hv, cv, sat) = activate(theta);
            h[i] = hv;
            c[i] = cv;
            saturated |= sat;
        }
        pre.push(z);
        act.push(h);
        deriv.push(c);
    }
    Ok(ActivationTrace {
        pre,
        act,
        deriv,
        saturated,
    })
}

/// Forward traces for every sample, in dataset order.
pub fn forward_all(
    spec: &NetSpec,
    weights: &WeightSet,
    dataset: &Dataset,
    exec: crate::Execution,
) -> Result<Vec<ActivationTrace>> {
    exec.map(dataset.len(), |i| forward(spec, weights, dataset.get(i).surface()))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_reference_values() {
        assert_eq!(sigmoid(0.0).unwrap(), 0.5);
        // 1 / (1 + e^-2) = 0.88079707797788...
        assert_abs_diff_eq!(sigmoid(2.0).unwrap(), 0.880_797_1, epsilon = 1e-6);
        assert_abs_diff_eq!(sigmoid(-2.0).unwrap(), 0.119_202_9, epsilon = 1e-6);
        assert!(sigmoid(f64::NAN).is_err());
        assert!(sigmoid(f64::INFINITY).is_err());
    }

    #[test]
    fn sigmoid_symmetry_and_open_range() {
        for &t in &[0.1, 1.0, 5.0, 20.0, 36.0, 100.0, 499.0, 800.0] {
            let (hp, cp, _) = activate(t);
            let (hm, cm, _) = activate(-t);
            assert!(hp > 0.0 && hp < 1.0, "{t}");
            assert!(hm > 0.0 && hm < 1.0, "{t}");
            assert!(cp > 0.0 && cp <= 0.25);
            assert_eq!(cp, cm);
            if t <= 30.0 {
                assert_abs_diff_eq!(hp + hm, 1.0, epsilon = 1e-15);
            }
        }
        assert!(activate(800.0).2);
        assert!(!activate(3.0).2);
    }

    #[test]
    fn zero_weights_give_half_everywhere() {
        let spec = NetSpec::new(3, vec![4, 2, 3]).unwrap();
        let w = WeightSet::zeros(&spec);
        let t = forward(&spec, &w, &[0.3, -2.0, 7.0]).unwrap();
        for u in 1..=3 {
            assert!(t.z(u).iter().all(|&z| z == 0.0));
            assert!(t.h(u).iter().all(|&h| h == 0.5));
        }
        for v in 1..=3 {
            assert_eq!(t.output_unit(v).unwrap(), 0.5);
        }
    }

    #[test]
    fn hand_chain_evaluation() {
        let spec = NetSpec::new(1, vec![1, 1]).unwrap();
        let w = WeightSet::from_rows(&spec, &[vec![vec![1.0]], vec![vec![1.0]]]).unwrap();
        let t = forward(&spec, &w, &[0.0]).unwrap();
        assert_eq!(t.h(1)[0], 0.5);
        assert_eq!(t.z(2)[0], 0.5);
        // S(0.5) = 0.6224593312...
        assert_abs_diff_eq!(t.output_unit(1).unwrap(), 0.622_459_3, epsilon = 1e-6);
        assert!(t.output_unit(2).is_err());
        assert!(t.output_unit(0).is_err());
    }

    #[test]
    fn random_outputs_inside_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let spec = NetSpec::new(3, vec![5, 4, 2]).unwrap();
            let w = WeightSet::random(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = forward(&spec, &w, &x).unwrap();
            assert!(t.output().iter().all(|&h| h > 0.0 && h < 1.0));
            for u in 1..=3 {
                for (h, c) in t.h(u).iter().zip(t.c(u).iter()) {
                    assert!((c - h * (1.0 - h)).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn random_init_has_no_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetSpec::new(4, vec![8, 8, 3]).unwrap();
        let w = WeightSet::random(&spec, &mut rng);
        for m in w.layers() {
            assert!(m.iter().all(|&x| x.abs() >= 0.1 && x.abs() <= 1.0));
        }
    }

    #[test]
    fn shape_errors() {
        let spec = NetSpec::new(2, vec![3, 1]).unwrap();
        let w = WeightSet::zeros(&spec);
        assert!(matches!(forward(&spec, &w, &[1.0]), Err(Error::Shape(_))));
        let other = NetSpec::new(2, vec![4, 1]).unwrap();
        assert!(forward(&other, &w, &[1.0, 2.0]).is_err());
        assert!(NetSpec::new(0, vec![1]).is_err());
        assert!(NetSpec::new(2, vec![]).is_err());
        assert!(NetSpec::new(2, vec![3, 0]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let spec = NetSpec::new(2, vec![3, 2]).unwrap();
        let ok = Dataset::from_pairs(vec![(vec![0.0, 1.0], 1), (vec![1.0, 0.0], 2)]).unwrap();
        ok.validate_for(&spec).unwrap();
        let bad = Dataset::from_pairs(vec![(vec![0.0, 1.0], 3)]).unwrap();
        assert!(bad.validate_for(&spec).is_err());
        assert_eq!(Dataset::default().validate_for(&spec), Err(Error::EmptyDataset));
        assert!(Sample::new(vec![0.0], 0).is_err());
        assert!(Dataset::from_pairs(vec![(vec![0.0, 1.0], 1), (vec![1.0], 1)]).is_err());
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetSpec::new(2, vec![6, 3]).unwrap();
        let w = WeightSet::random(&spec, &mut rng);
        let a = forward(&spec, &w, &[0.25, -0.75]).unwrap();
        let b = forward(&spec, &w, &[0.25, -0.75]).unwrap();
        assert_eq!(a, b);
    }
}

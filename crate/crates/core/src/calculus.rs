//! Input derivatives of every layer.
//!
//! The analytic recursion `J^[u] = diag(c^[u]) W[u] J^[u-1]` (with `J^[0]`
//! the identity) supplies every coefficient of the stage systems. The
//! finite-difference routines are verification oracles and the only source
//! of second derivatives.

use nalgebra::{DMatrix, DVector};

use crate::network::{forward, ActivationTrace, NetSpec, WeightSet};
use crate::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `J^[u][v][t] = dh_v^[u] / dx_t` for `u` in `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianStack {
    layers: Vec<DMatrix<f64>>,
}

impl JacobianStack {
    /// `J^[u]`, shape `l_u x m`. `J^[0]` is the identity.
    pub fn layer(&self, u: usize) -> &DMatrix<f64> {
        &self.layers[u]
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn output(&self) -> &DMatrix<f64> {
        &self.layers[self.layers.len() - 1]
    }

    /// Gradient of output unit `v` (1-based).
    pub fn output_gradient(&self, v: usize) -> Result<Vec<f64>> {
        let out = self.output();
        if v == 0 || v > out.nrows() {
            return Err(Error::OutOfRange(format!("class {v}")));
        }
        Ok(out.row(v - 1).iter().copied().collect())
    }
}

pub fn input_jacobians(spec: &NetSpec, weights: &WeightSet, trace: &ActivationTrace) -> Result<JacobianStack> {
    weights.check(spec)?;
    if trace.depth() != spec.depth() || trace.input().len() != spec.input_dim() {
        return Err(Error::Shape("trace does not belong to this network".into()));
    }
    let m = spec.input_dim();
    let mut layers = Vec::with_capacity(spec.depth() + 1);
    layers.push(DMatrix::identity(m, m));
    for u in 1..=spec.depth() {
        let c = trace.c(u);
        if c.len() != spec.width(u) {
            return Err(Error::Shape(format!("trace layer {u} has wrong width")));
        }
        let mut j = weights.layer(u) * &layers[u - 1];
        for (v, mut row) in j.row_iter_mut().enumerate() {
            row *= c[v];
        }
        layers.push(j);
    }
    Ok(JacobianStack { layers })
}

/// Forward pass plus Jacobians in one call.
pub fn trace_and_jacobians(spec: &NetSpec, weights: &WeightSet, x: &[f64]) -> Result<(ActivationTrace, JacobianStack)> {
    let trace = forward(spec, weights, x)?;
    let jac = input_jacobians(spec, weights, &trace)?;
    Ok((trace, jac))
}

fn check_step(step: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    Ok(())
}

fn check_class(spec: &NetSpec, v: usize) -> Result<()> {
    if v == 0 || v > spec.classes() {
        return Err(Error::OutOfRange(format!("class {v} outside 1..={}", spec.classes())));
    }
    Ok(())
}

/// Central-difference gradient of `h_v^[n]` with respect to the input.
pub fn fd_gradient(spec: &NetSpec, weights: &WeightSet, v: usize, x: &[f64], step: f64) -> Result<Vec<f64>> {
    check_step(step)?;
    check_class(spec, v)?;
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for t in 0..x.len() {
        probe[t] = x[t] + step;
        let up = forward(spec, weights, &probe)?.output_unit(v)?;
        probe[t] = x[t] - step;
        let down = forward(spec, weights, &probe)?.output_unit(v)?;
        probe[t] = x[t];
        grad[t] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

/// Central-difference matrix of every layer's Jacobian, same layout as
/// [`JacobianStack`]. Used to cross-check the analytic recursion.
pub fn fd_jacobians(spec: &NetSpec, weights: &WeightSet, x: &[f64], step: f64) -> Result<Vec<DMatrix<f64>>> {
    check_step(step)?;
    let m = spec.input_dim();
    let mut out: Vec<DMatrix<f64>> = (0..=spec.depth()).map(|u| DMatrix::zeros(spec.width(u), m)).collect();
    let mut probe = x.to_vec();
    for t in 0..m {
        probe[t] = x[t] + step;
        let up = forward(spec, weights, &probe)?;
        probe[t] = x[t] - step;
        let down = forward(spec, weights, &probe)?;
        probe[t] = x[t];
        for (u, layer) in out.iter_mut().enumerate() {
            let d: DVector<f64> = (up.h(u) - down.h(u)) / (2.0 * step);
            layer.set_column(t, &d);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hessian {
    /// Symmetrized matrix `(H + H^T) / 2`.
    pub matrix: DMatrix<f64>,
    /// `max |H - H^T|` before symmetrization.
    pub asymmetry: f64,
}

/// Hessian of `h_v^[n]` at `x` by central differences of the analytic
/// gradient.
pub fn input_hessian(spec: &NetSpec, weights: &WeightSet, v: usize, x: &[f64], step: f64) -> Result<Hessian> {
    check_step(step)?;
    check_class(spec, v)?;
    let m = x.len();
    let mut raw = DMatrix::zeros(m, m);
    let mut probe = x.to_vec();
    for i in 0..m {
        probe[i] = x[i] + step;
        let (_, up) = trace_and_jacobians(spec, weights, &probe)?;
        probe[i] = x[i] - step;
        let (_, down) = trace_and_jacobians(spec, weights, &probe)?;
        probe[i] = x[i];
        let gu = up.output_gradient(v)?;
        let gd = down.output_gradient(v)?;
        for j in 0..m {
            raw[(i, j)] = (gu[j] - gd[j]) / (2.0 * step);
        }
    }
    let asymmetry = (0..m)
        .flat_map(|i| (0..m).map(move |j| (i, j)))
        .map(|(i, j)| (raw[(i, j)] - raw[(j, i)]).abs())
        .fold(0.0, f64::max);
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(Hessian { matrix, asymmetry })
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest entrywise [`rel_err`] between two equally shaped matrices.
pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Infinity norm (largest absolute row sum).
pub fn inf_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::sigmoid;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_have_zero_jacobians() {
        let spec = NetSpec::new(3, vec![4, 2]).unwrap();
        let w = WeightSet::zeros(&spec);
        let (_, j) = trace_and_jacobians(&spec, &w, &[1.0, 2.0, 3.0]).unwrap();
        for u in 1..=2 {
            assert!(j.layer(u).iter().all(|&x| x == 0.0));
        }
        let g = fd_gradient(&spec, &w, 1, &[1.0, 2.0, 3.0], DEFAULT_STEP).unwrap();
        assert!(g.iter().all(|x| x.abs() <= 1e-10));
        let h = input_hessian(&spec, &w, 2, &[1.0, 2.0, 3.0], DEFAULT_STEP).unwrap();
        assert!(h.matrix.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_unit_jacobian() {
        let spec = NetSpec::new(2, vec![1]).unwrap();
        let w = WeightSet::from_rows(&spec, &[vec![vec![1.0, 0.0]]]).unwrap();
        let (_, j) = trace_and_jacobians(&spec, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(j.layer(1)[(0, 0)], 0.25);
        assert_eq!(j.layer(1)[(0, 1)], 0.0);
        let g = fd_gradient(&spec, &w, 1, &[0.0, 0.0], DEFAULT_STEP).unwrap();
        assert!(rel_err(g[0], 0.25) <= 1e-8);
        assert!(g[1].abs() <= 1e-12);
    }

    #[test]
    fn step_must_be_positive() {
        let spec = NetSpec::new(1, vec![1]).unwrap();
        let w = WeightSet::zeros(&spec);
        assert!(fd_gradient(&spec, &w, 1, &[0.0], 0.0).is_err());
        assert!(input_hessian(&spec, &w, 1, &[0.0], -1.0).is_err());
        assert!(fd_gradient(&spec, &w, 2, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn chain_rule_identity_per_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let spec = NetSpec::new(3, vec![5, 4, 6, 2]).unwrap();
            let w = WeightSet::random(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (t, j) = trace_and_jacobians(&spec, &w, &x).unwrap();
            for u in 1..=spec.depth() {
                let expected = DMatrix::from_diagonal(t.c(u)) * w.layer(u) * j.layer(u - 1);
                assert!(max_rel_err(&expected, j.layer(u)) <= 1e-12);
                // |J^[u]| <= 0.25 * ||W[u]||_inf * max |J^[u-1]|
                let bound = 0.25 * inf_norm(w.layer(u)) * j.layer(u - 1).amax();
                assert!(j.layer(u).amax() <= bound * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let spec = NetSpec::new(2, vec![4, 3]).unwrap();
            let w = WeightSet::random(&spec, &mut rng);
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.5..1.5)).collect();
            let (_, j) = trace_and_jacobians(&spec, &w, &x).unwrap();
            for v in 1..=3 {
                let fd = fd_gradient(&spec, &w, v, &x, DEFAULT_STEP).unwrap();
                let an = j.output_gradient(v).unwrap();
                for (a, b) in an.iter().zip(&fd) {
                    assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn hessian_is_nearly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let spec = NetSpec::new(3, vec![6, 4, 2]).unwrap();
            let w = WeightSet::random(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = input_hessian(&spec, &w, 1, &x, DEFAULT_STEP).unwrap();
            assert!(h.asymmetry <= 1e-4);
            assert_eq!(h.matrix, h.matrix.transpose());
        }
    }

    #[test]
    fn one_input_hessian_matches_second_difference() {
        // Oracle: second central difference of the scalar map x -> h(x).
        let spec = NetSpec::new(1, vec![3, 1]).unwrap();
        let w = WeightSet::from_rows(
            &spec,
            &[vec![vec![1.3], vec![-0.7], vec![2.1]], vec![vec![0.9, -1.4, 0.6]]],
        )
        .unwrap();
        let f = |x: f64| -> f64 {
            let h1 = [
                sigmoid(1.3 * x).unwrap(),
                sigmoid(-0.7 * x).unwrap(),
                sigmoid(2.1 * x).unwrap(),
            ];
            sigmoid(0.9 * h1[0] - 1.4 * h1[1] + 0.6 * h1[2]).unwrap()
        };
        for &x in &[-1.0, -0.2, 0.4, 1.7] {
            let step = 1e-4;
            let oracle = (f(x + step) - 2.0 * f(x) + f(x - step)) / (step * step);
            let h = input_hessian(&spec, &w, 1, &[x], DEFAULT_STEP).unwrap();
            assert_abs_diff_eq!(h.matrix[(0, 0)], oracle, epsilon = 1e-6);
        }
    }
}

//! Stage systems `L(u, -, Φ)` and their null spaces.
//!
//! At stage `n` the unknowns are the output weights `w_{v,k}^[n]` and each
//! row reads `Σ_k w_{v,k} dh_k^[n-1]/dx_t = 0` at one sample (the positive
//! factor `c_v^[n]` is divided out). At a deeper stage `u` the unknowns are
//! weight products along paths from an output unit down to layer `u - 1`,
//! each product treated as a single monomial.
//!
//! Two assemblies exist for `u < n`:
//!
//! - `Aggregate` keeps only `dh_p^[u-1]/dx_t` as the coefficient, so all
//!   paths between `v` and `p` collapse into one aggregate unknown `s_{v,p}`.
//! - `CCorrected` keeps the interior factors `c^[n-1..u]` evaluated at the
//!   current weights, one column per path. This matches the chain rule
//!   exactly while those weights are held fixed.
//!
//! Every system is block diagonal over output units and all blocks share one
//! coefficient matrix, so null spaces are computed once on the block.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::JacobianStack;
use crate::network::{ActivationTrace, Dataset, NetSpec, WeightSet};
use crate::{Error, Execution, Result};

/// Default relative rank tolerance.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assembly {
    Aggregate,
    #[default]
    CCorrected,
}

impl Assembly {
    pub fn name(self) -> &'static str {
        match self {
            Assembly::Aggregate => "aggregate",
            Assembly::CCorrected => "c-corrected",
        }
    }
}

impl std::str::FromStr for Assembly {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggregate" => Ok(Assembly::Aggregate),
            "c-corrected" => Ok(Assembly::CCorrected),
            other => Err(Error::InvalidArgument(format!("unknown assembly variant `{other}`"))),
        }
    }
}

/// Bijection between system columns and weight monomials.
///
/// Columns are indexed by a path `[v, k_{n-1}, .., k_u, p]` in mixed radix
/// (most significant first). For the aggregate variant at `u < n` the
/// path is just `[v, p]` and the column holds the aggregate
/// `(W[n] W[n-1] .. W[u])_{v,p}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonomialIndex {
    stage: usize,
    depth: usize,
    variant: Assembly,
    dims: Vec<usize>,
}

impl MonomialIndex {
    pub fn new(spec: &NetSpec, stage: usize, variant: Assembly) -> Result<Self> {
        let n = spec.depth();
        if stage == 0 || stage > n {
            return Err(Error::OutOfRange(format!("stage {stage} outside 1..={n}")));
        }
        let dims = if stage == n || variant == Assembly::CCorrected {
            (stage - 1..=n).rev().map(|u| spec.width(u)).collect()
        } else {
            vec![spec.width(n), spec.width(stage - 1)]
        };
        Ok(Self {
            stage,
            depth: n,
            variant,
            dims,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn variant(&self) -> Assembly {
        self.variant
    }

    /// Radix of each path position, top (output unit) first.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// True when every column is a single product of weights along a path.
    pub fn is_path_product(&self) -> bool {
        self.stage == self.depth || self.variant == Assembly::CCorrected
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Columns per output-unit block.
    pub fn block_len(&self) -> usize {
        self.len() / self.dims[0]
    }

    pub fn column(&self, path: &[usize]) -> Result<usize> {
        if path.len() != self.dims.len() {
            return Err(Error::Shape("path length does not match index".into()));
        }
        let mut col = 0;
        for (&p, &d) in path.iter().zip(&self.dims) {
            if p >= d {
                return Err(Error::OutOfRange(format!("path entry {p} >= {d}")));
            }
            col = col * d + p;
        }
        Ok(col)
    }

    pub fn path(&self, mut col: usize) -> Vec<usize> {
        let mut path = vec![0; self.dims.len()];
        for (slot, &d) in path.iter_mut().zip(&self.dims).rev() {
            *slot = col % d;
            col /= d;
        }
        path
    }

    /// Layer of the node at path position `j`: position 0 is layer `n`.
    pub fn layer_of(&self, j: usize) -> usize {
        if self.is_path_product() {
            self.depth - j
        } else if j == 0 {
            self.depth
        } else {
            self.stage - 1
        }
    }

    /// Monomial values of a realized weight set.
    pub fn expand(&self, weights: &WeightSet) -> DVector<f64> {
        self.expand_chain(&weights.layers()[self.stage - 1..])
    }

    /// Monomial values of the chain `[W[u], .., W[n]]`.
    pub fn expand_chain(&self, chain: &[DMatrix<f64>]) -> DVector<f64> {
        let n = self.depth;
        let u = self.stage;
        let layer = |k: usize| &chain[k - u];
        if self.is_path_product() {
            DVector::from_fn(self.len(), |col, _| {
                let path = self.path(col);
                path.windows(2)
                    .enumerate()
                    .map(|(j, e)| layer(n - j)[(e[0], e[1])])
                    .product()
            })
        } else {
            let mut prod = layer(n).clone();
            for k in (u..n).rev() {
                prod = prod * layer(k);
            }
            DVector::from_fn(self.len(), |col, _| {
                let p = self.path(col);
                prod[(p[0], p[1])]
            })
        }
    }
}

/// `(sample, class, coordinate)` of one equation, all 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub sample: usize,
    pub class: usize,
    pub coord: usize,
}

/// An assembled `L(u, -, Φ)`.
#[derive(Debug, Clone)]
pub struct HomogeneousSystem {
    index: MonomialIndex,
    block: DMatrix<f64>,
    classes: usize,
    samples: usize,
    coords: usize,
}

impl HomogeneousSystem {
    pub fn stage(&self) -> usize {
        self.index.stage
    }

    pub fn variant(&self) -> Assembly {
        self.index.variant
    }

    pub fn index(&self) -> &MonomialIndex {
        &self.index
    }

    /// Shared per-class coefficient block, rows ordered by `(sample, coord)`.
    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn equations(&self) -> usize {
        self.block.nrows() * self.classes
    }

    pub fn unknowns(&self) -> usize {
        self.index.len()
    }

    /// Row provenance of the full system, sorted by `(sample, class, coord)`.
    pub fn rows(&self) -> Vec<RowTag> {
        let mut rows = Vec::with_capacity(self.equations());
        for sample in 0..self.samples {
            for class in 0..self.classes {
                for coord in 0..self.coords {
                    rows.push(RowTag { sample, class, coord });
                }
            }
        }
        rows
    }

    /// Full block-diagonal coefficient matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        let bc = self.block.ncols();
        let mut a = DMatrix::zeros(self.equations(), self.unknowns());
        for (r, tag) in self.rows().iter().enumerate() {
            let br = tag.sample * self.coords + tag.coord;
            for k in 0..bc {
                a[(r, tag.class * bc + k)] = self.block[(br, k)];
            }
        }
        a
    }

    /// Null space of the shared block.
    pub fn solve_block(&self, tol: f64) -> Result<NullSpaceBasis> {
        rank_nullspace(&self.block, tol)
    }

    /// `max |A q|` evaluated block by block.
    pub fn residual(&self, monomials: &DVector<f64>) -> f64 {
        let bc = self.block.ncols();
        (0..self.classes)
            .map(|v| {
                let part = monomials.rows(v * bc, bc);
                (&self.block * part).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Assembles `L(u, -, Φ)` from per-sample traces and Jacobians evaluated at
/// the current weights.
pub fn assemble_stage_u(
    u: usize,
    dataset: &Dataset,
    traces: &[ActivationTrace],
    jacobians: &[JacobianStack],
    spec: &NetSpec,
    variant: Assembly,
    exec: Execution,
) -> Result<HomogeneousSystem> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if traces.len() != dataset.len() || jacobians.len() != dataset.len() {
        return Err(Error::Shape("need one trace and one Jacobian stack per sample".into()));
    }
    let index = MonomialIndex::new(spec, u, variant)?;
    let m = spec.input_dim();
    let bc = index.block_len();
    let sub = MonomialIndex {
        dims: index.dims[1..].to_vec(),
        ..index.clone()
    };
    let path_product = index.is_path_product();

    let per_sample: Vec<DMatrix<f64>> = exec.map(dataset.len(), |i| {
        let trace = &traces[i];
        let jac = jacobians[i].layer(u - 1);
        let mut rows = DMatrix::zeros(m, bc);
        for col in 0..bc {
            let rest = sub.path(col);
            let p = *rest.last().expect("path has a bottom node");
            // Interior nodes sit at layers n-1 .. u.
            let factor: f64 = if path_product {
                rest[..rest.len() - 1]
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| trace.c(spec.depth() - 1 - j)[k])
                    .product()
            } else {
                1.0
            };
            for t in 0..m {
                rows[(t, col)] = factor * jac[(p, t)];
            }
        }
        rows
    });

    let mut block = DMatrix::zeros(dataset.len() * m, bc);
    for (i, rows) in per_sample.iter().enumerate() {
        block.rows_mut(i * m, m).copy_from(rows);
    }
    Ok(HomogeneousSystem {
        index,
        block,
        classes: spec.classes(),
        samples: dataset.len(),
        coords: m,
    })
}

pub fn assemble_stage_n(
    dataset: &Dataset,
    traces: &[ActivationTrace],
    jacobians: &[JacobianStack],
    spec: &NetSpec,
    exec: Execution,
) -> Result<HomogeneousSystem> {
    assemble_stage_u(
        spec.depth(),
        dataset,
        traces,
        jacobians,
        spec,
        Assembly::CCorrected,
        exec,
    )
}

/// Rank and orthonormal kernel basis of a coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpaceBasis {
    pub rank: usize,
    pub tol: f64,
    /// Kernel basis as columns (`unknowns x nullity`).
    pub basis: DMatrix<f64>,
    /// `max |A b|` over basis vectors.
    pub residual: f64,
}

impl NullSpaceBasis {
    pub fn nullity(&self) -> usize {
        self.basis.ncols()
    }

    pub fn unknowns(&self) -> usize {
        self.basis.nrows()
    }

    pub fn vector(&self, j: usize) -> DVector<f64> {
        self.basis.column(j).into_owned()
    }
}

/// Rank counts singular values above `tol * sigma_max`; the kernel basis is
/// read off the right singular vectors of the remaining ones. Exactly
/// duplicated and all-zero rows are dropped before factorization.
pub fn rank_nullspace(a: &DMatrix<f64>, tol: f64) -> Result<NullSpaceBasis> {
    let cols = a.ncols();
    let mut seen = HashSet::new();
    let kept: Vec<usize> = (0..a.nrows())
        .filter(|&r| {
            let row = a.row(r);
            if row.iter().all(|&x| x == 0.0) {
                return false;
            }
            seen.insert(row.iter().map(|x| x.to_bits()).collect::<Vec<u64>>())
        })
        .collect();

    let basis = if kept.is_empty() {
        DMatrix::identity(cols, cols)
    } else {
        let mut rows = DMatrix::zeros(kept.len(), cols);
        for (i, &r) in kept.iter().enumerate() {
            rows.set_row(i, &a.row(r));
        }
        let svd = crate::svd::full(&rows)?;
        let smax = svd.s.iter().copied().fold(0.0, f64::max);
        // Columns past the row count have no singular value and are kernel.
        let null_cols: Vec<usize> = (0..cols)
            .filter(|&i| i >= svd.s.len() || svd.s[i] <= tol * smax)
            .collect();
        let mut b = DMatrix::zeros(cols, null_cols.len());
        for (j, &i) in null_cols.iter().enumerate() {
            b.set_column(j, &svd.v.column(i));
        }
        b
    };
    let residual = if basis.ncols() == 0 || a.nrows() == 0 {
        0.0
    } else {
        (a * &basis).amax()
    };
    Ok(NullSpaceBasis {
        rank: cols - basis.ncols(),
        tol,
        basis,
        residual,
    })
}

/// Linear combination `Σ_j coeffs[j] b_j` of the kernel basis.
pub fn general_solution_sample(basis: &NullSpaceBasis, coeffs: &[f64]) -> Result<DVector<f64>> {
    if coeffs.len() != basis.nullity() {
        return Err(Error::Shape(format!(
            "{} coefficients for a {}-dimensional kernel",
            coeffs.len(),
            basis.nullity()
        )));
    }
    Ok(&basis.basis * DVector::from_column_slice(coeffs))
}

/// Traces and Jacobians for every sample under `weights`.
pub fn evaluate_dataset(
    spec: &NetSpec,
    weights: &WeightSet,
    dataset: &Dataset,
    exec: Execution,
) -> Result<(Vec<ActivationTrace>, Vec<JacobianStack>)> {
    let pairs: Vec<_> = exec
        .map(dataset.len(), |i| {
            crate::calculus::trace_and_jacobians(spec, weights, dataset.get(i).surface())
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(pairs.into_iter().unzip())
}

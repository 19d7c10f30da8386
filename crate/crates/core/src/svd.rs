//! Singular value decompositions routed through faer, converted to and
//! from nalgebra at the boundary. nalgebra 0.35's own SVD occasionally
//! returns orthogonal factors that do not reconstruct rank-deficient
//! wide inputs.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// `a = u diag(s) v^T` with `s` non-increasing.
pub(crate) struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn failed(e: faer::linalg::svd::SvdError) -> Error {
    Error::Numerical(format!("singular value decomposition failed: {e:?}"))
}

/// Full decomposition: `u` is square in the rows and `v` square in the
/// columns.
pub(crate) fn full(a: &DMatrix<f64>) -> Result<Svd> {
    let d = to_faer(a).svd().map_err(failed)?;
    let s = d.S().column_vector();
    Ok(Svd {
        u: from_faer(d.U()),
        s: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(d.V()),
    })
}

/// Thin decomposition with `min(rows, cols)` singular triplets.
pub(crate) fn thin(a: &DMatrix<f64>) -> Result<Svd> {
    let d = to_faer(a).thin_svd().map_err(failed)?;
    let s = d.S().column_vector();
    Ok(Svd {
        u: from_faer(d.U()),
        s: DVector::from_fn(s.nrows(), |i, _| s[i]),
        v: from_faer(d.V()),
    })
}

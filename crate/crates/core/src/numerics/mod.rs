//! Dense linear algebra, stable probability kernels, seeded randomness and the
//! finite-difference gradient oracle.
//!
//! Everything is `f64` and every reduction runs left to right, so a given
//! input always produces the same bits.

mod fd;
mod matrix;
mod rng;

pub use fd::{extrapolated_gradient, finite_difference_gradient, max_relative_error, relative_error, REL_ERR_FLOOR};
pub use matrix::{dot, norm, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-30;

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `B×B` matrix of dot products between rows of `text` and rows of `image`.
///
/// Rows are expected to be unit-normalized already, which makes each entry a
/// cosine similarity.
pub fn cosine_similarity_matrix(text: &Matrix, image: &Matrix) -> Result<Matrix> {
    text.matmul_transposed(image)
}

/// Row-wise `softmax(logits / tau)` with max subtraction.
pub fn stable_softmax_rows(logits: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(Error::NonPositiveTemperature(tau));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), tau, out.row_mut(i));
    }
    Ok(out)
}

/// Softmax of one row, `exp(x_j / tau) / Σ_k exp(x_k / tau)`.
pub(crate) fn softmax_into(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Log-softmax of one row at unit temperature.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for &x in row {
        total += (x - max).exp();
    }
    let lse = max + total.ln();
    row.iter().map(|x| x - lse).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

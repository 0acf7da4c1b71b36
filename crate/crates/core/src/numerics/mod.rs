//! Dense and sparse linear algebra, seeded randomness and stable reductions.

mod dense;
mod rng;
mod sparse;

pub use dense::{dot, l2_normalize_rows, norm, sq_dist, DenseMatrix};
pub use rng::{beta_sample, Rng};
pub use sparse::{spmm, SparseMatrix};

use crate::error::{bail, Result};

/// Default threshold below which a row counts as zero during normalization.
pub const NORM_EPS: f64 = 1e-12;

/// `log((1/n) Σ exp(v_k))` with max-subtraction.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        bail!(InvalidInput, "log_mean_exp of an empty sequence");
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + (sum / values.len() as f64).ln())
}

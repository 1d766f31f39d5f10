use serde::{Deserialize, Serialize};

use super::{RuntimeError, RuntimeResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItrParams {
    /// Number of classes.
    pub n: usize,
    /// Accuracy or success probability, in `[1/n, 1]`.
    pub p: f64,
    /// Seconds per selection.
    pub t: f64,
}

/// Wolpaw information transfer rate in bits per minute.
pub fn compute_itr(params: ItrParams) -> RuntimeResult<f64> {
    let ItrParams { n, p, t } = params;
    if n < 2 {
        return Err(RuntimeError::Parameter(format!("ITR needs at least 2 classes, got {n}")));
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(RuntimeError::Parameter(format!("selection time must be positive, got {t}")));
    }
    let nf = n as f64;
    let chance = 1.0 / nf;
    if !(p >= chance - 1e-12) || p > 1.0 {
        return Err(RuntimeError::Parameter(format!("P = {p} outside [1/{n}, 1]")));
    }
    let bits = if p >= 1.0 {
        nf.log2()
    } else if (p - chance).abs() <= 1e-12 {
        0.0
    } else {
        nf.log2() + p * p.log2() + (1.0 - p) * ((1.0 - p) / (nf - 1.0)).log2()
    };
    Ok(bits * 60.0 / t)
}

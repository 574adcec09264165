//! Restricted Boltzmann machines and deep belief nets.
//!
//! The Gaussian RBM uses the energy
//!
//! ```text
//! E(v, h) = sum_i (v_i - b_i)^2 / (2 s_i^2) - sum_j c_j h_j - sum_ij W_ij v_i h_j
//! ```
//!
//! with the cross term left unscaled by `s_i`, so that `p(v_i | h)` is Gaussian
//! with mean `b_i + s_i^2 sum_j W_ij h_j` and variance `s_i^2`.

mod cd;
mod dbn;
mod grbm;
mod rbm;

pub use cd::{CdConfig, CdDiagnostics, CdTrainer, GrbmGradient, RbmGradient};
pub use dbn::{DbnStack, DbnTrainer, TopDownSample};
pub use grbm::GrbmParams;
pub use rbm::RbmParams;

use nalgebra::DVector;
use rand::Rng;

/// Smallest admissible visible variance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Largest hidden layer for which exact enumeration is allowed.
pub const MAX_ENUMERATED_HIDDEN: usize = 24;

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sample_bernoulli<R: Rng + ?Sized>(probs: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    probs.map(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

/// Binary state number `index` of a `len`-unit layer (bit j = unit j).
pub fn binary_state(index: u64, len: usize) -> DVector<f64> {
    DVector::from_fn(len, |j, _| ((index >> j) & 1) as f64)
}

/// `log sum exp` of a slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

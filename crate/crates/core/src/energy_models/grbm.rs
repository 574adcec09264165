use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{binary_state, log_sum_exp, logistic, sample_bernoulli, softplus, VARIANCE_FLOOR};
use crate::error::{check_dim, DlnError, Result};

/// Gaussian-Bernoulli RBM parameters.
///
/// `weights` is `n_visible x n_hidden`; `visible_var` holds the per-unit
/// variances `s_i^2`, each at least [`VARIANCE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct GrbmParams {
    pub weights: DMatrix<f64>,
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
    pub visible_var: DVector<f64>,
}

impl GrbmParams {
    /// Validates shapes and finiteness; variances below the floor are clamped
    /// up to it, non-positive or non-finite variances are rejected.
    pub fn new(
        weights: DMatrix<f64>,
        visible_bias: DVector<f64>,
        hidden_bias: DVector<f64>,
        visible_var: DVector<f64>,
    ) -> Result<Self> {
        check_dim("GRBM visible bias", weights.nrows(), visible_bias.len())?;
        check_dim("GRBM hidden bias", weights.ncols(), hidden_bias.len())?;
        check_dim("GRBM visible variance", weights.nrows(), visible_var.len())?;
        if let Some(bad) = visible_var.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(DlnError::InvalidParameter(format!(
                "visible variance must be positive and finite, got {bad}"
            )));
        }
        let p = GrbmParams {
            weights,
            visible_bias,
            hidden_bias,
            visible_var: visible_var.map(|s| s.max(VARIANCE_FLOOR)),
        };
        p.check_finite("GRBM parameters")?;
        Ok(p)
    }

    /// Zero weights and biases, unit variances.
    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        GrbmParams {
            weights: DMatrix::zeros(n_visible, n_hidden),
            visible_bias: DVector::zeros(n_visible),
            hidden_bias: DVector::zeros(n_hidden),
            visible_var: DVector::from_element(n_visible, 1.0),
        }
    }

    /// Weights drawn from `N(0, weight_std^2)`, zero biases, unit variances.
    pub fn random<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, weight_std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, weight_std).expect("weight std must be finite and non-negative");
        let mut p = Self::zeros(n_visible, n_hidden);
        // Column-major fill keeps the draw order fixed.
        for w in p.weights.iter_mut() {
            *w = normal.sample(rng);
        }
        p
    }

    pub fn n_visible(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|x| x.is_finite())
            && self.visible_bias.iter().all(|x| x.is_finite())
            && self.hidden_bias.iter().all(|x| x.is_finite())
            && self.visible_var.iter().all(|x| x.is_finite())
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DlnError::NonFinite(format!("{context} contain NaN or Inf")))
        }
    }

    /// Hidden pre-activations `W^T v + c`.
    pub fn hidden_input(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("GRBM visible vector", self.n_visible(), v.len())?;
        Ok(self.weights.tr_mul(v) + &self.hidden_bias)
    }

    /// `p(h_j = 1 | v) = logistic(sum_i W_ij v_i + c_j)`.
    pub fn hidden_probs(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.hidden_input(v)?.map(logistic))
    }

    /// Conditional mean `b + s^2 * (W h)` of the visible units.
    pub fn visible_mean(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("GRBM hidden vector", self.n_hidden(), h.len())?;
        let drive = &self.weights * h;
        Ok(self.visible_bias.zip_zip_map(&self.visible_var, &drive, |b, s, d| b + s * d))
    }

    /// Mean and variance of the Gaussian `p(v | h)`.
    pub fn visible_conditional(&self, h: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        Ok((self.visible_mean(h)?, self.visible_var.clone()))
    }

    pub fn sample_hidden<R: Rng + ?Sized>(&self, v: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        Ok(sample_bernoulli(&self.hidden_probs(v)?, rng))
    }

    pub fn sample_visible<R: Rng + ?Sized>(&self, h: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        let mean = self.visible_mean(h)?;
        Ok(self.sample_around(&mean, rng))
    }

    pub(crate) fn sample_around<R: Rng + ?Sized>(&self, mean: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(mean.len(), |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            mean[i] + self.visible_var[i].sqrt() * z
        })
    }

    fn quadratic_term(&self, v: &DVector<f64>) -> f64 {
        v.iter()
            .zip(self.visible_bias.iter())
            .zip(self.visible_var.iter())
            .map(|((v, b), s)| (v - b) * (v - b) / (2.0 * s))
            .sum()
    }

    /// Joint energy `E(v, h)`.
    pub fn energy(&self, v: &DVector<f64>, h: &DVector<f64>) -> Result<f64> {
        check_dim("GRBM visible vector", self.n_visible(), v.len())?;
        check_dim("GRBM hidden vector", self.n_hidden(), h.len())?;
        let cross = (self.weights.tr_mul(v)).dot(h);
        Ok(self.quadratic_term(v) - self.hidden_bias.dot(h) - cross)
    }

    /// Free energy `F(v) = -log sum_h exp(-E(v, h))`.
    pub fn free_energy(&self, v: &DVector<f64>) -> Result<f64> {
        let input = self.hidden_input(v)?;
        Ok(self.quadratic_term(v) - input.iter().map(|&x| softplus(x)).sum::<f64>())
    }

    /// Exact `log Z` by enumerating hidden states; the Gaussian visible
    /// integral is analytic for each state.
    pub fn log_partition(&self) -> Result<f64> {
        let n_hid = self.n_hidden();
        if n_hid > super::MAX_ENUMERATED_HIDDEN {
            return Err(DlnError::InvalidParameter(format!(
                "exact partition needs at most {} hidden units, got {n_hid}",
                super::MAX_ENUMERATED_HIDDEN
            )));
        }
        let gauss: f64 = self
            .visible_var
            .iter()
            .map(|s| 0.5 * (2.0 * std::f64::consts::PI * s).ln())
            .sum();
        let terms: Vec<f64> = (0..1u64 << n_hid)
            .map(|k| {
                let h = binary_state(k, n_hid);
                let drive = &self.weights * &h;
                let visible: f64 = (0..self.n_visible())
                    .map(|i| {
                        let w = drive[i];
                        self.visible_bias[i] * w + 0.5 * self.visible_var[i] * w * w
                    })
                    .sum();
                self.hidden_bias.dot(&h) + visible
            })
            .collect();
        Ok(log_sum_exp(&terms) + gauss)
    }

    /// Exact `log p(v)`; only for small hidden layers.
    pub fn log_likelihood(&self, v: &DVector<f64>) -> Result<f64> {
        Ok(-self.free_energy(v)? - self.log_partition()?)
    }
}

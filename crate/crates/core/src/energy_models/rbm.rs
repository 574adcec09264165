use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{logistic, sample_bernoulli, softplus};
use crate::error::{check_dim, DlnError, Result};

/// Bernoulli-Bernoulli RBM with energy `-b.v - c.h - v^T W h`.
#[derive(Debug, Clone, PartialEq)]
pub struct RbmParams {
    pub weights: DMatrix<f64>,
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
}

impl RbmParams {
    pub fn new(weights: DMatrix<f64>, visible_bias: DVector<f64>, hidden_bias: DVector<f64>) -> Result<Self> {
        check_dim("RBM visible bias", weights.nrows(), visible_bias.len())?;
        check_dim("RBM hidden bias", weights.ncols(), hidden_bias.len())?;
        let p = RbmParams {
            weights,
            visible_bias,
            hidden_bias,
        };
        p.check_finite("RBM parameters")?;
        Ok(p)
    }

    pub fn zeros(n_visible: usize, n_hidden: usize) -> Self {
        RbmParams {
            weights: DMatrix::zeros(n_visible, n_hidden),
            visible_bias: DVector::zeros(n_visible),
            hidden_bias: DVector::zeros(n_hidden),
        }
    }

    pub fn random<R: Rng + ?Sized>(n_visible: usize, n_hidden: usize, weight_std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, weight_std).expect("weight std must be finite and non-negative");
        let mut p = Self::zeros(n_visible, n_hidden);
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
    }

    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(DlnError::NonFinite(format!("{context} contain NaN or Inf")))
        }
    }

    pub fn hidden_probs(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("RBM visible vector", self.n_visible(), v.len())?;
        Ok((self.weights.tr_mul(v) + &self.hidden_bias).map(logistic))
    }

    pub fn visible_probs(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("RBM hidden vector", self.n_hidden(), h.len())?;
        Ok((&self.weights * h + &self.visible_bias).map(logistic))
    }

    pub fn sample_hidden<R: Rng + ?Sized>(&self, v: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        Ok(sample_bernoulli(&self.hidden_probs(v)?, rng))
    }

    pub fn sample_visible<R: Rng + ?Sized>(&self, h: &DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        Ok(sample_bernoulli(&self.visible_probs(h)?, rng))
    }

    pub fn energy(&self, v: &DVector<f64>, h: &DVector<f64>) -> Result<f64> {
        check_dim("RBM visible vector", self.n_visible(), v.len())?;
        check_dim("RBM hidden vector", self.n_hidden(), h.len())?;
        Ok(-self.visible_bias.dot(v) - self.hidden_bias.dot(h) - self.weights.tr_mul(v).dot(h))
    }

    pub fn free_energy(&self, v: &DVector<f64>) -> Result<f64> {
        check_dim("RBM visible vector", self.n_visible(), v.len())?;
        let input = self.weights.tr_mul(v) + &self.hidden_bias;
        Ok(-self.visible_bias.dot(v) - input.iter().map(|&x| softplus(x)).sum::<f64>())
    }
}

//! Contrastive divergence (CD-k) for Gaussian and binary RBMs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{sample_bernoulli, GrbmParams, RbmParams, VARIANCE_FLOOR};
use crate::error::{check_dim, DlnError, Result};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct CdConfig {
    /// Gibbs steps `k` in the negative phase.
    pub steps: usize,
    pub rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Update the GRBM visible variances (on the log scale); otherwise they stay fixed.
    pub learn_variance: bool,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            steps: 1,
            rate: 0.01,
            momentum: 0.0,
            batch_size: 64,
            learn_variance: false,
        }
    }
}

impl CdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(DlnError::InvalidParameter("CD needs at least one Gibbs step".into()));
        }
        if !(self.rate.is_finite() && self.rate >= 0.0) {
            return Err(DlnError::InvalidParameter(format!("CD rate must be >= 0, got {}", self.rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(DlnError::InvalidParameter(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(DlnError::InvalidParameter("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-update gradient norms and reconstruction error.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CdDiagnostics {
    pub weight_grad_norm: f64,
    pub visible_bias_grad_norm: f64,
    pub hidden_bias_grad_norm: f64,
    pub variance_grad_norm: f64,
    /// Mean squared error between data and one-step reconstruction means.
    pub reconstruction_error: f64,
    pub batch_size: usize,
}

/// CD estimate of the log-likelihood gradient of a GRBM (ascent direction).
#[derive(Debug, Clone, PartialEq)]
pub struct GrbmGradient {
    pub weights: DMatrix<f64>,
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
    /// Gradient with respect to `log s_i^2`; zero unless variances are learned.
    pub log_variance: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbmGradient {
    pub weights: DMatrix<f64>,
    pub visible_bias: DVector<f64>,
    pub hidden_bias: DVector<f64>,
}

impl GrbmGradient {
    /// Flattened view, handy for norms and statistics.
    pub fn to_vec(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
            .chain(self.log_variance.iter())
            .copied()
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    fn diagnostics(&self, reconstruction_error: f64, batch_size: usize) -> CdDiagnostics {
        CdDiagnostics {
            weight_grad_norm: self.weights.norm(),
            visible_bias_grad_norm: self.visible_bias.norm(),
            hidden_bias_grad_norm: self.hidden_bias.norm(),
            variance_grad_norm: self.log_variance.norm(),
            reconstruction_error,
            batch_size,
        }
    }

    fn scale_add(&mut self, momentum: f64, rate: f64, grad: &GrbmGradient) {
        self.weights = &self.weights * momentum + &grad.weights * rate;
        self.visible_bias = &self.visible_bias * momentum + &grad.visible_bias * rate;
        self.hidden_bias = &self.hidden_bias * momentum + &grad.hidden_bias * rate;
        self.log_variance = &self.log_variance * momentum + &grad.log_variance * rate;
    }
}

impl RbmGradient {
    pub fn to_vec(&self) -> Vec<f64> {
        self.weights
            .iter()
            .chain(self.visible_bias.iter())
            .chain(self.hidden_bias.iter())
            .copied()
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    fn diagnostics(&self, reconstruction_error: f64, batch_size: usize) -> CdDiagnostics {
        CdDiagnostics {
            weight_grad_norm: self.weights.norm(),
            visible_bias_grad_norm: self.visible_bias.norm(),
            hidden_bias_grad_norm: self.hidden_bias.norm(),
            variance_grad_norm: 0.0,
            reconstruction_error,
            batch_size,
        }
    }

    fn scale_add(&mut self, momentum: f64, rate: f64, grad: &RbmGradient) {
        self.weights = &self.weights * momentum + &grad.weights * rate;
        self.visible_bias = &self.visible_bias * momentum + &grad.visible_bias * rate;
        self.hidden_bias = &self.hidden_bias * momentum + &grad.hidden_bias * rate;
    }
}

// Statistics of one CD chain: data, data-driven hidden probabilities,
// k-step visible sample and its hidden probabilities, reconstruction error.
struct ChainStats {
    v0: DVector<f64>,
    ph0: DVector<f64>,
    vk: DVector<f64>,
    phk: DVector<f64>,
    recon: f64,
}

fn columns(vs: &[&DVector<f64>]) -> DMatrix<f64> {
    let rows = vs.first().map_or(0, |v| v.len());
    DMatrix::from_fn(rows, vs.len(), |i, j| vs[j][i])
}

fn check_batch(context: &'static str, n_visible: usize, batch: &[DVector<f64>]) -> Result<()> {
    if batch.is_empty() {
        return Err(DlnError::Empty(format!("{context}: empty CD batch")));
    }
    for v in batch {
        check_dim(context, n_visible, v.len())?;
    }
    Ok(())
}

impl GrbmParams {
    /// CD-k gradient estimate over `batch`. Sample `n` of the batch draws
    /// from the stream keyed by `(seed, key, n)`.
    pub fn cd_gradient(
        &self,
        batch: &[DVector<f64>],
        steps: usize,
        learn_variance: bool,
        seed: u64,
        key: u64,
    ) -> Result<(GrbmGradient, f64)> {
        check_batch("GRBM CD batch", self.n_visible(), batch)?;
        if steps == 0 {
            return Err(DlnError::InvalidParameter("CD needs at least one Gibbs step".into()));
        }
        let chains: Vec<ChainStats> = batch
            .par_iter()
            .enumerate()
            .map(|(n, v0)| {
                let mut rng = stream(seed, &[key, n as u64]);
                let ph0 = self.hidden_probs(v0).expect("checked dims");
                let mut h = sample_bernoulli(&ph0, &mut rng);
                let mut recon = 0.0;
                let mut vk = v0.clone();
                let mut phk = ph0.clone();
                for step in 0..steps {
                    let mean = self.visible_mean(&h).expect("checked dims");
                    if step == 0 {
                        recon = (v0 - &mean).norm_squared() / v0.len().max(1) as f64;
                    }
                    vk = self.sample_around(&mean, &mut rng);
                    phk = self.hidden_probs(&vk).expect("checked dims");
                    if step + 1 < steps {
                        h = sample_bernoulli(&phk, &mut rng);
                    }
                }
                ChainStats {
                    v0: v0.clone(),
                    ph0,
                    vk,
                    phk,
                    recon,
                }
            })
            .collect();

        let n = chains.len() as f64;
        let v0 = columns(&chains.iter().map(|c| &c.v0).collect::<Vec<_>>());
        let ph0 = columns(&chains.iter().map(|c| &c.ph0).collect::<Vec<_>>());
        let vk = columns(&chains.iter().map(|c| &c.vk).collect::<Vec<_>>());
        let phk = columns(&chains.iter().map(|c| &c.phk).collect::<Vec<_>>());

        let weights = (&v0 * ph0.transpose() - &vk * phk.transpose()) / n;
        let dv = &v0 - &vk;
        let visible_bias = DVector::from_fn(self.n_visible(), |i, _| dv.row(i).sum() / (n * self.visible_var[i]));
        let hidden_bias = DVector::from_fn(self.n_hidden(), |j, _| (ph0.row(j).sum() - phk.row(j).sum()) / n);
        let log_variance = if learn_variance {
            DVector::from_fn(self.n_visible(), |i, _| {
                let b = self.visible_bias[i];
                let s = self.visible_var[i];
                let pos: f64 = v0.row(i).iter().map(|x| (x - b) * (x - b)).sum();
                let neg: f64 = vk.row(i).iter().map(|x| (x - b) * (x - b)).sum();
                (pos - neg) / (2.0 * s * n)
            })
        } else {
            DVector::zeros(self.n_visible())
        };
        let grad = GrbmGradient {
            weights,
            visible_bias,
            hidden_bias,
            log_variance,
        };
        if !grad.is_finite() {
            return Err(DlnError::NonFinite(format!(
                "GRBM CD gradient (key {key}, batch of {}) contains NaN or Inf",
                batch.len()
            )));
        }
        let recon = chains.iter().map(|c| c.recon).sum::<f64>() / n;
        Ok((grad, recon))
    }

    fn apply(&self, step: &GrbmGradient) -> Result<GrbmParams> {
        let visible_var = self
            .visible_var
            .zip_map(&step.log_variance, |s, d| (s.ln() + d).exp().max(VARIANCE_FLOOR));
        let next = GrbmParams {
            weights: &self.weights + &step.weights,
            visible_bias: &self.visible_bias + &step.visible_bias,
            hidden_bias: &self.hidden_bias + &step.hidden_bias,
            visible_var: if step.log_variance.iter().all(|&d| d == 0.0) {
                self.visible_var.clone()
            } else {
                visible_var
            },
        };
        next.check_finite("GRBM parameters after CD update")?;
        Ok(next)
    }

    /// One plain CD-k step (no momentum). `rate = 0` returns the parameters unchanged.
    pub fn cd_update(&self, batch: &[DVector<f64>], cfg: &CdConfig, seed: u64, key: u64) -> Result<(GrbmParams, CdDiagnostics)> {
        CdTrainer::<GrbmGradient>::new(cfg.clone())?.step(self, batch, seed, key)
    }
}

impl RbmParams {
    pub fn cd_gradient(&self, batch: &[DVector<f64>], steps: usize, seed: u64, key: u64) -> Result<(RbmGradient, f64)> {
        check_batch("RBM CD batch", self.n_visible(), batch)?;
        if steps == 0 {
            return Err(DlnError::InvalidParameter("CD needs at least one Gibbs step".into()));
        }
        let chains: Vec<ChainStats> = batch
            .par_iter()
            .enumerate()
            .map(|(n, v0)| {
                let mut rng = stream(seed, &[key, n as u64]);
                let ph0 = self.hidden_probs(v0).expect("checked dims");
                let mut h = sample_bernoulli(&ph0, &mut rng);
                let mut recon = 0.0;
                let mut vk = v0.clone();
                let mut phk = ph0.clone();
                for step in 0..steps {
                    let pv = self.visible_probs(&h).expect("checked dims");
                    if step == 0 {
                        recon = (v0 - &pv).norm_squared() / v0.len().max(1) as f64;
                    }
                    vk = sample_bernoulli(&pv, &mut rng);
                    phk = self.hidden_probs(&vk).expect("checked dims");
                    if step + 1 < steps {
                        h = sample_bernoulli(&phk, &mut rng);
                    }
                }
                ChainStats {
                    v0: v0.clone(),
                    ph0,
                    vk,
                    phk,
                    recon,
                }
            })
            .collect();
        let n = chains.len() as f64;
        let v0 = columns(&chains.iter().map(|c| &c.v0).collect::<Vec<_>>());
        let ph0 = columns(&chains.iter().map(|c| &c.ph0).collect::<Vec<_>>());
        let vk = columns(&chains.iter().map(|c| &c.vk).collect::<Vec<_>>());
        let phk = columns(&chains.iter().map(|c| &c.phk).collect::<Vec<_>>());
        let grad = RbmGradient {
            weights: (&v0 * ph0.transpose() - &vk * phk.transpose()) / n,
            visible_bias: DVector::from_fn(self.n_visible(), |i, _| (v0.row(i).sum() - vk.row(i).sum()) / n),
            hidden_bias: DVector::from_fn(self.n_hidden(), |j, _| (ph0.row(j).sum() - phk.row(j).sum()) / n),
        };
        if !grad.is_finite() {
            return Err(DlnError::NonFinite(format!(
                "RBM CD gradient (key {key}, batch of {}) contains NaN or Inf",
                batch.len()
            )));
        }
        Ok((grad, chains.iter().map(|c| c.recon).sum::<f64>() / n))
    }

    fn apply(&self, step: &RbmGradient) -> Result<RbmParams> {
        let next = RbmParams {
            weights: &self.weights + &step.weights,
            visible_bias: &self.visible_bias + &step.visible_bias,
            hidden_bias: &self.hidden_bias + &step.hidden_bias,
        };
        next.check_finite("RBM parameters after CD update")?;
        Ok(next)
    }

    pub fn cd_update(&self, batch: &[DVector<f64>], cfg: &CdConfig, seed: u64, key: u64) -> Result<(RbmParams, CdDiagnostics)> {
        CdTrainer::<RbmGradient>::new(cfg.clone())?.step(self, batch, seed, key)
    }
}

/// Mini-batch CD driver carrying the momentum buffer between updates.
#[derive(Debug, Clone)]
pub struct CdTrainer<G> {
    pub config: CdConfig,
    velocity: Option<G>,
    updates: u64,
}

impl<G> CdTrainer<G> {
    pub fn new(config: CdConfig) -> Result<Self> {
        config.validate()?;
        Ok(CdTrainer {
            config,
            velocity: None,
            updates: 0,
        })
    }

    fn batches(&self, len: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut stream(seed, &[0x5eed, epoch]));
        order.chunks(self.config.batch_size).map(|c| c.to_vec()).collect()
    }
}

fn mean_diagnostics(all: &[CdDiagnostics]) -> CdDiagnostics {
    let n = all.len().max(1) as f64;
    CdDiagnostics {
        weight_grad_norm: all.iter().map(|d| d.weight_grad_norm).sum::<f64>() / n,
        visible_bias_grad_norm: all.iter().map(|d| d.visible_bias_grad_norm).sum::<f64>() / n,
        hidden_bias_grad_norm: all.iter().map(|d| d.hidden_bias_grad_norm).sum::<f64>() / n,
        variance_grad_norm: all.iter().map(|d| d.variance_grad_norm).sum::<f64>() / n,
        reconstruction_error: all.iter().map(|d| d.reconstruction_error).sum::<f64>() / n,
        batch_size: all.iter().map(|d| d.batch_size).sum(),
    }
}

impl CdTrainer<GrbmGradient> {
    pub fn step(&mut self, params: &GrbmParams, batch: &[DVector<f64>], seed: u64, key: u64) -> Result<(GrbmParams, CdDiagnostics)> {
        let cfg = &self.config;
        let (grad, recon) = params.cd_gradient(batch, cfg.steps, cfg.learn_variance, seed, key)?;
        let diag = grad.diagnostics(recon, batch.len());
        if cfg.rate == 0.0 {
            return Ok((params.clone(), diag));
        }
        let velocity = self.velocity.get_or_insert_with(|| GrbmGradient {
            weights: DMatrix::zeros(params.n_visible(), params.n_hidden()),
            visible_bias: DVector::zeros(params.n_visible()),
            hidden_bias: DVector::zeros(params.n_hidden()),
            log_variance: DVector::zeros(params.n_visible()),
        });
        velocity.scale_add(cfg.momentum, cfg.rate, &grad);
        self.updates += 1;
        Ok((params.apply(velocity)?, diag))
    }

    /// One pass over `data` in shuffled mini-batches; returns batch-averaged diagnostics.
    pub fn epoch(&mut self, params: &GrbmParams, data: &[DVector<f64>], seed: u64, epoch: u64) -> Result<(GrbmParams, CdDiagnostics)> {
        let mut p = params.clone();
        let mut diags = Vec::new();
        for (b, idx) in self.batches(data.len(), seed, epoch).into_iter().enumerate() {
            let batch: Vec<DVector<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
            let (next, d) = self.step(&p, &batch, seed, (epoch << 20) | b as u64)?;
            p = next;
            diags.push(d);
        }
        Ok((p, mean_diagnostics(&diags)))
    }
}

impl CdTrainer<RbmGradient> {
    pub fn step(&mut self, params: &RbmParams, batch: &[DVector<f64>], seed: u64, key: u64) -> Result<(RbmParams, CdDiagnostics)> {
        let cfg = &self.config;
        let (grad, recon) = params.cd_gradient(batch, cfg.steps, seed, key)?;
        let diag = grad.diagnostics(recon, batch.len());
        if cfg.rate == 0.0 {
            return Ok((params.clone(), diag));
        }
        let velocity = self.velocity.get_or_insert_with(|| RbmGradient {
            weights: DMatrix::zeros(params.n_visible(), params.n_hidden()),
            visible_bias: DVector::zeros(params.n_visible()),
            hidden_bias: DVector::zeros(params.n_hidden()),
        });
        velocity.scale_add(cfg.momentum, cfg.rate, &grad);
        self.updates += 1;
        Ok((params.apply(velocity)?, diag))
    }

    pub fn epoch(&mut self, params: &RbmParams, data: &[DVector<f64>], seed: u64, epoch: u64) -> Result<(RbmParams, CdDiagnostics)> {
        let mut p = params.clone();
        let mut diags = Vec::new();
        for (b, idx) in self.batches(data.len(), seed, epoch).into_iter().enumerate() {
            let batch: Vec<DVector<f64>> = idx.iter().map(|&i| data[i].clone()).collect();
            let (next, d) = self.step(&p, &batch, seed, (epoch << 20) | b as u64)?;
            p = next;
            diags.push(d);
        }
        Ok((p, mean_diagnostics(&diags)))
    }
}

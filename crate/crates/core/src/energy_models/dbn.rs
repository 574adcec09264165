use nalgebra::DVector;
use rand::Rng;

use super::{CdConfig, CdDiagnostics, CdTrainer, GrbmGradient, GrbmParams, RbmGradient, RbmParams};
use crate::error::{check_dim, DlnError, Result};
use crate::rng::stream;

/// A GRBM with binary RBMs stacked on its hidden layer.
///
/// All layers except the top pair are directed downward. With no upper
/// layers the stack is just the GRBM.
#[derive(Debug, Clone, PartialEq)]
pub struct DbnStack {
    pub bottom: GrbmParams,
    pub upper: Vec<RbmParams>,
}

/// Result of an ancestral top-down pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TopDownSample {
    /// Visible conditional mean given the sampled bottom hidden layer.
    pub mean: DVector<f64>,
    /// A Gaussian draw around `mean`.
    pub sample: DVector<f64>,
}

impl DbnStack {
    pub fn new(bottom: GrbmParams, upper: Vec<RbmParams>) -> Result<Self> {
        let mut below = bottom.n_hidden();
        for layer in &upper {
            check_dim("DBN layer chain", below, layer.n_visible())?;
            below = layer.n_hidden();
        }
        Ok(DbnStack { bottom, upper })
    }

    pub fn single(bottom: GrbmParams) -> Self {
        DbnStack { bottom, upper: Vec::new() }
    }

    pub fn n_visible(&self) -> usize {
        self.bottom.n_visible()
    }

    /// Sizes of all hidden layers, bottom first.
    pub fn hidden_sizes(&self) -> Vec<usize> {
        std::iter::once(self.bottom.n_hidden())
            .chain(self.upper.iter().map(|l| l.n_hidden()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.bottom.is_finite() && self.upper.iter().all(|l| l.is_finite())
    }

    /// Mean-field activations of every hidden layer, bottom first.
    pub fn up_pass(&self, v: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let mut layers = vec![self.bottom.hidden_probs(v)?];
        for rbm in &self.upper {
            let next = rbm.hidden_probs(layers.last().expect("non-empty"))?;
            layers.push(next);
        }
        Ok(layers)
    }

    /// Sampled binary states of every hidden layer, each drawn given the sample below.
    pub fn up_pass_sample<R: Rng + ?Sized>(&self, v: &DVector<f64>, rng: &mut R) -> Result<Vec<DVector<f64>>> {
        let mut layers = vec![self.bottom.sample_hidden(v, rng)?];
        for rbm in &self.upper {
            let next = rbm.sample_hidden(layers.last().expect("non-empty"), rng)?;
            layers.push(next);
        }
        Ok(layers)
    }

    /// Directed pass from the layer below the top RBM down to the bottom
    /// hidden layer. `state` is the visible layer of the top RBM (or the
    /// bottom hidden layer itself when there are no upper layers).
    pub(crate) fn down_to_bottom_hidden<R: Rng + ?Sized>(&self, mut state: DVector<f64>, rng: &mut R) -> Result<DVector<f64>> {
        if self.upper.len() > 1 {
            for rbm in self.upper[..self.upper.len() - 1].iter().rev() {
                state = rbm.sample_visible(&state, rng)?;
            }
        }
        Ok(state)
    }

    /// One block Gibbs step in the top RBM: visible from hidden, then hidden
    /// from the new visible. Returns `(top_visible, top_hidden)`.
    pub(crate) fn top_gibbs_step<R: Rng + ?Sized>(&self, top_hidden: &DVector<f64>, rng: &mut R) -> Result<(DVector<f64>, DVector<f64>)> {
        match self.upper.last() {
            Some(top) => {
                let v = top.sample_visible(top_hidden, rng)?;
                let h = top.sample_hidden(&v, rng)?;
                Ok((v, h))
            }
            None => {
                let v = self.bottom.sample_visible(top_hidden, rng)?;
                let h = self.bottom.sample_hidden(&v, rng)?;
                Ok((v, h))
            }
        }
    }

    /// Alternating Gibbs in the top RBM for `gibbs_iters` steps from a
    /// uniform random start, then a directed down-pass.
    pub fn topdown_sample(&self, gibbs_iters: usize, seed: u64) -> Result<TopDownSample> {
        if gibbs_iters == 0 {
            return Err(DlnError::InvalidParameter("top-down sampling needs at least one Gibbs iteration".into()));
        }
        let mut rng = stream(seed, &[0xd0a1]);
        let top_size = *self.hidden_sizes().last().expect("non-empty");
        let mut hidden = DVector::from_fn(top_size, |_, _| if rng.random::<bool>() { 1.0 } else { 0.0 });
        let mut top_visible = DVector::zeros(0);
        for _ in 0..gibbs_iters {
            let (v, h) = self.top_gibbs_step(&hidden, &mut rng)?;
            top_visible = v;
            hidden = h;
        }
        let bottom_hidden = if self.upper.is_empty() {
            hidden
        } else {
            self.down_to_bottom_hidden(top_visible, &mut rng)?
        };
        let mean = self.bottom.visible_mean(&bottom_hidden)?;
        let sample = self.bottom.sample_around(&mean, &mut rng);
        Ok(TopDownSample { mean, sample })
    }

    /// One greedy layer-wise CD epoch with fresh (zero-momentum) trainers.
    pub fn cd_epoch(&self, data: &[DVector<f64>], cfg: &CdConfig, seed: u64, epoch: u64) -> Result<(DbnStack, Vec<CdDiagnostics>)> {
        DbnTrainer::new(self, cfg.clone())?.epoch(self, data, seed, epoch)
    }
}

/// Per-layer CD trainers for a [`DbnStack`], keeping momentum across epochs.
#[derive(Debug, Clone)]
pub struct DbnTrainer {
    pub bottom: CdTrainer<GrbmGradient>,
    pub upper: Vec<CdTrainer<RbmGradient>>,
}

impl DbnTrainer {
    pub fn new(stack: &DbnStack, config: CdConfig) -> Result<Self> {
        Ok(DbnTrainer {
            bottom: CdTrainer::new(config.clone())?,
            upper: stack.upper.iter().map(|_| CdTrainer::new(config.clone())).collect::<Result<_>>()?,
        })
    }

    /// Greedy layer-wise CD: the GRBM on `data`, then each RBM on the
    /// mean-field activations of the (already updated) layer below.
    pub fn epoch(&mut self, stack: &DbnStack, data: &[DVector<f64>], seed: u64, epoch: u64) -> Result<(DbnStack, Vec<CdDiagnostics>)> {
        check_dim("DBN trainer layers", stack.upper.len(), self.upper.len())?;
        let (bottom, d0) = self.bottom.epoch(&stack.bottom, data, seed, epoch)?;
        let mut diags = vec![d0];
        let mut activations: Vec<DVector<f64>> = data
            .iter()
            .map(|v| bottom.hidden_probs(v))
            .collect::<Result<_>>()?;
        let mut upper = Vec::with_capacity(stack.upper.len());
        for (k, (rbm, t)) in stack.upper.iter().zip(self.upper.iter_mut()).enumerate() {
            let (next, d) = t.epoch(rbm, &activations, seed ^ ((k as u64 + 1) << 48), epoch)?;
            activations = activations.iter().map(|a| next.hidden_probs(a)).collect::<Result<_>>()?;
            upper.push(next);
            diags.push(d);
        }
        Ok((DbnStack { bottom, upper }, diags))
    }
}

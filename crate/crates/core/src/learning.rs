//! Approximate EM for the full network.
//!
//! Each iteration samples the posterior of every training subject (E-step),
//! then updates the albedo and normal priors by contrastive divergence on the
//! sampled latents and re-estimates the pixel noise and light prior in closed
//! form (M-step).

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::{info, warn};
use nalgebra::{DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::energy_models::{CdConfig, CdDiagnostics, DbnStack, DbnTrainer, GrbmParams, RbmParams, VARIANCE_FLOOR};
use crate::error::{check_dim, DlnError, Result};
use crate::hmc::HmcConfig;
use crate::lambertian::{Geometry, ImageStack, LightingPrior, NoiseModel, SceneLatents};
use crate::posterior::{flat_normal_bias, infer, reconstruction_error, DlnModel, InferConfig, InitMethod, DEFAULT_NORM_PENALTY};
use crate::rng::{derive_key, label_key, stream};

/// Ridge added to the light covariance before inverting it.
pub const LIGHT_COVARIANCE_JITTER: f64 = 1e-8;

/// Light samples needed before the light precision is re-estimated.
pub const MIN_LIGHT_SAMPLES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub em_iters: usize,
    /// Gibbs sweeps per subject in each E-step.
    pub e_step_sweeps: usize,
    /// Shared CD settings; the rate is overridden per prior.
    pub cd: CdConfig,
    pub albedo_rate: f64,
    pub normal_rate: f64,
    /// CD epochs over the sampled latents in each M-step.
    pub cd_epochs: usize,
    pub hmc: HmcConfig,
    pub norm_penalty: f64,
    /// Normal fields are augmented with every shift of up to this many pixels.
    pub translation_augment: usize,
    pub seed: u64,
    pub albedo_hidden: Vec<usize>,
    pub normal_hidden: Vec<usize>,
    /// Standard deviation of initial weights.
    pub weight_init_std: f64,
    /// Initial value of every variance (priors and pixel noise).
    pub init_variance: f64,
    pub init: InitMethod,
    /// Start each E-step chain from the subject's previous sample.
    pub warm_start: bool,
    /// Average each subject's latents over this many final sweeps (0 keeps the last state).
    pub average_last: usize,
    /// Stop once the reconstruction error improves by less than this fraction over 3 iterations (0 disables).
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            em_iters: 30,
            e_step_sweeps: 50,
            cd: CdConfig::default(),
            albedo_rate: 0.01,
            normal_rate: 0.01,
            cd_epochs: 10,
            hmc: HmcConfig::default(),
            norm_penalty: DEFAULT_NORM_PENALTY,
            translation_augment: 2,
            seed: 0,
            albedo_hidden: vec![50],
            normal_hidden: vec![50],
            weight_init_std: 0.01,
            init_variance: 1.0,
            init: InitMethod::Bias,
            warm_start: true,
            average_last: 0,
            tolerance: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cd.validate()?;
        self.hmc.validate()?;
        for (name, r) in [("albedo rate", self.albedo_rate), ("normal rate", self.normal_rate)] {
            if !(r.is_finite() && r >= 0.0) {
                return Err(DlnError::InvalidParameter(format!("{name} must be >= 0, got {r}")));
            }
        }
        if self.e_step_sweeps == 0 {
            return Err(DlnError::InvalidParameter("E-step needs at least one sweep".into()));
        }
        if self.albedo_hidden.is_empty() || self.normal_hidden.is_empty() || self.albedo_hidden.iter().chain(&self.normal_hidden).any(|&n| n == 0) {
            return Err(DlnError::InvalidParameter("hidden layer sizes must be non-empty and positive".into()));
        }
        if !(self.init_variance.is_finite() && self.init_variance > 0.0) {
            return Err(DlnError::InvalidParameter("initial variance must be > 0".into()));
        }
        if !(self.weight_init_std.is_finite() && self.weight_init_std >= 0.0) {
            return Err(DlnError::InvalidParameter("weight init std must be >= 0".into()));
        }
        if !(self.norm_penalty.is_finite() && self.norm_penalty >= 0.0) {
            return Err(DlnError::InvalidParameter("norm penalty must be >= 0".into()));
        }
        Ok(())
    }

    fn infer_config(&self) -> InferConfig {
        InferConfig {
            iters: self.e_step_sweeps,
            hmc: self.hmc,
            init: self.init.clone(),
            seed: self.seed,
            average_last: self.average_last,
            ..InferConfig::default()
        }
    }
}

/// All images of one object; they share albedo and normals.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub images: ImageStack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectBatch {
    pub subjects: Vec<Subject>,
}

impl SubjectBatch {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(DlnError::InvalidParameter(format!("duplicate subject id '{}'", s.id)));
            }
        }
        if let Some(first) = subjects.first() {
            for s in &subjects {
                if s.images.geometry() != first.images.geometry() {
                    return Err(DlnError::InvalidParameter(format!(
                        "subject '{}' has geometry {:?}, expected {:?}",
                        s.id,
                        s.images.geometry(),
                        first.images.geometry()
                    )));
                }
            }
        }
        Ok(SubjectBatch { subjects })
    }

    pub fn geometry(&self) -> Option<Geometry> {
        self.subjects.first().map(|s| s.images.geometry())
    }

    pub fn num_images(&self) -> usize {
        self.subjects.iter().map(|s| s.images.num_images()).sum()
    }

    /// Every image as a column vector.
    pub fn all_images(&self) -> Vec<DVector<f64>> {
        self.subjects
            .iter()
            .flat_map(|s| (0..s.images.num_images()).map(move |p| s.images.image(p)))
            .collect()
    }
}

fn mean_and_variance(data: &[DVector<f64>]) -> Result<(DVector<f64>, DVector<f64>)> {
    let first = data.first().ok_or_else(|| DlnError::Empty("no training vectors".into()))?;
    let n = data.len() as f64;
    let mut mean = DVector::zeros(first.len());
    for v in data {
        check_dim("training vector", first.len(), v.len())?;
        mean += v;
    }
    mean /= n;
    let mut var = DVector::zeros(first.len());
    for v in data {
        var += (v - &mean).map(|x| x * x);
    }
    var /= n;
    Ok((mean, var.map(|x| x.max(VARIANCE_FLOOR))))
}

fn random_stack(n_visible: usize, hidden: &[usize], std: f64, seed: u64, key: u64) -> Result<DbnStack> {
    let mut rng = stream(seed, &[key]);
    let bottom = GrbmParams::random(n_visible, hidden[0], std, &mut rng);
    let upper = hidden.windows(2).map(|w| RbmParams::random(w[0], w[1], std, &mut rng)).collect();
    DbnStack::new(bottom, upper)
}

/// CD-train an albedo prior on raw images used as albedo stand-ins.
/// The visible biases start at the data mean and the variances at the data variance.
pub fn pretrain_albedo_prior(corpus: &[DVector<f64>], hidden: &[usize], cd: &CdConfig, epochs: usize, weight_std: f64, seed: u64) -> Result<DbnStack> {
    if corpus.is_empty() {
        return Err(DlnError::Empty("pretraining corpus is empty".into()));
    }
    if hidden.is_empty() {
        return Err(DlnError::InvalidParameter("pretraining needs at least one hidden layer".into()));
    }
    cd.validate()?;
    let (mean, var) = mean_and_variance(corpus)?;
    let mut stack = random_stack(mean.len(), hidden, weight_std, seed, 0x9e7a)?;
    stack.bottom = GrbmParams::new(stack.bottom.weights.clone(), mean, stack.bottom.hidden_bias.clone(), var)?;
    let mut trainer = DbnTrainer::new(&stack, cd.clone())?;
    for epoch in 0..epochs {
        let (next, diags) = trainer.epoch(&stack, corpus, seed, epoch as u64)?;
        stack = next;
        info!("pretrain epoch {epoch}: reconstruction error {:.6}", diags[0].reconstruction_error);
    }
    Ok(stack)
}

/// Replace the albedo prior with a pretrained one of matching size.
pub fn transfer_albedo_prior(model: &mut DlnModel, prior: DbnStack) -> Result<()> {
    check_dim("transferred albedo prior", model.num_pixels(), prior.n_visible())?;
    model.albedo_prior = prior;
    Ok(())
}

/// Untrained model: random weights, albedo bias at the mean training image,
/// normal bias `(0, 0, 1)`, all variances at `cfg.init_variance`, lights `N((0, 0, 1), I)`.
pub fn initial_model(batch: &SubjectBatch, cfg: &TrainConfig) -> Result<DlnModel> {
    cfg.validate()?;
    let geometry = batch.geometry().ok_or_else(|| DlnError::Empty("no training subjects".into()))?;
    let nv = geometry.num_pixels();
    let images = batch.all_images();
    let albedo_bias = if images.is_empty() {
        DVector::from_element(nv, 0.5)
    } else {
        mean_and_variance(&images)?.0
    };
    let mut albedo = random_stack(nv, &cfg.albedo_hidden, cfg.weight_init_std, cfg.seed, 0xa1be)?;
    albedo.bottom = GrbmParams::new(
        albedo.bottom.weights.clone(),
        albedo_bias,
        albedo.bottom.hidden_bias.clone(),
        DVector::from_element(nv, cfg.init_variance),
    )?;
    let mut normal = random_stack(3 * nv, &cfg.normal_hidden, cfg.weight_init_std, cfg.seed, 0x4e0a)?;
    normal.bottom = GrbmParams::new(
        normal.bottom.weights.clone(),
        flat_normal_bias(nv),
        normal.bottom.hidden_bias.clone(),
        DVector::from_element(3 * nv, cfg.init_variance),
    )?;
    DlnModel::new(
        geometry,
        albedo,
        normal,
        LightingPrior::isotropic(Vector3::new(0.0, 0.0, 1.0), 1.0)?,
        NoiseModel::uniform(nv, cfg.init_variance)?,
        cfg.norm_penalty,
    )
}

/// One subject's retained posterior sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSample {
    pub id: String,
    pub latents: SceneLatents,
    pub h: DVector<f64>,
    pub g: DVector<f64>,
    pub acceptance: f64,
    pub reconstruction_error: f64,
}

/// Sample every subject's posterior; chains are keyed by subject id, so
/// reordering subjects does not change any subject's sample.
pub fn e_step(model: &DlnModel, batch: &SubjectBatch, cfg: &TrainConfig, iteration: u64, previous: Option<&[PosteriorSample]>) -> Result<Vec<PosteriorSample>> {
    let base = cfg.infer_config();
    batch
        .subjects
        .par_iter()
        .map(|subject| {
            let mut icfg = base.clone();
            icfg.seed = derive_key(cfg.seed, &[0xe5, iteration, label_key(&subject.id)]);
            if let Some(prev) = previous.and_then(|p| p.iter().find(|s| s.id == subject.id)) {
                if cfg.warm_start {
                    icfg.init = InitMethod::Latents(prev.latents.clone());
                }
            }
            let out = infer(model, &subject.images, &icfg).map_err(|e| match e {
                DlnError::DimensionMismatch { .. } => DlnError::InvalidParameter(format!("subject '{}': {e}", subject.id)),
                other => other,
            })?;
            let latents = out.average.unwrap_or_else(|| out.state.latents.clone());
            let acc = &out.state.diagnostics.acceptance;
            Ok(PosteriorSample {
                id: subject.id.clone(),
                reconstruction_error: reconstruction_error(&latents, &subject.images)?,
                latents,
                h: out.state.h,
                g: out.state.g,
                acceptance: acc.iter().sum::<f64>() / acc.len().max(1) as f64,
            })
        })
        .collect()
}

/// Shift a pixel-major normal field by `(dy, dx)` pixels, replicating edge pixels.
pub fn translate_normals(normals: &DVector<f64>, geometry: Geometry, dy: i64, dx: i64) -> DVector<f64> {
    let (h, w) = (geometry.height as i64, geometry.width as i64);
    DVector::from_fn(normals.len(), |k, _| {
        let (i, m) = (k / 3, k % 3);
        let (r, c) = (i as i64 / w, i as i64 % w);
        let sr = (r - dy).clamp(0, h - 1);
        let sc = (c - dx).clamp(0, w - 1);
        normals[3 * (sr * w + sc) as usize + m]
    })
}

/// Closed-form estimates of the pixel noise and light prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedForm {
    pub noise: NoiseModel,
    pub light_mean: Vector3<f64>,
    /// `None` when there were too few light samples to estimate it.
    pub light_precision: Option<Matrix3<f64>>,
}

/// Maximum-likelihood noise variances, light mean and light precision over the samples.
pub fn closed_form_estimates(samples: &[PosteriorSample], batch: &SubjectBatch) -> Result<ClosedForm> {
    let geometry = batch.geometry().ok_or_else(|| DlnError::Empty("no training subjects".into()))?;
    let nv = geometry.num_pixels();
    let mut sq = DVector::zeros(nv);
    let mut count = 0usize;
    let mut lights = Vec::new();
    for subject in &batch.subjects {
        let sample = samples
            .iter()
            .find(|s| s.id == subject.id)
            .ok_or_else(|| DlnError::InvalidParameter(format!("no posterior sample for subject '{}'", subject.id)))?;
        let lat = &sample.latents;
        check_dim("sample images", subject.images.num_images(), lat.num_images())?;
        let pred = crate::lambertian::render_mean(lat, false)?;
        let resid = subject.images.pixels() - pred;
        for p in 0..resid.ncols() {
            sq += resid.column(p).map(|x| x * x);
            lights.push(lat.light(p));
        }
        count += resid.ncols();
    }
    if count == 0 {
        return Err(DlnError::Empty("no images in the training batch".into()));
    }
    let noise = NoiseModel::new(sq.map(|s| (s / count as f64).max(VARIANCE_FLOOR)))?;
    let n = lights.len() as f64;
    let light_mean = lights.iter().sum::<Vector3<f64>>() / n;
    let light_precision = if lights.len() < MIN_LIGHT_SAMPLES {
        None
    } else {
        let mut cov = Matrix3::zeros();
        for l in &lights {
            let d = l - light_mean;
            cov += d * d.transpose();
        }
        cov /= n;
        (cov + Matrix3::identity() * LIGHT_COVARIANCE_JITTER).try_inverse()
    };
    Ok(ClosedForm {
        noise,
        light_mean,
        light_precision,
    })
}

/// CD trainers persisted across EM iterations.
#[derive(Debug, Clone)]
pub struct PriorTrainers {
    pub albedo: DbnTrainer,
    pub normal: DbnTrainer,
}

impl PriorTrainers {
    pub fn new(model: &DlnModel, cfg: &TrainConfig) -> Result<Self> {
        Ok(PriorTrainers {
            albedo: DbnTrainer::new(&model.albedo_prior, CdConfig { rate: cfg.albedo_rate, ..cfg.cd.clone() })?,
            normal: DbnTrainer::new(&model.normal_prior, CdConfig { rate: cfg.normal_rate, ..cfg.cd.clone() })?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MStepDiagnostics {
    /// Bottom-layer CD diagnostics of the last epoch.
    pub albedo_cd: CdDiagnostics,
    pub normal_cd: CdDiagnostics,
    pub normal_training_vectors: usize,
}

/// Update the priors by CD on the samples and re-estimate noise and lighting.
pub fn m_step(model: &DlnModel, samples: &[PosteriorSample], batch: &SubjectBatch, cfg: &TrainConfig, trainers: &mut PriorTrainers, iteration: u64) -> Result<(DlnModel, MStepDiagnostics)> {
    if samples.is_empty() {
        return Err(DlnError::Empty("M-step needs at least one posterior sample".into()));
    }
    let mut next = model.clone();
    let mut diag = MStepDiagnostics::default();
    let geometry = model.geometry;

    let albedo_data: Vec<DVector<f64>> = samples.iter().map(|s| s.latents.albedo.clone()).collect();
    let t = cfg.translation_augment as i64;
    let normal_data: Vec<DVector<f64>> = samples
        .iter()
        .flat_map(|s| {
            let base = s.latents.normals_vec();
            (-t..=t).flat_map(move |dy| (-t..=t).map(move |dx| (dy, dx))).map(move |(dy, dx)| translate_normals(&base, geometry, dy, dx))
        })
        .collect();
    diag.normal_training_vectors = normal_data.len();

    let seed = derive_key(cfg.seed, &[0x3577, iteration]);
    if cfg.albedo_rate > 0.0 {
        for epoch in 0..cfg.cd_epochs {
            let (stack, d) = trainers.albedo.epoch(&next.albedo_prior, &albedo_data, seed, epoch as u64)?;
            next.albedo_prior = stack;
            diag.albedo_cd = d[0];
        }
    }
    if cfg.normal_rate > 0.0 {
        for epoch in 0..cfg.cd_epochs {
            let (stack, d) = trainers.normal.epoch(&next.normal_prior, &normal_data, seed ^ 1, epoch as u64)?;
            next.normal_prior = stack;
            diag.normal_cd = d[0];
        }
    }

    let cf = closed_form_estimates(samples, batch)?;
    next.noise = cf.noise;
    let precision = match cf.light_precision {
        Some(p) => p,
        None => {
            warn!("fewer than {MIN_LIGHT_SAMPLES} light samples; keeping the light precision");
            model.lighting.precision
        }
    };
    next.lighting = match LightingPrior::new(cf.light_mean, (precision + precision.transpose()) * 0.5) {
        Ok(l) => l,
        Err(e) => {
            warn!("light prior estimate rejected ({e}); keeping the previous one");
            model.lighting.clone()
        }
    };
    if !next.is_finite() {
        return Err(DlnError::NonFinite(format!("model parameters after M-step {iteration}")));
    }
    Ok((next, diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub reconstruction_error: f64,
    pub acceptance: f64,
    pub noise_var_mean: f64,
    pub albedo_cd: CdDiagnostics,
    pub normal_cd: CdDiagnostics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn format_row(r: &LogRow) -> String {
        format!(
            "iter={} recon_error={:.6e} hmc_acceptance={:.4} noise_var_mean={:.6e} albedo_cd_recon={:.6e} albedo_cd_wgrad={:.6e} normal_cd_recon={:.6e} normal_cd_wgrad={:.6e}",
            r.iteration,
            r.reconstruction_error,
            r.acceptance,
            r.noise_var_mean,
            r.albedo_cd.reconstruction_error,
            r.albedo_cd.weight_grad_norm,
            r.normal_cd.reconstruction_error,
            r.normal_cd.weight_grad_norm
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(out, "{}", Self::format_row(r));
        }
        out
    }
}

/// Run approximate EM from `init` (or [`initial_model`] when `None`).
/// `on_iteration` sees the model after every M-step, e.g. for checkpoints.
pub fn train<F>(batch: &SubjectBatch, cfg: &TrainConfig, init: Option<DlnModel>, mut on_iteration: F) -> Result<(DlnModel, TrainingLog)>
where
    F: FnMut(usize, &DlnModel, &LogRow) -> Result<()>,
{
    cfg.validate()?;
    if batch.subjects.is_empty() {
        return Err(DlnError::Empty("no training subjects".into()));
    }
    let mut model = match init {
        Some(m) => {
            m.validate()?;
            check_dim("model pixels", m.num_pixels(), batch.geometry().expect("non-empty").num_pixels())?;
            m
        }
        None => initial_model(batch, cfg)?,
    };
    let mut trainers = PriorTrainers::new(&model, cfg)?;
    let mut log = TrainingLog::default();
    let mut previous: Option<Vec<PosteriorSample>> = None;
    for it in 0..cfg.em_iters {
        let samples = e_step(&model, batch, cfg, it as u64, previous.as_deref())?;
        let (next, diag) = m_step(&model, &samples, batch, cfg, &mut trainers, it as u64)?;
        model = next;
        let n = samples.len() as f64;
        let row = LogRow {
            iteration: it,
            reconstruction_error: samples.iter().map(|s| s.reconstruction_error).sum::<f64>() / n,
            acceptance: samples.iter().map(|s| s.acceptance).sum::<f64>() / n,
            noise_var_mean: model.noise.variance.mean(),
            albedo_cd: diag.albedo_cd,
            normal_cd: diag.normal_cd,
        };
        info!("{}", TrainingLog::format_row(&row));
        on_iteration(it, &model, &row)?;
        log.rows.push(row);
        previous = Some(samples);
        if cfg.tolerance > 0.0 && log.rows.len() > 3 {
            let now = log.rows[log.rows.len() - 1].reconstruction_error;
            let before = log.rows[log.rows.len() - 4].reconstruction_error;
            if before > 0.0 && (before - now) / before < cfg.tolerance {
                info!("stopping after iteration {it}: reconstruction error improved by less than {} over 3 iterations", cfg.tolerance);
                break;
            }
        }
    }
    Ok((model, log))
}

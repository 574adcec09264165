//! Blocked Gibbs inference of albedo, normals, lights and prior hidden units
//! from one or more images of an object.
//!
//! A sweep draws, in order by default: prior hidden units given `(a, N)`,
//! albedo given the rest, each light given the rest, and each pixel normal by
//! HMC. Every random draw comes from a stream keyed by
//! `(seed, sweep, conditional, index)`, so results do not depend on the
//! number of worker threads.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::energy_models::{sample_bernoulli, DbnStack, GrbmParams};
use crate::error::{check_dim, DlnError, Result};
use crate::hmc::{hmc_sample, EnergyTarget, HmcConfig};
use crate::lambertian::{render_mean, svd_photometric_stereo, Geometry, ImageStack, LightingPrior, NoiseModel, SceneLatents};
use crate::rng::stream;

/// Default strength of the unit-norm penalty on normals.
pub const DEFAULT_NORM_PENALTY: f64 = 100.0;

/// Ridge added to the light posterior precision when its factorization fails.
pub const LIGHT_JITTER: f64 = 1e-10;

const KEY_HIDDEN: u64 = 1;
const KEY_ALBEDO: u64 = 2;
const KEY_LIGHTS: u64 = 3;
const KEY_NORMALS: u64 = 4;

/// Priors and noise model of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct DlnModel {
    pub geometry: Geometry,
    /// Prior over albedo maps; visible size `N_v`.
    pub albedo_prior: DbnStack,
    /// Prior over pixel-major flattened normals; visible size `3 N_v`.
    pub normal_prior: DbnStack,
    pub lighting: LightingPrior,
    pub noise: NoiseModel,
    pub norm_penalty: f64,
}

impl DlnModel {
    pub fn new(
        geometry: Geometry,
        albedo_prior: DbnStack,
        normal_prior: DbnStack,
        lighting: LightingPrior,
        noise: NoiseModel,
        norm_penalty: f64,
    ) -> Result<Self> {
        let model = DlnModel {
            geometry,
            albedo_prior,
            normal_prior,
            lighting,
            noise,
            norm_penalty,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.geometry.num_pixels();
        check_dim("albedo prior visible size", nv, self.albedo_prior.n_visible())?;
        check_dim("normal prior visible size", 3 * nv, self.normal_prior.n_visible())?;
        check_dim("noise model size", nv, self.noise.variance.len())?;
        if !(self.norm_penalty.is_finite() && self.norm_penalty >= 0.0) {
            return Err(DlnError::InvalidParameter(format!("norm penalty must be finite and >= 0, got {}", self.norm_penalty)));
        }
        Ok(())
    }

    /// Zero-weight single-layer priors: albedo `N(albedo_mean, albedo_var)`,
    /// normals `N((0, 0, 1), normal_var)` per pixel, lights `N((0, 0, 1), I)`.
    pub fn flat(geometry: Geometry, hidden: (usize, usize), albedo_mean: f64, albedo_var: f64, normal_var: f64, noise_var: f64) -> Result<Self> {
        let nv = geometry.num_pixels();
        let mut albedo = GrbmParams::zeros(nv, hidden.0);
        albedo.visible_bias.fill(albedo_mean);
        albedo.visible_var.fill(albedo_var);
        let mut normal = GrbmParams::zeros(3 * nv, hidden.1);
        normal.visible_bias = flat_normal_bias(nv);
        normal.visible_var.fill(normal_var);
        let albedo = GrbmParams::new(albedo.weights, albedo.visible_bias, albedo.hidden_bias, albedo.visible_var)?;
        let normal = GrbmParams::new(normal.weights, normal.visible_bias, normal.hidden_bias, normal.visible_var)?;
        Self::new(
            geometry,
            DbnStack::single(albedo),
            DbnStack::single(normal),
            LightingPrior::isotropic(Vector3::new(0.0, 0.0, 1.0), 1.0)?,
            NoiseModel::uniform(nv, noise_var)?,
            DEFAULT_NORM_PENALTY,
        )
    }

    pub fn num_pixels(&self) -> usize {
        self.geometry.num_pixels()
    }

    pub fn is_finite(&self) -> bool {
        self.albedo_prior.is_finite()
            && self.normal_prior.is_finite()
            && self.lighting.mean.iter().chain(self.lighting.precision.iter()).all(|x| x.is_finite())
            && self.noise.variance.iter().all(|x| x.is_finite())
    }

    /// Top-down albedo mean `b + sigma_a^2 W h`.
    pub fn albedo_topdown(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        self.albedo_prior.bottom.visible_mean(h)
    }

    /// Top-down normal mean `d + sigma_n^2 U g`, pixel-major.
    pub fn normal_topdown(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        self.normal_prior.bottom.visible_mean(g)
    }
}

/// `(0, 0, 1)` at every pixel, pixel-major.
pub fn flat_normal_bias(num_pixels: usize) -> DVector<f64> {
    DVector::from_fn(3 * num_pixels, |k, _| if k % 3 == 2 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepDiagnostics {
    /// HMC acceptance rate pooled over pixels, per sweep.
    pub acceptance: Vec<f64>,
    pub divergences: Vec<usize>,
    /// Network energy after each sweep.
    pub energy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorState {
    pub latents: SceneLatents,
    /// Bottom hidden layer of the albedo prior.
    pub h: DVector<f64>,
    /// Bottom hidden layer of the normal prior.
    pub g: DVector<f64>,
    /// Hidden states of the stacked layers above `h` / `g`, lowest first.
    pub h_upper: Vec<DVector<f64>>,
    pub g_upper: Vec<DVector<f64>>,
    /// Completed sweeps; also the sweep key of the next draws.
    pub iteration: u64,
    pub diagnostics: SweepDiagnostics,
}

impl PosteriorState {
    /// A state at `latents` with all hidden units off.
    pub fn from_latents(model: &DlnModel, latents: SceneLatents) -> Result<Self> {
        check_dim("latent pixels", model.num_pixels(), latents.num_pixels())?;
        let zeros = |sizes: Vec<usize>| sizes.iter().map(|&n| DVector::zeros(n)).collect::<Vec<_>>();
        let h_all = zeros(model.albedo_prior.hidden_sizes());
        let g_all = zeros(model.normal_prior.hidden_sizes());
        Ok(PosteriorState {
            latents,
            h: h_all[0].clone(),
            g: g_all[0].clone(),
            h_upper: h_all[1..].to_vec(),
            g_upper: g_all[1..].to_vec(),
            iteration: 0,
            diagnostics: SweepDiagnostics::default(),
        })
    }

    /// Albedo and normals at the prior visible biases, lights at the prior mean.
    pub fn from_bias(model: &DlnModel, num_images: usize) -> Result<Self> {
        let nv = model.num_pixels();
        let d = &model.normal_prior.bottom.visible_bias;
        let normals = DMatrix::from_fn(nv, 3, |i, m| d[3 * i + m]);
        let mean = model.lighting.mean;
        let lights = DMatrix::from_fn(3, num_images, |m, _| mean[m]);
        let latents = SceneLatents::new(model.albedo_prior.bottom.visible_bias.clone(), normals, lights)?;
        Self::from_latents(model, latents)
    }

    fn check(&self, model: &DlnModel, images: &ImageStack) -> Result<()> {
        check_dim("state pixels", model.num_pixels(), self.latents.num_pixels())?;
        check_dim("state images", images.num_images(), self.latents.num_images())?;
        check_dim("image pixels", model.num_pixels(), images.num_pixels())?;
        check_dim("albedo hidden size", model.albedo_prior.bottom.n_hidden(), self.h.len())?;
        check_dim("normal hidden size", model.normal_prior.bottom.n_hidden(), self.g.len())?;
        Ok(())
    }
}

/// Hidden-unit step. Draws `h ~ p(h | a)` and `g ~ p(g | vec(N))` from the bottom
/// GRBMs; upper layers get a sampled up-pass and one top-RBM Gibbs step.
/// Upper states do not feed back into `h`, `g` (an approximation for deep priors).
pub fn sample_hidden(model: &DlnModel, state: &mut PosteriorState, seed: u64) -> Result<()> {
    let it = state.iteration;
    let (h, h_upper) = sample_stack_hidden(&model.albedo_prior, &state.latents.albedo, seed, &[it, KEY_HIDDEN, 0])?;
    let (g, g_upper) = sample_stack_hidden(&model.normal_prior, &state.latents.normals_vec(), seed, &[it, KEY_HIDDEN, 1])?;
    state.h = h;
    state.h_upper = h_upper;
    state.g = g;
    state.g_upper = g_upper;
    Ok(())
}

fn sample_stack_hidden(stack: &DbnStack, visible: &DVector<f64>, seed: u64, key: &[u64]) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let mut rng = stream(seed, key);
    let bottom = sample_bernoulli(&stack.bottom.hidden_probs(visible)?, &mut rng);
    let mut upper = Vec::with_capacity(stack.upper.len());
    let mut below = bottom.clone();
    for rbm in &stack.upper {
        let next = rbm.sample_hidden(&below, &mut rng)?;
        upper.push(next.clone());
        below = next;
    }
    if let Some(top) = stack.upper.last() {
        let top_visible = top.sample_visible(upper.last().expect("non-empty"), &mut rng)?;
        *upper.last_mut().expect("non-empty") = top.sample_hidden(&top_visible, &mut rng)?;
    }
    Ok((bottom, upper))
}

/// Per-pixel Gaussian conditional of the albedo: `(mean, variance)`.
pub fn albedo_conditional(model: &DlnModel, state: &PosteriorState, images: &ImageStack) -> Result<(DVector<f64>, DVector<f64>)> {
    state.check(model, images)?;
    let phi = model.albedo_topdown(&state.h)?;
    let var_a = &model.albedo_prior.bottom.visible_var;
    let shading = &state.latents.normals * &state.latents.lights;
    let v = images.pixels();
    let nv = model.num_pixels();
    let mut mean = DVector::zeros(nv);
    let mut var = DVector::zeros(nv);
    for i in 0..nv {
        let (mut sv, mut ss) = (0.0, 0.0);
        for p in 0..v.ncols() {
            sv += shading[(i, p)] * v[(i, p)];
            ss += shading[(i, p)] * shading[(i, p)];
        }
        let sn = model.noise.variance[i];
        let denom = var_a[i] * ss + sn;
        mean[i] = (var_a[i] * sv + phi[i] * sn) / denom;
        var[i] = var_a[i] * sn / denom;
    }
    Ok((mean, var))
}

/// Albedo step: independent Gaussian draw of every pixel albedo.
pub fn sample_albedo(model: &DlnModel, state: &mut PosteriorState, images: &ImageStack, seed: u64) -> Result<()> {
    let (mean, var) = albedo_conditional(model, state, images)?;
    let it = state.iteration;
    let draws: Vec<f64> = (0..mean.len())
        .into_par_iter()
        .map(|i| {
            let z: f64 = StandardNormal.sample(&mut stream(seed, &[it, KEY_ALBEDO, i as u64]));
            mean[i] + var[i].sqrt() * z
        })
        .collect();
    state.latents.albedo = DVector::from_vec(draws);
    Ok(())
}

/// Gaussian conditional shared by all lights: the posterior precision and one mean per image.
#[derive(Debug, Clone)]
pub struct LightConditional {
    pub precision: Matrix3<f64>,
    pub means: Vec<Vector3<f64>>,
    factor: Cholesky<f64, nalgebra::U3>,
}

impl LightConditional {
    pub fn covariance(&self) -> Matrix3<f64> {
        self.factor.inverse()
    }
}

pub fn light_conditional(model: &DlnModel, state: &PosteriorState, images: &ImageStack) -> Result<LightConditional> {
    state.check(model, images)?;
    let m = state.latents.scaled_normals();
    let lambda = model.lighting.precision;
    let mut precision = lambda;
    let mut weighted = m.clone();
    for i in 0..m.nrows() {
        let w = 1.0 / model.noise.variance[i];
        let mi = Vector3::new(m[(i, 0)], m[(i, 1)], m[(i, 2)]);
        precision += mi * mi.transpose() * w;
        weighted.row_mut(i).scale_mut(w);
    }
    let factor = match precision.cholesky() {
        Some(f) => f,
        None => {
            warn!("light posterior precision not positive definite; adding {LIGHT_JITTER:e} I");
            (precision + Matrix3::identity() * LIGHT_JITTER)
                .cholesky()
                .ok_or_else(|| DlnError::NotPositiveDefinite("light posterior precision after jitter".into()))?
        }
    };
    let prior_term = lambda * model.lighting.mean;
    let data_term = weighted.transpose() * images.pixels();
    let means = (0..images.num_images())
        .map(|p| {
            let rhs = prior_term + Vector3::new(data_term[(0, p)], data_term[(1, p)], data_term[(2, p)]);
            factor.solve(&rhs)
        })
        .collect();
    Ok(LightConditional { precision, means, factor })
}

/// Light step: independent Gaussian draw of every light vector.
pub fn sample_lights(model: &DlnModel, state: &mut PosteriorState, images: &ImageStack, seed: u64) -> Result<()> {
    let cond = light_conditional(model, state, images)?;
    let lt = cond.factor.l().transpose();
    let it = state.iteration;
    let draws: Vec<Vector3<f64>> = (0..cond.means.len())
        .into_par_iter()
        .map(|p| {
            let mut rng = stream(seed, &[it, KEY_LIGHTS, p as u64]);
            let z = Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng));
            let offset = lt.solve_upper_triangular(&z).expect("non-singular Cholesky factor");
            cond.means[p] + offset
        })
        .collect();
    for (p, l) in draws.iter().enumerate() {
        state.latents.lights.set_column(p, l);
    }
    Ok(())
}

/// Energy of one pixel normal given everything else:
/// `1/2 n^T Q n - r^T n + eta/2 (n^T n - 1)^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalEnergy {
    pub quad: Matrix3<f64>,
    pub linear: Vector3<f64>,
    pub eta: f64,
}

impl NormalEnergy {
    pub fn value(&self, n: &Vector3<f64>) -> f64 {
        let c = n.dot(n) - 1.0;
        0.5 * n.dot(&(self.quad * n)) - self.linear.dot(n) + 0.5 * self.eta * c * c
    }

    pub fn grad(&self, n: &Vector3<f64>) -> Vector3<f64> {
        self.quad * n - self.linear + n * (2.0 * self.eta * (n.dot(n) - 1.0))
    }

    /// Minimizer of the quadratic part, `Q^-1 r` (the exact mean when `eta = 0`).
    pub fn quadratic_minimizer(&self) -> Option<Vector3<f64>> {
        self.quad.cholesky().map(|c| c.solve(&self.linear))
    }
}

impl EnergyTarget for NormalEnergy {
    fn dim(&self) -> usize {
        3
    }
    fn energy(&self, x: &[f64]) -> f64 {
        self.value(&Vector3::new(x[0], x[1], x[2]))
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        let g = self.grad(&Vector3::new(x[0], x[1], x[2]));
        grad.copy_from_slice(g.as_slice());
    }
}

/// Normal-step energies for every pixel.
pub fn normal_energies(model: &DlnModel, state: &PosteriorState, images: &ImageStack) -> Result<Vec<NormalEnergy>> {
    state.check(model, images)?;
    let phi = model.normal_topdown(&state.g)?;
    let var_n = &model.normal_prior.bottom.visible_var;
    let lights = &state.latents.lights;
    let gram = lights * lights.transpose();
    let gram = Matrix3::from_fn(|r, c| gram[(r, c)]);
    let lv = images.pixels() * lights.transpose();
    Ok((0..model.num_pixels())
        .map(|i| {
            let a = state.latents.albedo[i];
            let sv = model.noise.variance[i];
            let d = Vector3::from_fn(|m, _| 1.0 / var_n[3 * i + m]);
            let quad = gram * (a * a / sv) + Matrix3::from_diagonal(&d);
            let linear = Vector3::from_fn(|m, _| a * lv[(i, m)] / sv + d[m] * phi[3 * i + m]);
            NormalEnergy {
                quad,
                linear,
                eta: model.norm_penalty,
            }
        })
        .collect())
}

pub fn normal_energy(model: &DlnModel, state: &PosteriorState, images: &ImageStack, pixel: usize) -> Result<NormalEnergy> {
    if pixel >= model.num_pixels() {
        return Err(DlnError::InvalidParameter(format!("pixel {pixel} out of range")));
    }
    Ok(normal_energies(model, state, images)?[pixel])
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NormalSweepStats {
    pub accepted: usize,
    pub proposals: usize,
    pub divergences: usize,
}

impl NormalSweepStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Normal step: per-pixel HMC on [`NormalEnergy`], pixels in parallel.
pub fn sample_normals(model: &DlnModel, state: &mut PosteriorState, images: &ImageStack, hmc: &HmcConfig, seed: u64) -> Result<NormalSweepStats> {
    hmc.validate()?;
    let energies = normal_energies(model, state, images)?;
    let it = state.iteration;
    let normals = &state.latents.normals;
    let results: Vec<_> = energies
        .par_iter()
        .enumerate()
        .map(|(i, target)| {
            let init = [normals[(i, 0)], normals[(i, 1)], normals[(i, 2)]];
            hmc_sample(target, &init, hmc, &mut stream(seed, &[it, KEY_NORMALS, i as u64]))
        })
        .collect::<Result<_>>()?;
    let mut stats = NormalSweepStats::default();
    for (i, out) in results.iter().enumerate() {
        for m in 0..3 {
            state.latents.normals[(i, m)] = out.state[m];
        }
        stats.accepted += out.accepted;
        stats.proposals += out.proposals;
        stats.divergences += out.divergences;
    }
    Ok(stats)
}

/// Network energy of a full configuration (bottom prior layers only).
pub fn dln_energy(model: &DlnModel, state: &PosteriorState, images: &ImageStack) -> Result<f64> {
    state.check(model, images)?;
    let lat = &state.latents;
    let resid = images.pixels() - render_mean(lat, false)?;
    let mut e = 0.0;
    for i in 0..resid.nrows() {
        e += 0.5 * resid.row(i).norm_squared() / model.noise.variance[i];
    }
    for p in 0..lat.num_images() {
        let d = lat.light(p) - model.lighting.mean;
        e += 0.5 * d.dot(&(model.lighting.precision * d));
    }
    for i in 0..lat.num_pixels() {
        let c = lat.normal(i).norm_squared() - 1.0;
        e += 0.5 * model.norm_penalty * c * c;
    }
    e += model.albedo_prior.bottom.energy(&lat.albedo, &state.h)?;
    e += model.normal_prior.bottom.energy(&lat.normals_vec(), &state.g)?;
    Ok(e)
}

/// Relative Frobenius residual `|V - render(latents)| / |V|`.
pub fn reconstruction_error(latents: &SceneLatents, images: &ImageStack) -> Result<f64> {
    check_dim("latent images", images.num_images(), latents.num_images())?;
    let norm = images.pixels().norm();
    if norm == 0.0 {
        return Ok(0.0);
    }
    Ok((images.pixels() - render_mean(latents, false)?).norm() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Conditional {
    Hidden,
    Albedo,
    Lights,
    Normals,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitMethod {
    /// Prior visible biases and the prior light mean.
    Bias,
    /// Rank-3 photometric stereo (`a = |m|`, `n = m / |m|`); needs 3 images, else falls back to `Bias`.
    Svd,
    Latents(SceneLatents),
}

impl std::str::FromStr for InitMethod {
    type Err = DlnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bias" => Ok(InitMethod::Bias),
            "svd" => Ok(InitMethod::Svd),
            other => Err(DlnError::InvalidParameter(format!("unknown init method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    pub iters: usize,
    pub hmc: HmcConfig,
    pub init: InitMethod,
    pub seed: u64,
    pub order: [Conditional; 4],
    /// Keep a copy of the latents after every sweep.
    pub record_trace: bool,
    /// Average the latents over this many final sweeps (0 disables).
    pub average_last: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            iters: 50,
            hmc: HmcConfig::default(),
            init: InitMethod::Bias,
            seed: 0,
            order: [Conditional::Hidden, Conditional::Albedo, Conditional::Lights, Conditional::Normals],
            record_trace: false,
            average_last: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub state: PosteriorState,
    pub trace: Vec<SceneLatents>,
    pub average: Option<SceneLatents>,
}

/// Initial latents for `init`.
pub fn initial_state(model: &DlnModel, images: &ImageStack, init: &InitMethod) -> Result<PosteriorState> {
    let p = images.num_images();
    match init {
        InitMethod::Bias => PosteriorState::from_bias(model, p),
        InitMethod::Latents(l) => PosteriorState::from_latents(model, l.clone()),
        InitMethod::Svd if p < 3 => {
            warn!("SVD initialization needs 3 images, got {p}; using the prior biases");
            PosteriorState::from_bias(model, p)
        }
        InitMethod::Svd => {
            let ps = svd_photometric_stereo(images, 3)?;
            let m = &ps.scaled_normals;
            let albedo = DVector::from_fn(m.nrows(), |i, _| m.row(i).norm());
            let normals = DMatrix::from_fn(m.nrows(), 3, |i, k| {
                if albedo[i] > 0.0 {
                    m[(i, k)] / albedo[i]
                } else if k == 2 {
                    1.0
                } else {
                    0.0
                }
            });
            PosteriorState::from_latents(model, SceneLatents::new(albedo, normals, ps.lights)?)
        }
    }
}

/// One full sweep over the four conditionals in `cfg.order`.
pub fn sweep(model: &DlnModel, state: &mut PosteriorState, images: &ImageStack, cfg: &InferConfig) -> Result<NormalSweepStats> {
    let mut stats = NormalSweepStats::default();
    for c in cfg.order {
        match c {
            Conditional::Hidden => sample_hidden(model, state, cfg.seed)?,
            Conditional::Albedo => sample_albedo(model, state, images, cfg.seed)?,
            Conditional::Lights => sample_lights(model, state, images, cfg.seed)?,
            Conditional::Normals => stats = sample_normals(model, state, images, &cfg.hmc, cfg.seed)?,
        }
    }
    state.iteration += 1;
    Ok(stats)
}

/// Alternating Gibbs sweeps from the configured initialization.
pub fn infer(model: &DlnModel, images: &ImageStack, cfg: &InferConfig) -> Result<Inference> {
    model.validate()?;
    check_dim("image pixels", model.num_pixels(), images.num_pixels())?;
    let mut state = initial_state(model, images, &cfg.init)?;
    let mut trace = Vec::new();
    let mut sum: Option<SceneLatents> = None;
    for sweep_index in 0..cfg.iters {
        let stats = sweep(model, &mut state, images, cfg)?;
        let energy = dln_energy(model, &state, images)?;
        state.diagnostics.acceptance.push(stats.acceptance_rate());
        state.diagnostics.divergences.push(stats.divergences);
        state.diagnostics.energy.push(energy);
        if !state.latents.is_finite() || !energy.is_finite() {
            return Err(DlnError::NonFinite(format!(
                "posterior state after sweep {sweep_index} (energies so far: {:?})",
                state.diagnostics.energy
            )));
        }
        if cfg.record_trace {
            trace.push(state.latents.clone());
        }
        if cfg.average_last > 0 && sweep_index + cfg.average_last >= cfg.iters {
            sum = Some(match sum {
                None => state.latents.clone(),
                Some(mut s) => {
                    s.albedo += &state.latents.albedo;
                    s.normals += &state.latents.normals;
                    s.lights += &state.latents.lights;
                    s
                }
            });
        }
    }
    let average = sum.map(|mut s| {
        let k = cfg.average_last.min(cfg.iters) as f64;
        s.albedo /= k;
        s.normals /= k;
        s.lights /= k;
        s
    });
    Ok(Inference { state, trace, average })
}

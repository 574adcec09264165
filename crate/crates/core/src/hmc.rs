//! Hamiltonian Monte Carlo over differentiable energies.
//!
//! Momentum is drawn from `N(0, mass I)` and the kinetic energy is
//! `|p|^2 / (2 mass)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DlnError, Result};

/// A trajectory whose Hamiltonian drifts further than this from its start is abandoned.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

/// An unnormalized log-density `exp(-energy(x))` with its gradient.
pub trait EnergyTarget {
    fn dim(&self) -> usize;
    fn energy(&self, x: &[f64]) -> f64;
    /// Writes `dE/dx` into `grad` (length `dim`).
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    /// Metropolis-corrected trajectories per [`hmc_sample`] call.
    pub epochs_per_call: usize,
    pub mass: f64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        HmcConfig {
            step_size: 0.01,
            leapfrog_steps: 20,
            epochs_per_call: 10,
            mass: 2.0,
        }
    }
}

impl HmcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(DlnError::InvalidParameter(format!("HMC step size must be > 0, got {}", self.step_size)));
        }
        if self.leapfrog_steps == 0 || self.epochs_per_call == 0 {
            return Err(DlnError::InvalidParameter("HMC leapfrog steps and epochs must be >= 1".into()));
        }
        if !(self.mass.is_finite() && self.mass > 0.0) {
            return Err(DlnError::InvalidParameter(format!("HMC mass must be > 0, got {}", self.mass)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    /// Energy or gradient went non-finite, or `|dH|` exceeded [`DIVERGENCE_THRESHOLD`].
    pub divergent: bool,
}

fn kinetic(p: &[f64], mass: f64) -> f64 {
    p.iter().map(|x| x * x).sum::<f64>() / (2.0 * mass)
}

/// `cfg.leapfrog_steps` of half-kick / drift / half-kick integration.
pub fn leapfrog<T: EnergyTarget + ?Sized>(target: &T, position: &[f64], momentum: &[f64], cfg: &HmcConfig) -> Trajectory {
    let d = target.dim();
    let eps = cfg.step_size;
    let mut x = position.to_vec();
    let mut p = momentum.to_vec();
    let mut g = vec![0.0; d];
    let h0 = target.energy(&x) + kinetic(&p, cfg.mass);
    target.gradient(&x, &mut g);
    for _ in 0..cfg.leapfrog_steps {
        for k in 0..d {
            p[k] -= 0.5 * eps * g[k];
            x[k] += eps * p[k] / cfg.mass;
        }
        target.gradient(&x, &mut g);
        for k in 0..d {
            p[k] -= 0.5 * eps * g[k];
        }
        let h = target.energy(&x) + kinetic(&p, cfg.mass);
        if !h.is_finite() || g.iter().any(|v| !v.is_finite()) || (h - h0).abs() > DIVERGENCE_THRESHOLD {
            return Trajectory {
                position: x,
                momentum: p,
                divergent: true,
            };
        }
    }
    Trajectory {
        position: x,
        momentum: p,
        divergent: false,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcOutcome {
    pub state: Vec<f64>,
    pub accepted: usize,
    pub proposals: usize,
    pub divergences: usize,
    /// Energy of the chain state after each trajectory.
    pub energy_trace: Vec<f64>,
}

impl HmcOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Run `cfg.epochs_per_call` Metropolis-corrected trajectories from `init`.
pub fn hmc_sample<T: EnergyTarget + ?Sized, R: Rng + ?Sized>(target: &T, init: &[f64], cfg: &HmcConfig, rng: &mut R) -> Result<HmcOutcome> {
    cfg.validate()?;
    if init.len() != target.dim() {
        return Err(DlnError::dims("HMC initial state", target.dim(), init.len()));
    }
    let mut x = init.to_vec();
    let mut e = target.energy(&x);
    if !e.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(DlnError::NonFinite("HMC initial state or energy".into()));
    }
    let sd = cfg.mass.sqrt();
    let mut out = HmcOutcome {
        state: Vec::new(),
        accepted: 0,
        proposals: 0,
        divergences: 0,
        energy_trace: Vec::with_capacity(cfg.epochs_per_call),
    };
    for _ in 0..cfg.epochs_per_call {
        let p: Vec<f64> = (0..x.len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *rng);
                sd * z
            })
            .collect();
        let traj = leapfrog(target, &x, &p, cfg);
        out.proposals += 1;
        // Draw the uniform even for divergent proposals so the stream layout is fixed.
        let u: f64 = rng.random();
        if traj.divergent {
            out.divergences += 1;
        } else {
            let e_new = target.energy(&traj.position);
            let dh = e_new + kinetic(&traj.momentum, cfg.mass) - e - kinetic(&p, cfg.mass);
            if u.ln() < -dh {
                x = traj.position;
                e = e_new;
                out.accepted += 1;
            }
        }
        out.energy_trace.push(e);
    }
    out.state = x;
    Ok(out)
}

/// Largest per-coordinate error between the analytic gradient and central differences,
/// relative to `max(|fd|, |analytic|, 1)`.
pub fn grad_check<T: EnergyTarget + ?Sized>(target: &T, x: &[f64], eps: f64) -> f64 {
    let d = target.dim();
    let mut g = vec![0.0; d];
    target.gradient(x, &mut g);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for k in 0..d {
        probe[k] = x[k] + eps;
        let up = target.energy(&probe);
        probe[k] = x[k] - eps;
        let down = target.energy(&probe);
        probe[k] = x[k];
        let fd = (up - down) / (2.0 * eps);
        let err = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1.0);
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    worst
}

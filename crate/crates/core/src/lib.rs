//! Deep Lambertian Networks.
//!
//! A hybrid undirected/directed generative model of images whose latent
//! variables are per-pixel albedo, per-pixel surface normals and one light
//! vector per image. Albedo and normals carry Gaussian RBM (or DBN) priors,
//! lights a Gaussian prior, and pixels are generated by the Lambertian
//! reflectance model `v_ip = a_i (n_i . l_p) + noise`.
//!
//! Module map:
//!
//! - [`energy_models`]: Gaussian/binary RBMs, DBN stacks, contrastive divergence.
//! - [`lambertian`]: rendering, synthetic scenes, SVD photometric stereo.
//! - [`hmc`]: Hamiltonian Monte Carlo over differentiable energies.
//! - [`posterior`]: the four blocked-Gibbs conditionals and the inference loop.
//! - [`learning`]: approximate EM training.
//! - [`tasks`]: nearest-subspace recognition, baselines, relighting, alignment.
//! - [`io`]: model container, PGM/PPM images, dataset ingestion.

pub mod energy_models;
pub mod error;
pub mod hmc;
pub mod io;
pub mod lambertian;
pub mod learning;
pub mod posterior;
pub mod rng;
pub mod tasks;

pub use error::{DlnError, Result};

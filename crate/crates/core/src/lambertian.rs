//! Lambertian image formation, synthetic scenes and SVD photometric stereo.
//!
//! Pixel `i` of image `p` has mean intensity `a_i (n_i . l_p)`. The attached
//! shadow `max(., 0)` is not part of the model; [`render_mean`] can apply it
//! for display only.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, DlnError, Result};
use crate::rng::stream;

/// Image size; pixels are indexed row-major, `i = row * width + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(DlnError::InvalidParameter(format!("invalid image geometry {height}x{width}")));
        }
        Ok(Geometry { height, width })
    }

    pub fn square(size: usize) -> Result<Self> {
        Self::new(size, size)
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }
}

/// `P` images of one object, one column per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    pixels: DMatrix<f64>,
    geometry: Geometry,
}

impl ImageStack {
    pub fn new(pixels: DMatrix<f64>, geometry: Geometry) -> Result<Self> {
        check_dim("image stack rows", geometry.num_pixels(), pixels.nrows())?;
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(DlnError::NonFinite("image stack contains NaN or Inf".into()));
        }
        Ok(ImageStack { pixels, geometry })
    }

    /// A stack with no images.
    pub fn empty(geometry: Geometry) -> Self {
        ImageStack {
            pixels: DMatrix::zeros(geometry.num_pixels(), 0),
            geometry,
        }
    }

    pub fn from_images(geometry: Geometry, images: &[DVector<f64>]) -> Result<Self> {
        for img in images {
            check_dim("image length", geometry.num_pixels(), img.len())?;
        }
        let pixels = DMatrix::from_fn(geometry.num_pixels(), images.len(), |i, p| images[p][i]);
        Self::new(pixels, geometry)
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn num_pixels(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn num_images(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn image(&self, p: usize) -> DVector<f64> {
        self.pixels.column(p).into_owned()
    }

    /// Sub-stack of the given image indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&p| p >= self.num_images()) {
            return Err(DlnError::InvalidParameter(format!(
                "image index {bad} out of range for a stack of {}",
                self.num_images()
            )));
        }
        let pixels = DMatrix::from_fn(self.num_pixels(), indices.len(), |i, k| self.pixels[(i, indices[k])]);
        Ok(ImageStack {
            pixels,
            geometry: self.geometry,
        })
    }
}

/// Albedo `a` (`N_v`), normals `N` (`N_v x 3`, one row per pixel) and lights `L` (`3 x P`).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLatents {
    pub albedo: DVector<f64>,
    pub normals: DMatrix<f64>,
    pub lights: DMatrix<f64>,
}

impl SceneLatents {
    pub fn new(albedo: DVector<f64>, normals: DMatrix<f64>, lights: DMatrix<f64>) -> Result<Self> {
        check_dim("normals rows", albedo.len(), normals.nrows())?;
        check_dim("normals columns", 3, normals.ncols())?;
        check_dim("lights rows", 3, lights.nrows())?;
        Ok(SceneLatents { albedo, normals, lights })
    }

    pub fn num_pixels(&self) -> usize {
        self.albedo.len()
    }

    pub fn num_images(&self) -> usize {
        self.lights.ncols()
    }

    pub fn normal(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.normals[(i, 0)], self.normals[(i, 1)], self.normals[(i, 2)])
    }

    pub fn set_normal(&mut self, i: usize, n: &Vector3<f64>) {
        for m in 0..3 {
            self.normals[(i, m)] = n[m];
        }
    }

    pub fn light(&self, p: usize) -> Vector3<f64> {
        Vector3::new(self.lights[(0, p)], self.lights[(1, p)], self.lights[(2, p)])
    }

    /// `M = diag(a) N`, rows `m_i = a_i n_i`.
    pub fn scaled_normals(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_pixels(), 3, |i, m| self.albedo[i] * self.normals[(i, m)])
    }

    /// Normals flattened pixel-major: `vec(N)[3 i + m] = N[i, m]`.
    pub fn normals_vec(&self) -> DVector<f64> {
        normals_to_vec(&self.normals)
    }

    pub fn is_finite(&self) -> bool {
        self.albedo.iter().chain(self.normals.iter()).chain(self.lights.iter()).all(|x| x.is_finite())
    }
}

/// Pixel-major flattening of an `N_v x 3` normal field.
pub fn normals_to_vec(normals: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(normals.nrows() * 3, |k, _| normals[(k / 3, k % 3)])
}

pub fn normals_from_vec(v: &DVector<f64>) -> Result<DMatrix<f64>> {
    if v.len() % 3 != 0 {
        return Err(DlnError::InvalidParameter(format!("normal vector length {} not divisible by 3", v.len())));
    }
    Ok(DMatrix::from_fn(v.len() / 3, 3, |i, m| v[3 * i + m]))
}

/// Gaussian light prior with mean `mean` and *precision* `precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct LightingPrior {
    pub mean: Vector3<f64>,
    pub precision: Matrix3<f64>,
}

impl LightingPrior {
    pub fn new(mean: Vector3<f64>, precision: Matrix3<f64>) -> Result<Self> {
        if mean.iter().chain(precision.iter()).any(|x| !x.is_finite()) {
            return Err(DlnError::NonFinite("lighting prior".into()));
        }
        let asym = (precision - precision.transpose()).abs().max();
        if asym > 1e-12 * precision.abs().max().max(1.0) {
            return Err(DlnError::InvalidParameter(format!("light precision is not symmetric (asymmetry {asym:e})")));
        }
        let min_eig = precision.symmetric_eigenvalues().min();
        if min_eig <= 0.0 {
            return Err(DlnError::NotPositiveDefinite(format!("light precision has eigenvalue {min_eig:e}")));
        }
        Ok(LightingPrior { mean, precision })
    }

    pub fn isotropic(mean: Vector3<f64>, precision: f64) -> Result<Self> {
        Self::new(mean, Matrix3::identity() * precision)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        self.precision.try_inverse().expect("validated positive definite")
    }

    /// Draw `l ~ N(mean, precision^-1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        let chol = self.precision.cholesky().expect("validated positive definite");
        let z = Vector3::from_fn(|_, _| StandardNormal.sample(rng));
        // precision = L L^T, so L^-T z has covariance precision^-1.
        let offset = chol.l().transpose().solve_upper_triangular(&z).expect("non-singular factor");
        self.mean + offset
    }
}

/// Per-pixel observation variances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub variance: DVector<f64>,
}

impl NoiseModel {
    pub fn new(variance: DVector<f64>) -> Result<Self> {
        if let Some(bad) = variance.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(DlnError::InvalidParameter(format!("pixel noise variance must be positive, got {bad}")));
        }
        Ok(NoiseModel { variance })
    }

    pub fn uniform(num_pixels: usize, variance: f64) -> Result<Self> {
        Self::new(DVector::from_element(num_pixels, variance))
    }
}

/// Shading `s[i, p] = n_i . l_p`, unclamped.
pub fn shading(normals: &DMatrix<f64>, lights: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("normals columns", 3, normals.ncols())?;
    check_dim("lights rows", 3, lights.nrows())?;
    Ok(normals * lights)
}

/// Noise-free images `a_i (n_i . l_p)`; `clamp_nonneg` applies the attached shadow.
pub fn render_mean(scene: &SceneLatents, clamp_nonneg: bool) -> Result<DMatrix<f64>> {
    let mut s = shading(&scene.normals, &scene.lights)?;
    for (i, mut row) in s.row_iter_mut().enumerate() {
        row *= scene.albedo[i];
    }
    if clamp_nonneg {
        s.apply(|x| *x = x.max(0.0));
    }
    Ok(s)
}

/// Gaussian pixel noise around [`render_mean`].
pub fn render_stochastic(scene: &SceneLatents, noise: &NoiseModel, geometry: Geometry, seed: u64) -> Result<ImageStack> {
    check_dim("noise model", scene.num_pixels(), noise.variance.len())?;
    let mut mean = render_mean(scene, false)?;
    let mut rng = stream(seed, &[0x4e01]);
    for p in 0..mean.ncols() {
        for i in 0..mean.nrows() {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean[(i, p)] += noise.variance[i].sqrt() * z;
        }
    }
    ImageStack::new(mean, geometry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    /// Hemisphere inscribed in the image; background pixels are flat with zero albedo.
    Sphere,
    /// Sum of random Gaussian bumps on a plane.
    RandomSmooth,
    Flat,
}

impl std::str::FromStr for SceneKind {
    type Err = DlnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(SceneKind::Sphere),
            "random_smooth" | "random-smooth" => Ok(SceneKind::RandomSmooth),
            "flat" => Ok(SceneKind::Flat),
            other => Err(DlnError::InvalidParameter(format!("unknown scene kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlbedoPattern {
    Constant(f64),
    /// Independent per-pixel draws from `U(low, high)`.
    Uniform { low: f64, high: f64 },
    /// Checkerboard of `cell x cell` pixel squares.
    Checker { low: f64, high: f64, cell: usize },
    /// An explicit albedo map.
    Map(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub geometry: Geometry,
    pub albedo: AlbedoPattern,
    pub num_lights: usize,
    /// Standard deviation of added pixel noise; 0 renders the mean.
    pub noise_std: f64,
    /// Largest polar angle of light directions, in radians (`PI / 2` is the full upper hemisphere).
    pub max_light_angle: f64,
}

impl SceneConfig {
    pub fn new(kind: SceneKind, size: usize, num_lights: usize) -> Result<Self> {
        Ok(SceneConfig {
            kind,
            geometry: Geometry::square(size)?,
            albedo: AlbedoPattern::Uniform { low: 0.5, high: 1.0 },
            num_lights,
            noise_std: 0.0,
            max_light_angle: PI / 2.0,
        })
    }
}

/// Unit light direction uniform on the spherical cap of polar angle `max_angle` around +z.
pub fn sample_light_direction<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Vector3<f64> {
    let cos_min = max_angle.cos();
    let z = cos_min + (1.0 - cos_min) * rng.random::<f64>();
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    Vector3::new(r * phi.cos(), r * phi.sin(), z)
}

/// Normalized image coordinates of pixel `(row, col)` in `[-1, 1]`, y up.
fn pixel_coords(g: Geometry, row: usize, col: usize) -> (f64, f64) {
    let x = 2.0 * (col as f64 + 0.5) / g.width as f64 - 1.0;
    let y = 1.0 - 2.0 * (row as f64 + 0.5) / g.height as f64;
    (x, y)
}

/// Generate latents and images for a synthetic object.
pub fn make_synthetic_scene(cfg: &SceneConfig, seed: u64) -> Result<(SceneLatents, ImageStack)> {
    if cfg.num_lights == 0 {
        return Err(DlnError::InvalidParameter("synthetic scene needs at least one light".into()));
    }
    if !(cfg.noise_std.is_finite() && cfg.noise_std >= 0.0) {
        return Err(DlnError::InvalidParameter(format!("noise std must be >= 0, got {}", cfg.noise_std)));
    }
    if !(cfg.max_light_angle > 0.0 && cfg.max_light_angle <= PI / 2.0) {
        return Err(DlnError::InvalidParameter("max light angle must be in (0, pi/2]".into()));
    }
    let g = cfg.geometry;
    let nv = g.num_pixels();
    let mut rng = stream(seed, &[0x5ce4e]);
    let mut normals = DMatrix::zeros(nv, 3);
    let mut mask = vec![true; nv];

    match cfg.kind {
        SceneKind::Flat => normals.column_mut(2).fill(1.0),
        SceneKind::Sphere => {
            for row in 0..g.height {
                for col in 0..g.width {
                    let i = row * g.width + col;
                    let (x, y) = pixel_coords(g, row, col);
                    let rr = x * x + y * y;
                    if rr < 1.0 {
                        normals[(i, 0)] = x;
                        normals[(i, 1)] = y;
                        normals[(i, 2)] = (1.0 - rr).sqrt();
                    } else {
                        normals[(i, 2)] = 1.0;
                        mask[i] = false;
                    }
                }
            }
        }
        SceneKind::RandomSmooth => {
            let bumps: Vec<(f64, f64, f64, f64)> = (0..4)
                .map(|_| {
                    let cx = rng.random_range(-0.8..0.8);
                    let cy = rng.random_range(-0.8..0.8);
                    let amp = rng.random_range(0.2..0.6) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let width = rng.random_range(0.25..0.5);
                    (cx, cy, amp, width)
                })
                .collect();
            for row in 0..g.height {
                for col in 0..g.width {
                    let (x, y) = pixel_coords(g, row, col);
                    let (mut zx, mut zy) = (0.0, 0.0);
                    for &(cx, cy, amp, w) in &bumps {
                        let e = amp * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp();
                        zx += -e * (x - cx) / (w * w);
                        zy += -e * (y - cy) / (w * w);
                    }
                    let n = Vector3::new(-zx, -zy, 1.0).normalize();
                    let i = row * g.width + col;
                    for m in 0..3 {
                        normals[(i, m)] = n[m];
                    }
                }
            }
        }
    }

    let mut albedo = match &cfg.albedo {
        AlbedoPattern::Constant(c) => DVector::from_element(nv, *c),
        AlbedoPattern::Uniform { low, high } => DVector::from_fn(nv, |_, _| low + (high - low) * rng.random::<f64>()),
        AlbedoPattern::Checker { low, high, cell } => {
            let cell = (*cell).max(1);
            DVector::from_fn(nv, |i, _| {
                let (row, col) = (i / g.width, i % g.width);
                if (row / cell + col / cell) % 2 == 0 {
                    *low
                } else {
                    *high
                }
            })
        }
        AlbedoPattern::Map(map) => {
            check_dim("albedo map", nv, map.len())?;
            map.clone()
        }
    };
    for (a, inside) in albedo.iter_mut().zip(&mask) {
        if !inside {
            *a = 0.0;
        }
    }

    let lights = DMatrix::from_fn(3, cfg.num_lights, |_, _| 0.0);
    let mut lights = lights;
    for p in 0..cfg.num_lights {
        let l = sample_light_direction(&mut rng, cfg.max_light_angle);
        lights.set_column(p, &l);
    }
    let scene = SceneLatents::new(albedo, normals, lights)?;
    let images = if cfg.noise_std > 0.0 {
        let noise = NoiseModel::uniform(nv, cfg.noise_std * cfg.noise_std)?;
        render_stochastic(&scene, &noise, g, seed)?
    } else {
        ImageStack::new(render_mean(&scene, false)?, g)?
    };
    Ok((scene, images))
}

/// Thin SVD with singular values sorted in decreasing order.
pub fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = DVector::from_fn(order.len(), |k, _| svd.singular_values[order[k]]);
    let u = DMatrix::from_fn(u.nrows(), order.len(), |i, k| u[(i, order[k])]);
    let vt = DMatrix::from_fn(order.len(), vt.ncols(), |k, j| vt[(order[k], j)]);
    (u, s, vt)
}

pub fn singular_values(m: &DMatrix<f64>) -> DVector<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(s)
}

/// Rank-`r` factorization `V ~ M L` by truncated SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricStereo {
    /// `U_r S_r`, `N_v x r`.
    pub scaled_normals: DMatrix<f64>,
    /// `V_r^T`, `r x P`.
    pub lights: DMatrix<f64>,
    pub singular_values: DVector<f64>,
}

impl PhotometricStereo {
    pub fn reconstruction(&self) -> DMatrix<f64> {
        &self.scaled_normals * &self.lights
    }
}

/// Classical photometric stereo: shape and albedo up to an invertible linear map.
pub fn svd_photometric_stereo(images: &ImageStack, rank: usize) -> Result<PhotometricStereo> {
    let p = images.num_images();
    if rank == 0 || p < rank {
        return Err(DlnError::DegenerateRank(format!(
            "rank-{rank} photometric stereo needs at least {rank} images, got {p}"
        )));
    }
    let (u, s, vt) = sorted_svd(images.pixels());
    let scaled_normals = DMatrix::from_fn(u.nrows(), rank, |i, k| u[(i, k)] * s[k]);
    let lights = vt.rows(0, rank).into_owned();
    Ok(PhotometricStereo {
        scaled_normals,
        lights,
        singular_values: s,
    })
}

//! Recognition, relighting and evaluation utilities built on inferred latents.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{check_dim, DlnError, Result};
use crate::lambertian::{render_mean, sorted_svd, ImageStack, SceneLatents};
use crate::posterior::{infer, DlnModel, InferConfig};
use crate::rng::{derive_key, label_key, stream};

/// Singular values below this fraction of the largest are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Orthonormal basis of the column space of `m`, keeping at most `max_rank` directions.
pub fn orthonormal_basis(m: &DMatrix<f64>, max_rank: usize) -> Result<DMatrix<f64>> {
    if m.ncols() == 0 || m.nrows() == 0 {
        return Err(DlnError::Empty("cannot build a subspace from an empty matrix".into()));
    }
    let (u, s, _) = sorted_svd(m);
    if s[0] == 0.0 || !s[0].is_finite() {
        return Err(DlnError::Empty("cannot build a subspace from a zero matrix".into()));
    }
    let rank = s.iter().take(max_rank).filter(|&&x| x > RANK_TOLERANCE * s[0]).count();
    Ok(u.columns(0, rank).into_owned())
}

/// Basis of `span(M)`, rows `m_i = a_i n_i`; fewer than 3 columns when `M` is rank deficient.
pub fn build_subspace(albedo: &DVector<f64>, normals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("normals rows", albedo.len(), normals.nrows())?;
    check_dim("normals columns", 3, normals.ncols())?;
    let m = DMatrix::from_fn(albedo.len(), 3, |i, k| albedo[i] * normals[(i, k)]);
    let q = orthonormal_basis(&m, 3)?;
    if q.ncols() < 3 {
        info!("scaled-normal matrix has rank {}; subspace keeps {} columns", q.ncols(), q.ncols());
    }
    Ok(q)
}

/// `|v - Q Q^T v|`.
pub fn subspace_distance(basis: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    let coeffs = basis.transpose() * v;
    (v - basis * coeffs).norm()
}

/// One subspace per labelled subject.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SubspaceGallery {
    labels: Vec<String>,
    bases: Vec<DMatrix<f64>>,
}

impl SubspaceGallery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: impl Into<String>, basis: DMatrix<f64>) -> Result<()> {
        if let Some(first) = self.bases.first() {
            check_dim("gallery basis rows", first.nrows(), basis.nrows())?;
        }
        self.labels.push(label.into());
        self.bases.push(basis);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn basis(&self, k: usize) -> &DMatrix<f64> {
        &self.bases[k]
    }
}

/// Result of classifying one image: the winning subject and every subject's score (lower is better).
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub index: usize,
    pub label: String,
    pub scores: Vec<f64>,
}

fn pick(labels: &[String], scores: Vec<f64>, method: &str) -> Classification {
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = k;
        }
    }
    let ties = scores.iter().filter(|&&s| s == scores[best]).count();
    if ties > 1 {
        info!("{method}: {ties} subjects tie at score {}; choosing the lowest index", scores[best]);
    }
    Classification {
        index: best,
        label: labels[best].clone(),
        scores,
    }
}

/// Label of the subspace with the smallest orthogonal residual.
pub fn nearest_subspace_classify(gallery: &SubspaceGallery, v: &DVector<f64>) -> Result<Classification> {
    if gallery.is_empty() {
        return Err(DlnError::Empty("empty subspace gallery".into()));
    }
    check_dim("test image", gallery.bases[0].nrows(), v.len())?;
    let scores = gallery.bases.iter().map(|q| subspace_distance(q, v)).collect();
    Ok(pick(&gallery.labels, scores, "nearest subspace"))
}

/// Training images grouped by subject.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub labels: Vec<String>,
    pub images: Vec<ImageStack>,
}

impl TrainingSet {
    pub fn new(labels: Vec<String>, images: Vec<ImageStack>) -> Result<Self> {
        check_dim("training labels", images.len(), labels.len())?;
        if let Some(first) = images.first() {
            for stack in &images {
                check_dim("training image pixels", first.num_pixels(), stack.num_pixels())?;
            }
        }
        Ok(TrainingSet { labels, images })
    }

    fn check(&self, v: &DVector<f64>) -> Result<()> {
        if self.images.is_empty() || self.images.iter().all(|s| s.num_images() == 0) {
            return Err(DlnError::Empty("empty training set".into()));
        }
        check_dim("test image", self.images[0].num_pixels(), v.len())
    }
}

/// Nearest neighbour in Euclidean distance over all training images of each subject.
pub fn baseline_nn(train: &TrainingSet, v: &DVector<f64>) -> Result<Classification> {
    train.check(v)?;
    let scores = train
        .images
        .iter()
        .map(|stack| {
            (0..stack.num_images())
                .map(|p| (stack.pixels().column(p) - v).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(pick(&train.labels, scores, "nearest neighbour"))
}

/// Largest cosine similarity; the score is `1 - cos`.
pub fn baseline_normalized_correlation(train: &TrainingSet, v: &DVector<f64>) -> Result<Classification> {
    train.check(v)?;
    let vn = v.norm();
    let scores = train
        .images
        .iter()
        .map(|stack| {
            (0..stack.num_images())
                .map(|p| {
                    let col = stack.pixels().column(p);
                    let denom = col.norm() * vn;
                    if denom == 0.0 {
                        1.0
                    } else {
                        1.0 - col.dot(v) / denom
                    }
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Ok(pick(&train.labels, scores, "normalized correlation"))
}

/// Subspaces spanned by the top `min(P, 3)` left singular vectors of each subject's images.
pub fn svd_gallery(train: &TrainingSet) -> Result<SubspaceGallery> {
    let mut gallery = SubspaceGallery::new();
    for (label, stack) in train.labels.iter().zip(&train.images) {
        gallery.push(label.clone(), orthonormal_basis(stack.pixels(), 3)?)?;
    }
    Ok(gallery)
}

pub fn baseline_svd_subspace(train: &TrainingSet, v: &DVector<f64>) -> Result<Classification> {
    train.check(v)?;
    nearest_subspace_classify(&svd_gallery(train)?, v)
}

/// Render `count` images of `(a, N)` under lights drawn from the model's light prior.
pub fn relight(model: &DlnModel, albedo: &DVector<f64>, normals: &DMatrix<f64>, count: usize, seed: u64, clamp: bool) -> Result<Vec<DVector<f64>>> {
    let mut lights = DMatrix::zeros(3, count);
    for k in 0..count {
        let l = model.lighting.sample(&mut stream(seed, &[0x7e11, k as u64]));
        lights.set_column(k, &l);
    }
    let scene = SceneLatents::new(albedo.clone(), normals.clone(), lights)?;
    let images = render_mean(&scene, clamp)?;
    Ok((0..count).map(|k| images.column(k).into_owned()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Least-squares map with `M_hat R ~ M`.
    pub transform: DMatrix<f64>,
    /// `|M_hat R - M|_F / |M|_F`.
    pub residual: f64,
    /// `M_hat` had fewer than 3 significant singular values; the pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Resolve the linear ambiguity between an estimate `m_hat` and reference `m` (both `N_v x 3`).
pub fn align_linear(m_hat: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<Alignment> {
    check_dim("aligned rows", m.nrows(), m_hat.nrows())?;
    check_dim("aligned columns", m.ncols(), m_hat.ncols())?;
    let (u, s, vt) = sorted_svd(m_hat);
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let rank = s.iter().filter(|&&x| x > RANK_TOLERANCE * smax).count();
    let rank_deficient = rank < m_hat.ncols();
    if rank_deficient {
        warn!("alignment source has rank {rank}; using the pseudo-inverse");
    }
    // R = V S^+ U^T M over the significant singular directions.
    let mut transform = DMatrix::zeros(m_hat.ncols(), m.ncols());
    for k in 0..rank {
        let coeff = u.column(k).transpose() * m / s[k];
        transform += vt.row(k).transpose() * coeff;
    }
    let norm = m.norm();
    let diff = (m_hat * &transform - m).norm();
    let residual = if norm == 0.0 { diff } else { diff / norm };
    Ok(Alignment {
        transform,
        residual,
        rank_deficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Dln,
    NearestNeighbor,
    Correlation,
    SvdSubspace,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Dln, Method::NearestNeighbor, Method::Correlation, Method::SvdSubspace];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Dln => "dln",
            Method::NearestNeighbor => "nn",
            Method::Correlation => "correlation",
            Method::SvdSubspace => "svd",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = DlnError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| DlnError::InvalidParameter(format!("unknown recognition method '{s}'")))
    }
}

/// A labelled probe image; `subset` groups probes for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct TestImage {
    pub label: String,
    pub subset: String,
    pub image: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub subset: String,
    pub method: Method,
    pub n_train: usize,
    pub errors: usize,
    pub total: usize,
}

impl ReportRow {
    pub fn error_rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.errors as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecognitionReport {
    pub labels: Vec<String>,
    /// Per method and subset; subset `all` pools every probe.
    pub rows: Vec<ReportRow>,
    /// `confusion[method][(true, predicted)]`, indexed by gallery order.
    pub confusion: BTreeMap<Method, DMatrix<usize>>,
}

impl RecognitionReport {
    pub fn error_rate(&self, method: Method, subset: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.subset == subset).map(|r| r.error_rate())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,method,n_train,error\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.subset, r.method.name(), r.n_train, r.error_rate());
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:<12} {:>4}/{:<4} errors  ({:.1}%)",
                r.subset,
                r.method.name(),
                r.errors,
                r.total,
                100.0 * r.error_rate()
            );
        }
        out
    }
}

/// Infer `(a, N)` from each subject's gallery images (one joint inference per
/// subject) and build the subject subspaces.
pub fn dln_gallery(model: &DlnModel, train: &TrainingSet, cfg: &InferConfig) -> Result<SubspaceGallery> {
    let bases: Vec<DMatrix<f64>> = train
        .labels
        .par_iter()
        .zip(train.images.par_iter())
        .map(|(label, stack)| {
            let mut c = cfg.clone();
            c.seed = derive_key(cfg.seed, &[label_key(label)]);
            let out = infer(model, stack, &c)?;
            let lat = out.average.as_ref().unwrap_or(&out.state.latents);
            build_subspace(&lat.albedo, &lat.normals)
        })
        .collect::<Result<_>>()?;
    let mut gallery = SubspaceGallery::new();
    for (label, q) in train.labels.iter().zip(bases) {
        gallery.push(label.clone(), q)?;
    }
    Ok(gallery)
}

/// Classify every probe with each requested method and tabulate error rates.
pub fn one_shot_protocol(model: &DlnModel, train: &TrainingSet, tests: &[TestImage], methods: &[Method], cfg: &InferConfig) -> Result<RecognitionReport> {
    if train.images.is_empty() {
        return Err(DlnError::Empty("empty gallery".into()));
    }
    let index: BTreeMap<&str, usize> = train.labels.iter().enumerate().map(|(k, l)| (l.as_str(), k)).collect();
    for t in tests {
        if !index.contains_key(t.label.as_str()) {
            return Err(DlnError::InvalidParameter(format!("probe label '{}' is not in the gallery", t.label)));
        }
    }
    let n_train = train.images.iter().map(|s| s.num_images()).sum::<usize>();
    let n = train.labels.len();
    let mut subsets: Vec<&str> = tests.iter().map(|t| t.subset.as_str()).collect();
    subsets.sort();
    subsets.dedup();

    let mut rows = Vec::new();
    let mut confusion = BTreeMap::new();
    for &method in methods {
        let gallery = match method {
            Method::Dln => Some(dln_gallery(model, train, cfg)?),
            Method::SvdSubspace => Some(svd_gallery(train)?),
            _ => None,
        };
        let predictions: Vec<usize> = tests
            .par_iter()
            .map(|t| {
                let c = match method {
                    Method::Dln | Method::SvdSubspace => nearest_subspace_classify(gallery.as_ref().expect("built above"), &t.image)?,
                    Method::NearestNeighbor => baseline_nn(train, &t.image)?,
                    Method::Correlation => baseline_normalized_correlation(train, &t.image)?,
                };
                Ok(c.index)
            })
            .collect::<Result<_>>()?;
        let mut conf = DMatrix::zeros(n, n);
        for (t, &pred) in tests.iter().zip(&predictions) {
            conf[(index[t.label.as_str()], pred)] += 1;
        }
        for subset in subsets.iter().copied().chain(std::iter::once("all")) {
            let (mut errors, mut total) = (0, 0);
            for (t, &pred) in tests.iter().zip(&predictions) {
                if subset == "all" || t.subset == subset {
                    total += 1;
                    if pred != index[t.label.as_str()] {
                        errors += 1;
                    }
                }
            }
            rows.push(ReportRow {
                subset: subset.to_string(),
                method,
                n_train,
                errors,
                total,
            });
        }
        confusion.insert(method, conf);
    }
    Ok(RecognitionReport {
        labels: train.labels.clone(),
        rows,
        confusion,
    })
}

//! Named-tensor container.
//!
//! Layout: a UTF-8 header of lines
//!
//! ```text
//! DLN-CONTAINER
//! version 1
//! meta <key> <value>
//! tensor <name> f64 <d0>x<d1>... <byte offset> <element count>
//! end
//! ```
//!
//! followed by the little-endian `f64` payload. Matrices are stored column-major.
//! Meta values escape `\` and newlines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::energy_models::{DbnStack, GrbmParams, RbmParams};
use crate::error::{DlnError, Result};
use crate::lambertian::{Geometry, LightingPrior, NoiseModel, SceneLatents};
use crate::posterior::DlnModel;

pub const CONTAINER_MAGIC: &str = "DLN-CONTAINER";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn vector(v: &DVector<f64>) -> Self {
        Tensor {
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    pub fn matrix(m: &DMatrix<f64>) -> Self {
        Tensor {
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\n', "\\n").replace('\r', "\\r")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    fn missing(name: &str) -> DlnError {
        DlnError::InvalidParameter(format!("container has no tensor '{name}'"))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Self::missing(name))
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 1 {
            return Err(DlnError::InvalidParameter(format!("tensor '{name}' has shape {:?}, expected a vector", t.shape)));
        }
        Ok(DVector::from_vec(t.data.clone()))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 {
            return Err(DlnError::InvalidParameter(format!("tensor '{name}' has shape {:?}, expected a matrix", t.shape)));
        }
        Ok(DMatrix::from_column_slice(t.shape[0], t.shape[1], &t.data))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.tensor(name)?;
        match t.data.as_slice() {
            [x] => Ok(*x),
            _ => Err(DlnError::InvalidParameter(format!("tensor '{name}' is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{CONTAINER_MAGIC}\nversion {CONTAINER_VERSION}\n");
        for (k, v) in &self.meta {
            if !valid_name(k) {
                return Err(DlnError::InvalidParameter(format!("invalid meta key '{k}'")));
            }
            let _ = writeln!(header, "meta {k} {}", escape(v));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !valid_name(name) {
                return Err(DlnError::InvalidParameter(format!("invalid tensor name '{name}'")));
            }
            let count: usize = t.shape.iter().product();
            if count != t.data.len() {
                return Err(DlnError::InvalidParameter(format!("tensor '{name}' has shape {:?} but {} values", t.shape, t.data.len())));
            }
            let shape = t.shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
            let _ = writeln!(header, "tensor {name} f64 {shape} {offset} {count}");
            offset += 8 * count;
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for t in self.tensors.values() {
            for x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |m: String| DlnError::format(origin, m);
        let mut pos = 0usize;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| err("truncated header".into()))?;
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| err("header is not UTF-8".into()))?.to_string();
            pos += end + 1;
            Ok(line)
        };
        if next_line()? != CONTAINER_MAGIC {
            return Err(err("not a model container (bad magic line)".into()));
        }
        let version_line = next_line()?;
        let version: u32 = version_line
            .strip_prefix("version ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| err(format!("bad version line '{version_line}'")))?;
        if version != CONTAINER_VERSION {
            return Err(err(format!("unsupported container version {version} (this build reads {CONTAINER_VERSION})")));
        }
        let mut out = Container::new();
        let mut directory = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                out.meta.insert(k.to_string(), unescape(v));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let f: Vec<&str> = rest.split(' ').collect();
                if f.len() != 5 || f[1] != "f64" {
                    return Err(err(format!("bad tensor line '{line}'")));
                }
                let shape: Vec<usize> = f[2]
                    .split('x')
                    .map(|d| d.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(format!("bad shape in '{line}'")))?;
                let offset: usize = f[3].parse().map_err(|_| err(format!("bad offset in '{line}'")))?;
                let count: usize = f[4].parse().map_err(|_| err(format!("bad count in '{line}'")))?;
                if shape.iter().product::<usize>() != count {
                    return Err(err(format!("tensor '{}' shape does not match its count", f[0])));
                }
                directory.push((f[0].to_string(), shape, offset, count));
            } else {
                return Err(err(format!("unrecognized header line '{line}'")));
            }
        }
        let payload = &bytes[pos..];
        let declared: usize = directory.iter().map(|d| 8 * d.3).sum();
        if declared != payload.len() {
            return Err(err(format!("header declares {declared} payload bytes, file has {}", payload.len())));
        }
        for (name, shape, offset, count) in directory {
            let end = offset + 8 * count;
            let raw = payload.get(offset..end).ok_or_else(|| err(format!("tensor '{name}' lies outside the payload")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
            out.tensors.insert(name, Tensor { shape, data });
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| DlnError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DlnError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    fn geometry(&self) -> Result<Geometry> {
        let get = |k: &str| -> Result<usize> {
            self.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| DlnError::InvalidParameter(format!("container meta '{k}' missing or invalid")))
        };
        Geometry::new(get("height")?, get("width")?)
    }

    fn set_geometry(&mut self, g: Geometry) {
        self.set_meta("height", g.height);
        self.set_meta("width", g.width);
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.meta("kind") {
            Some(k) if k == kind => Ok(()),
            other => Err(DlnError::InvalidParameter(format!("container holds '{}', expected '{kind}'", other.unwrap_or("?")))),
        }
    }
}

fn put_stack(c: &mut Container, prefix: &str, stack: &DbnStack) {
    let b = &stack.bottom;
    c.insert(&format!("{prefix}.grbm.weights"), Tensor::matrix(&b.weights));
    c.insert(&format!("{prefix}.grbm.visible_bias"), Tensor::vector(&b.visible_bias));
    c.insert(&format!("{prefix}.grbm.hidden_bias"), Tensor::vector(&b.hidden_bias));
    c.insert(&format!("{prefix}.grbm.visible_var"), Tensor::vector(&b.visible_var));
    c.set_meta(&format!("{prefix}.upper_layers"), stack.upper.len());
    for (k, r) in stack.upper.iter().enumerate() {
        c.insert(&format!("{prefix}.rbm{k}.weights"), Tensor::matrix(&r.weights));
        c.insert(&format!("{prefix}.rbm{k}.visible_bias"), Tensor::vector(&r.visible_bias));
        c.insert(&format!("{prefix}.rbm{k}.hidden_bias"), Tensor::vector(&r.hidden_bias));
    }
}

fn get_stack(c: &Container, prefix: &str) -> Result<DbnStack> {
    let bottom = GrbmParams::new(
        c.matrix(&format!("{prefix}.grbm.weights"))?,
        c.vector(&format!("{prefix}.grbm.visible_bias"))?,
        c.vector(&format!("{prefix}.grbm.hidden_bias"))?,
        c.vector(&format!("{prefix}.grbm.visible_var"))?,
    )?;
    let layers: usize = c
        .meta(&format!("{prefix}.upper_layers"))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DlnError::InvalidParameter(format!("container meta '{prefix}.upper_layers' missing")))?;
    let upper = (0..layers)
        .map(|k| {
            RbmParams::new(
                c.matrix(&format!("{prefix}.rbm{k}.weights"))?,
                c.vector(&format!("{prefix}.rbm{k}.visible_bias"))?,
                c.vector(&format!("{prefix}.rbm{k}.hidden_bias"))?,
            )
        })
        .collect::<Result<_>>()?;
    DbnStack::new(bottom, upper)
}

/// Store a model; `provenance` entries (config, seed) go into the meta block.
pub fn model_to_container(model: &DlnModel, provenance: &BTreeMap<String, String>) -> Container {
    let mut c = Container::new();
    for (k, v) in provenance {
        c.set_meta(&format!("config.{k}"), v);
    }
    c.set_meta("kind", "dln-model");
    c.set_geometry(model.geometry);
    put_stack(&mut c, "albedo", &model.albedo_prior);
    put_stack(&mut c, "normal", &model.normal_prior);
    c.insert("lighting.mean", Tensor::vector(&DVector::from_column_slice(model.lighting.mean.as_slice())));
    c.insert("lighting.precision", Tensor::matrix(&DMatrix::from_column_slice(3, 3, model.lighting.precision.as_slice())));
    c.insert("noise.variance", Tensor::vector(&model.noise.variance));
    c.insert("norm_penalty", Tensor::scalar(model.norm_penalty));
    c
}

pub fn model_from_container(c: &Container) -> Result<DlnModel> {
    c.expect_kind("dln-model")?;
    let mean = c.vector("lighting.mean")?;
    let precision = c.matrix("lighting.precision")?;
    if mean.len() != 3 || precision.shape() != (3, 3) {
        return Err(DlnError::InvalidParameter("light prior tensors must be 3 and 3x3".into()));
    }
    DlnModel::new(
        c.geometry()?,
        get_stack(c, "albedo")?,
        get_stack(c, "normal")?,
        LightingPrior::new(Vector3::from_column_slice(mean.as_slice()), Matrix3::from_column_slice(precision.as_slice()))?,
        NoiseModel::new(c.vector("noise.variance")?)?,
        c.scalar("norm_penalty")?,
    )
}

pub fn latents_to_container(latents: &SceneLatents, geometry: Geometry) -> Container {
    let mut c = Container::new();
    c.set_meta("kind", "dln-latents");
    c.set_geometry(geometry);
    c.insert("albedo", Tensor::vector(&latents.albedo));
    c.insert("normals", Tensor::matrix(&latents.normals));
    c.insert("lights", Tensor::matrix(&latents.lights));
    c
}

pub fn latents_from_container(c: &Container) -> Result<(SceneLatents, Geometry)> {
    c.expect_kind("dln-latents")?;
    let geometry = c.geometry()?;
    let latents = SceneLatents::new(c.vector("albedo")?, c.matrix("normals")?, c.matrix("lights")?)?;
    crate::error::check_dim("latent pixels", geometry.num_pixels(), latents.num_pixels())?;
    Ok((latents, geometry))
}

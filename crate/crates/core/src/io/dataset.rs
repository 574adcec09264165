//! Datasets on disk.
//!
//! ```text
//! root/
//!   manifest.txt        optional: height = .., width = .. (target resolution)
//!   subsets.csv         optional: subject,filename,subset
//!   <subject>/
//!     *.pgm             grayscale images, read in filename order
//!     lights.csv        optional: filename,lx,ly,lz
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::{DMatrix, DVector, Vector3};

use super::config::{read_key_values, write_key_values, KeyValues};
use super::pnm::{read_gray_image, resize_area, write_pgm};
use crate::error::{DlnError, Result};
use crate::lambertian::{Geometry, ImageStack};
use crate::learning::{Subject, SubjectBatch};

/// Upper bounds (degrees) of the light-to-camera angle of Yale B subsets 1 to 4; larger angles form subset 5.
pub const YALE_SUBSET_BOUNDS: [f64; 4] = [12.0, 25.0, 50.0, 77.0];

const IMAGE_EXTENSIONS: [&str; 3] = ["pgm", "ppm", "pnm"];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSubject {
    pub id: String,
    pub files: Vec<String>,
    pub images: ImageStack,
    /// Known light per image (`3 x P`), when a sidecar provides all of them.
    pub lights: Option<DMatrix<f64>>,
    pub subsets: Vec<Option<String>>,
}

impl DatasetSubject {
    /// Indices of images in the given subset.
    pub fn subset_indices(&self, subset: &str) -> Vec<usize> {
        (0..self.files.len()).filter(|&p| self.subsets[p].as_deref() == Some(subset)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub geometry: Geometry,
    pub subjects: Vec<DatasetSubject>,
}

impl Dataset {
    pub fn to_batch(&self) -> Result<SubjectBatch> {
        SubjectBatch::new(
            self.subjects
                .iter()
                .map(|s| Subject {
                    id: s.id.clone(),
                    images: s.images.clone(),
                })
                .collect(),
        )
    }

    pub fn num_images(&self) -> usize {
        self.subjects.iter().map(|s| s.files.len()).sum()
    }

    pub fn subset_names(&self) -> BTreeSet<String> {
        self.subjects.iter().flat_map(|s| s.subsets.iter().flatten().cloned()).collect()
    }
}

fn list_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| DlnError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| DlnError::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_image(p: &Path) -> bool {
    p.is_file() && p.extension().map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str())).unwrap_or(false)
}

fn manifest_geometry(root: &Path) -> Result<Option<Geometry>> {
    let path = root.join("manifest.txt");
    if !path.exists() {
        return Ok(None);
    }
    let kv = read_key_values(&path)?;
    let get = |k: &str| -> Result<usize> {
        kv.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| DlnError::format(&path, format!("'{k}' missing or not a positive integer")))
    };
    Geometry::new(get("height")?, get("width")?).map(Some).map_err(|e| DlnError::format(&path, e.to_string()))
}

fn read_lights(path: &Path) -> Result<BTreeMap<String, Vector3<f64>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DlnError::format(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DlnError::format(path, e.to_string()))?;
        if rec.len() != 4 {
            return Err(DlnError::format(path, format!("row {}: expected filename,lx,ly,lz", n + 1)));
        }
        let mut l = Vector3::zeros();
        for k in 0..3 {
            l[k] = rec[k + 1].trim().parse().map_err(|_| DlnError::format(path, format!("row {}: bad number '{}'", n + 1, &rec[k + 1])))?;
        }
        out.insert(rec[0].trim().to_string(), l);
    }
    Ok(out)
}

fn read_subsets(path: &Path) -> Result<BTreeMap<(String, String), String>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DlnError::format(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (n, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DlnError::format(path, e.to_string()))?;
        if rec.len() != 3 {
            return Err(DlnError::format(path, format!("row {}: expected subject,filename,subset", n + 1)));
        }
        out.insert((rec[0].trim().to_string(), rec[1].trim().to_string()), rec[2].trim().to_string());
    }
    Ok(out)
}

struct RawSubject {
    id: String,
    files: Vec<String>,
    images: Vec<(Geometry, DVector<f64>, PathBuf)>,
    lights: Vec<Option<Vector3<f64>>>,
    subsets: Vec<Option<String>>,
}

fn assemble(raw: Vec<RawSubject>, target: Option<Geometry>, root: &Path) -> Result<Dataset> {
    let geometry = match target.or_else(|| raw.iter().flat_map(|s| s.images.first()).map(|i| i.0).next()) {
        Some(g) => g,
        None => return Err(DlnError::Empty(format!("no images found under {}", root.display()))),
    };
    let mut subjects = Vec::new();
    for s in raw {
        if s.images.is_empty() {
            continue;
        }
        let mut columns = Vec::with_capacity(s.images.len());
        for (g, v, path) in &s.images {
            if *g != geometry && target.is_none() {
                return Err(DlnError::format(
                    path,
                    format!("resolution {}x{} differs from {}x{}; set a target resolution", g.height, g.width, geometry.height, geometry.width),
                ));
            }
            columns.push(resize_area(v, *g, geometry)?);
        }
        let lights = if s.lights.iter().all(Option::is_some) {
            let ls: Vec<Vector3<f64>> = s.lights.iter().flatten().copied().collect();
            Some(DMatrix::from_fn(3, ls.len(), |r, p| ls[p][r]))
        } else {
            None
        };
        subjects.push(DatasetSubject {
            images: ImageStack::from_images(geometry, &columns)?,
            id: s.id,
            files: s.files,
            lights,
            subsets: s.subsets,
        });
    }
    info!("loaded {} subjects from {} at {}x{}", subjects.len(), root.display(), geometry.height, geometry.width);
    Ok(Dataset { geometry, subjects })
}

/// Load a dataset. The resolution is `target`, else the manifest's, else the first image's;
/// images of another size are area-resized when a resolution was given and rejected otherwise.
pub fn load_dataset(root: &Path, target: Option<Geometry>) -> Result<Dataset> {
    let target = match target {
        Some(g) => Some(g),
        None => manifest_geometry(root)?,
    };
    let subsets_path = root.join("subsets.csv");
    let subsets = if subsets_path.exists() { read_subsets(&subsets_path)? } else { BTreeMap::new() };
    let mut raw = Vec::new();
    for dir in list_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let id = file_name(&dir);
        let lights_path = dir.join("lights.csv");
        let light_map = if lights_path.exists() { Some(read_lights(&lights_path)?) } else { None };
        let mut s = RawSubject {
            id: id.clone(),
            files: vec![],
            images: vec![],
            lights: vec![],
            subsets: vec![],
        };
        for path in list_sorted(&dir)?.into_iter().filter(|p| is_image(p)) {
            let name = file_name(&path);
            let (g, v) = read_gray_image(&path)?;
            s.lights.push(light_map.as_ref().and_then(|m| m.get(&name).copied()));
            s.subsets.push(subsets.get(&(id.clone(), name.clone())).cloned());
            s.files.push(name);
            s.images.push((g, v, path));
        }
        raw.push(s);
    }
    assemble(raw, target, root)
}

/// Write a dataset in the layout read by [`load_dataset`].
pub fn write_dataset(root: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| DlnError::io(root, e))?;
    let mut manifest = KeyValues::new();
    manifest.insert("height".into(), dataset.geometry.height.to_string());
    manifest.insert("width".into(), dataset.geometry.width.to_string());
    write_key_values(&root.join("manifest.txt"), &manifest)?;
    let mut subset_rows = Vec::new();
    for s in &dataset.subjects {
        let dir = root.join(&s.id);
        std::fs::create_dir_all(&dir).map_err(|e| DlnError::io(&dir, e))?;
        for (p, name) in s.files.iter().enumerate() {
            write_pgm(&dir.join(name), dataset.geometry, &s.images.image(p))?;
            if let Some(sub) = &s.subsets[p] {
                subset_rows.push([s.id.clone(), name.clone(), sub.clone()]);
            }
        }
        if let Some(l) = &s.lights {
            let path = dir.join("lights.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| DlnError::format(&path, e.to_string()))?;
            let csv_err = |e: csv::Error| DlnError::format(&path, e.to_string());
            w.write_record(["filename", "lx", "ly", "lz"]).map_err(csv_err)?;
            for (p, name) in s.files.iter().enumerate() {
                w.write_record([name.clone(), l[(0, p)].to_string(), l[(1, p)].to_string(), l[(2, p)].to_string()])
                    .map_err(csv_err)?;
            }
            w.flush().map_err(|e| DlnError::io(&path, e))?;
        }
    }
    if !subset_rows.is_empty() {
        let path = root.join("subsets.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| DlnError::format(&path, e.to_string()))?;
        let csv_err = |e: csv::Error| DlnError::format(&path, e.to_string());
        w.write_record(["subject", "filename", "subset"]).map_err(csv_err)?;
        for row in subset_rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| DlnError::io(&path, e))?;
    }
    Ok(())
}

/// Azimuth and elevation in degrees from a cropped Yale B file name such as
/// `yaleB01_P00A+010E-20.pgm`; `None` for ambient or unrecognized names.
pub fn parse_yale_b_name(name: &str) -> Option<(f64, f64)> {
    let stem = name.rsplit_once('.').map(|(s, _)| s).unwrap_or(name);
    let pose = stem.split('_').nth(1)?;
    let rest = pose.get(3..)?.strip_prefix('A')?;
    let (az, el) = rest.split_once('E')?;
    Some((az.parse().ok()?, el.parse().ok()?))
}

/// Subset 1 to 5 from the angle between light and camera axis.
pub fn yale_b_subset(azimuth_deg: f64, elevation_deg: f64) -> u8 {
    let cos = azimuth_deg.to_radians().cos() * elevation_deg.to_radians().cos();
    let angle = cos.clamp(-1.0, 1.0).acos().to_degrees();
    YALE_SUBSET_BOUNDS.iter().position(|&b| angle <= b + 1e-9).map(|k| k as u8 + 1).unwrap_or(5)
}

/// Load a cropped Yale B tree (`root/yaleBxx/*.pgm`) at the given resolution.
/// Subsets and light directions come from the file names; ambient images are skipped.
pub fn load_yale_b(root: &Path, geometry: Geometry) -> Result<Dataset> {
    let mut raw = Vec::new();
    for dir in list_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let mut s = RawSubject {
            id: file_name(&dir),
            files: vec![],
            images: vec![],
            lights: vec![],
            subsets: vec![],
        };
        for path in list_sorted(&dir)?.into_iter().filter(|p| is_image(p)) {
            let name = file_name(&path);
            let Some((az, el)) = parse_yale_b_name(&name) else { continue };
            let (g, v) = read_gray_image(&path)?;
            let (a, e) = (az.to_radians(), el.to_radians());
            s.lights.push(Some(Vector3::new(e.cos() * a.sin(), e.sin(), e.cos() * a.cos())));
            s.subsets.push(Some(yale_b_subset(az, el).to_string()));
            s.files.push(name);
            s.images.push((g, v, path));
        }
        raw.push(s);
    }
    assemble(raw, Some(geometry), root)
}

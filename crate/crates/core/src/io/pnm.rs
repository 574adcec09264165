//! Grayscale PGM / color PPM images, intensities scaled to `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType};
use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, DlnError, Result};
use crate::lambertian::Geometry;

fn to_byte(x: f64) -> u8 {
    if x.is_nan() {
        0
    } else {
        (x.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

fn encode(path: &Path, data: &[u8], geometry: Geometry, subtype: PnmSubtype, color: ExtendedColorType) -> Result<()> {
    let file = File::create(path).map_err(|e| DlnError::io(path, e))?;
    let mut w = BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(subtype)
        .encode(data, geometry.width as u32, geometry.height as u32, color)
        .map_err(|e| DlnError::format(path, e.to_string()))?;
    std::io::Write::flush(&mut w).map_err(|e| DlnError::io(path, e))
}

/// Binary P5, maxval 255; values outside `[0, 1]` are clipped.
pub fn write_pgm(path: &Path, geometry: Geometry, values: &DVector<f64>) -> Result<()> {
    check_dim("PGM pixels", geometry.num_pixels(), values.len())?;
    let bytes: Vec<u8> = values.iter().map(|&x| to_byte(x)).collect();
    encode(path, &bytes, geometry, PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
}

/// Binary P6, maxval 255, from an `N_v x 3` matrix of channel values in `[0, 1]`.
pub fn write_ppm(path: &Path, geometry: Geometry, rgb: &DMatrix<f64>) -> Result<()> {
    check_dim("PPM pixels", geometry.num_pixels(), rgb.nrows())?;
    check_dim("PPM channels", 3, rgb.ncols())?;
    let bytes: Vec<u8> = (0..rgb.nrows()).flat_map(|i| (0..3).map(move |c| to_byte(rgb[(i, c)]))).collect();
    encode(path, &bytes, geometry, PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
}

/// Display mapping of unit normals to colors, `(n + 1) / 2` per channel.
pub fn normals_to_rgb(normals: &DMatrix<f64>) -> DMatrix<f64> {
    normals.map(|x| (x + 1.0) / 2.0)
}

/// Read a PGM (P2 or P5) or PPM image as intensities in `[0, 1]`.
/// Color images are converted with Rec. 601 luma weights.
pub fn read_gray_image(path: &Path) -> Result<(Geometry, DVector<f64>)> {
    let file = File::open(path).map_err(|e| DlnError::io(path, e))?;
    let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| DlnError::format(path, e.to_string()))?;
    let img = DynamicImage::from_decoder(decoder).map_err(|e| DlnError::format(path, e.to_string()))?;
    let geometry = Geometry::new(img.height() as usize, img.width() as usize).map_err(|_| DlnError::format(path, "image has zero size"))?;
    let values: Vec<f64> = match &img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&x| x as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&x| x as f64 / 65535.0).collect(),
        other => {
            warn!("{}: color image converted to grayscale", path.display());
            let rgb = other.to_rgb32f();
            rgb.pixels().map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
        }
    };
    Ok((geometry, DVector::from_vec(values)))
}

/// Overlap weights mapping `n_in` cells onto `n_out` equal bins.
fn area_weights(n_in: usize, n_out: usize) -> DMatrix<f64> {
    let scale = n_in as f64 / n_out as f64;
    DMatrix::from_fn(n_out, n_in, |o, i| {
        let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
        let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
        overlap / scale
    })
}

/// Area-averaging resize; each output pixel is the mean of the input area it covers.
pub fn resize_area(values: &DVector<f64>, from: Geometry, to: Geometry) -> Result<DVector<f64>> {
    check_dim("resize input", from.num_pixels(), values.len())?;
    if from == to {
        return Ok(values.clone());
    }
    // Row-major pixels viewed as a (height x width) matrix.
    let img = DMatrix::from_row_slice(from.height, from.width, values.as_slice());
    let out = area_weights(from.height, to.height) * img * area_weights(from.width, to.width).transpose();
    Ok(DVector::from_iterator(to.num_pixels(), out.transpose().iter().copied()))
}

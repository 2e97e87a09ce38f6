//! 8-bit grayscale PNG rasters with a JSON sidecar.
//!
//! A value `v` in `[0, 1]` is stored as `round(v * 255)`, the same layout the
//! public gain-map datasets use, so externally produced maps load directly.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::{Deserialize, Serialize};

use super::{EnvCf, GrayMapping, GridSpec, Raster, Role};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterMeta {
    pub grid: GridSpec,
    pub role: Role,
    pub min_db: f64,
    pub max_db: f64,
    pub bs_cell: Option<(usize, usize)>,
}

impl RasterMeta {
    pub fn new(f: &EnvCf, mapping: GrayMapping, bs_cell: Option<(usize, usize)>) -> Self {
        RasterMeta { grid: *f.grid(), role: f.role(), min_db: mapping.min_db, max_db: mapping.max_db, bs_cell }
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(b: u8) -> f64 {
    b as f64 / 255.0
}

/// Round-trip a raster through 8-bit storage without touching disk.
pub fn quantize_raster(r: &Raster) -> Raster {
    r.map(|v| dequantize(quantize(v)))
}

pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

pub fn write_gray_png(path: &Path, r: &Raster) -> Result<()> {
    let bytes: Vec<u8> = r.as_slice().iter().map(|&v| quantize(v)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Default, FilterType::Adaptive);
    let side = r.side() as u32;
    enc.write_image(&bytes, side, side, ExtendedColorType::L8)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Read any image as 8-bit luma. Non-square images are rejected.
pub fn read_gray_png(path: &Path) -> Result<Raster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = ImageReader::new(BufReader::new(file))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma8();
    if img.width() != img.height() {
        return Err(Error::format(path, format!("raster is {}x{}, expected square", img.width(), img.height())));
    }
    let side = img.width() as usize;
    Raster::from_vec(side, img.into_raw().into_iter().map(dequantize).collect())
}

pub fn write_envcf(path: &Path, f: &EnvCf, meta: &RasterMeta) -> Result<()> {
    write_gray_png(path, f.pixels())?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(meta).expect("raster metadata serializes");
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

/// Load a raster and its sidecar. Without a sidecar the grid defaults to
/// 1 m cells and the caller-supplied role.
pub fn read_envcf(path: &Path, default_role: Role) -> Result<(EnvCf, Option<RasterMeta>)> {
    let pixels = read_gray_png(path)?;
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_str::<RasterMeta>(&text).map_err(|e| Error::format(&side, e.to_string()))?)
    } else {
        None
    };
    let (grid, role) = match &meta {
        Some(m) => {
            if m.grid.resolution() != pixels.side() {
                return Err(Error::format(path, "sidecar resolution does not match raster"));
            }
            (m.grid, m.role)
        }
        None => (GridSpec::new(pixels.side() as f64, pixels.side())?, default_role),
    };
    Ok((EnvCf::new(grid, pixels, role)?, meta))
}

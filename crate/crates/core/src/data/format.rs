//! Binary raster files and per-patch metadata records.
//!
//! Raster layout (little endian):
//!
//! | bytes | field                                  |
//! |-------|----------------------------------------|
//! | 4     | magic `GMTR`                           |
//! | 2     | format version (1)                     |
//! | 1     | dtype: 1 = `f32`, 2 = `u8`             |
//! | 1     | reserved, 0                            |
//! | 4     | height                                 |
//! | 4     | width                                  |
//! | 4     | bands                                  |
//! | ...   | `height * width * bands` values, pixel-major (bands interleaved) |

use std::fs;
use std::path::Path;

use super::{Image, PatchMeta};
use crate::class_balance::LabelMap;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GMTR";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 20;
const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

fn header(dtype: u8, h: usize, w: usize, b: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(0);
    for d in [h, w, b] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<(u8, usize, usize, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a raster file (bad magic)"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported raster version {version}")));
    }
    let dim = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    Ok((bytes[6], dim(8), dim(12), dim(16)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let mut bytes = header(DTYPE_F32, image.height, image.width, image.bands);
    bytes.reserve(image.data.len() * 4);
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dtype, h, w, b) = parse_header(path, &bytes)?;
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("image dtype {dtype}, expected f32")));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != h * w * b * 4 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Image { height: h, width: w, bands: b, data })
}

pub fn write_label(path: &Path, label: &LabelMap) -> Result<()> {
    let mut bytes = header(DTYPE_U8, label.height, label.width, 1);
    bytes.extend_from_slice(&label.data);
    write_file(path, &bytes)
}

pub fn read_label(path: &Path) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dtype, h, w, b) = parse_header(path, &bytes)?;
    if dtype != DTYPE_U8 || b != 1 {
        return Err(Error::format(path, "label files must be single-band u8"));
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() != h * w {
        return Err(Error::format(path, "payload size does not match header"));
    }
    LabelMap::new(h, w, body.to_vec())
}

/// `key = value` lines in a fixed order; floats use the shortest
/// representation that parses back to the same bits.
pub fn format_meta(meta: &PatchMeta) -> String {
    format!(
        "patch_id = {}\ndomain = {}\nzone = {}\nmonth = {}\nhour = {}\ncentroid_lon_m = {:?}\ncentroid_lat_m = {:?}\naltitude_m = {:?}\ncamera = {}\n",
        meta.patch_id,
        meta.domain,
        meta.zone,
        meta.month,
        meta.hour,
        meta.centroid_lon_m,
        meta.centroid_lat_m,
        meta.altitude_m,
        meta.camera
    )
}

pub fn parse_meta(path: &Path, text: &str) -> Result<PatchMeta> {
    let mut fields = std::collections::BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected `key = value`", n + 1)))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let take = |k: &str| {
        fields.get(k).cloned().ok_or_else(|| Error::format(path, format!("missing field `{k}`")))
    };
    let num = |k: &str| -> Result<f64> {
        take(k)?.parse().map_err(|_| Error::format(path, format!("field `{k}` is not a number")))
    };
    let int = |k: &str| -> Result<u8> {
        take(k)?.parse().map_err(|_| Error::format(path, format!("field `{k}` is not a small integer")))
    };
    let meta = PatchMeta {
        patch_id: take("patch_id")?,
        domain: take("domain")?,
        zone: take("zone")?,
        month: int("month")?,
        hour: int("hour")?,
        centroid_lon_m: num("centroid_lon_m")?,
        centroid_lat_m: num("centroid_lat_m")?,
        altitude_m: num("altitude_m")?,
        camera: take("camera")?,
    };
    meta.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(meta)
}

pub fn write_meta(path: &Path, meta: &PatchMeta) -> Result<()> {
    write_file(path, format_meta(meta).as_bytes())
}

pub fn read_meta(path: &Path) -> Result<PatchMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_meta(path, &text)
}

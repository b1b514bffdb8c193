//! Coordinate and timestamp encodings used as auxiliary supervision.
//!
//! A patch centroid in Lambert-93 meters is centered on a fixed origin, jittered
//! by a bounded uniform noise, and expanded into a multi-frequency sinusoidal
//! vector. The layout of that vector is a file-format contract:
//!
//! ```text
//! [ sin(lon*w_1), cos(lon*w_1), ..., sin(lon*w_K), cos(lon*w_K),
//!   sin(lat*w_1), cos(lat*w_1), ..., sin(lat*w_K), cos(lat*w_K) ]
//! with K = dim / 4 and w_i = f^(-2i/dim), i = 1..=K
//! ```
//!
//! Acquisition month and hour are encoded on the unit circle, January and
//! midnight at angle zero.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Easting of the median patch centroid (EPSG:2154, meters).
pub const DEFAULT_ORIGIN_LON_M: f64 = 489_353.59;
/// Northing of the median patch centroid (EPSG:2154, meters).
pub const DEFAULT_ORIGIN_LAT_M: f64 = 6_587_552.20;

/// A projected coordinate pair in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawCoordinate {
    pub lon_m: f64,
    pub lat_m: f64,
}

impl RawCoordinate {
    pub fn new(lon_m: f64, lat_m: f64) -> Self {
        Self { lon_m, lat_m }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Output length; must be a positive multiple of 4.
    pub dim: usize,
    pub base_frequency: f64,
    /// Half-width of the uniform jitter box, per axis.
    pub noise_radius_m: f64,
    pub origin_lon_m: f64,
    pub origin_lat_m: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            base_frequency: 20_000.0,
            noise_radius_m: 30_000.0,
            origin_lon_m: DEFAULT_ORIGIN_LON_M,
            origin_lat_m: DEFAULT_ORIGIN_LAT_M,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "encoding dim must be a positive multiple of 4, got {}",
                self.dim
            )));
        }
        if !(self.base_frequency > 0.0) || !self.base_frequency.is_finite() {
            return Err(Error::Config(format!(
                "base_frequency must be positive, got {}",
                self.base_frequency
            )));
        }
        if !(self.noise_radius_m >= 0.0) || !self.noise_radius_m.is_finite() {
            return Err(Error::Config(format!(
                "noise_radius_m must be non-negative, got {}",
                self.noise_radius_m
            )));
        }
        if !self.origin_lon_m.is_finite() || !self.origin_lat_m.is_finite() {
            return Err(Error::Config("origin must be finite".into()));
        }
        Ok(())
    }

    /// Angular frequencies `w_1 > w_2 > ... > w_{dim/4}`.
    pub fn frequencies(&self) -> Vec<f64> {
        let dim = self.dim as f64;
        (1..=self.dim / 4)
            .map(|i| self.base_frequency.powf(-2.0 * i as f64 / dim))
            .collect()
    }
}

/// Sinusoidal embedding of a coordinate pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedLocation(pub Vec<f64>);

impl EncodedLocation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn center(raw: RawCoordinate, cfg: &EncodingConfig) -> RawCoordinate {
    RawCoordinate {
        lon_m: raw.lon_m - cfg.origin_lon_m,
        lat_m: raw.lat_m - cfg.origin_lat_m,
    }
}

/// Perturbs each axis by an independent draw from `U[-radius, +radius]`.
///
/// A zero radius returns the input without consuming randomness.
pub fn inject_noise(centered: RawCoordinate, noise_radius_m: f64, rng: &mut Rng) -> RawCoordinate {
    if noise_radius_m == 0.0 {
        return centered;
    }
    let dx = rng.gen_range(-noise_radius_m..=noise_radius_m);
    let dy = rng.gen_range(-noise_radius_m..=noise_radius_m);
    RawCoordinate {
        lon_m: centered.lon_m + dx,
        lat_m: centered.lat_m + dy,
    }
}

pub fn positional_encode(centered: RawCoordinate, cfg: &EncodingConfig) -> Result<EncodedLocation> {
    cfg.validate()?;
    let freqs = cfg.frequencies();
    let mut out = Vec::with_capacity(cfg.dim);
    for value in [centered.lon_m, centered.lat_m] {
        for &w in &freqs {
            let (s, c) = (value * w).sin_cos();
            out.push(s);
            out.push(c);
        }
    }
    Ok(EncodedLocation(out))
}

/// Full supervision pipeline: center, jitter, encode.
pub fn encode_supervision(
    raw: RawCoordinate,
    cfg: &EncodingConfig,
    rng: &mut Rng,
) -> Result<EncodedLocation> {
    cfg.validate()?;
    let noisy = inject_noise(center(raw, cfg), cfg.noise_radius_m, rng);
    positional_encode(noisy, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeStamp {
    pub month: u8,
    pub hour: u8,
}

impl TimeStamp {
    pub fn new(month: u8, hour: u8) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidInput(format!("month {month} outside 1..=12")));
        }
        if hour > 23 {
            return Err(Error::InvalidInput(format!("hour {hour} outside 0..=23")));
        }
        Ok(Self { month, hour })
    }
}

/// Which cyclic fields feed the time encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeFields {
    pub use_month: bool,
    pub use_hour: bool,
    /// Add a uniform integer offset in {-1, 0, +1} before encoding.
    pub noise: bool,
}

impl Default for TimeFields {
    fn default() -> Self {
        Self {
            use_month: true,
            use_hour: true,
            noise: false,
        }
    }
}

impl TimeFields {
    /// Length of the encoded vector.
    pub fn encoded_len(&self) -> usize {
        2 * (self.use_month as usize + self.use_hour as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.use_month && !self.use_hour {
            return Err(Error::Config(
                "time encoding needs at least one of month/hour".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTime(pub Vec<f64>);

/// Circle encoding with explicit offsets, the deterministic core of
/// [`circle_encode_time`]. Offsets are added to the raw field and wrapped.
pub fn circle_encode_time_with_offsets(
    ts: TimeStamp,
    fields: TimeFields,
    month_offset: i32,
    hour_offset: i32,
) -> Result<EncodedTime> {
    fields.validate()?;
    let mut out = Vec::with_capacity(fields.encoded_len());
    if fields.use_month {
        let m = (ts.month as i32 - 1 + month_offset).rem_euclid(12);
        let (s, c) = (std::f64::consts::TAU * m as f64 / 12.0).sin_cos();
        out.extend([s, c]);
    }
    if fields.use_hour {
        let h = (ts.hour as i32 + hour_offset).rem_euclid(24);
        let (s, c) = (std::f64::consts::TAU * h as f64 / 24.0).sin_cos();
        out.extend([s, c]);
    }
    Ok(EncodedTime(out))
}

pub fn circle_encode_time(ts: TimeStamp, fields: TimeFields, rng: &mut Rng) -> Result<EncodedTime> {
    fields.validate()?;
    let (mo, ho) = if fields.noise {
        let mo = if fields.use_month { rng.gen_range(-1..=1) } else { 0 };
        let ho = if fields.use_hour { rng.gen_range(-1..=1) } else { 0 };
        (mo, ho)
    } else {
        (0, 0)
    };
    circle_encode_time_with_offsets(ts, fields, mo, ho)
}

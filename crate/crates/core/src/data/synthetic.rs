//! Synthetic geo-tagged segmentation data with controlled domain shift.
//!
//! Every patch is a layout of geometric regions (stripes, discs or nested
//! rectangles). Pixels are ranked by a shape field and cut at quantiles, so
//! each class covers exactly its configured fraction of every patch. Which
//! shape, its orientation and the order in which classes are laid out depend
//! on the patch location, so coordinates carry information about the layout
//! while per-band means stay location-independent. Each domain applies its own
//! gain and offset to the spectral bands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_patch, Image, Patch, PatchMeta};
use crate::class_balance::LabelMap;
use crate::error::{Error, Result};
use crate::geo_encoding::{DEFAULT_ORIGIN_LAT_M, DEFAULT_ORIGIN_LON_M};
use crate::rng::{child, stream};

/// Blue, green, red, near-infrared, elevation.
pub const BANDS: usize = 5;
const SPECTRAL: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_domains_source: usize,
    pub num_domains_target: usize,
    pub patches_per_domain: usize,
    pub image_size: usize,
    /// Evaluable classes; one extra "other" label is added on top.
    pub num_classes: usize,
    /// Relative spread of per-domain band gains and offsets; 0 disables the shift.
    pub shift_magnitude: f64,
    /// Pixel share per evaluable class. Empty selects a decreasing default.
    pub class_fractions: Vec<f64>,
    pub other_fraction: f64,
    /// Half-width of each domain's coordinate box.
    pub box_half_width_m: f64,
    /// Domain boxes are centred within this distance of the default origin.
    pub region_half_width_m: f64,
    pub pixel_noise: f64,
    pub geo_informative: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_domains_source: 3,
            num_domains_target: 1,
            patches_per_domain: 24,
            image_size: 64,
            num_classes: 12,
            shift_magnitude: 0.25,
            class_fractions: Vec::new(),
            other_fraction: 0.02,
            box_half_width_m: 20_000.0,
            region_half_width_m: 250_000.0,
            pixel_noise: 0.04,
            geo_informative: true,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic: {m}")));
        if self.num_domains_source == 0 && self.num_domains_target == 0 {
            return bad("at least one domain is required");
        }
        if self.num_domains_source > 99 || self.num_domains_target > 99 {
            return bad("at most 99 domains per role");
        }
        if self.patches_per_domain == 0 || self.image_size < 2 {
            return bad("patches_per_domain must be positive and image_size at least 2");
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return bad("num_classes must be in 1..=254");
        }
        if !(0.0..1.0).contains(&self.other_fraction) {
            return bad("other_fraction must be in [0, 1)");
        }
        if !self.class_fractions.is_empty() {
            if self.class_fractions.len() != self.num_classes {
                return bad("class_fractions needs one entry per class");
            }
            if self.class_fractions.iter().any(|f| !(*f >= 0.0)) || self.class_fractions.iter().sum::<f64>() <= 0.0 {
                return bad("class_fractions must be non-negative with a positive sum");
            }
        }
        for (name, v) in [
            ("shift_magnitude", self.shift_magnitude),
            ("box_half_width_m", self.box_half_width_m),
            ("region_half_width_m", self.region_half_width_m),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        if self.shift_magnitude >= 1.0 {
            return bad("shift_magnitude must be below 1");
        }
        Ok(())
    }

    /// Fractions of classes `0..num_classes` followed by "other"; sums to 1.
    pub fn fractions(&self) -> Vec<f64> {
        let raw: Vec<f64> = if self.class_fractions.is_empty() {
            (0..self.num_classes).map(|k| 0.85f64.powi(k as i32)).collect()
        } else {
            self.class_fractions.clone()
        };
        let total: f64 = raw.iter().sum();
        let mut out: Vec<f64> = raw.iter().map(|f| f / total * (1.0 - self.other_fraction)).collect();
        out.push(self.other_fraction);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    pub role: Role,
    pub center_lon_m: f64,
    pub center_lat_m: f64,
    pub gain: [f64; SPECTRAL],
    pub offset: [f64; SPECTRAL],
    pub month: u8,
}

/// Band signatures per label value, "other" last. Spectral values are spread
/// on a lattice so every pair of classes differs by at least one step in some band.
fn signatures(num_classes: usize) -> Vec<[f64; BANDS]> {
    (0..=num_classes)
        .map(|k| {
            if k == num_classes {
                return [0.5, 0.5, 0.5, 0.5, 0.1];
            }
            let mut s = [0.0; BANDS];
            let mut code = k;
            for (b, v) in s.iter_mut().take(SPECTRAL).enumerate() {
                // Three levels per band, rotated so neighbouring classes differ in several bands.
                let level = (code + b) % 3;
                code /= 3;
                *v = 0.2 + 0.3 * level as f64;
            }
            s[SPECTRAL] = 0.1 + 0.8 * ((k * 7) % 5) as f64 / 4.0;
            s
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Stripes,
    Discs,
    Rectangles,
}

fn domain_specs(cfg: &SyntheticConfig) -> Vec<DomainSpec> {
    let n = cfg.num_domains_source + cfg.num_domains_target;
    (0..n)
        .map(|d| {
            let mut rng = child(cfg.seed, stream::GENERATOR, d as u64);
            let (role, name) = if d < cfg.num_domains_source {
                (Role::Source, format!("D{:03}", d + 1))
            } else {
                (Role::Target, format!("D{:03}", 101 + d - cfg.num_domains_source))
            };
            let r = cfg.region_half_width_m;
            let center_lon_m = DEFAULT_ORIGIN_LON_M + rng.gen_range(-1.0..=1.0) * r;
            let center_lat_m = DEFAULT_ORIGIN_LAT_M + rng.gen_range(-1.0..=1.0) * r;
            let s = cfg.shift_magnitude;
            let mut gain = [1.0; SPECTRAL];
            let mut offset = [0.0; SPECTRAL];
            for b in 0..SPECTRAL {
                gain[b] = 1.0 + s * rng.gen_range(-1.0..=1.0);
                offset[b] = 0.5 * s * rng.gen_range(-1.0..=1.0);
            }
            let month = rng.gen_range(1..=12);
            DomainSpec { name, role, center_lon_m, center_lat_m, gain, offset, month }
        })
        .collect()
}

/// Layout choice for a location: shape, orientation and class order.
fn layout_for(lon: f64, lat: f64, cfg: &SyntheticConfig, rng: &mut crate::rng::Rng) -> (Shape, f64, Vec<usize>) {
    let n = cfg.num_classes + 1;
    if !cfg.geo_informative {
        let shape = [Shape::Stripes, Shape::Discs, Shape::Rectangles][rng.gen_range(0..3)];
        let theta = rng.gen_range(0.0..std::f64::consts::PI);
        let shift = rng.gen_range(0..n);
        return (shape, theta, (0..n).map(|i| (i + shift) % n).collect());
    }
    let u = ((lon - DEFAULT_ORIGIN_LON_M) / cfg.region_half_width_m.max(1.0)).clamp(-1.0, 1.0);
    let v = ((lat - DEFAULT_ORIGIN_LAT_M) / cfg.region_half_width_m.max(1.0)).clamp(-1.0, 1.0);
    let shape = match ((u + 1.0) * 1.5).floor() as usize {
        0 => Shape::Stripes,
        1 => Shape::Discs,
        _ => Shape::Rectangles,
    };
    let theta = (v + 1.0) * 0.5 * std::f64::consts::PI + rng.gen_range(-0.1..0.1);
    let shift = (((v + 1.0) * 0.5 * n as f64).floor() as usize).min(n - 1);
    let order = (0..n).map(|i| (i + shift) % n).collect();
    (shape, theta, order)
}

fn shape_field(shape: Shape, theta: f64, size: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let s = size as f64;
    let (cx, cy) = (rng.gen_range(0.25..0.75) * s, rng.gen_range(0.25..0.75) * s);
    let (ct, st) = (theta.cos(), theta.sin());
    let aspect = rng.gen_range(0.6..1.6);
    let mut field = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
            let (xr, yr) = (x * ct + y * st, -x * st + y * ct);
            field.push(match shape {
                Shape::Stripes => xr,
                Shape::Discs => (xr * xr + (yr * aspect).powi(2)).sqrt(),
                Shape::Rectangles => xr.abs().max((yr * aspect).abs()),
            });
        }
    }
    field
}

/// Assigns label values by cutting the ranked field at cumulative fractions.
fn quantile_labels(field: &[f64], fractions: &[f64], order: &[usize]) -> Vec<u8> {
    let n = field.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| field[a].total_cmp(&field[b]).then(a.cmp(&b)));
    let mut labels = vec![0u8; n];
    let mut start = 0usize;
    let mut cum = 0.0;
    for (i, &class) in order.iter().enumerate() {
        cum += fractions[class];
        let end = if i + 1 == order.len() { n } else { ((cum * n as f64).round() as usize).min(n) };
        for &p in &idx[start..end.max(start)] {
            labels[p] = class as u8;
        }
        start = end.max(start);
    }
    labels
}

fn zone_for(lon: f64, lat: f64) -> String {
    const LETTERS: [char; 4] = ['U', 'N', 'A', 'F'];
    let pick = |v: f64| LETTERS[((v / 50_000.0).floor().rem_euclid(4.0)) as usize];
    [pick(lon), pick(lat)].iter().collect()
}

fn make_patch(cfg: &SyntheticConfig, spec: &DomainSpec, index: usize, sig: &[[f64; BANDS]]) -> Patch {
    let dom = spec.name[1..].parse::<u64>().unwrap_or(0);
    let mut rng = child(cfg.seed, stream::GENERATOR, 1_000 + dom * 100_000 + index as u64);
    let h = cfg.box_half_width_m;
    let lon = spec.center_lon_m + rng.gen_range(-1.0..=1.0) * h;
    let lat = spec.center_lat_m + rng.gen_range(-1.0..=1.0) * h;

    let size = cfg.image_size;
    let (shape, theta, order) = layout_for(lon, lat, cfg, &mut rng);
    let field = shape_field(shape, theta, size, &mut rng);
    let labels = quantile_labels(&field, &cfg.fractions(), &order);

    // Smooth per-patch elevation relief, independent of the domain.
    let (fx, fy, phase, amp) = (
        rng.gen_range(0.5..2.0) / size as f64,
        rng.gen_range(0.5..2.0) / size as f64,
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..0.15),
    );
    let noise = Normal::new(0.0, cfg.pixel_noise).expect("validated noise");
    let mut image = Image::zeros(size, size, BANDS);
    for r in 0..size {
        for c in 0..size {
            let class = labels[r * size + c] as usize;
            let px = image.pixel_mut(r, c);
            for b in 0..SPECTRAL {
                let v = sig[class][b] + noise.sample(&mut rng);
                px[b] = (spec.gain[b] * v + spec.offset[b]) as f32;
            }
            let relief = amp * (std::f64::consts::TAU * (fx * c as f64 + fy * r as f64) + phase).sin();
            px[SPECTRAL] = (sig[class][SPECTRAL] + relief + noise.sample(&mut rng)) as f32;
        }
    }
    let month = ((spec.month as i32 - 1 + rng.gen_range(-1..=1)).rem_euclid(12) + 1) as u8;
    let meta = PatchMeta {
        patch_id: format!("{}-{:05}", spec.name, index),
        domain: spec.name.clone(),
        zone: zone_for(lon - DEFAULT_ORIGIN_LON_M, lat - DEFAULT_ORIGIN_LAT_M),
        month,
        hour: rng.gen_range(8..=16),
        centroid_lon_m: lon,
        centroid_lat_m: lat,
        altitude_m: 100.0 + 300.0 * (lon / 90_000.0).sin().abs() + 50.0 * amp,
        camera: format!("SYN-{}", dom % 3),
    };
    Patch { image, label: Some(LabelMap { height: size, width: size, data: labels }), meta }
}

/// Domain specs and their patches, generated in memory.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<(DomainSpec, Vec<Patch>)>> {
    cfg.validate()?;
    let sig = signatures(cfg.num_classes);
    Ok(domain_specs(cfg)
        .into_iter()
        .map(|spec| {
            let patches = (0..cfg.patches_per_domain).map(|i| make_patch(cfg, &spec, i, &sig)).collect();
            (spec, patches)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSummary {
    pub domains: Vec<DomainSpec>,
    pub patches: usize,
}

/// Writes a dataset under `root` plus a `domains.csv` describing each domain.
pub fn generate_synthetic(cfg: &SyntheticConfig, root: &Path) -> Result<GeneratedSummary> {
    let data = synthesize(cfg)?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut csv = String::from("domain,role,center_lon_m,center_lat_m,half_width_m,month");
    for b in 0..SPECTRAL {
        write!(csv, ",gain{b}").unwrap();
    }
    for b in 0..SPECTRAL {
        write!(csv, ",offset{b}").unwrap();
    }
    csv.push('\n');
    let mut patches = 0;
    let mut domains = Vec::new();
    for (spec, list) in data {
        let labeled = spec.role == Role::Source;
        for p in &list {
            write_patch(root, p, labeled)?;
        }
        patches += list.len();
        let role = if labeled { "source" } else { "target" };
        write!(
            csv,
            "{},{role},{:?},{:?},{:?},{}",
            spec.name, spec.center_lon_m, spec.center_lat_m, cfg.box_half_width_m, spec.month
        )
        .unwrap();
        for v in spec.gain.iter().chain(&spec.offset) {
            write!(csv, ",{v:?}").unwrap();
        }
        csv.push('\n');
        domains.push(spec);
    }
    let path = root.join("domains.csv");
    fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(GeneratedSummary { domains, patches })
}

//! Cropping and geometric augmentation.
//!
//! Pixel-to-ground convention: column index grows with easting, row index
//! grows as northing decreases. A crop's centroid is the patch centroid moved
//! by the displacement between the crop centre and the patch centre.

use rand::Rng as _;

use super::{Image, Patch, GSD_M};
use crate::class_balance::LabelMap;
use crate::error::{Error, Result};
use crate::rng::Rng;

fn crop_image(img: &Image, row: usize, col: usize, h: usize, w: usize) -> Image {
    let mut data = Vec::with_capacity(h * w * img.bands);
    for r in row..row + h {
        let start = (r * img.width + col) * img.bands;
        data.extend_from_slice(&img.data[start..start + w * img.bands]);
    }
    Image { height: h, width: w, bands: img.bands, data }
}

fn crop_label(label: &LabelMap, row: usize, col: usize, h: usize, w: usize) -> LabelMap {
    let mut data = Vec::with_capacity(h * w);
    for r in row..row + h {
        let start = r * label.width + col;
        data.extend_from_slice(&label.data[start..start + w]);
    }
    LabelMap { height: h, width: w, data }
}

/// Square crop of side `size` with its top-left corner at (`row`, `col`).
pub fn crop_at(patch: &Patch, row: usize, col: usize, size: usize) -> Result<Patch> {
    let (h, w) = (patch.image.height, patch.image.width);
    if size == 0 || row + size > h || col + size > w {
        return Err(Error::InvalidInput(format!(
            "crop {size}x{size} at ({row}, {col}) does not fit a {h}x{w} patch"
        )));
    }
    let mut meta = patch.meta.clone();
    // Twice the centre displacement in pixels, kept integral.
    let d_col2 = (2 * col + size) as f64 - w as f64;
    let d_row2 = (2 * row + size) as f64 - h as f64;
    meta.centroid_lon_m += d_col2 * 0.5 * GSD_M;
    meta.centroid_lat_m -= d_row2 * 0.5 * GSD_M;
    Ok(Patch {
        image: crop_image(&patch.image, row, col, size, size),
        label: patch.label.as_ref().map(|l| crop_label(l, row, col, size, size)),
        meta,
    })
}

/// Square crop of side `size` at a uniformly drawn offset.
pub fn random_crop(patch: &Patch, size: usize, rng: &mut Rng) -> Result<Patch> {
    let (h, w) = (patch.image.height, patch.image.width);
    if size == 0 || size > h || size > w {
        return Err(Error::InvalidInput(format!("crop size {size} exceeds patch {h}x{w}")));
    }
    let row = rng.gen_range(0..=h - size);
    let col = rng.gen_range(0..=w - size);
    crop_at(patch, row, col, size)
}

/// Quadrants in the order top-left, top-right, bottom-left, bottom-right.
pub fn four_crop(patch: &Patch) -> Result<[Patch; 4]> {
    let (h, w) = (patch.image.height, patch.image.width);
    if h != w || h % 2 != 0 || h == 0 {
        return Err(Error::InvalidInput(format!("four_crop needs an even square patch, got {h}x{w}")));
    }
    let s = h / 2;
    Ok([crop_at(patch, 0, 0, s)?, crop_at(patch, 0, s, s)?, crop_at(patch, s, 0, s)?, crop_at(patch, s, s, s)?])
}

/// Inverse of [`four_crop`] for label maps.
pub fn reassemble_quadrants(quads: &[LabelMap; 4]) -> Result<LabelMap> {
    let s = quads[0].height;
    if quads.iter().any(|q| q.height != s || q.width != s) {
        return Err(Error::Shape("quadrants must be equal squares".into()));
    }
    let side = 2 * s;
    let mut out = LabelMap::filled(side, side, 0);
    for (qi, q) in quads.iter().enumerate() {
        let (r0, c0) = ((qi / 2) * s, (qi % 2) * s);
        for r in 0..s {
            out.data[(r0 + r) * side + c0..(r0 + r) * side + c0 + s].copy_from_slice(&q.data[r * s..(r + 1) * s]);
        }
    }
    Ok(out)
}

/// Flips are applied first, then `rot90` quarter turns clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AugmentDraw {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

impl AugmentDraw {
    pub fn sample(rng: &mut Rng) -> Self {
        Self { hflip: rng.gen(), vflip: rng.gen(), rot90: rng.gen_range(0..4) }
    }

    pub fn is_identity(&self) -> bool {
        !self.hflip && !self.vflip && self.rot90 % 4 == 0
    }

    /// Source (row, col) feeding output (row, col) of a `side x side` grid.
    fn source(&self, side: usize, mut r: usize, mut c: usize) -> (usize, usize) {
        let last = side - 1;
        // Undo rotations: output (r, c) of a clockwise turn reads input (last - c, r).
        for _ in 0..self.rot90 % 4 {
            (r, c) = (last - c, r);
        }
        if self.vflip {
            r = last - r;
        }
        if self.hflip {
            c = last - c;
        }
        (r, c)
    }
}

fn remap<T: Copy>(data: &[T], side: usize, stride: usize, draw: &AugmentDraw) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = draw.source(side, r, c);
            let o = (sr * side + sc) * stride;
            out.extend_from_slice(&data[o..o + stride]);
        }
    }
    out
}

/// Applies a fixed draw to image and label alike. Non-square patches only
/// accept draws without rotation.
pub fn augment_with(patch: &Patch, draw: AugmentDraw) -> Result<Patch> {
    if draw.is_identity() {
        return Ok(patch.clone());
    }
    let (h, w) = (patch.image.height, patch.image.width);
    if h != w {
        return Err(Error::InvalidInput(format!("augmentation needs a square patch, got {h}x{w}")));
    }
    let image = Image { data: remap(&patch.image.data, h, patch.image.bands, &draw), ..patch.image.clone() };
    let label = patch
        .label
        .as_ref()
        .map(|l| LabelMap { height: h, width: w, data: remap(&l.data, h, 1, &draw) });
    Ok(Patch { image, label, meta: patch.meta.clone() })
}

/// Random flips and quarter turns.
pub fn augment(patch: &Patch, rng: &mut Rng) -> Result<Patch> {
    augment_with(patch, AugmentDraw::sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::class_balance::{label_frequency, DcsConfig};
    use crate::data::PatchMeta;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn patch(side: usize) -> Patch {
        let mut image = Image::zeros(side, side, 2);
        for r in 0..side {
            for c in 0..side {
                image.pixel_mut(r, c).copy_from_slice(&[r as f32, c as f32]);
            }
        }
        let label = LabelMap::new(side, side, (0..side * side).map(|i| (i % 7) as u8).collect()).unwrap();
        let meta = PatchMeta {
            patch_id: "p".into(),
            domain: "d".into(),
            zone: "UU".into(),
            month: 1,
            hour: 0,
            centroid_lon_m: 1000.0,
            centroid_lat_m: 2000.0,
            altitude_m: 0.0,
            camera: "c".into(),
        };
        Patch { image, label: Some(label), meta }
    }

    #[test]
    fn full_crop_is_identity() {
        let p = patch(8);
        assert_eq!(random_crop(&p, 8, &mut seeded(0, 0)).unwrap(), p);
    }

    #[test]
    fn corner_crop_takes_top_left_block() {
        let p = patch(8);
        let c = crop_at(&p, 0, 0, 3).unwrap();
        let l = c.label.unwrap();
        for r in 0..3 {
            for col in 0..3 {
                assert_eq!(l.get(r, col), p.label.as_ref().unwrap().get(r, col));
            }
        }
    }

    #[test]
    fn centroid_shift_follows_axis_convention() {
        // A 256 crop of a 512 patch at (256, 256) has its centre 128 px right
        // and 128 px down from the patch centre.
        let mut p = patch(4);
        p.image = Image::zeros(512, 512, 1);
        p.label = None;
        let c = crop_at(&p, 256, 256, 256).unwrap();
        assert!((c.meta.centroid_lon_m - (1000.0 + 25.6)).abs() < 1e-9);
        assert!((c.meta.centroid_lat_m - (2000.0 - 25.6)).abs() < 1e-9);
    }

    #[test]
    fn oversize_crop_is_rejected() {
        assert!(random_crop(&patch(4), 5, &mut seeded(0, 0)).is_err());
    }

    #[test]
    fn quadrants_tile_and_reassemble() {
        let p = patch(8);
        let q = four_crop(&p).unwrap();
        assert_eq!(q[1].image.pixel(0, 0), &[0.0, 4.0]);
        assert_eq!(q[2].image.pixel(0, 0), &[4.0, 0.0]);
        let labels = q.clone().map(|x| x.label.unwrap());
        assert_eq!(&reassemble_quadrants(&labels).unwrap(), p.label.as_ref().unwrap());

        let dx: Vec<f64> = q.iter().map(|x| x.meta.centroid_lon_m - 1000.0).collect();
        let dy: Vec<f64> = q.iter().map(|x| x.meta.centroid_lat_m - 2000.0).collect();
        let h = 2.0 * GSD_M;
        for (got, want) in dx.iter().zip([-h, h, -h, h]).chain(dy.iter().zip([h, h, -h, -h])) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!(dx.iter().sum::<f64>().abs() < 1e-12 && dy.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn odd_patch_cannot_be_quartered() {
        assert!(four_crop(&patch(5)).is_err());
    }

    #[test]
    fn clockwise_rotation_moves_top_left_to_top_right() {
        let p = patch(4);
        let out = augment_with(&p, AugmentDraw { rot90: 1, ..Default::default() }).unwrap();
        assert_eq!(out.image.pixel(0, 3), p.image.pixel(0, 0));
        let h = augment_with(&p, AugmentDraw { hflip: true, ..Default::default() }).unwrap();
        assert_eq!(h.image.pixel(0, 3), p.image.pixel(0, 0));
    }

    #[test]
    fn double_hflip_is_identity() {
        let p = patch(6);
        let d = AugmentDraw { hflip: true, ..Default::default() };
        assert_eq!(augment_with(&augment_with(&p, d).unwrap(), d).unwrap(), p);
        assert_eq!(augment_with(&p, AugmentDraw::default()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn marked_pixel_stays_aligned(side in 2usize..10, r in 0usize..10, c in 0usize..10,
                                      hflip: bool, vflip: bool, rot in 0u8..4, seed: u64) {
            let (r, c) = (r % side, c % side);
            let mut p = patch(side);
            p.image.data.iter_mut().for_each(|v| *v = 0.0);
            p.label = Some(LabelMap::filled(side, side, 0));
            p.image.pixel_mut(r, c)[0] = 1.0;
            p.label.as_mut().unwrap().set(r, c, 5);

            let out = augment_with(&p, AugmentDraw { hflip, vflip, rot90: rot }).unwrap();
            let crop = random_crop(&out, side.div_ceil(2), &mut seeded(seed, 0)).unwrap();
            for q in [out, crop] {
                let l = q.label.as_ref().unwrap();
                for rr in 0..q.image.height {
                    for cc in 0..q.image.width {
                        prop_assert_eq!(q.image.get(rr, cc, 0) == 1.0, l.get(rr, cc) == 5);
                    }
                }
                prop_assert_eq!(&q.meta.patch_id, &p.meta.patch_id);
            }
        }

        #[test]
        fn augmentation_keeps_label_frequencies(seed: u64) {
            let p = patch(8);
            let out = augment(&p, &mut seeded(seed, 0)).unwrap();
            let cfg = DcsConfig::with_classes(7);
            prop_assert_eq!(
                label_frequency(p.label.as_ref().unwrap(), &cfg),
                label_frequency(out.label.as_ref().unwrap(), &cfg)
            );
        }
    }
}

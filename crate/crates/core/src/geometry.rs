//! View sampling, cropping and feature-cell coordinate tracking.
//!
//! Coordinates are `(row, col)` in continuous pixel units with the origin at
//! the top-left corner of the seed image. Pixel `(i, j)` covers
//! `[i, i + 1) x [j, j + 1)`, so its center sits at `(i + 0.5, j + 0.5)`.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum seed image side accepted by [`SeedSample::new`].
pub const MIN_SEED_SIDE: usize = 8;

const PLACEMENT_RETRIES: usize = 10;

/// A seed image with optional dense and image-level supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedSample {
    /// `3 x height x width`, values in `[0, 1]`.
    pub pixels: Array3<f64>,
    pub mask: Option<Array2<u8>>,
    pub label: Option<u32>,
}

impl SeedSample {
    pub fn new(pixels: Array3<f64>, mask: Option<Array2<u8>>, label: Option<u32>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::invalid(format!("expected 3 channels, got {c}")));
        }
        if h < MIN_SEED_SIDE || w < MIN_SEED_SIDE {
            return Err(Error::invalid(format!(
                "seed image {h}x{w} is smaller than {MIN_SEED_SIDE}x{MIN_SEED_SIDE}"
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::invalid(format!(
                    "mask {:?} does not match image {h}x{w}",
                    m.dim()
                )));
            }
        }
        Ok(Self { pixels, mask, label })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Geometry of one view: a rectangle in seed-image pixels, a flip flag and the
/// output resolution the rectangle is resampled to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub crop_w: f64,
    pub crop_h: f64,
    pub hflip: bool,
    pub out_h: usize,
    pub out_w: usize,
}

impl CropRect {
    /// The whole seed image, unflipped.
    pub fn full(seed_h: usize, seed_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            crop_w: seed_w as f64,
            crop_h: seed_h as f64,
            hflip: false,
            out_h,
            out_w,
        }
    }

    pub fn validate(&self, seed_h: usize, seed_w: usize) -> Result<()> {
        let ok = self.x0 >= 0.0
            && self.y0 >= 0.0
            && self.crop_w > 0.0
            && self.crop_h > 0.0
            && self.x0 + self.crop_w <= seed_w as f64
            && self.y0 + self.crop_h <= seed_h as f64
            && self.out_h >= 1
            && self.out_w >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "crop {self:?} does not fit a {seed_h}x{seed_w} seed image"
            )))
        }
    }

    pub fn area(&self) -> f64 {
        self.crop_w * self.crop_h
    }

    /// Same rectangle shifted by `(dy, dx)`.
    pub fn translated(&self, dy: f64, dx: f64) -> Self {
        Self {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            ..*self
        }
    }
}

/// Random-resized-crop parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewSpec {
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub out_size: (usize, usize),
    pub flip_prob: f64,
}

impl Default for ViewSpec {
    fn default() -> Self {
        Self {
            area_range: (0.08, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            out_size: (64, 64),
            flip_prob: 0.5,
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws a crop whose area fraction is uniform on `area_range`.
///
/// The aspect ratio is log-uniform on the part of `aspect_range` for which a
/// crop of the drawn area fits inside the seed image, and the top-left corner is
/// uniform over all valid placements. If the feasible aspect interval stays
/// empty for a few draws, a centered crop of maximal area is returned instead.
pub fn sample_view_spec<R: Rng + ?Sized>(
    rng: &mut R,
    seed_dims: (usize, usize),
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    out_size: (usize, usize),
    flip_prob: f64,
) -> Result<CropRect> {
    let (h, w) = (seed_dims.0 as f64, seed_dims.1 as f64);
    let (lo, hi) = area_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "area range {area_range:?} must satisfy 0 < lo <= hi <= 1"
        )));
    }
    let (r_lo, r_hi) = aspect_range;
    if !(r_lo > 0.0 && r_lo <= r_hi) {
        return Err(Error::invalid(format!("aspect range {aspect_range:?} is empty")));
    }
    if seed_dims.0 == 0 || seed_dims.1 == 0 || out_size.0 == 0 || out_size.1 == 0 {
        return Err(Error::invalid("seed and output sizes must be nonzero"));
    }

    let mut placed = None;
    for _ in 0..PLACEMENT_RETRIES {
        let target = uniform(rng, lo, hi) * h * w;
        // crop_w = sqrt(target * r) <= w  and  crop_h = sqrt(target / r) <= h
        let log_lo = r_lo.ln().max((target / (h * h)).ln());
        let log_hi = r_hi.ln().min((w * w / target).ln());
        if log_lo > log_hi {
            continue;
        }
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let crop_w = (target * ratio).sqrt().min(w);
        let crop_h = (target / ratio).sqrt().min(h);
        placed = Some((crop_w, crop_h));
        break;
    }

    let (crop_w, crop_h, x0, y0) = match placed {
        Some((cw, ch)) => {
            let y0 = uniform(rng, 0.0, h - ch);
            let x0 = uniform(rng, 0.0, w - cw);
            (cw, ch, x0, y0)
        }
        None => {
            let ratio = w / h;
            let (cw, ch) = if ratio < r_lo {
                (w, (w / r_lo).min(h))
            } else if ratio > r_hi {
                ((h * r_hi).min(w), h)
            } else {
                (w, h)
            };
            (cw, ch, (w - cw) / 2.0, (h - ch) / 2.0)
        }
    };
    let hflip = flip_prob > 0.0 && rng.random::<f64>() < flip_prob;
    Ok(CropRect {
        x0,
        y0,
        crop_w,
        crop_h,
        hflip,
        out_h: out_size.0,
        out_w: out_size.1,
    })
}

/// Color jitter settings. Disabled jitter never touches the rng.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            grayscale_prob: 0.2,
        }
    }
}

/// One bilinear tap along an axis: `(lower index, upper index, upper weight)`.
pub(crate) type Tap = (usize, usize, f64);

/// Half-pixel-center bilinear taps mapping `out_len` output samples onto the
/// source interval `[start, start + extent)` of an axis with `src_len` pixels.
pub(crate) fn axis_taps(out_len: usize, start: f64, extent: f64, src_len: usize) -> Vec<Tap> {
    let scale = extent / out_len as f64;
    let last = (src_len - 1) as f64;
    (0..out_len)
        .map(|u| {
            let pos = (start + (u as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = pos.floor();
            let frac = pos - i0;
            let i0 = i0 as usize;
            (i0, (i0 + 1).min(src_len - 1), frac)
        })
        .collect()
}

/// Bilinear resampling of every channel of `src` through precomputed taps.
pub(crate) fn resample(src: &Array3<f64>, rows: &[Tap], cols: &[Tap]) -> Array3<f64> {
    let c = src.dim().0;
    let mut out = Array3::zeros((c, rows.len(), cols.len()));
    for ch in 0..c {
        let plane = src.index_axis(ndarray::Axis(0), ch);
        for (u, &(r0, r1, fy)) in rows.iter().enumerate() {
            for (v, &(c0, c1, fx)) in cols.iter().enumerate() {
                let top = plane[[r0, c0]] * (1.0 - fx) + plane[[r0, c1]] * fx;
                let bottom = plane[[r1, c0]] * (1.0 - fx) + plane[[r1, c1]] * fx;
                out[[ch, u, v]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Crops, resamples, optionally mirrors and color-jitters a seed image.
pub fn apply_view<R: Rng + ?Sized>(
    img: &SeedSample,
    crop: &CropRect,
    jitter: &AugmentConfig,
    rng: &mut R,
) -> Result<Array3<f64>> {
    let (h, w) = (img.height(), img.width());
    crop.validate(h, w)?;
    let rows = axis_taps(crop.out_h, crop.y0, crop.crop_h, h);
    let mut cols = axis_taps(crop.out_w, crop.x0, crop.crop_w, w);
    if crop.hflip {
        cols.reverse();
    }
    let mut out = resample(&img.pixels, &rows, &cols);
    if jitter.enabled {
        color_jitter(&mut out, jitter, rng);
    }
    Ok(out)
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn color_jitter<R: Rng + ?Sized>(img: &mut Array3<f64>, cfg: &AugmentConfig, rng: &mut R) {
    let (_, h, w) = img.dim();
    let brightness = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness).max(0.0);
    let contrast = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast).max(0.0);
    let saturation = uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation).max(0.0);
    let gray = rng.random::<f64>() < cfg.grayscale_prob;

    img.mapv_inplace(|x| (x * brightness).clamp(0.0, 1.0));

    let mut mean = 0.0;
    for i in 0..h {
        for j in 0..w {
            mean += luma(img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
        }
    }
    mean /= (h * w) as f64;
    img.mapv_inplace(|x| ((x - mean) * contrast + mean).clamp(0.0, 1.0));

    for i in 0..h {
        for j in 0..w {
            let y = luma(img[[0, i, j]], img[[1, i, j]], img[[2, i, j]]);
            for c in 0..3 {
                let v = if gray { y } else { (img[[c, i, j]] - y) * saturation + y };
                img[[c, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
}

/// Absolute seed-image coordinates of every cell of an `H x W` feature map.
///
/// The grid is a product lattice, stored as one coordinate per row and one per
/// column. For flipped views the column coordinates are stored reversed, so
/// cell `(i, j)` always refers to the feature map's own indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrid {
    rows: Vec<f64>,
    cols: Vec<f64>,
    pub view_id: usize,
}

impl PositionGrid {
    pub fn dims(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row_coords(&self) -> &[f64] {
        &self.rows
    }

    pub fn col_coords(&self) -> &[f64] {
        &self.cols
    }

    /// `(row, col)` of cell `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        (self.rows[i], self.cols[j])
    }

    /// `H x W x 2` array of `(row, col)` coordinates.
    pub fn coords(&self) -> Array3<f64> {
        let (h, w) = self.dims();
        Array3::from_shape_fn((h, w, 2), |(i, j, k)| if k == 0 { self.rows[i] } else { self.cols[j] })
    }

    pub fn with_view_id(mut self, id: usize) -> Self {
        self.view_id = id;
        self
    }
}

pub fn position_grid(crop: &CropRect, map_dims: (usize, usize)) -> Result<PositionGrid> {
    let (mh, mw) = map_dims;
    if mh == 0 || mw == 0 {
        return Err(Error::invalid(format!("feature map dims {map_dims:?} must be >= 1")));
    }
    let rows = (0..mh)
        .map(|i| crop.y0 + (i as f64 + 0.5) * crop.crop_h / mh as f64)
        .collect();
    let mut cols: Vec<f64> = (0..mw)
        .map(|j| crop.x0 + (j as f64 + 0.5) * crop.crop_w / mw as f64)
        .collect();
    if crop.hflip {
        cols.reverse();
    }
    Ok(PositionGrid { rows, cols, view_id: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> SeedSample {
        let px = Array3::from_shape_fn((3, h, w), |(c, i, j)| ((c * 31 + i * 7 + j * 3) % 17) as f64 / 16.0);
        SeedSample::new(px, None, None).unwrap()
    }

    #[test]
    fn full_area_crop_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = sample_view_spec(&mut rng, (100, 100), (1.0, 1.0), (1.0, 1.0), (32, 32), 0.0).unwrap();
            assert_eq!((c.x0, c.y0, c.crop_w, c.crop_h), (0.0, 0.0, 100.0, 100.0));
            assert!(!c.hflip);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            sample_view_spec(&mut rng, (80, 120), (0.08, 1.0), (0.75, 4.0 / 3.0), (64, 64), 0.5).unwrap()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn crops_fit_non_square_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let c = sample_view_spec(&mut rng, (30, 200), (0.08, 1.0), (0.75, 4.0 / 3.0), (8, 8), 0.5).unwrap();
            c.validate(30, 200).unwrap();
        }
    }

    #[test]
    fn rejects_bad_area_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_view_spec(&mut rng, (10, 10), (0.0, 1.0), (1.0, 1.0), (4, 4), 0.0).is_err());
        assert!(sample_view_spec(&mut rng, (10, 10), (0.5, 0.4), (1.0, 1.0), (4, 4), 0.0).is_err());
    }

    #[test]
    fn identity_view_is_bit_exact() {
        let img = ramp(9, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crop = CropRect::full(9, 12, 9, 12);
        let out = apply_view(&img, &crop, &AugmentConfig::off(), &mut rng).unwrap();
        assert_eq!(out, img.pixels);
    }

    #[test]
    fn flipped_identity_reverses_columns() {
        let img = ramp(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crop = CropRect {
            hflip: true,
            ..CropRect::full(8, 10, 8, 10)
        };
        let out = apply_view(&img, &crop, &AugmentConfig::off(), &mut rng).unwrap();
        let mut expected = img.pixels.clone();
        expected.invert_axis(ndarray::Axis(2));
        assert_eq!(out, expected);
    }

    #[test]
    fn bilinear_upsample_matches_hand_evaluation() {
        // 2x2 source upsampled to 4x4: sample positions along each axis are
        // (u + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1].
        let src = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let rows = axis_taps(4, 0.0, 2.0, 2);
        let cols = axis_taps(4, 0.0, 2.0, 2);
        let out = resample(&src, &rows, &cols);
        let pos = [0.0, 0.25, 0.75, 1.0];
        for (u, &y) in pos.iter().enumerate() {
            for (v, &x) in pos.iter().enumerate() {
                let hand = 0.0 * (1.0 - y) * (1.0 - x) + 1.0 * (1.0 - y) * x + 2.0 * y * (1.0 - x) + 4.0 * y * x;
                assert!((out[[0, u, v]] - hand).abs() < 1e-15, "({u},{v})");
            }
        }
    }

    #[test]
    fn jitter_stays_in_unit_range() {
        let img = ramp(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let crop = CropRect::full(16, 16, 8, 8);
        let out = apply_view(&img, &crop, &AugmentConfig::default(), &mut rng).unwrap();
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn invalid_crop_is_rejected() {
        let img = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let crop = CropRect::full(8, 9, 4, 4);
        assert!(apply_view(&img, &crop, &AugmentConfig::off(), &mut rng).is_err());
    }

    #[test]
    fn grid_centers_224() {
        let g = position_grid(&CropRect::full(224, 224, 224, 224), (7, 7)).unwrap();
        let expected = [16.0, 48.0, 80.0, 112.0, 144.0, 176.0, 208.0];
        assert_eq!(g.col_coords(), &expected);
        assert_eq!(g.row_coords(), &expected);
    }

    #[test]
    fn grid_small_examples() {
        let crop = CropRect::full(100, 100, 10, 10);
        let g = position_grid(&crop, (1, 2)).unwrap();
        assert_eq!(g.at(0, 0), (50.0, 25.0));
        assert_eq!(g.at(0, 1), (50.0, 75.0));
        let flipped = position_grid(&CropRect { hflip: true, ..crop }, (1, 2)).unwrap();
        assert_eq!(flipped.at(0, 0), (50.0, 75.0));
        assert_eq!(flipped.at(0, 1), (50.0, 25.0));
    }

    #[test]
    fn small_seed_is_rejected() {
        assert!(SeedSample::new(Array3::zeros((3, 7, 8)), None, None).is_err());
        assert!(SeedSample::new(Array3::zeros((3, 8, 8)), Some(Array2::zeros((8, 9))), None).is_err());
    }
}

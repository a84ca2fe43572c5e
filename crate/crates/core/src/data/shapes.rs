//! Synthetic scenes of colored shapes over value-noise backgrounds, with dense
//! class masks and an image-level label.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::format::quantize;
use crate::error::{Error, Result};
use crate::geometry::SeedSample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    Triangle,
}

impl ShapeKind {
    /// Area of a shape of this kind with circumradius `r` and aspect scales
    /// `(sx, sy)` (rectangles only).
    pub fn area(self, r: f64, sx: f64, sy: f64) -> f64 {
        match self {
            ShapeKind::Disk => std::f64::consts::PI * r * r,
            ShapeKind::Rectangle => 4.0 * r * r * sx * sy,
            ShapeKind::Triangle => 3.0 * 3f64.sqrt() / 4.0 * r * r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub canvas: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Circumradius range in pixels.
    pub radius: (f64, f64),
    /// Class `k + 1` is `kinds[k]`; class 0 is background.
    pub kinds: Vec<ShapeKind>,
    /// Base RGB color per shape kind.
    pub palette: Vec<[f64; 3]>,
    pub color_jitter: f64,
    /// Spacing in pixels of the background value-noise lattice.
    pub noise_cell: usize,
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            canvas: 64,
            shapes_per_image: (1, 4),
            radius: (8.0, 20.0),
            kinds: vec![ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::Triangle],
            palette: vec![[0.85, 0.3, 0.25], [0.3, 0.75, 0.35], [0.3, 0.4, 0.85]],
            color_jitter: 0.15,
            noise_cell: 16,
            noise_amplitude: 0.25,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    /// Defaults with shape radii and noise spacing scaled from the 64-pixel
    /// canvas to `canvas`.
    pub fn for_canvas(canvas: usize, seed: u64) -> Self {
        let base = Self::default();
        let k = canvas as f64 / base.canvas as f64;
        Self {
            canvas,
            radius: ((base.radius.0 * k).max(1.0), base.radius.1 * k),
            noise_cell: ((base.noise_cell as f64 * k).round() as usize).max(1),
            seed,
            ..base
        }
    }

    pub fn num_classes(&self) -> usize {
        self.kinds.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shapes_per_image;
        if self.canvas < crate::geometry::MIN_SEED_SIDE {
            return Err(Error::invalid(format!("canvas {} is too small", self.canvas)));
        }
        if lo == 0 || lo > hi {
            return Err(Error::invalid(format!(
                "bad shapes_per_image {:?}",
                self.shapes_per_image
            )));
        }
        if !(self.radius.0 >= 1.0 && self.radius.0 <= self.radius.1 && 2.0 * self.radius.1 < self.canvas as f64) {
            return Err(Error::invalid(format!("bad radius range {:?}", self.radius)));
        }
        if self.kinds.is_empty() || self.kinds.len() != self.palette.len() || self.kinds.len() > 254 {
            return Err(Error::invalid("kinds and palette must be nonempty and equally long"));
        }
        if self.noise_cell == 0 {
            return Err(Error::invalid("noise_cell must be >= 1"));
        }
        Ok(())
    }
}

/// A single shape placed on the canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// `(row, col)` of the center in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    /// Half-extent scales for rectangles, in `(0, 1]`.
    pub scale: (f64, f64),
    /// Rotation of triangles in radians.
    pub angle: f64,
    pub color: [f64; 3],
}

impl ShapeSpec {
    /// Whether the pixel centered at `(y, x)` lies inside the shape.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        match self.kind {
            ShapeKind::Disk => dy * dy + dx * dx <= self.radius * self.radius,
            ShapeKind::Rectangle => dx.abs() <= self.radius * self.scale.0 && dy.abs() <= self.radius * self.scale.1,
            ShapeKind::Triangle => {
                let v: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let t = self.angle + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        (self.radius * t.sin(), self.radius * t.cos())
                    })
                    .collect();
                let cross = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (dy - a.0) - (b.0 - a.0) * (dx - a.1);
                let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                s.iter().all(|&c| c >= 0.0) || s.iter().all(|&c| c <= 0.0)
            }
        }
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Low-frequency value noise in `[0, 1]` on a `size x size` canvas.
fn value_noise<R: Rng + ?Sized>(rng: &mut R, size: usize, cell: usize) -> Array2<f64> {
    let n = size / cell + 2;
    let lattice = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
    Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = ((i as f64 + 0.5) / cell as f64, (j as f64 + 0.5) / cell as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (ty, tx) = (smooth(y - y0 as f64), smooth(x - x0 as f64));
        let top = lattice[[y0, x0]] * (1.0 - tx) + lattice[[y0, x0 + 1]] * tx;
        let bottom = lattice[[y0 + 1, x0]] * (1.0 - tx) + lattice[[y0 + 1, x0 + 1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Draws shapes in order (later shapes occlude earlier ones) over a textured
/// background. Pixels are quantized to the on-disk byte grid.
pub fn render<R: Rng + ?Sized>(cfg: &ShapesConfig, shapes: &[ShapeSpec], rng: &mut R) -> Result<SeedSample> {
    let s = cfg.canvas;
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..0.65));
    let noise = value_noise(rng, s, cfg.noise_cell);
    let mut pixels = Array3::from_shape_fn((3, s, s), |(c, i, j)| {
        tint[c] + cfg.noise_amplitude * (noise[[i, j]] - 0.5)
    });
    let mut mask = Array2::<u8>::zeros((s, s));
    for shape in shapes {
        let class = cfg
            .kinds
            .iter()
            .position(|&k| k == shape.kind)
            .ok_or_else(|| Error::invalid(format!("shape kind {:?} not in config", shape.kind)))?
            + 1;
        for i in 0..s {
            for j in 0..s {
                if shape.contains(i as f64 + 0.5, j as f64 + 0.5) {
                    mask[[i, j]] = class as u8;
                    for c in 0..3 {
                        pixels[[c, i, j]] = shape.color[c];
                    }
                }
            }
        }
    }
    pixels.mapv_inplace(|v| quantize(v) as f64 / 255.0);
    let mut counts = vec![0usize; cfg.num_classes()];
    mask.iter().for_each(|&m| counts[m as usize] += 1);
    // dominant shape class; ties go to the smaller class id
    let label = (1..counts.len())
        .fold(None, |best: Option<usize>, k| match best {
            Some(b) if counts[b] >= counts[k] => Some(b),
            _ if counts[k] > 0 => Some(k),
            other => other,
        })
        .unwrap_or(0) as u32;
    SeedSample::new(pixels, Some(mask), Some(label))
}

fn random_shape<R: Rng + ?Sized>(cfg: &ShapesConfig, rng: &mut R) -> ShapeSpec {
    let k = rng.random_range(0..cfg.kinds.len());
    let radius = rng.random_range(cfg.radius.0..=cfg.radius.1);
    let s = cfg.canvas as f64;
    let center = (
        rng.random_range(radius..=s - radius),
        rng.random_range(radius..=s - radius),
    );
    let scale = (rng.random_range(0.6..=1.0), rng.random_range(0.6..=1.0));
    let angle = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let base = cfg.palette[k];
    let color =
        std::array::from_fn(|c| (base[c] + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0));
    ShapeSpec {
        kind: cfg.kinds[k],
        center,
        radius,
        scale,
        angle,
        color,
    }
}

/// Generates `n` scenes. Sample `i` depends only on `(cfg.seed, i)`.
pub fn gen_shapes(cfg: &ShapesConfig, n: usize) -> Result<Vec<SeedSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be >= 1"));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let count = rng.random_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
            let shapes: Vec<ShapeSpec> = (0..count).map(|_| random_shape(cfg, &mut rng)).collect();
            render(cfg, &shapes, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_disk_mask() {
        let cfg = ShapesConfig::default();
        let disk = ShapeSpec {
            kind: ShapeKind::Disk,
            center: (32.0, 30.0),
            radius: 10.0,
            scale: (1.0, 1.0),
            angle: 0.0,
            color: [1.0, 0.0, 0.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = render(&cfg, &[disk], &mut rng).unwrap();
        let mask = s.mask.as_ref().unwrap();
        for ((i, j), &m) in mask.indexed_iter() {
            let (y, x) = (i as f64 + 0.5 - 32.0, j as f64 + 0.5 - 30.0);
            let inside = y * y + x * x <= 100.0;
            assert_eq!(m, inside as u8, "pixel ({i},{j})");
            if inside {
                assert_eq!(s.pixels[[0, i, j]], 1.0);
                assert_eq!(s.pixels[[1, i, j]], 0.0);
            }
        }
        assert_eq!(s.label, Some(1));
    }

    #[test]
    fn triangle_contains_center_not_far_corner() {
        let t = ShapeSpec {
            kind: ShapeKind::Triangle,
            center: (20.0, 20.0),
            radius: 8.0,
            scale: (1.0, 1.0),
            angle: 0.3,
            color: [0.0; 3],
        };
        assert!(t.contains(20.0, 20.0));
        assert!(!t.contains(28.0, 28.0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = ShapesConfig {
            seed: 4,
            ..ShapesConfig::default()
        };
        assert_eq!(gen_shapes(&cfg, 5).unwrap(), gen_shapes(&cfg, 5).unwrap());
        let other = ShapesConfig { seed: 5, ..cfg.clone() };
        assert_ne!(gen_shapes(&cfg, 2).unwrap(), gen_shapes(&other, 2).unwrap());
    }

    #[test]
    fn zero_samples_is_an_error() {
        assert!(gen_shapes(&ShapesConfig::default(), 0).is_err());
    }
}

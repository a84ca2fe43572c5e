//! Datasets of seed images: the packed `VDSB` format, PNG directories and the
//! synthetic shapes generator.

pub mod format;
pub mod shapes;

use std::fs;
use std::io::Cursor;
use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;

pub use format::DatasetHeader;
pub use shapes::{gen_shapes, ShapeKind, ShapeSpec, ShapesConfig};

use crate::error::{Error, Result};
use crate::geometry::SeedSample;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<SeedSample>,
    /// Number of mask/label classes, 0 when unannotated.
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<SeedSample>, num_classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(Self { samples, num_classes })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_masks(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    pub fn has_labels(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// A permutation of sample indices drawn from `rng`.
    pub fn shuffled_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
    }

    /// Splits off the last `ceil(fraction * len)` samples as a held-out set.
    pub fn split(&self, holdout_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "holdout fraction {holdout_fraction} not in (0, 1)"
            )));
        }
        let n_test = ((self.len() as f64 * holdout_fraction).ceil() as usize).max(1);
        if n_test >= self.len() {
            return Err(Error::invalid(format!("cannot split {} samples", self.len())));
        }
        let cut = self.len() - n_test;
        Ok((
            Dataset::new(self.samples[..cut].to_vec(), self.num_classes)?,
            Dataset::new(self.samples[cut..].to_vec(), self.num_classes)?,
        ))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        format::encode(&self.samples, self.num_classes as u32)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Loads a `VDSB` file, or every `*.png` in a directory sorted by file name.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_dir() {
        return load_png_dir(path);
    }
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, samples) = format::decode(&buf)?;
    Dataset::new(samples, header.classes as usize)
}

/// Decodes a PNG to `3 x H x W` values in `[0, 1]`. Grayscale is replicated
/// across channels, alpha is dropped and 16-bit samples keep their high byte.
pub fn decode_png(bytes: &[u8]) -> Result<Array3<f64>> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| Error::format(0, format!("png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(0, "png image too large"))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(0, format!("png: {e}")))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(Error::format(0, "png palette was not expanded")),
    };
    let stride = info.line_size;
    Ok(Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let c = if channels < 3 { 0 } else { c };
        buf[i * stride + j * channels + c] as f64 / 255.0
    }))
}

fn load_png_dir(dir: &Path) -> Result<Dataset> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    let samples = paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let pixels = decode_png(&bytes).map_err(|e| match e {
                Error::Format { offset, msg } => Error::format(offset, format!("{}: {msg}", p.display())),
                other => other,
            })?;
            SeedSample::new(pixels, None, None)
        })
        .collect::<Result<Vec<_>>>()?;
    if samples.is_empty() {
        return Err(Error::invalid(format!("no png files in {}", dir.display())));
    }
    Dataset::new(samples, 0)
}

/// Generates a shapes dataset and writes it to `path`.
pub fn write_shapes(cfg: &ShapesConfig, n: usize, path: &Path) -> Result<Dataset> {
    let ds = Dataset::new(gen_shapes(cfg, n)?, cfg.num_classes())?;
    ds.save(path)?;
    Ok(ds)
}

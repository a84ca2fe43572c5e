//! Packed binary dataset format.
//!
//! ```text
//! b"VDSB"  u32 version  u32 count  u32 height  u32 width  u32 channels  u32 classes  u32 flags
//! per sample: u8 pixels[channels * height * width] (CHW, value / 255)
//!             u8 mask[height * width]   if flags & HAS_MASKS
//!             u32 label                 if flags & HAS_LABELS
//! ```
//!
//! All integers are little-endian. The file length must match the header exactly.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::geometry::SeedSample;

pub const MAGIC: &[u8; 4] = b"VDSB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const HAS_MASKS: u32 = 1;
pub const HAS_LABELS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub classes: u32,
    pub flags: u32,
}

impl DatasetHeader {
    pub fn has_masks(&self) -> bool {
        self.flags & HAS_MASKS != 0
    }

    pub fn has_labels(&self) -> bool {
        self.flags & HAS_LABELS != 0
    }

    fn record_len(&self) -> usize {
        let plane = self.height as usize * self.width as usize;
        let mut n = plane * self.channels as usize;
        if self.has_masks() {
            n += plane;
        }
        if self.has_labels() {
            n += 4;
        }
        n
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        for v in [
            self.version,
            self.count,
            self.height,
            self.width,
            self.channels,
            self.classes,
            self.flags,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::format(buf.len() as u64, "file shorter than the 32-byte header"));
        }
        if &buf[..4] != MAGIC {
            return Err(Error::format(0, "bad magic, expected VDSB"));
        }
        let field = |i: usize| u32::from_le_bytes(buf[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let h = Self {
            version: field(0),
            count: field(1),
            height: field(2),
            width: field(3),
            channels: field(4),
            classes: field(5),
            flags: field(6),
        };
        if h.version != VERSION {
            return Err(Error::format(4, format!("unsupported version {}", h.version)));
        }
        if h.channels != 3 {
            return Err(Error::format(
                20,
                format!("expected 3 channels, header says {}", h.channels),
            ));
        }
        Ok(h)
    }
}

/// Quantizes a `[0, 1]` value to the byte grid used on disk.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(samples: &[SeedSample], classes: u32) -> Result<Vec<u8>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("cannot encode an empty dataset"))?;
    let (c, h, w) = first.pixels.dim();
    let mut flags = 0;
    if first.mask.is_some() {
        flags |= HAS_MASKS;
    }
    if first.label.is_some() {
        flags |= HAS_LABELS;
    }
    let header = DatasetHeader {
        version: VERSION,
        count: samples.len() as u32,
        height: h as u32,
        width: w as u32,
        channels: c as u32,
        classes,
        flags,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * header.record_len());
    header.write(&mut out);
    for (i, s) in samples.iter().enumerate() {
        if s.pixels.dim() != (c, h, w)
            || s.mask.is_some() != header.has_masks()
            || s.label.is_some() != header.has_labels()
        {
            return Err(Error::invalid(format!(
                "sample {i} differs in shape or annotations from sample 0"
            )));
        }
        out.extend(s.pixels.iter().map(|&v| quantize(v)));
        if let Some(m) = &s.mask {
            out.extend(m.iter());
        }
        if let Some(l) = s.label {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<(DatasetHeader, Vec<SeedSample>)> {
    let header = DatasetHeader::read(buf)?;
    let rec = header.record_len();
    let expected = HEADER_LEN as u64 + header.count as u64 * rec as u64;
    if buf.len() as u64 != expected {
        let offset = (buf.len() as u64).min(expected);
        return Err(Error::format(
            offset,
            format!("file is {} bytes, header declares {expected}", buf.len()),
        ));
    }
    let (h, w) = (header.height as usize, header.width as usize);
    let plane = h * w;
    let mut samples = Vec::with_capacity(header.count as usize);
    for (i, chunk) in buf[HEADER_LEN..].chunks_exact(rec).enumerate() {
        let offset = (HEADER_LEN + i * rec) as u64;
        let pixels = Array3::from_shape_vec(
            (3, h, w),
            chunk[..3 * plane].iter().map(|&b| b as f64 / 255.0).collect(),
        )
        .expect("sized by header");
        let mut pos = 3 * plane;
        let mask = if header.has_masks() {
            let m = Array2::from_shape_vec((h, w), chunk[pos..pos + plane].to_vec()).expect("sized by header");
            pos += plane;
            if let Some(&bad) = m.iter().find(|&&v| header.classes > 0 && v as u32 >= header.classes) {
                return Err(Error::format(
                    offset,
                    format!("mask class {bad} >= class count {}", header.classes),
                ));
            }
            Some(m)
        } else {
            None
        };
        let label = header
            .has_labels()
            .then(|| u32::from_le_bytes(chunk[pos..pos + 4].try_into().expect("4 bytes")));
        let sample = SeedSample::new(pixels, mask, label).map_err(|e| Error::format(offset, e.to_string()))?;
        samples.push(sample);
    }
    Ok((header, samples))
}

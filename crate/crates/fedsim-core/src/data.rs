//! IDX (MNIST) file parsing. Big-endian headers per the public IDX
//! convention; gzip-compressed inputs are detected by their magic bytes and
//! inflated transparently.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A set of grayscale images, pixels normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct ImageSet {
    count: usize,
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
}

impl ImageSet {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Flattened image dimensionality (rows * cols).
    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.pixels[i * d..(i + 1) * d]
    }
}

/// Class labels in [0, 9], paired with an [`ImageSet`].
#[derive(Debug, Clone)]
pub struct LabelSet {
    labels: Vec<u8>,
}

impl LabelSet {
    pub fn from_labels(labels: Vec<u8>) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
            return Err(Error::Range(format!("label {bad} outside 0..=9")));
        }
        Ok(Self { labels })
    }

    pub fn count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated {what}: need {end} bytes, have {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Parses an IDX3 image file (magic 0x00000803). Pixel bytes are divided
/// by 255 so values land exactly in [0, 1].
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet> {
    let magic = read_be_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "image header")? as usize;
    let rows = read_be_u32(bytes, 8, "image header")? as usize;
    let cols = read_be_u32(bytes, 12, "image header")? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "image payload length mismatch: expected {expected} bytes, have {}",
            bytes.len()
        )));
    }
    let pixels = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImageSet {
        count,
        rows,
        cols,
        pixels,
    })
}

/// Parses an IDX1 label file (magic 0x00000801). Bytes above 9 are a
/// range error.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<LabelSet> {
    let magic = read_be_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let count = read_be_u32(bytes, 4, "label header")? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "label payload length mismatch: expected {expected} bytes, have {}",
            bytes.len()
        )));
    }
    LabelSet::from_labels(bytes[8..].to_vec())
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Inflates gzip-compressed bytes; passes anything else through untouched.
fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip inflate failed: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    maybe_gunzip(bytes)
}

/// Loads an IDX3 image file from disk, gunzipping if needed.
pub fn load_images(path: impl AsRef<Path>) -> Result<ImageSet> {
    parse_idx_images(&read_file(path.as_ref())?)
}

/// Loads an IDX1 label file from disk, gunzipping if needed.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelSet> {
    parse_idx_labels(&read_file(path.as_ref())?)
}

//! Synthetic MNIST-shaped datasets for tests and benchmarks: class
//! prototypes plus per-sample noise, quantized through the same byte
//! domain as real IDX data. Also writes IDX files so the full file-driven
//! pipeline can run without the real dataset.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{parse_idx_images, ImageSet, LabelSet};
use crate::error::{Error, Result};
use crate::rng;

/// Builds an [`ImageSet`] from raw pixel bytes by assembling an IDX3 image
/// and running it through the parser, so synthetic data takes the same
/// validated path as real files.
pub fn image_set_from_bytes(count: usize, rows: usize, cols: usize, bytes: &[u8]) -> Result<ImageSet> {
    if bytes.len() != count * rows * cols {
        return Err(Error::Shape(format!(
            "pixel byte count {} does not match {count}x{rows}x{cols}",
            bytes.len()
        )));
    }
    let mut v = Vec::with_capacity(16 + bytes.len());
    v.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    v.extend_from_slice(&(count as u32).to_be_bytes());
    v.extend_from_slice(&(rows as u32).to_be_bytes());
    v.extend_from_slice(&(cols as u32).to_be_bytes());
    v.extend_from_slice(bytes);
    parse_idx_images(&v)
}

/// Shape and difficulty of a generated dataset.
#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub rows: usize,
    pub cols: usize,
    pub classes: usize,
    /// Std-dev of the additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 1000,
            n_test: 200,
            rows: 8,
            cols: 8,
            classes: 10,
            noise: 0.25,
            seed: 0,
        }
    }
}

/// A generated train/test pair.
pub struct SynthDataset {
    pub train_images: ImageSet,
    pub train_labels: LabelSet,
    pub test_images: ImageSet,
    pub test_labels: LabelSet,
}

/// Deterministic class-prototype dataset: each class is a fixed random
/// template in [0,1]^dim; samples add Gaussian noise and quantize to bytes.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    assert!(cfg.classes >= 2 && cfg.classes <= 10, "classes must be 2..=10");
    let dim = cfg.rows * cfg.cols;
    let mut proto_rng = rng::stream(cfg.seed, &[rng::domain::SYNTH, 0]);
    let prototypes: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..dim).map(|_| proto_rng.random::<f64>()).collect())
        .collect();

    let make_split = |n: usize, which: u64| -> Result<(ImageSet, LabelSet)> {
        let mut rng = rng::stream(cfg.seed, &[rng::domain::SYNTH, which]);
        let mut bytes = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % cfg.classes;
            labels.push(class as u8);
            let proto = &prototypes[class];
            for &p in proto {
                let z: f64 = StandardNormal.sample(&mut rng);
                let v = (p + cfg.noise * z).clamp(0.0, 1.0);
                bytes.push((v * 255.0).round() as u8);
            }
        }
        let images = image_set_from_bytes(n, cfg.rows, cfg.cols, &bytes)?;
        let labels = LabelSet::from_labels(labels)?;
        Ok((images, labels))
    };

    let (train_images, train_labels) = make_split(cfg.n_train, 1)?;
    let (test_images, test_labels) = make_split(cfg.n_test, 2)?;
    Ok(SynthDataset {
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

fn write_bytes(path: &Path, bytes: &[u8], gz: bool) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w: Box<dyn Write> = if gz {
        Box::new(flate2::write::GzEncoder::new(
            file,
            flate2::Compression::default(),
        ))
    } else {
        Box::new(std::io::BufWriter::new(file))
    };
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Serializes an [`ImageSet`] back to IDX3 bytes (pixels re-quantized to
/// their original byte values).
pub fn idx3_bytes(images: &ImageSet) -> Vec<u8> {
    let mut v = Vec::with_capacity(16 + images.pixels().len());
    v.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    v.extend_from_slice(&(images.count() as u32).to_be_bytes());
    v.extend_from_slice(&(images.rows() as u32).to_be_bytes());
    v.extend_from_slice(&(images.cols() as u32).to_be_bytes());
    v.extend(images.pixels().iter().map(|&p| (p * 255.0).round() as u8));
    v
}

/// Serializes a [`LabelSet`] to IDX1 bytes.
pub fn idx1_bytes(labels: &LabelSet) -> Vec<u8> {
    let mut v = Vec::with_capacity(8 + labels.count());
    v.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    v.extend_from_slice(&(labels.count() as u32).to_be_bytes());
    v.extend_from_slice(labels.labels());
    v
}

/// Writes image/label IDX files (optionally gzipped) under `dir` with the
/// given stem, returning the two paths.
pub fn write_idx_pair(
    dir: &Path,
    stem: &str,
    images: &ImageSet,
    labels: &LabelSet,
    gz: bool,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    let ext = if gz { ".gz" } else { "" };
    let img_path = dir.join(format!("{stem}-images-idx3-ubyte{ext}"));
    let lbl_path = dir.join(format!("{stem}-labels-idx1-ubyte{ext}"));
    write_bytes(&img_path, &idx3_bytes(images), gz)?;
    write_bytes(&lbl_path, &idx1_bytes(labels), gz)?;
    Ok((img_path, lbl_path))
}

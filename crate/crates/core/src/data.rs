//! Labeled image datasets: MNIST IDX ingestion and the synthetic
//! glyph-plus-texture set used for the nuisance-leakage experiment.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IdxError, Result};
use crate::tensor::{Scalar, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Mnist,
    Synthetic,
}

/// Images in [0, 1] with shape (N, C, H, W) and one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub provenance: Provenance,
    /// Hidden binary attribute of each sample (synthetic data only).
    pub nuisance: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(
        images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Label { index, label, classes: num_classes });
        }
        Ok(Self { images, labels, num_classes, split, provenance, nuisance: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample (C, H, W).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split: self.split,
            provenance: self.provenance,
            nuisance: self.nuisance.as_ref().map(|nu| indices.iter().map(|&i| nu[i]).collect()),
        }
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Images and labels at `indices`, converted to `T`.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        (self.images.select_rows(indices).cast(), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Per-pixel variance of the images, averaged over pixels: the error of
    /// the best constant reconstruction.
    pub fn mean_pixel_variance(&self) -> f64 {
        let n = self.len();
        let d: usize = self.sample_shape().iter().product();
        let x = self.images.data();
        let mut total = 0.0;
        for j in 0..d {
            let mean = (0..n).map(|i| x[i * d + j] as f64).sum::<f64>() / n as f64;
            total += (0..n).map(|i| (x[i * d + j] as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        }
        total / d as f64
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(IdxError::Truncated { needed: at + 4, have: bytes.len() })
}

fn check_payload(bytes: &[u8], header: usize, dims: &[u32]) -> Result<usize, IdxError> {
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or(IdxError::Truncated { needed: usize::MAX, have: bytes.len() })?;
    let needed = header.checked_add(count).ok_or(IdxError::Truncated { needed: usize::MAX, have: bytes.len() })?;
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, have: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(IdxError::TrailingBytes { expected: needed, have: bytes.len() });
    }
    Ok(count)
}

/// Parsed IDX image file: (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::Magic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?];
    check_payload(bytes, 16, &dims)?;
    Ok((dims[0] as usize, dims[1] as usize, dims[2] as usize, &bytes[16..]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::Magic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4)?;
    check_payload(bytes, 8, &[n])?;
    let labels = &bytes[8..];
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(IdxError::BadLabel { index, label });
    }
    Ok(labels)
}

/// Build a dataset from in-memory IDX image and label files.
pub fn mnist_from_idx_bytes(images: &[u8], labels: &[u8], split: Split) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch { images: n, labels: labels.len() }.into());
    }
    let scale = 1.0f32 / 255.0;
    let data: Vec<f32> = pixels.iter().map(|&p| if p == 255 { 1.0 } else { p as f32 * scale }).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data)?;
    LabeledDataset::new(images, labels.iter().map(|&l| l as usize).collect(), 10, split, Provenance::Mnist)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Load an MNIST split from IDX files. Pixels are scaled by 1/255.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images_path = images_path.as_ref();
    let split = match images_path.file_name().and_then(|s| s.to_str()) {
        Some(name) if name.starts_with("t10k") => Split::Test,
        _ => Split::Train,
    };
    mnist_from_idx_bytes(&read(images_path)?, &read(labels_path.as_ref())?, split)
}

/// Directory holding the four MNIST IDX files: `root/mnist` when it exists,
/// otherwise `root` itself.
pub fn mnist_dir(root: impl AsRef<Path>) -> PathBuf {
    let root = root.as_ref();
    let nested = root.join("mnist");
    if nested.join("train-images-idx3-ubyte").exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load_mnist_split(root: impl AsRef<Path>, split: Split) -> Result<LabeledDataset> {
    let dir = mnist_dir(root);
    let stem = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let mut ds =
        load_mnist_idx(dir.join(format!("{stem}-images-idx3-ubyte")), dir.join(format!("{stem}-labels-idx1-ubyte")))?;
    ds.split = split;
    Ok(ds)
}

/// Parameters of the synthetic glyph/texture dataset.
///
/// Each 16x16 image holds one of four class glyphs inside the central 8x8
/// block and a stripe texture, selected by a binary nuisance attribute, on
/// the outer 3-pixel ring. The two masks are disjoint. With probability
/// `rho` the nuisance equals `class % 2`, otherwise its complement.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: usize,
    pub rho: f64,
    pub samples: usize,
    pub seed: u64,
    pub split: Split,
}

impl SyntheticSpec {
    pub fn train(samples: usize, seed: u64) -> Self {
        Self { size: 16, classes: 4, rho: 0.9, samples, seed, split: Split::Train }
    }

    pub fn test(samples: usize, seed: u64) -> Self {
        Self { size: 16, classes: 4, rho: 0.5, samples, seed, split: Split::Test }
    }
}

const GLYPH_LO: usize = 4;
const GLYPH_HI: usize = 12;
const RING: usize = 3;

/// Pixels the class glyph may occupy.
pub fn glyph_mask(size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            (GLYPH_LO..GLYPH_HI).contains(&y) && (GLYPH_LO..GLYPH_HI).contains(&x)
        })
        .collect()
}

/// Pixels the nuisance texture may occupy.
pub fn texture_mask(size: usize) -> Vec<bool> {
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            y.min(x).min(size - 1 - y).min(size - 1 - x) < RING
        })
        .collect()
}

/// 6x6 glyph bitmaps, shifted by up to 2 pixels inside the 8x8 block.
fn glyph_on(class: usize, y: usize, x: usize) -> bool {
    match class {
        0 => y == 2 || y == 3,
        1 => x == 2 || x == 3,
        2 => x == y || x + 1 == y,
        _ => y == 0 || y == 5 || x == 0 || x == 5,
    }
}

fn texture_on(nuisance: usize, y: usize, x: usize) -> bool {
    // horizontal stripes vs vertical stripes
    if nuisance == 0 {
        y % 2 == 0
    } else {
        x % 2 == 0
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.size != 16 {
        return Err(Error::config(format!("synthetic images are 16x16, got size {}", spec.size)));
    }
    if !(2..=4).contains(&spec.classes) {
        return Err(Error::config(format!("synthetic classes must be in 2..=4, got {}", spec.classes)));
    }
    if !(0.0..=1.0).contains(&spec.rho) || spec.samples == 0 {
        return Err(Error::config("synthetic rho must be in [0, 1] and samples >= 1"));
    }
    let s = spec.size;
    let glyph = glyph_mask(s);
    let texture = texture_mask(s);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match spec.split {
        Split::Train => 1,
        Split::Test => 2,
    });
    let mut data = Vec::with_capacity(spec.samples * s * s);
    let mut labels = Vec::with_capacity(spec.samples);
    let mut nuisance = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let class = rng.random_range(0..spec.classes);
        let aligned = rng.random::<f64>() < spec.rho;
        let nu = if aligned { class % 2 } else { 1 - class % 2 };
        let (oy, ox) = (rng.random_range(0..3usize), rng.random_range(0..3usize));
        let ink = rng.random_range(0.6..1.0f32);
        let amp = rng.random_range(0.4..0.8f32);
        for i in 0..s * s {
            let (y, x) = (i / s, i % s);
            let jitter = rng.random_range(-0.05..0.05f32);
            let v = if glyph[i] {
                let (gy, gx) = (y - GLYPH_LO, x - GLYPH_LO);
                let on = gy >= oy && gx >= ox && gy - oy < 6 && gx - ox < 6 && glyph_on(class, gy - oy, gx - ox);
                if on {
                    ink + jitter
                } else {
                    0.0
                }
            } else if texture[i] {
                if texture_on(nu, y, x) {
                    amp + jitter
                } else {
                    0.0
                }
            } else {
                0.0
            };
            data.push(v.clamp(0.0, 1.0));
        }
        labels.push(class);
        nuisance.push(nu);
    }
    let images = Tensor::new(&[spec.samples, 1, s, s], data)?;
    let mut ds = LabeledDataset::new(images, labels, spec.classes, spec.split, Provenance::Synthetic)?;
    ds.nuisance = Some(nuisance);
    Ok(ds)
}

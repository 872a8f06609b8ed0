//! Datasets: IDX ingestion, the synthetic digit corpus, and provenance.
//!
//! Image datasets enter the crate exclusively through the IDX format
//! (big-endian magic, big-endian u32 extents, unsigned byte payload).
//! The bundled generator renders a deterministic 10-class digit corpus
//! in the same format, so the loader path is identical whether the
//! bytes come from a real corpus on disk or from the generator.

use std::fs;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// A labeled image/point set with the batch axis first.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch_len() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.batch_len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.images.sample_shape()
    }

    /// New dataset holding the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let samples: Vec<Tensor> = indices.iter().map(|&i| self.images.sample(i)).collect();
        let images = Tensor::stack(&samples).expect("selected rows share a shape");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset { images, labels, num_classes: self.num_classes }
    }

    /// Indices of all rows whose label differs from `label`.
    pub fn other_label_indices(&self, label: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != label).collect()
    }
}

/// A dataset plus the digests of the files it was loaded from.
#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub train: Dataset,
    pub test: Dataset,
    /// (file name, sha256 hex) per source file.
    pub provenance: Vec<(String, String)>,
}

// ── IDX format ───────────────────────────────────────────────────────

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    if bytes.len() < offset + 4 {
        return Err(Error::IdxTruncated {
            path: path.to_string(),
            expected: offset + 4,
            actual: bytes.len(),
            offset,
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Parse an IDX file into its raw unsigned-byte payload and extents.
///
/// Accepts the two magics used here: 0x00000803 (3-D image tensors) and
/// 0x00000801 (1-D label vectors). The payload length is validated
/// against the product of the extents.
pub fn parse_idx(path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let magic = be_u32(&bytes, 0, &name)?;
    let ndims = match magic {
        IDX_MAGIC_IMAGES => 3,
        IDX_MAGIC_LABELS => 1,
        other => return Err(Error::IdxBadMagic { path: name, found: other }),
    };
    let mut shape = Vec::with_capacity(ndims);
    for d in 0..ndims {
        shape.push(be_u32(&bytes, 4 + 4 * d, &name)? as usize);
    }
    let header = 4 + 4 * ndims;
    let mut numel: usize = 1;
    for &e in &shape {
        numel = numel
            .checked_mul(e)
            .ok_or_else(|| Error::IdxExtentOverflow { path: name.clone(), offset: 4 })?;
    }
    let actual = bytes.len() - header;
    if actual != numel {
        return Err(Error::IdxTruncated {
            path: name,
            expected: numel,
            actual,
            offset: header,
        });
    }
    Ok((bytes[header..].to_vec(), shape))
}

pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, h: usize, w: usize) -> Result<()> {
    if pixels.len() != count * h * w {
        return Err(Error::Dataset(format!(
            "pixel buffer {} does not match {count}x{h}x{w}",
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    bytes.extend_from_slice(&(count as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Load an images/labels IDX pair into a [`Dataset`] with pixel values
/// scaled to [0,1] and shape (count, 1, H, W).
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, num_classes: usize) -> Result<Dataset> {
    let (pixels, ishape) = parse_idx(images_path)?;
    let (labels_raw, lshape) = parse_idx(labels_path)?;
    if ishape.len() != 3 {
        return Err(Error::Dataset(format!("expected 3-D image extents, got {ishape:?}")));
    }
    if lshape[0] != ishape[0] {
        return Err(Error::Dataset(format!(
            "{} images but {} labels",
            ishape[0], lshape[0]
        )));
    }
    let (count, h, w) = (ishape[0], ishape[1], ishape[2]);
    let data: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(vec![count, 1, h, w], data)?;
    let labels: Vec<usize> = labels_raw.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, num_classes)
}

// ── Synthetic digit corpus ───────────────────────────────────────────

/// 5x7 bitmaps for the ten digit glyphs.
const GLYPHS: [[u8; 7]; 10] = [
    [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110], // 0
    [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110], // 1
    [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111], // 2
    [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110], // 3
    [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010], // 4
    [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110], // 5
    [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110], // 6
    [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000], // 7
    [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110], // 8
    [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100], // 9
];

pub const DIGIT_SIDE: usize = 28;
pub const DIGIT_CLASSES: usize = 10;

/// Render one digit glyph with a random affine placement and pixel noise.
/// Output is a DIGIT_SIDE^2 buffer of u8 intensities.
fn render_digit(digit: usize, rng: &mut impl Rng) -> Vec<u8> {
    let scale = rng.gen_range(2.3..3.3);
    let angle = rng.gen_range(-0.22..0.22_f64);
    let (sin, cos) = angle.sin_cos();
    let cx = DIGIT_SIDE as f64 / 2.0 + rng.gen_range(-3.2..3.2);
    let cy = DIGIT_SIDE as f64 / 2.0 + rng.gen_range(-3.2..3.2);
    let brightness = rng.gen_range(0.72..1.0);
    let noise_sigma = rng.gen_range(0.03..0.09);
    let glyph = &GLYPHS[digit];

    let mut out = vec![0u8; DIGIT_SIDE * DIGIT_SIDE];
    for py in 0..DIGIT_SIDE {
        for px in 0..DIGIT_SIDE {
            // inverse-map pixel center into glyph space (2x2 supersampling)
            let mut coverage = 0.0;
            for (sx, sy) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                let dx = px as f64 + 0.5 + sx - cx;
                let dy = py as f64 + 0.5 + sy - cy;
                let gx = (cos * dx + sin * dy) / scale + 2.5;
                let gy = (-sin * dx + cos * dy) / scale + 3.5;
                if gx >= 0.0 && gx < 5.0 && gy >= 0.0 && gy < 7.0 {
                    let bit = (glyph[gy as usize] >> (4 - gx as usize)) & 1;
                    coverage += bit as f64;
                }
            }
            let ink = brightness * coverage / 4.0;
            // Box-Muller gaussian pixel noise
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let noise = noise_sigma * (-2.0 * u1.ln()).sqrt() * u2.cos();
            let v = (ink + noise).clamp(0.0, 1.0);
            out[py * DIGIT_SIDE + px] = (v * 255.0).round() as u8;
        }
    }
    out
}

/// Deterministically render `count` digit images with balanced class
/// labels in shuffled order. Returns raw pixel bytes and labels.
pub fn synthetic_digits(seed: u64, count: usize) -> (Vec<u8>, Vec<u8>) {
    let mut order_rng = rng::stream(seed, &[0x5157]);
    let mut labels: Vec<u8> = (0..count).map(|i| (i % DIGIT_CLASSES) as u8).collect();
    // Fisher-Yates
    for i in (1..labels.len()).rev() {
        let j = order_rng.gen_range(0..=i);
        labels.swap(i, j);
    }
    let mut pixels = Vec::with_capacity(count * DIGIT_SIDE * DIGIT_SIDE);
    for (i, &label) in labels.iter().enumerate() {
        let mut r = rng::stream(seed, &[0xd161, i as u64]);
        pixels.extend_from_slice(&render_digit(label as usize, &mut r));
    }
    (pixels, labels)
}

/// Materialize a synthetic train/test corpus as IDX files under `dir`
/// and load it back through the regular IDX path.
pub fn synthetic_dataset(dir: &Path, seed: u64, train_n: usize, test_n: usize) -> Result<DatasetHandle> {
    fs::create_dir_all(dir)?;
    let files = [
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", seed, train_n),
        ("test-images-idx3-ubyte", "test-labels-idx1-ubyte", seed ^ 0x7e57, test_n),
    ];
    for (img_name, lbl_name, s, n) in &files {
        let (pixels, labels) = synthetic_digits(*s, *n);
        write_idx_images(&dir.join(img_name), &pixels, *n, DIGIT_SIDE, DIGIT_SIDE)?;
        write_idx_labels(&dir.join(lbl_name), &labels)?;
    }
    let train = load_idx_dataset(
        &dir.join(files[0].0),
        &dir.join(files[0].1),
        DIGIT_CLASSES,
    )?;
    let test = load_idx_dataset(
        &dir.join(files[1].0),
        &dir.join(files[1].1),
        DIGIT_CLASSES,
    )?;
    let mut provenance = Vec::new();
    for (img_name, lbl_name, _, _) in &files {
        for name in [img_name, lbl_name] {
            provenance.push((name.to_string(), sha256_hex(&dir.join(name))?));
        }
    }
    Ok(DatasetHandle { train, test, provenance })
}

//! Dataset loading: CIFAR-10 binary batches, IDX image/label pairs, and a
//! deterministic synthetic image generator for desk-scale runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LqError, Result};
use crate::tensor::Tensor;

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels
const CIFAR_CLASSES: usize = 10;

/// In-memory labelled sample set. Images are stored flat, one sample after
/// another, values normalized to `[0, 1]`, channel-major.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
}

/// On-disk input format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// CIFAR-10 binary batches: `data_batch_*.bin` + `test_batch.bin`.
    CifarBinary,
    /// IDX image/label pairs (`train-images-idx3-ubyte` etc.).
    IdxImages,
    /// Generated in-process; no files required.
    Synth,
}

impl DataFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cifar-binary" => Ok(DataFormat::CifarBinary),
            "idx-images" => Ok(DataFormat::IdxImages),
            "synth" => Ok(DataFormat::Synth),
            other => Err(LqError::argument(format!("unknown dataset format '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DataFormat::CifarBinary => "cifar-binary",
            DataFormat::IdxImages => "idx-images",
            DataFormat::Synth => "synth",
        }
    }
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, data: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || data.len() != per * labels.len() {
            return Err(LqError::argument("dataset data/label sizes disagree"));
        }
        Ok(Self { sample_shape, data, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }

    /// Gathers the given sample indices into a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor { shape, data }, labels)
    }

    /// First `n` samples as a batch (capped at the dataset length).
    pub fn head_batch(&self, n: usize) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.batch(&idx)
    }

    /// Deterministic random subset: a seeded permutation picks `n` samples,
    /// which are then kept in their original order.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Fisher-Yates; only the first n draws matter.
        for i in 0..n {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        let mut chosen = idx[..n].to_vec();
        chosen.sort_unstable();
        let (batch, labels) = self.batch(&chosen);
        Dataset { sample_shape: self.sample_shape.clone(), data: batch.data, labels }
    }
}

/// Loads `(train, test)` from `path` in the given format.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<(Dataset, Dataset)> {
    match format {
        DataFormat::CifarBinary => load_cifar_dir(path),
        DataFormat::IdxImages => load_idx_dir(path),
        DataFormat::Synth => Err(LqError::argument(
            "synth datasets are generated, not loaded; use synth::generate",
        )),
    }
}

fn load_cifar_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train_files: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        if name.starts_with("data_batch_") && name.ends_with(".bin") {
            train_files.push(p);
        }
    }
    train_files.sort();
    if train_files.is_empty() {
        return Err(LqError::argument(format!(
            "no data_batch_*.bin files under {}",
            dir.display()
        )));
    }
    let mut train = CifarAccum::default();
    for f in &train_files {
        train.push_file(f)?;
    }
    let test_path = dir.join("test_batch.bin");
    let mut test = CifarAccum::default();
    test.push_file(&test_path)?;
    Ok((train.finish()?, test.finish()?))
}

#[derive(Default)]
struct CifarAccum {
    data: Vec<f32>,
    labels: Vec<usize>,
}

impl CifarAccum {
    fn push_file(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)
            .map_err(|e| LqError::argument(format!("cannot read {}: {e}", path.display())))?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(LqError::format(
                bytes.len() - bytes.len() % CIFAR_RECORD,
                format!("{}: trailing partial record", path.display()),
            ));
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(LqError::format(
                    r * CIFAR_RECORD,
                    format!("{}: label {} out of range", path.display(), label),
                ));
            }
            self.labels.push(label);
            self.data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
        Ok(())
    }

    fn finish(self) -> Result<Dataset> {
        Dataset::new(vec![3, 32, 32], self.data, self.labels)
    }
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(LqError::format(offset, "truncated header"));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)
        .map_err(|e| LqError::argument(format!("cannot read {}: {e}", images.display())))?;
    let lab = fs::read(labels)
        .map_err(|e| LqError::argument(format!("cannot read {}: {e}", labels.display())))?;

    if read_be_u32(&img, 0)? != 0x0000_0803 {
        return Err(LqError::format(0, format!("{}: bad idx3 magic", images.display())));
    }
    let n = read_be_u32(&img, 4)? as usize;
    let h = read_be_u32(&img, 8)? as usize;
    let w = read_be_u32(&img, 12)? as usize;
    if img.len() != 16 + n * h * w {
        return Err(LqError::format(img.len().min(16 + n * h * w), "idx3 payload length mismatch"));
    }
    if read_be_u32(&lab, 0)? != 0x0000_0801 {
        return Err(LqError::format(0, format!("{}: bad idx1 magic", labels.display())));
    }
    let nl = read_be_u32(&lab, 4)? as usize;
    if nl != n {
        return Err(LqError::format(4, format!("idx pair disagrees: {n} images vs {nl} labels")));
    }
    if lab.len() != 8 + n {
        return Err(LqError::format(lab.len().min(8 + n), "idx1 payload length mismatch"));
    }

    let data: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(vec![1, h, w], data, labels)
}

fn load_idx_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    Ok((train, test))
}

/// FNV-1a over the little-endian bytes of an f32 slice. Used for golden-value
/// checks and determinism audits.
pub fn checksum_f32(values: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Synthetic 10-class CIFAR-shaped image source. Class identity sets the
/// spatial frequencies of a plaid pattern; samples vary by circular shift,
/// brightness and pixel noise. Fully determined by the seed.
pub mod synth {
    use super::*;

    const SIDE: usize = 32;
    const CLASSES: usize = 10;

    fn class_pixel(class: usize, ch: usize, y: f64, x: f64) -> f64 {
        let fx = 1.0 + (class % 5) as f64;
        let fy = 1.0 + 2.0 * (class / 5) as f64;
        let chroma = 0.35 * class as f64 + 0.6 * ch as f64;
        let tau = std::f64::consts::TAU;
        128.0 + 60.0 * (tau * fx * x / SIDE as f64 + chroma).sin() * (tau * fy * y / SIDE as f64).cos()
    }

    fn render(rng: &mut ChaCha8Rng, class: usize) -> [u8; 3 * SIDE * SIDE] {
        let dx = rng.gen_range(0..SIDE);
        let dy = rng.gen_range(0..SIDE);
        let brightness: f64 = rng.gen_range(-20.0..20.0);
        let mut px = [0u8; 3 * SIDE * SIDE];
        for ch in 0..3 {
            for y in 0..SIDE {
                for x in 0..SIDE {
                    let v = class_pixel(class, ch, ((y + dy) % SIDE) as f64, ((x + dx) % SIDE) as f64)
                        + brightness
                        + rng.gen_range(-40.0..40.0);
                    px[(ch * SIDE + y) * SIDE + x] = v.clamp(0.0, 255.0) as u8;
                }
            }
        }
        px
    }

    fn make(n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let mut data = Vec::with_capacity(n * 3 * SIDE * SIDE);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % CLASSES;
            let px = render(rng, class);
            data.extend(px.iter().map(|&b| b as f32 / 255.0));
            labels.push(class);
        }
        Dataset { sample_shape: vec![3, SIDE, SIDE], data, labels }
    }

    /// Deterministic `(train, test)` pair.
    pub fn generate(n_train: usize, n_test: usize, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train = make(n_train, &mut rng);
        let test = make(n_test, &mut rng);
        (train, test)
    }

    /// Writes a dataset pair in CIFAR-10 binary layout so the file parser can
    /// be exercised without the real corpus.
    pub fn write_cifar_dir(train: &Dataset, test: &Dataset, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let encode = |ds: &Dataset| -> Vec<u8> {
            let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
            for i in 0..ds.len() {
                out.push(ds.labels[i] as u8);
                out.extend(ds.sample(i).iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
            }
            out
        };
        fs::write(dir.join("data_batch_1.bin"), encode(train))?;
        fs::write(dir.join("test_batch.bin"), encode(test))?;
        Ok(())
    }
}

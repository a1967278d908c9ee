//! Dataset provisioning: a seeded Gaussian-mixture classification task, the
//! CIFAR-10 binary batch format, and crop/flip augmentation.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, contract, Error, Result};
use crate::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x n`, one sample per row.
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
    pub provenance: String,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, n_classes: usize, split: Split, provenance: impl Into<String>) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(contract(format!("{} input rows but {} labels", inputs.nrows(), labels.len())));
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(contract("dataset inputs contain non-finite values"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(contract(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { inputs, labels, n_classes, split, provenance: provenance.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows `idx` as an owned batch.
    pub fn batch(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        (self.inputs.select(Axis(0), idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            inputs: self.inputs.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            n_classes: self.n_classes,
            split: self.split,
            provenance: format!("{} (first {n})", self.provenance),
        }
    }
}

/// Class means of the Gaussian-mixture task: `separation` times the columns of
/// a seeded random orthonormal `dim x n_classes` frame.
pub fn gmm_means(n_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Array2<f64>> {
    if n_classes < 2 || dim < 2 {
        return Err(config(format!("gmm needs n_classes >= 2 and dim >= 2 (got {n_classes}, {dim})")));
    }
    if n_classes > dim {
        return Err(config(format!("gmm places {n_classes} orthonormal means, which needs dim >= n_classes (dim = {dim})")));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(config(format!("gmm separation must be > 0, got {separation}")));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut frame: Array2<f64> = Array2::zeros((n_classes, dim));
    for c in 0..n_classes {
        loop {
            let mut v = Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng));
            for p in 0..c {
                let proj = frame.row(p).dot(&v);
                v.scaled_add(-proj, &frame.row(p));
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                frame.row_mut(c).assign(&(v / norm));
                break;
            }
        }
    }
    Ok(frame * separation)
}

/// Training split of the Gaussian-mixture task.
pub fn gen_gmm(n_classes: usize, dim: usize, separation: f64, n_per_class: usize, seed: u64) -> Result<Dataset> {
    gen_gmm_split(n_classes, dim, separation, n_per_class, seed, Split::Train)
}

/// Unit-variance isotropic clusters around [`gmm_means`]. Both splits share
/// the class means and draw samples from disjoint streams of `seed`. Labels
/// cycle through the classes, so priors are exactly uniform.
pub fn gen_gmm_split(
    n_classes: usize,
    dim: usize,
    separation: f64,
    n_per_class: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    let means = gmm_means(n_classes, dim, separation, seed)?;
    if n_per_class == 0 {
        return Err(config("gmm needs n_per_class >= 1"));
    }
    let n = n_classes * n_per_class;
    let mut rng = seeded_rng(seed, if split == Split::Train { 1 } else { 2 });
    let labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    let mut inputs = Array2::zeros((n, dim));
    for (i, mut row) in inputs.outer_iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = means[[labels[i], j]] + noise;
        }
    }
    let provenance = format!("gmm(classes={n_classes}, dim={dim}, separation={separation}, per_class={n_per_class}, seed={seed})");
    Dataset::new(inputs, labels, n_classes, split, provenance)
}

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_PIXELS: usize = 3072;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// One CIFAR-10 binary batch as raw bytes: a label byte followed by 3072
/// planar R, G, B row-major pixel bytes per record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarBatch {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

impl CifarBatch {
    pub fn parse(bytes: &[u8], name: &str) -> Result<Self> {
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{name}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            )));
        }
        let n = bytes.len() / CIFAR_RECORD;
        let mut labels = Vec::with_capacity(n);
        let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
        for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] > 9 {
                return Err(Error::Format(format!("{name}: record {i} has label byte {} (> 9)", rec[0])));
            }
            labels.push(rec[0]);
            pixels.extend_from_slice(&rec[1..]);
        }
        Ok(Self { labels, pixels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::parse(&bytes, &path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * CIFAR_RECORD);
        for (i, &l) in self.labels.iter().enumerate() {
            out.push(l);
            out.extend_from_slice(&self.pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
        }
        out
    }

    /// Pixels scaled to `[0, 1]`, one image per row.
    pub fn to_inputs(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len(), CIFAR_PIXELS), |(i, j)| self.pixels[i * CIFAR_PIXELS + j] as f64 / 255.0)
    }
}

/// Reads the standard binary batches from `dir`. The training split
/// concatenates the five data batches in filename order.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for f in files {
        let batch = CifarBatch::read(&dir.join(f))?;
        labels.extend(batch.labels.iter().map(|&l| l as usize));
        rows.push(batch.to_inputs());
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let inputs = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(inputs, labels, 10, split, format!("cifar10:{}:{}", dir.display(), split.as_str()))
}

/// Source coordinate for a shifted read with reflect padding (edge not repeated).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// Crops a 32x32 window shifted by `(dy, dx)` from the 4-pixel reflect-padded
/// image, then optionally mirrors it horizontally. `(0, 0, false)` is the identity.
pub fn crop_flip(image: &[f64], dy: isize, dx: isize, flip: bool) -> Vec<f64> {
    let n = CIFAR_SIDE;
    let mut out = vec![0.0; CIFAR_PIXELS];
    for ch in 0..3 {
        let plane = &image[ch * n * n..(ch + 1) * n * n];
        for y in 0..n {
            let sy = reflect(y as isize + dy, n);
            for x in 0..n {
                let xx = if flip { n - 1 - x } else { x };
                let sx = reflect(xx as isize + dx, n);
                out[ch * n * n + y * n + x] = plane[sy * n + sx];
            }
        }
    }
    out
}

/// Per image: reflect-pad 4, uniform random 32x32 crop, horizontal flip with
/// probability one half. Deterministic in `seed`.
pub fn augment(batch: ArrayView2<'_, f64>, seed: u64) -> Result<Array2<f64>> {
    if batch.ncols() != CIFAR_PIXELS {
        return Err(contract(format!("augment expects 3x32x32 images ({CIFAR_PIXELS} values), got {}", batch.ncols())));
    }
    let mut rng = seeded_rng(seed, 0);
    let mut out = Array2::zeros(batch.dim());
    for (src, mut dst) in batch.outer_iter().zip(out.outer_iter_mut()) {
        let dy = rng.random_range(-4i64..=4) as isize;
        let dx = rng.random_range(-4i64..=4) as isize;
        let flip = rng.random_bool(0.5);
        let img = src.to_vec();
        dst.assign(&Array1::from(crop_flip(&img, dy, dx, flip)));
    }
    Ok(out)
}

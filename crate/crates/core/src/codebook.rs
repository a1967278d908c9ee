//! Learnable discrete codebook: nearest-neighbour quantization, activation
//! statistics, and softmax-parameterized codeword weights.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{config, contract, Result};
use crate::{par, seeded_rng};

/// Codeword initialization scheme.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// Entries i.i.d. uniform on `[-1, 1]`.
    UniformBox,
    /// Entries i.i.d. `N(0, 1/D)`, so each codeword has expected power 1.
    Gaussian,
    /// Lloyd's k-means on a sample of latent vectors (rows of the view).
    KMeansOnSample(ArrayView2<'a, f64>),
}

impl Init<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            Init::UniformBox => "uniform-box",
            Init::Gaussian => "gaussian",
            Init::KMeansOnSample(_) => "kmeans-on-sample",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `K x D`, one codeword per row.
    pub codewords: Array2<f64>,
    /// Activation logits, `1 x K` when shared across components, `Q x K` otherwise.
    pub logits: Array2<f64>,
    q: usize,
}

/// Result of nearest-neighbour quantization of a latent batch.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// `B x Q` codeword indices.
    pub indices: Array2<usize>,
    /// `B x Q x D` selected codewords.
    pub z_c: Array3<f64>,
    /// Mean squared Euclidean distance over all `(b, q)`.
    pub distortion: f64,
}

impl Codebook {
    pub fn new(k: usize, d: usize, q: usize, init: Init<'_>, seed: u64) -> Result<Self> {
        Self::with_logits(k, d, q, false, init, seed)
    }

    /// Like [`Codebook::new`], optionally with one logit row per latent component.
    pub fn with_logits(
        k: usize,
        d: usize,
        q: usize,
        per_component_logits: bool,
        init: Init<'_>,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 || d == 0 || q == 0 {
            return Err(config(format!("codebook needs K >= 2, D >= 1, Q >= 1 (got K={k}, D={d}, Q={q})")));
        }
        let mut rng = seeded_rng(seed, 0);
        let codewords = match init {
            Init::UniformBox => Array2::from_shape_fn((k, d), |_| rng.random_range(-1.0..=1.0)),
            Init::Gaussian => {
                let scale = 1.0 / (d as f64).sqrt();
                Array2::from_shape_fn((k, d), |_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * scale
                })
            }
            Init::KMeansOnSample(sample) => {
                if sample.ncols() != d {
                    return Err(config(format!("k-means sample has dimension {}, expected {d}", sample.ncols())));
                }
                if sample.nrows() < k {
                    return Err(config(format!("k-means sample has {} rows, need at least K={k}", sample.nrows())));
                }
                check_finite(sample.iter(), "k-means sample")?;
                let init = forgy_init(sample, k, &mut rng);
                lloyd(sample, init, 100).0
            }
        };
        let rows = if per_component_logits { q } else { 1 };
        Ok(Self { codewords, logits: Array2::zeros((rows, k)), q })
    }

    /// Builds a codebook from explicit codewords with uniform logits.
    pub fn from_codewords(codewords: Array2<f64>, q: usize) -> Result<Self> {
        let (k, d) = codewords.dim();
        if k < 2 || d == 0 || q == 0 {
            return Err(config(format!("codebook needs K >= 2, D >= 1, Q >= 1 (got K={k}, D={d}, Q={q})")));
        }
        check_finite(codewords.iter(), "codewords")?;
        Ok(Self { codewords, logits: Array2::zeros((1, k)), q })
    }

    pub fn k(&self) -> usize {
        self.codewords.nrows()
    }

    pub fn d(&self) -> usize {
        self.codewords.ncols()
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn per_component_logits(&self) -> bool {
        self.logits.nrows() > 1
    }

    /// Logit row used by latent component `q`.
    pub fn logits_for(&self, q: usize) -> ArrayView1<'_, f64> {
        let row = if self.per_component_logits() { q } else { 0 };
        self.logits.row(row)
    }

    /// `softmax(beta^q)` for component `q`.
    pub fn weights_for(&self, q: usize) -> Result<Array1<f64>> {
        codeword_weights(self.logits_for(q))
    }

    /// Nearest-neighbour quantization; ties go to the lowest index.
    pub fn quantize(&self, z: ArrayView3<'_, f64>) -> Result<Quantized> {
        let (b, q, d) = z.dim();
        if q != self.q || d != self.d() {
            return Err(contract(format!(
                "latent batch has shape {b}x{q}x{d}, codebook expects Bx{}x{}",
                self.q,
                self.d()
            )));
        }
        check_finite(z.iter(), "latent batch")?;
        let flat = z.to_shape((b * q, d)).map_err(|e| contract(e.to_string()))?;
        let hits = par::map_range(b * q, |i| nearest(&self.codewords, flat.row(i)));
        let mut indices = Array2::zeros((b, q));
        let mut z_c = Array3::zeros((b, q, d));
        let mut total = 0.0;
        for (i, &(k, dist)) in hits.iter().enumerate() {
            let (bi, qi) = (i / q, i % q);
            indices[[bi, qi]] = k;
            z_c.index_axis_mut(Axis(0), bi).row_mut(qi).assign(&self.codewords.row(k));
            total += dist;
        }
        let distortion = if hits.is_empty() { 0.0 } else { total / hits.len() as f64 };
        Ok(Quantized { indices, z_c, distortion })
    }

    pub fn check_invariants(&self) -> Result<()> {
        check_finite(self.codewords.iter(), "codewords")?;
        check_finite(self.logits.iter(), "logits")
    }
}

/// Index and squared distance of the nearest row of `codewords` to `x`.
pub(crate) fn nearest(codewords: &Array2<f64>, x: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, e) in codewords.outer_iter().enumerate() {
        let dist: f64 = e.iter().zip(x.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (k, dist);
        }
    }
    best
}

/// Empirical codeword-usage distribution of a batch of indices.
pub fn activation_pmf(indices: ArrayView2<'_, usize>, k: usize) -> Result<Array1<f64>> {
    let mut counts = Array1::<f64>::zeros(k);
    for &i in indices.iter() {
        if i >= k {
            return Err(contract(format!("codeword index {i} out of range for K={k}")));
        }
        counts[i] += 1.0;
    }
    let n = indices.len();
    if n == 0 {
        return Err(contract("activation pmf of an empty batch"));
    }
    Ok(counts / n as f64)
}

/// Numerically stable softmax.
pub fn codeword_weights(logits: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    check_finite(logits.iter(), "logits")?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w = logits.mapv(|b| (b - max).exp());
    let s = w.sum();
    w /= s;
    Ok(w)
}

/// `2^H(pmf)`, with `H` in bits.
pub fn perplexity(pmf: ArrayView1<'_, f64>) -> Result<f64> {
    Ok(crate::modem::discrete_entropy(pmf)?.exp2())
}

/// Forgy initialization: `k` distinct rows of the sample chosen at random.
pub fn forgy_init<R: Rng>(sample: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let picks = rand::seq::index::sample(rng, sample.nrows(), k);
    let mut out = Array2::zeros((k, sample.ncols()));
    for (row, i) in picks.iter().enumerate() {
        out.row_mut(row).assign(&sample.row(i));
    }
    out
}

/// Lloyd's algorithm from the given centres. Returns the centres and the final
/// mean squared quantization distortion. Empty clusters keep their centre.
pub fn lloyd(sample: ArrayView2<'_, f64>, mut centres: Array2<f64>, max_iter: usize) -> (Array2<f64>, f64) {
    let (n, d) = sample.dim();
    let k = centres.nrows();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let hits = par::map_range(n, |i| nearest(&centres, sample.row(i)).0);
        if hits == assign {
            break;
        }
        assign = hits;
        let mut sums = Array2::<f64>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += &sample.row(i);
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let distortion = quantization_distortion(sample, &centres);
    (centres, distortion)
}

/// Mean squared distance of each sample row to its nearest centre.
pub fn quantization_distortion(sample: ArrayView2<'_, f64>, centres: &Array2<f64>) -> f64 {
    let n = sample.nrows();
    let d: Vec<f64> = par::map_range(n, |i| nearest(centres, sample.row(i)).1);
    d.iter().sum::<f64>() / n as f64
}

pub(crate) fn check_finite<'a>(mut values: impl Iterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        return Err(contract(format!("{what} contains non-finite entries")));
    }
    Ok(())
}

//! Encoder and task head, straight-through training through the quantizer
//! and the simulated channel, and finite-difference gradient verification.
//!
//! Gradients are accumulated by hand over a fixed operator set: affine
//! layers, `tanh`, softmax cross-entropy, the straight-through quantizer, and
//! the transport term's Danskin gradients.

use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::codebook::{activation_pmf, perplexity, Codebook, Init};
use crate::container::{Block, Container};
use crate::data::{augment, Dataset, CIFAR_PIXELS};
use crate::error::{config, contract, Error, Result};
use crate::modem::{self, ChannelConfig, Constellation};
use crate::wsdc::{self, Objective, WsConfig};
use crate::{par, seeded_rng};

/// Affine layer `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Affine layers with `tanh` between them; the last layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.ncols()
    }

    /// Sizes of every layer boundary, input first.
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weight.ncols()));
        s
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, keep: bool) -> (Array2<f64>, Option<MlpCache>) {
        let mut h = x.to_owned();
        let mut inputs = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.weight);
            a += &layer.bias;
            if l < last {
                a.mapv_inplace(f64::tanh);
            }
            if keep {
                inputs.push(h);
            }
            h = a;
        }
        (h, keep.then_some(MlpCache { inputs }))
    }

    /// Parameter gradients and the gradient in the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: Array2<f64>) -> (Vec<Dense>, Array2<f64>) {
        let mut g = grad_out;
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            grads.push(Dense { weight: input.t().dot(&g), bias: g.sum_axis(Axis(0)) });
            let mut gi = g.dot(&layer.weight.t());
            if l > 0 {
                // input of layer l is tanh of the previous pre-activation
                gi.zip_mut_with(input, |gv, &h| *gv *= 1.0 - h * h);
            }
            g = gi;
        }
        grads.reverse();
        (grads, g)
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodebookInit {
    #[default]
    Gaussian,
    UniformBox,
    /// Lloyd's k-means on encoder outputs of the first training batch.
    KMeansOnSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k: usize,
    pub d: usize,
    pub q: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// Sinkhorn regularization; `None` uses `0.05 * mean(C)` per solve.
    pub eps: Option<f64>,
    pub snr_train_db: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub channel_in_loop: bool,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub gaussian_std: f64,
    /// Gaussian atoms per target; `None` uses the batch size.
    pub n_gauss: Option<usize>,
    pub per_q: bool,
    pub per_q_logits: bool,
    /// Weight of `|z_e - sg(z_c)|^2`; zero disables it.
    pub commitment: f64,
    pub codebook_init: CodebookInit,
    pub ws_max_iter: usize,
    pub ws_tol: f64,
    /// Random crop and flip of every minibatch; inputs must be 3x32x32 images.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 16,
            d: 8,
            q: 4,
            alpha: 0.5,
            lambda: 1.0,
            eps: None,
            snr_train_db: 12.0,
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            channel_in_loop: true,
            encoder_hidden: vec![128, 128],
            head_hidden: vec![128, 128],
            gaussian_std: 1.0,
            n_gauss: None,
            per_q: false,
            per_q_logits: false,
            commitment: 0.0,
            codebook_init: CodebookInit::Gaussian,
            ws_max_iter: 2000,
            ws_tol: 1e-6,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(config("epochs must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if self.snr_train_db.is_nan() {
            return Err(config("snr_train_db is NaN"));
        }
        if !(self.commitment.is_finite() && self.commitment >= 0.0) {
            return Err(config("commitment weight must be >= 0"));
        }
        Constellation::new(self.k)?;
        self.ws_config().validate()
    }

    pub fn ws_config(&self) -> WsConfig {
        WsConfig {
            lambda: self.lambda,
            alpha: self.alpha,
            gaussian_std: self.gaussian_std,
            n_gauss: self.n_gauss,
            eps: self.eps,
            per_q: self.per_q,
            max_iter: self.ws_max_iter,
            tol: self.ws_tol,
            ..WsConfig::default()
        }
    }

    /// Channel used by training step `step`.
    pub fn train_channel(&self, step: u64) -> ChannelConfig {
        ChannelConfig::new(self.snr_train_db, derive_seed(derive_seed(self.seed, TAG_CHANNEL), step))
    }
}

const TAG_ENCODER: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_CODEBOOK: u64 = 3;
const TAG_CHANNEL: u64 = 4;
const TAG_GAUSS: u64 = 5;
const TAG_SHUFFLE: u64 = 6;
const TAG_AUGMENT: u64 = 7;

/// SplitMix64 finalizer over `seed` and `tag`.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Adaptive-moment optimizer state, one moment pair per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (bi, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[bi], &mut self.v[bi]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] -= self.lr * update;
            }
        }
    }
}

/// Gradients for every trainable block of a [`ModelState`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub encoder: Vec<Dense>,
    pub head: Vec<Dense>,
    pub codewords: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Grads {
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.encoder.iter().chain(&self.head) {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        out.push(self.codewords.as_slice().unwrap());
        out.push(self.logits.as_slice().unwrap());
        out
    }
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub encoder: Mlp,
    pub head: Mlp,
    pub codebook: Codebook,
    pub constellation: Constellation,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
    ws_warm: Option<Vec<Array1<f64>>>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder
            && self.head == other.head
            && self.codebook == other.codebook
            && self.step == other.step
            && self.seed == other.seed
    }
}

impl ModelState {
    /// Fresh model for `input_dim`-dimensional inputs and `n_classes` classes.
    /// `sample` is required for [`CodebookInit::KMeansOnSample`].
    pub fn new(cfg: &TrainConfig, input_dim: usize, n_classes: usize, sample: Option<ArrayView2<'_, f64>>) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || n_classes < 2 {
            return Err(config(format!("model needs input_dim >= 1 and n_classes >= 2 (got {input_dim}, {n_classes})")));
        }
        let constellation = Constellation::new(cfg.k)?;
        let latent = cfg.q * cfg.d;
        let mut enc_sizes = vec![input_dim];
        enc_sizes.extend(&cfg.encoder_hidden);
        enc_sizes.push(latent);
        let mut head_sizes = vec![latent];
        head_sizes.extend(&cfg.head_hidden);
        head_sizes.push(n_classes);
        let encoder = Mlp::new(&enc_sizes, &mut seeded_rng(cfg.seed, TAG_ENCODER));
        let head = Mlp::new(&head_sizes, &mut seeded_rng(cfg.seed, TAG_HEAD));
        let cb_seed = derive_seed(cfg.seed, TAG_CODEBOOK);
        let codebook = match cfg.codebook_init {
            CodebookInit::Gaussian => Codebook::with_logits(cfg.k, cfg.d, cfg.q, cfg.per_q_logits, Init::Gaussian, cb_seed)?,
            CodebookInit::UniformBox => Codebook::with_logits(cfg.k, cfg.d, cfg.q, cfg.per_q_logits, Init::UniformBox, cb_seed)?,
            CodebookInit::KMeansOnSample => {
                let x = sample.ok_or_else(|| config("kmeans-on-sample codebook init needs a data sample"))?;
                let (z, _) = encoder.forward(x, false);
                let z = z.into_shape_with_order((x.nrows() * cfg.q, cfg.d)).map_err(|e| contract(e.to_string()))?;
                Codebook::with_logits(cfg.k, cfg.d, cfg.q, cfg.per_q_logits, Init::KMeansOnSample(z.view()), cb_seed)?
            }
        };
        Ok(Self {
            encoder,
            head,
            codebook,
            constellation,
            optimizer: Adam::new(cfg.lr),
            step: 0,
            seed: cfg.seed,
            ws_warm: None,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.len()).sum()
    }

    pub fn param_blocks(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter().chain(&self.head.layers) {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        out.push(self.codebook.codewords.as_slice().unwrap());
        out.push(self.codebook.logits.as_slice().unwrap());
        out
    }

    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.encoder.layers.iter_mut().chain(self.head.layers.iter_mut()) {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out.push(self.codebook.codewords.as_slice_mut().unwrap());
        out.push(self.codebook.logits.as_slice_mut().unwrap());
        out
    }

    fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, net) in [("encoder", &self.encoder), ("head", &self.head)] {
            for i in 0..net.layers.len() {
                names.push(format!("{prefix}.{i}.weight"));
                names.push(format!("{prefix}.{i}.bias"));
            }
        }
        names.push("codebook.codewords".into());
        names.push("codebook.logits".into());
        names
    }

    /// Serializes architecture and parameters. Optimizer moments are not saved.
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let mut arch = vec![
            self.codebook.k() as f64,
            self.codebook.d() as f64,
            self.codebook.q() as f64,
            self.codebook.logits.nrows() as f64,
            self.step as f64,
            // Seeds above 2^53 do not survive the f64 round trip; split in halves.
            (self.seed >> 32) as f64,
            (self.seed & 0xFFFF_FFFF) as f64,
        ];
        let enc = self.encoder.sizes();
        let head = self.head.sizes();
        arch.push(enc.len() as f64);
        arch.extend(enc.iter().map(|&s| s as f64));
        arch.push(head.len() as f64);
        arch.extend(head.iter().map(|&s| s as f64));
        c.push(Block::vector("meta.arch", arch));
        let dims: Vec<Vec<usize>> = {
            let mut d = Vec::new();
            for l in self.encoder.layers.iter().chain(&self.head.layers) {
                d.push(vec![l.weight.nrows(), l.weight.ncols()]);
                d.push(vec![l.bias.len()]);
            }
            d.push(vec![self.codebook.k(), self.codebook.d()]);
            d.push(vec![self.codebook.logits.nrows(), self.codebook.k()]);
            d
        };
        for ((name, dims), values) in self.block_names().into_iter().zip(dims).zip(self.param_blocks()) {
            c.push(Block::new(name, dims, values.to_vec()));
        }
        c
    }

    /// Restores a model saved by [`ModelState::to_container`].
    pub fn from_container(c: &Container, lr: f64) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("model container: {m}"));
        let arch = &c.get("meta.arch")?.values;
        let at = |i: usize| arch.get(i).copied().ok_or_else(|| bad("meta.arch is truncated"));
        let as_usize = |x: f64| -> Result<usize> {
            if x >= 0.0 && x.fract() == 0.0 && x < 1e12 {
                Ok(x as usize)
            } else {
                Err(bad("meta.arch has a non-integer entry"))
            }
        };
        let (k, d, q, logit_rows) = (as_usize(at(0)?)?, as_usize(at(1)?)?, as_usize(at(2)?)?, as_usize(at(3)?)?);
        let step = as_usize(at(4)?)? as u64;
        let seed = ((as_usize(at(5)?)? as u64) << 32) | as_usize(at(6)?)? as u64;
        let mut pos = 7;
        let read_sizes = |pos: &mut usize| -> Result<Vec<usize>> {
            let n = as_usize(at(*pos)?)?;
            let sizes = (0..n).map(|i| as_usize(at(*pos + 1 + i)?)).collect::<Result<Vec<_>>>()?;
            *pos += 1 + n;
            if sizes.len() < 2 {
                return Err(bad("network needs at least one layer"));
            }
            Ok(sizes)
        };
        let enc_sizes = read_sizes(&mut pos)?;
        let head_sizes = read_sizes(&mut pos)?;
        let constellation = Constellation::new(k).map_err(|e| bad(&e.to_string()))?;
        let zero_net = |sizes: &[usize]| Mlp {
            layers: sizes
                .windows(2)
                .map(|w| Dense { weight: Array2::zeros((w[0], w[1])), bias: Array1::zeros(w[1]) })
                .collect(),
        };
        if k < 2 || d == 0 || q == 0 || (logit_rows != 1 && logit_rows != q) {
            return Err(bad("inconsistent codebook shape"));
        }
        let mut state = Self {
            encoder: zero_net(&enc_sizes),
            head: zero_net(&head_sizes),
            codebook: Codebook::from_codewords(Array2::zeros((k, d)), q)?,
            constellation,
            optimizer: Adam::new(lr),
            step,
            seed,
            ws_warm: None,
        };
        state.codebook.logits = Array2::zeros((logit_rows, k));
        if *enc_sizes.last().unwrap() != q * d || head_sizes[0] != q * d {
            return Err(bad("network widths do not match the latent size"));
        }
        let names = state.block_names();
        for (name, dst) in names.iter().zip(state.param_blocks_mut()) {
            let block = c.get(name)?;
            if block.values.len() != dst.len() {
                return Err(bad(&format!("block {name} has {} values, expected {}", block.values.len(), dst.len())));
            }
            dst.copy_from_slice(&block.values);
        }
        if state.param_blocks().iter().any(|b| b.iter().any(|x| !x.is_finite())) {
            return Err(bad("non-finite parameters"));
        }
        Ok(state)
    }
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array2<f64>,
    /// `B x Q x D` encoder output.
    pub z_e: Array3<f64>,
    /// `B x Q` indices chosen by the quantizer.
    pub indices: Array2<usize>,
    pub z_c: Array3<f64>,
    pub distortion: f64,
    pub sent: Vec<Complex64>,
    pub received: Vec<Complex64>,
    /// `B x Q` indices after demodulation.
    pub received_indices: Array2<usize>,
    /// Codewords looked up from the received indices.
    pub z_d: Array3<f64>,
}

fn lookup(cb: &Codebook, idx: &Array2<usize>) -> Array3<f64> {
    let (b, q) = idx.dim();
    let d = cb.d();
    let mut out = Array3::zeros((b, q, d));
    for ((bi, qi), &k) in idx.indexed_iter() {
        out.index_axis_mut(Axis(0), bi).row_mut(qi).assign(&cb.codewords.row(k));
    }
    out
}

/// Encoder, quantizer, optional channel, and task head. With `channel` set to
/// `None` the received indices equal the sent ones.
pub fn forward_pass(state: &ModelState, x: ArrayView2<'_, f64>, channel: Option<&ChannelConfig>) -> Result<Forward> {
    if x.ncols() != state.input_dim() {
        return Err(contract(format!("input has {} features, encoder expects {}", x.ncols(), state.input_dim())));
    }
    let b = x.nrows();
    let (q, d) = (state.codebook.q(), state.codebook.d());
    let (z_flat, _) = state.encoder.forward(x, false);
    if z_flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical { step: state.step, detail: "encoder output is non-finite".into() });
    }
    let z_e = z_flat.into_shape_with_order((b, q, d)).map_err(|e| contract(e.to_string()))?;
    let quant = state.codebook.quantize(z_e.view())?;
    let flat_idx: Vec<usize> = quant.indices.iter().copied().collect();
    let sent = modem::modulate(&flat_idx, &state.constellation)?;
    let (received, received_indices) = match channel {
        Some(ch) => {
            let r = modem::awgn(&sent, ch)?;
            let idx = modem::demodulate(&r, &state.constellation);
            let idx = Array2::from_shape_vec((b, q), idx).expect("index shape");
            (r, idx)
        }
        None => (sent.clone(), quant.indices.clone()),
    };
    let z_d = lookup(&state.codebook, &received_indices);
    let z_st = straight_through(z_e.view(), z_d.view())?;
    let head_in = z_st.into_shape_with_order((b, q * d)).map_err(|e| contract(e.to_string()))?;
    let (logits, _) = state.head.forward(head_in.view(), false);
    Ok(Forward {
        logits,
        z_e,
        indices: quant.indices,
        z_c: quant.z_c,
        distortion: quant.distortion,
        sent,
        received,
        received_indices,
        z_d,
    })
}

/// Forward value of the straight-through estimator: the received codewords.
/// Its backward pass is [`straight_through_backward`].
pub fn straight_through(z_e: ArrayView3<'_, f64>, z_d: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
    if z_e.dim() != z_d.dim() {
        return Err(contract("straight-through inputs differ in shape"));
    }
    Ok(z_d.to_owned())
}

/// Copies the downstream gradient onto the encoder output unchanged.
pub fn straight_through_backward(grad_z_st: ArrayView3<'_, f64>) -> Array3<f64> {
    grad_z_st.to_owned()
}

/// Mean softmax cross-entropy in nats and its gradient in the logits.
pub fn task_loss(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(contract(format!("{b} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = Array2::zeros((b, c));
    let mut loss = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[labels[i]];
        for j in 0..c {
            grad[[i, j]] = (row[j] - lse).exp();
        }
        grad[[i, labels[i]]] -= 1.0;
    }
    Ok((loss / b as f64, grad / b as f64))
}

/// Loss terms of one evaluation of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub task: f64,
    pub ws: f64,
    pub commitment: f64,
    pub total: f64,
    pub ws_converged: bool,
}

/// The discrete quantities a gradient evaluation holds fixed.
struct FrozenPath {
    /// Value fed to the head; `z_st = z_e + offset` when `offset` is set.
    z_d: Array3<f64>,
    offset: Option<Array3<f64>>,
    z_c: Array3<f64>,
    target_seed: u64,
}

fn objective(
    state: &ModelState,
    x: ArrayView2<'_, f64>,
    y: &[usize],
    cfg: &TrainConfig,
    path: &FrozenPath,
    ws_cfg: &WsConfig,
    warm: Option<&[Array1<f64>]>,
    want_grads: bool,
) -> Result<(LossParts, Option<Grads>, Option<Vec<Array1<f64>>>)> {
    let b = x.nrows();
    let (q, d) = (state.codebook.q(), state.codebook.d());
    let (z_flat, enc_cache) = state.encoder.forward(x, want_grads);
    let z_e = z_flat.into_shape_with_order((b, q, d)).map_err(|e| contract(e.to_string()))?;
    let z_st = match &path.offset {
        Some(off) => &z_e + off,
        None => path.z_d.clone(),
    };
    let head_in = z_st.into_shape_with_order((b, q * d)).map_err(|e| contract(e.to_string()))?;
    let (logits, head_cache) = state.head.forward(head_in.view(), want_grads);
    let (task, grad_logits) = task_loss(logits.view(), y)?;

    let mut task_obj = Objective::zero((b, q, d), &state.codebook);
    task_obj.value = task;
    let mut commitment = 0.0;
    if cfg.commitment > 0.0 {
        let diff = &z_e - &path.z_c;
        let n = (b * q) as f64;
        commitment = cfg.commitment * diff.mapv(|v| v * v).sum() / n;
        task_obj.value += commitment;
        task_obj.latents.scaled_add(2.0 * cfg.commitment / n, &diff);
    }
    let head_grads = if want_grads {
        let (hg, g_in) = state.head.backward(head_cache.as_ref().unwrap(), grad_logits);
        let g_st = g_in.into_shape_with_order((b, q, d)).map_err(|e| contract(e.to_string()))?;
        task_obj.latents += &straight_through_backward(g_st.view());
        Some(hg)
    } else {
        None
    };

    let (ws_obj, ws_converged, duals) = if ws_cfg.lambda > 0.0 {
        let targets = wsdc::targets_for_batch(z_e.view(), ws_cfg, path.target_seed)?;
        let out = wsdc::ws_regularizer(&targets, &state.codebook, ws_cfg, warm)?;
        let duals = out.plans.iter().filter_map(|p| p.dual_v.clone()).collect::<Vec<_>>();
        (Objective::from_ws(&out, (b, q, d)), out.converged, Some(duals))
    } else {
        (Objective::zero((b, q, d), &state.codebook), true, None)
    };
    let total = wsdc::composite_loss(&task_obj, &ws_obj, ws_cfg.lambda)?;
    let parts = LossParts { task, ws: ws_obj.value, commitment, total: total.value, ws_converged };
    if !want_grads {
        return Ok((parts, None, duals));
    }
    let g_enc_out = total.latents.into_shape_with_order((b, q * d)).map_err(|e| contract(e.to_string()))?;
    let (enc_grads, _) = state.encoder.backward(enc_cache.as_ref().unwrap(), g_enc_out);
    let grads = Grads { encoder: enc_grads, head: head_grads.unwrap(), codewords: total.codewords, logits: total.logits };
    Ok((parts, Some(grads), duals))
}

fn frozen_from(fwd: &Forward, cfg: &TrainConfig, step: u64, with_offset: bool) -> FrozenPath {
    FrozenPath {
        z_d: fwd.z_d.clone(),
        offset: with_offset.then(|| &fwd.z_d - &fwd.z_e),
        z_c: fwd.z_c.clone(),
        target_seed: derive_seed(derive_seed(cfg.seed, TAG_GAUSS), step),
    }
}

/// Per-step training diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub loss: LossParts,
    pub distortion: f64,
    /// Perplexity of this batch's sent-index distribution.
    pub perplexity: f64,
    pub accuracy: f64,
    pub index_errors: usize,
    pub indices: Array2<usize>,
}

fn argmax_rows(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .outer_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0)
        .collect()
}

fn snapshot(state: &ModelState, parts: Option<&LossParts>) -> String {
    let max_abs = state.param_blocks().iter().flat_map(|b| b.iter()).fold(0.0f64, |m, x| m.max(x.abs()));
    match parts {
        Some(p) => format!("task={} ws={} commitment={} total={} max|param|={max_abs}", p.task, p.ws, p.commitment, p.total),
        None => format!("max|param|={max_abs}"),
    }
}

/// One optimizer step on a minibatch.
pub fn train_step(state: &mut ModelState, x: ArrayView2<'_, f64>, y: &[usize], cfg: &TrainConfig) -> Result<StepMetrics> {
    if y.len() != x.nrows() {
        return Err(contract("inputs and labels differ in length"));
    }
    let step = state.step;
    let channel = cfg.train_channel(step);
    let fwd = forward_pass(state, x, cfg.channel_in_loop.then_some(&channel))?;
    let path = frozen_from(&fwd, cfg, step, false);
    let ws_cfg = cfg.ws_config();
    let (parts, grads, duals) = objective(state, x, y, cfg, &path, &ws_cfg, state.ws_warm.as_deref(), true)?;
    if !parts.total.is_finite() {
        return Err(Error::Numerical { step, detail: format!("non-finite loss; {}", snapshot(state, Some(&parts))) });
    }
    let grads = grads.expect("gradients requested");
    state.optimizer.lr = cfg.lr;
    let mut opt = std::mem::replace(&mut state.optimizer, Adam::new(cfg.lr));
    opt.step(state.param_blocks_mut(), grads.blocks());
    state.optimizer = opt;
    if state.param_blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical { step, detail: format!("non-finite parameters after update; {}", snapshot(state, Some(&parts))) });
    }
    if duals.is_some() {
        state.ws_warm = duals;
    }
    state.step += 1;
    let preds = argmax_rows(&fwd.logits);
    let correct = preds.iter().zip(y).filter(|(a, b)| a == b).count();
    let pmf = activation_pmf(fwd.indices.view(), state.codebook.k())?;
    let index_errors = fwd.indices.iter().zip(fwd.received_indices.iter()).filter(|(a, b)| a != b).count();
    Ok(StepMetrics {
        loss: parts,
        distortion: fwd.distortion,
        perplexity: perplexity(pmf.view())?,
        accuracy: correct as f64 / y.len() as f64,
        index_errors,
        indices: fwd.indices,
    })
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub task_loss: f64,
    pub ws_value: f64,
    pub distortion: f64,
    /// Perplexity of the codeword usage accumulated over the epoch.
    pub perplexity: f64,
    pub train_accuracy: f64,
    pub index_error_rate: f64,
    pub wall_time_s: f64,
}

/// Minibatch index lists for one epoch, shuffled with the epoch's seed. The
/// final batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(derive_seed(seed, TAG_SHUFFLE), epoch as u64));
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Full training run.
pub fn train(cfg: &TrainConfig, data: &Dataset) -> Result<(ModelState, Vec<EpochMetrics>)> {
    train_with(cfg, data, |_, _| Ok(()))
}

/// Training run with a callback after every epoch.
pub fn train_with<F>(cfg: &TrainConfig, data: &Dataset, mut on_epoch: F) -> Result<(ModelState, Vec<EpochMetrics>)>
where
    F: FnMut(&ModelState, &EpochMetrics) -> Result<()>,
{
    if data.is_empty() {
        return Err(contract("training dataset is empty"));
    }
    cfg.validate()?;
    if cfg.augment && data.input_dim() != CIFAR_PIXELS {
        return Err(config(format!("augmentation needs 3x32x32 inputs, dataset has {} features", data.input_dim())));
    }
    let first = epoch_batches(data.len(), cfg.batch_size, cfg.seed, 0);
    let sample = data.batch(&first[0]).0;
    let mut state = ModelState::new(cfg, data.input_dim(), data.n_classes, Some(sample.view()))?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let mut acc = EpochMetrics { epoch, steps: batches.len(), ..EpochMetrics::default() };
        let mut counts = vec![0usize; cfg.k];
        let (mut n_samples, mut n_idx, mut n_err) = (0usize, 0usize, 0usize);
        for idx in &batches {
            let (mut x, y) = data.batch(idx);
            if cfg.augment {
                x = augment(x.view(), derive_seed(derive_seed(cfg.seed, TAG_AUGMENT), state.step))?;
            }
            let m = train_step(&mut state, x.view(), &y, cfg)?;
            let w = y.len() as f64;
            acc.task_loss += m.loss.task * w;
            acc.ws_value += m.loss.ws * w;
            acc.distortion += m.distortion * w;
            acc.train_accuracy += m.accuracy * w;
            n_samples += y.len();
            n_idx += m.indices.len();
            n_err += m.index_errors;
            m.indices.iter().for_each(|&k| counts[k] += 1);
        }
        let n = n_samples as f64;
        acc.task_loss /= n;
        acc.ws_value /= n;
        acc.distortion /= n;
        acc.train_accuracy /= n;
        acc.index_error_rate = n_err as f64 / n_idx as f64;
        let pmf = Array1::from_iter(counts.iter().map(|&c| c as f64 / n_idx as f64));
        acc.perplexity = perplexity(pmf.view())?;
        acc.wall_time_s = t0.elapsed().as_secs_f64();
        on_epoch(&state, &acc)?;
        history.push(acc);
    }
    Ok((state, history))
}

impl Default for EpochMetrics {
    fn default() -> Self {
        Self {
            epoch: 0,
            steps: 0,
            task_loss: 0.0,
            ws_value: 0.0,
            distortion: 0.0,
            perplexity: 0.0,
            train_accuracy: 0.0,
            index_error_rate: 0.0,
            wall_time_s: 0.0,
        }
    }
}

/// Which parameter blocks [`grad_check`] perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSelection {
    All,
    /// Encoder, codewords and logits only.
    ExcludeHead,
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Entries whose analytic and numeric magnitudes are both below this are
    /// compared in absolute terms.
    pub floor: f64,
    /// Perturb at most this many entries, sampled without replacement.
    pub max_params: usize,
    pub selection: ParamSelection,
    pub sample_seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-4, max_params: 2000, selection: ParamSelection::All, sample_seed: 0 }
    }
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Block and offset of the worst entry.
    pub worst: Option<(usize, usize)>,
}

/// Compares the engine's gradient of the composite loss with central finite
/// differences. The quantizer indices, received indices and Gaussian target
/// atoms are frozen at their values for the current step, and the head sees
/// `z_e + (z_d - z_e)|frozen` so the straight-through path is differentiable.
/// Transport terms are re-solved to tight tolerance at every evaluation.
pub fn grad_check(state: &ModelState, x: ArrayView2<'_, f64>, y: &[usize], cfg: &TrainConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let step = state.step;
    let channel = cfg.train_channel(step);
    let fwd = forward_pass(state, x, cfg.channel_in_loop.then_some(&channel))?;
    let path = frozen_from(&fwd, cfg, step, true);
    let mut ws_cfg = WsConfig { tol: 1e-13, max_iter: 200_000, ..cfg.ws_config() };
    if ws_cfg.lambda > 0.0 && ws_cfg.eps.is_none() {
        let z = fwd.z_e.view();
        let targets = wsdc::targets_for_batch(z, &ws_cfg, path.target_seed)?;
        let probe = wsdc::ws_regularizer(&targets, &state.codebook, &WsConfig { max_iter: 1, ..ws_cfg.clone() }, None)?;
        ws_cfg.eps_per_solve = Some(probe.plans.iter().map(|p| p.eps).collect());
    }
    let (_, grads, warm) = objective(state, x, y, cfg, &path, &ws_cfg, None, true)?;
    let grads = grads.expect("gradients requested");
    let grad_blocks = grads.blocks();

    let n_head_blocks = 2 * state.head.layers.len();
    let n_enc_blocks = 2 * state.encoder.layers.len();
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (bi, blk) in grad_blocks.iter().enumerate() {
        let is_head = bi >= n_enc_blocks && bi < n_enc_blocks + n_head_blocks;
        if opts.selection == ParamSelection::ExcludeHead && is_head {
            continue;
        }
        entries.extend((0..blk.len()).map(|i| (bi, i)));
    }
    if entries.len() > opts.max_params {
        let mut rng = seeded_rng(opts.sample_seed, 0);
        entries.shuffle(&mut rng);
        entries.truncate(opts.max_params);
        entries.sort_unstable();
    }
    let warm = warm.as_deref();
    let errors = par::map_slice(&entries, |&(bi, i)| -> Result<f64> {
        let mut probe = state.clone();
        let eval = |s: &ModelState| objective(s, x, y, cfg, &path, &ws_cfg, warm, false).map(|r| r.0.total);
        let orig = probe.param_blocks()[bi][i];
        probe.param_blocks_mut()[bi][i] = orig + opts.step;
        let up = eval(&probe)?;
        probe.param_blocks_mut()[bi][i] = orig - opts.step;
        let down = eval(&probe)?;
        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grad_blocks[bi][i];
        let scale = analytic.abs().max(numeric.abs()).max(opts.floor);
        Ok((analytic - numeric).abs() / scale)
    });
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: entries.len(), worst: None };
    for (e, entry) in errors.into_iter().zip(&entries) {
        let e = e?;
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(*entry);
        }
    }
    Ok(report)
}

/// Predictions and channel statistics for a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub sent_indices: Array2<usize>,
    pub received_indices: Array2<usize>,
    /// Encoder outputs, `N x Q x D`.
    pub latents: Array3<f64>,
}

/// Eval-mode forward pass over `x` through `channel`.
pub fn evaluate(state: &ModelState, x: ArrayView2<'_, f64>, channel: Option<&ChannelConfig>) -> Result<Evaluation> {
    let fwd = forward_pass(state, x, channel)?;
    Ok(Evaluation {
        predictions: argmax_rows(&fwd.logits),
        sent_indices: fwd.indices,
        received_indices: fwd.received_indices,
        latents: fwd.z_e,
    })
}

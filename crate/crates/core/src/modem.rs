//! Gray-coded square QAM over an AWGN channel, plus the closed-form entropy and
//! capacity expressions for the Gaussian channel.
//!
//! SNR is `Es/N0` in dB with `Es = 1` fixed by constellation normalization, so
//! the total complex noise variance is `sigma^2 = 10^(-snr_db/10)`, split evenly
//! between the real and imaginary parts.

use std::f64::consts::{E, PI};

use ndarray::{Array2, ArrayView1};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use libm::erfc;

use crate::error::{config, contract, Result};
use crate::{par, seeded_rng};

const NOISE_CHUNK: usize = 4096;

/// Square `K`-QAM with unit average energy and per-axis binary-reflected Gray
/// labelling. The high half of an index's bits selects the in-phase level and
/// the low half the quadrature level.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    order: usize,
    side: usize,
    bits_per_axis: u32,
    scale: f64,
    symbols: Vec<Complex64>,
    /// Gray label of each amplitude level, most negative level first.
    gray_of_level: Vec<usize>,
    level_of_gray: Vec<usize>,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        if !matches!(order, 4 | 16 | 64 | 256) {
            return Err(config(format!("unsupported QAM order {order}; expected 4, 16, 64 or 256")));
        }
        let side = (order as f64).sqrt().round() as usize;
        let bits_per_axis = side.trailing_zeros();
        let scale = 1.0 / (2.0 * (order as f64 - 1.0) / 3.0).sqrt();
        let gray_of_level: Vec<usize> = (0..side).map(|p| p ^ (p >> 1)).collect();
        let mut level_of_gray = vec![0; side];
        for (p, &g) in gray_of_level.iter().enumerate() {
            level_of_gray[g] = p;
        }
        let amp = |p: usize| (2.0 * p as f64 - (side as f64 - 1.0)) * scale;
        let symbols = (0..order)
            .map(|idx| {
                let i_level = level_of_gray[idx >> bits_per_axis];
                let q_level = level_of_gray[idx & (side - 1)];
                Complex64::new(amp(i_level), amp(q_level))
            })
            .collect();
        Ok(Self { order, side, bits_per_axis, scale, symbols, gray_of_level, level_of_gray })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Levels per axis.
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn index_to_symbol(&self, idx: usize) -> Option<Complex64> {
        self.symbols.get(idx).copied()
    }

    /// Index of the symbol at lattice position `(i_level, q_level)`, levels
    /// counted from the most negative amplitude.
    pub fn lattice_index(&self, i_level: usize, q_level: usize) -> usize {
        (self.gray_of_level[i_level] << self.bits_per_axis) | self.gray_of_level[q_level]
    }

    /// Lattice position of an index.
    pub fn lattice_position(&self, idx: usize) -> (usize, usize) {
        (self.level_of_gray[idx >> self.bits_per_axis], self.level_of_gray[idx & (self.side - 1)])
    }

    /// Exact symbol lookup for points of the constellation.
    pub fn symbol_to_index(&self, s: Complex64) -> Option<usize> {
        self.symbols.iter().position(|&x| x == s)
    }

    pub fn average_energy(&self) -> f64 {
        self.symbols.iter().map(|s| s.norm_sqr()).sum::<f64>() / self.order as f64
    }

    fn amplitude(&self, level: usize) -> f64 {
        (2.0 * level as f64 - (self.side as f64 - 1.0)) * self.scale
    }

    /// Nearest level on one axis; equidistant levels resolve to the smaller Gray label.
    fn axis_decision(&self, x: f64) -> usize {
        let t = (x / self.scale + (self.side as f64 - 1.0)) / 2.0;
        let max = (self.side - 1) as f64;
        let lo = t.floor().clamp(0.0, max) as usize;
        let hi = t.ceil().clamp(0.0, max) as usize;
        if lo == hi {
            return lo;
        }
        let (dl, dh) = ((x - self.amplitude(lo)).abs(), (x - self.amplitude(hi)).abs());
        if dl < dh || (dl == dh && self.gray_of_level[lo] < self.gray_of_level[hi]) {
            lo
        } else {
            hi
        }
    }

    /// Minimum-distance decision; ties resolve to the lowest index.
    pub fn decide(&self, r: Complex64) -> usize {
        self.lattice_index(self.axis_decision(r.re), self.axis_decision(r.im))
    }
}

/// Channel state for one simulation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    /// `Es/N0` in dB; `f64::INFINITY` means a noiseless link.
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, seed: u64) -> Self {
        Self { snr_db, seed }
    }

    pub fn noiseless() -> Self {
        Self { snr_db: f64::INFINITY, seed: 0 }
    }

    /// Average symbol power, fixed by constellation normalization.
    pub fn signal_power(&self) -> f64 {
        1.0
    }

    /// Total complex noise variance.
    pub fn noise_variance(&self) -> f64 {
        if self.snr_db == f64::INFINITY {
            0.0
        } else {
            self.signal_power() / 10f64.powf(self.snr_db / 10.0)
        }
    }
}

pub fn modulate(indices: &[usize], c: &Constellation) -> Result<Vec<Complex64>> {
    indices
        .iter()
        .map(|&i| c.index_to_symbol(i).ok_or_else(|| contract(format!("index {i} out of range for {}-QAM", c.order))))
        .collect()
}

/// Adds circularly-symmetric complex Gaussian noise. Noise for each block of
/// 4096 symbols comes from its own stream of the seed, so the result does not
/// depend on the thread count.
pub fn awgn(s: &[Complex64], cfg: &ChannelConfig) -> Result<Vec<Complex64>> {
    if s.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) {
        return Err(contract("channel input contains non-finite symbols"));
    }
    let mut out = s.to_vec();
    let var = cfg.noise_variance();
    if var == 0.0 {
        return Ok(out);
    }
    let std = (var / 2.0).sqrt();
    par::for_each_chunk_mut(&mut out, NOISE_CHUNK, |chunk, block| {
        let mut rng = seeded_rng(cfg.seed, chunk as u64);
        for x in block.iter_mut() {
            let nr: f64 = StandardNormal.sample(&mut rng);
            let ni: f64 = StandardNormal.sample(&mut rng);
            *x += Complex64::new(nr * std, ni * std);
        }
    });
    Ok(out)
}

pub fn demodulate(r: &[Complex64], c: &Constellation) -> Vec<usize> {
    par::map_slice(r, |&x| c.decide(x))
}

/// Gaussian tail probability `Q(x)`.
pub fn qfunc(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Symbol error probability of square `K`-QAM with minimum-distance detection.
pub fn ser_theoretical(order: usize, snr_db: f64) -> Result<f64> {
    if !matches!(order, 4 | 16 | 64 | 256) {
        return Err(config(format!("unsupported QAM order {order}")));
    }
    if snr_db == f64::INFINITY {
        return Ok(0.0);
    }
    let k = order as f64;
    let gamma = 10f64.powf(snr_db / 10.0);
    let p = 2.0 * (1.0 - 1.0 / k.sqrt()) * qfunc((3.0 * gamma / (k - 1.0)).sqrt());
    // 1 - (1 - p)^2 without cancellation at high SNR
    Ok(p * (2.0 - p))
}

/// Monte-Carlo symbol error rate over `n` uniformly random symbols.
/// Returns the number of symbol errors.
pub fn simulate_symbol_errors(c: &Constellation, snr_db: f64, n: usize, seed: u64) -> u64 {
    let cfg = ChannelConfig::new(snr_db, seed);
    let std = (cfg.noise_variance() / 2.0).sqrt();
    let chunks = n.div_ceil(NOISE_CHUNK);
    par::map_range(chunks, |ci| {
        let mut rng = seeded_rng(seed, ci as u64);
        let len = NOISE_CHUNK.min(n - ci * NOISE_CHUNK);
        let mut errors = 0u64;
        for _ in 0..len {
            let idx = rng.random_range(0..c.order);
            let nr: f64 = StandardNormal.sample(&mut rng);
            let ni: f64 = StandardNormal.sample(&mut rng);
            let r = c.symbols[idx] + Complex64::new(nr * std, ni * std);
            errors += u64::from(c.decide(r) != idx);
        }
        errors
    })
    .into_iter()
    .sum()
}

/// Row-normalized empirical `P(received | sent)`. Rows for indices never sent
/// are left as the identity row.
pub fn transition_matrix(sent: &[usize], received: &[usize], order: usize) -> Result<Array2<f64>> {
    if sent.len() != received.len() {
        return Err(contract("sent and received index streams differ in length"));
    }
    let mut m = Array2::<f64>::zeros((order, order));
    for (&s, &r) in sent.iter().zip(received) {
        if s >= order || r >= order {
            return Err(contract(format!("index out of range for K={order}")));
        }
        m[[s, r]] += 1.0;
    }
    for (i, mut row) in m.outer_iter_mut().enumerate() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row[i] = 1.0;
        }
    }
    Ok(m)
}

pub(crate) fn check_pmf(pmf: ArrayView1<'_, f64>) -> Result<()> {
    if pmf.is_empty() {
        return Err(contract("empty pmf"));
    }
    if pmf.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(contract("pmf has negative or non-finite entries"));
    }
    let total = pmf.sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(contract(format!("pmf sums to {total}, not 1")));
    }
    Ok(())
}

/// Shannon entropy in bits, with `0 log 0 = 0`.
pub fn discrete_entropy(pmf: ArrayView1<'_, f64>) -> Result<f64> {
    check_pmf(pmf)?;
    let h: f64 = pmf.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.log2()).sum();
    Ok(h.max(0.0))
}

fn check_variance(var: f64) -> Result<()> {
    if var.is_finite() && var > 0.0 {
        Ok(())
    } else {
        Err(contract(format!("noise variance must be positive and finite, got {var}")))
    }
}

fn check_power(p: f64) -> Result<()> {
    if p.is_finite() && p >= 0.0 {
        Ok(())
    } else {
        Err(contract(format!("signal power must be nonnegative and finite, got {p}")))
    }
}

/// Differential entropy of `N(0, var)` in bits: `0.5 log2(2 pi e var)`.
pub fn gaussian_cond_entropy(var: f64) -> Result<f64> {
    check_variance(var)?;
    Ok(0.5 * (2.0 * PI * E * var).log2())
}

/// Output entropy of the real AWGN channel with Gaussian input of power `power`.
pub fn gaussian_output_entropy(power: f64, var: f64) -> Result<f64> {
    check_power(power)?;
    check_variance(var)?;
    gaussian_cond_entropy(power + var)
}

/// Capacity of the real AWGN channel, `0.5 log2(1 + P/sigma^2)` bits per use.
pub fn capacity_awgn(power: f64, var: f64) -> Result<f64> {
    check_power(power)?;
    check_variance(var)?;
    Ok(0.5 * (1.0 + power / var).log2())
}

/// Capacity of the complex baseband AWGN channel, `log2(1 + P/sigma^2)`:
/// two real dimensions per symbol, so twice [`capacity_awgn`].
pub fn capacity_complex_awgn(power: f64, var: f64) -> Result<f64> {
    Ok(2.0 * capacity_awgn(power, var)?)
}

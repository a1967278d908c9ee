//! Evaluation metrics: accuracy, plug-in mutual information on index streams,
//! index error rate, symbol-space transport diagnostics, and the reported
//! transport cost of a latent batch against its hybrid target.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{contract, Result};
use crate::modem::{check_pmf, Constellation};
use crate::ot::{self, DiscreteMeasure, Metric};
use crate::seeded_rng;
use crate::wsdc::build_hybrid_target;

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(contract(format!("{} predictions but {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(contract("accuracy of an empty set"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn counts(xs: &[usize]) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for &x in xs {
        *m.entry(x).or_insert(0) += 1;
    }
    m
}

/// Plug-in mutual information in bits from the empirical joint histogram.
///
/// Terms are summed in sorted order, so swapping the arguments gives the
/// same value bit for bit.
pub fn mi_plugin(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("sequences differ in length ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(contract("mutual information of empty sequences"));
    }
    let n = a.len() as f64;
    let (ca, cb) = (counts(a), counts(b));
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_insert(0) += 1;
    }
    let mut terms: Vec<f64> = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let c = c as f64;
            let marg = ca[&x] as f64 * cb[&y] as f64;
            c / n * (c * n / marg).log2()
        })
        .collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>().max(0.0))
}

/// `I(post; Y) - I(pre; Y)` in bits, averaged over the index columns.
pub fn delta_mi(pre: ArrayView2<'_, usize>, post: ArrayView2<'_, usize>, labels: &[usize]) -> Result<f64> {
    if pre.dim() != post.dim() {
        return Err(contract("pre- and post-channel index arrays differ in shape"));
    }
    if pre.nrows() != labels.len() {
        return Err(contract(format!("{} index rows but {} labels", pre.nrows(), labels.len())));
    }
    let q = pre.ncols();
    if q == 0 {
        return Err(contract("index arrays have no columns"));
    }
    let mut total = 0.0;
    for (col_pre, col_post) in pre.axis_iter(Axis(1)).zip(post.axis_iter(Axis(1))) {
        let a: Vec<usize> = col_pre.to_vec();
        let b: Vec<usize> = col_post.to_vec();
        if a == b {
            continue;
        }
        total += mi_plugin(&b, labels)? - mi_plugin(&a, labels)?;
    }
    Ok(total / q as f64)
}

pub fn index_error_rate(sent: ArrayView2<'_, usize>, received: ArrayView2<'_, usize>) -> Result<f64> {
    if sent.dim() != received.dim() {
        return Err(contract("sent and received index arrays differ in shape"));
    }
    if sent.is_empty() {
        return Err(contract("index error rate of an empty array"));
    }
    let errors = sent.iter().zip(received.iter()).filter(|(a, b)| a != b).count();
    Ok(errors as f64 / sent.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolTarget {
    Uniform,
    /// Weights proportional to `exp(-|s|^2 / (2 * 0.5))` over the points.
    Gaussian,
}

/// Variance of the discretized Gaussian symbol target.
pub const SYMBOL_TARGET_VAR: f64 = 0.5;

pub fn symbol_target_pmf(c: &Constellation, target: SymbolTarget) -> Array1<f64> {
    let k = c.order();
    match target {
        SymbolTarget::Uniform => Array1::from_elem(k, 1.0 / k as f64),
        SymbolTarget::Gaussian => {
            let w = Array1::from_iter(c.symbols().iter().map(|s| (-s.norm_sqr() / (2.0 * SYMBOL_TARGET_VAR)).exp()));
            let z = w.sum();
            w / z
        }
    }
}

/// Exact transport cost, squared Euclidean in the complex plane, between the
/// constellation weighted by `activation` and weighted by `target`.
pub fn symbol_ws_diagnostic(activation: ArrayView1<'_, f64>, c: &Constellation, target: SymbolTarget) -> Result<f64> {
    let k = c.order();
    if activation.len() != k {
        return Err(contract(format!("activation pmf has {} entries, constellation has {k}", activation.len())));
    }
    check_pmf(activation)?;
    let tgt = symbol_target_pmf(c, target);
    // Zero-mass atoms carry no flow; dropping them keeps the exact solver small.
    let support = |w: &Array1<f64>| -> Vec<usize> { (0..k).filter(|&i| w[i] > 0.0).collect() };
    let act = activation.to_owned();
    let (sa, st) = (support(&act), support(&tgt));
    let measure = |idx: &[usize], w: &Array1<f64>| -> Result<DiscreteMeasure> {
        let pts = Array2::from_shape_fn((idx.len(), 2), |(i, j)| {
            let s = c.symbols()[idx[i]];
            if j == 0 { s.re } else { s.im }
        });
        let ws = Array1::from_iter(idx.iter().map(|&i| w[i]));
        let total = ws.sum();
        DiscreteMeasure::new(pts, ws / total)
    };
    let (ma, mt) = (measure(&sa, &act)?, measure(&st, &tgt)?);
    let cost = ot::cost_matrix(&ma, &mt, Metric::SqEuclidean)?;
    let plan = ot::ot_exact_capped(&ma, &mt, cost.view(), usize::MAX)?;
    Ok(plan.value.max(0.0))
}

/// Settings for [`latent_ot_cost`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtCostOptions {
    pub gaussian_std: f64,
    /// Latent slices drawn (without replacement) from the input.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for OtCostOptions {
    fn default() -> Self {
        Self { gaussian_std: 1.0, max_points: 64, seed: 0 }
    }
}

/// Exact squared-Euclidean transport cost between the hybrid target
/// `alpha * P_z + (1 - alpha) * N(0, std^2 I)` and the empirical latent
/// measure `P_z` itself. Zero at `alpha = 1`; for fixed atoms it is convex in
/// `alpha`, hence nonincreasing on `[0, 1]`.
pub fn latent_ot_cost(latents: ArrayView2<'_, f64>, alpha: f64, opts: &OtCostOptions) -> Result<f64> {
    let n = latents.nrows();
    if n == 0 {
        return Err(contract("transport cost of an empty latent set"));
    }
    let m = n.min(opts.max_points.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut seeded_rng(opts.seed, 0));
        idx.truncate(m);
        idx.sort_unstable();
    }
    let z = latents.select(Axis(0), &idx);
    let target = build_hybrid_target(z.view(), alpha, opts.gaussian_std, m, opts.seed)?;
    let empirical = DiscreteMeasure::uniform(z)?;
    let cost = ot::cost_matrix(&target.measure, &empirical, Metric::SqEuclidean)?;
    let plan = ot::ot_exact_capped(&target.measure, &empirical, cost.view(), usize::MAX)?;
    Ok(plan.value.max(0.0))
}

/// One evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub k: usize,
    pub d: usize,
    pub q: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub snr_db: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub ot_cost: f64,
    pub perplexity: f64,
    pub delta_mi_bits: f64,
    pub index_error_rate: f64,
    pub symbol_ws: f64,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("accuracy", self.accuracy), ("index_error_rate", self.index_error_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(contract(format!("{name} = {v} is not a fraction")));
            }
        }
        let finite = [self.ot_cost, self.perplexity, self.delta_mi_bits, self.symbol_ws, self.wall_time_s, self.alpha, self.lambda];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(contract("metrics record has a non-finite field"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modem::discrete_entropy;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn mi_identity_and_independence() {
        let a: Vec<usize> = (0..1000).map(|i| i % 10).collect();
        assert!((mi_plugin(&a, &a).unwrap() - 10f64.log2()).abs() < 1e-12);
        // Exact product joint: every (x, y) pair once.
        let (x, y): (Vec<usize>, Vec<usize>) = (0..4).flat_map(|i| (0..3).map(move |j| (i, j))).unzip();
        assert!(mi_plugin(&x, &y).unwrap().abs() < 1e-15);
        assert!(mi_plugin(&[], &[]).is_err());
    }

    #[test]
    fn mi_two_by_two_reference() {
        // Joint counts [[40, 10], [10, 40]]; 40-digit reference value.
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (x, y, c) in [(0, 0, 40), (0, 1, 10), (1, 0, 10), (1, 1, 40)] {
            a.extend(std::iter::repeat_n(x, c));
            b.extend(std::iter::repeat_n(y, c));
        }
        assert!((mi_plugin(&a, &b).unwrap() - 0.27807190511263765).abs() < 1e-15);
    }

    #[test]
    fn delta_mi_cases() {
        let labels: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let pre = Array2::from_shape_fn((200, 2), |(i, q)| (labels[i] + q) % 4);
        assert_eq!(delta_mi(pre.view(), pre.view(), &labels).unwrap(), 0.0);
        // A constant stream carries no information about the labels.
        let post = Array2::zeros((200, 2));
        let full = mi_plugin(&pre.column(0).to_vec(), &labels).unwrap();
        assert!((delta_mi(pre.view(), post.view(), &labels).unwrap() + full).abs() < 1e-12);
        assert!(delta_mi(pre.view(), Array2::zeros((3, 2)).view(), &labels).is_err());
    }

    #[test]
    fn delta_mi_independent_labels_within_bias() {
        let mut rng = seeded_rng(4, 0);
        use rand::Rng;
        let n = 4000;
        let (k, y) = (16usize, 4usize);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..y)).collect();
        let pre = Array2::from_shape_fn((n, 2), |_| rng.random_range(0..k));
        let post = Array2::from_shape_fn((n, 2), |_| rng.random_range(0..k));
        let bias = (k * y) as f64 / (2.0 * n as f64 * std::f64::consts::LN_2);
        assert!(delta_mi(pre.view(), post.view(), &labels).unwrap().abs() <= bias);
    }

    #[test]
    fn index_error_rate_cases() {
        let a = array![[1usize, 2], [3, 4]];
        assert_eq!(index_error_rate(a.view(), a.view()).unwrap(), 0.0);
        assert_eq!(index_error_rate(array![[0usize]].view(), array![[5usize]].view()).unwrap(), 1.0);
        assert!(index_error_rate(a.view(), array![[1usize, 2]].view()).is_err());
    }

    #[test]
    fn symbol_ws_cases() {
        let c = Constellation::new(16).unwrap();
        let uni = symbol_target_pmf(&c, SymbolTarget::Uniform);
        assert!(symbol_ws_diagnostic(uni.view(), &c, SymbolTarget::Uniform).unwrap().abs() < 1e-15);
        let g = symbol_target_pmf(&c, SymbolTarget::Gaussian);
        assert!(symbol_ws_diagnostic(g.view(), &c, SymbolTarget::Gaussian).unwrap().abs() < 1e-15);
        // One-hot on a corner: all mass moves from that point, so the cost is
        // the mean squared distance to the uniform constellation.
        let corner = c.lattice_index(0, 0);
        let mut onehot = Array1::zeros(16);
        onehot[corner] = 1.0;
        let s0 = c.symbols()[corner];
        let expected = c.symbols().iter().map(|s| (s - s0).norm_sqr()).sum::<f64>() / 16.0;
        let got = symbol_ws_diagnostic(onehot.view(), &c, SymbolTarget::Uniform).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(symbol_ws_diagnostic(array![0.5, 0.6].view(), &c, SymbolTarget::Uniform).is_err());
    }

    #[test]
    fn ot_cost_endpoints() {
        let mut rng = seeded_rng(1, 0);
        use rand::Rng;
        let z = Array2::from_shape_fn((40, 3), |_| rng.random_range(-2.0..2.0));
        let opts = OtCostOptions::default();
        assert_eq!(latent_ot_cost(z.view(), 1.0, &opts).unwrap(), 0.0);
        let costs: Vec<f64> = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0].iter().map(|&a| latent_ot_cost(z.view(), a, &opts).unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{costs:?}");
        assert!(costs[0] > 0.0);
    }

    proptest! {
        #[test]
        fn mi_symmetric_and_entropy(a in prop::collection::vec(0usize..6, 1..200), seed in 0u64..1000) {
            let b: Vec<usize> = a.iter().enumerate().map(|(i, &x)| (x * 7 + i + seed as usize) % 5).collect();
            prop_assert_eq!(mi_plugin(&a, &b).unwrap(), mi_plugin(&b, &a).unwrap());
            let n = a.len() as f64;
            let pmf = Array1::from_iter(counts(&a).values().map(|&c| c as f64 / n));
            let h = discrete_entropy(pmf.view()).unwrap();
            prop_assert!((mi_plugin(&a, &a).unwrap() - h).abs() < 1e-12);
            prop_assert!(mi_plugin(&a, &b).unwrap() >= 0.0);
        }

        #[test]
        fn symbol_ws_invariant_under_relabeling(perm_seed in 0u64..500, w in prop::collection::vec(0.01f64..1.0, 16)) {
            use rand::seq::SliceRandom;
            let c = Constellation::new(16).unwrap();
            let w = Array1::from(w);
            let w = &w / w.sum();
            let base = symbol_ws_diagnostic(w.view(), &c, SymbolTarget::Uniform).unwrap();
            // Permutations realized by constellation symmetries (axis flips and
            // the I/Q swap) preserve every pairwise distance.
            let mut rng = seeded_rng(perm_seed, 0);
            let mut ops = [0u8, 1, 2];
            ops.shuffle(&mut rng);
            let side = c.side();
            let map = |i: usize| {
                let (mut a, mut b) = c.lattice_position(i);
                match ops[0] {
                    0 => a = side - 1 - a,
                    1 => b = side - 1 - b,
                    _ => std::mem::swap(&mut a, &mut b),
                }
                c.lattice_index(a, b)
            };
            let mut moved = Array1::zeros(16);
            for i in 0..16 {
                moved[map(i)] = w[i];
            }
            let got = symbol_ws_diagnostic(moved.view(), &c, SymbolTarget::Uniform).unwrap();
            prop_assert!((got - base).abs() < 1e-12);
        }
    }
}

//! Hybrid uniform/Gaussian target and the Wasserstein-regularized training
//! objective.
//!
//! The regularizer transports the hybrid target
//! `P_H = alpha * (batch latents) + (1 - alpha) * N(0, s^2 I)` onto the codebook
//! measure `sum_k pi_k delta(e_k)` with `pi = softmax(beta)`, averaged over the
//! latent components. Gradients follow from the entropic plan: support-point
//! gradients with the plan held fixed, and the centred target potential for
//! the weights, chained through the softmax Jacobian.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::codebook::{check_finite, codeword_weights, Codebook};
use crate::error::{config, contract, Result};
use crate::ot::{self, DiscreteMeasure, Metric, SinkhornOptions, TransportPlan};
use crate::{par, seeded_rng};

#[derive(Debug, Clone)]
pub struct HybridTarget {
    pub alpha: f64,
    pub gaussian_std: f64,
    /// Number of leading atoms that are batch latents (weight `alpha / B` each).
    pub n_batch: usize,
    /// Number of trailing Gaussian atoms (weight `(1 - alpha) / G` each).
    pub n_gauss: usize,
    pub measure: DiscreteMeasure,
}

/// Builds `alpha * P_batch + (1 - alpha) * P_gauss` from a `B x D` latent slice.
pub fn build_hybrid_target(
    z: ArrayView2<'_, f64>,
    alpha: f64,
    gaussian_std: f64,
    n_gauss: usize,
    seed: u64,
) -> Result<HybridTarget> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(config(format!("mixing weight alpha must lie in [0, 1], got {alpha}")));
    }
    if !(gaussian_std.is_finite() && gaussian_std >= 0.0) {
        return Err(config(format!("gaussian_std must be finite and nonnegative, got {gaussian_std}")));
    }
    let (b, d) = z.dim();
    if alpha > 0.0 && b == 0 {
        return Err(contract("hybrid target with alpha > 0 needs a nonempty latent batch"));
    }
    if alpha < 1.0 && n_gauss == 0 {
        return Err(config("hybrid target with alpha < 1 needs at least one Gaussian atom"));
    }
    check_finite(z.iter(), "latent batch")?;
    let n_batch = if alpha > 0.0 { b } else { 0 };
    let n_gauss = if alpha < 1.0 { n_gauss } else { 0 };
    let mut points = Array2::zeros((n_batch + n_gauss, d));
    let mut weights = Array1::zeros(n_batch + n_gauss);
    if n_batch > 0 {
        points.slice_mut(s![..n_batch, ..]).assign(&z);
        weights.slice_mut(s![..n_batch]).fill(alpha / n_batch as f64);
    }
    if n_gauss > 0 {
        let mut rng = seeded_rng(seed, 0);
        points.slice_mut(s![n_batch.., ..]).mapv_inplace(|_| {
            let x: f64 = StandardNormal.sample(&mut rng);
            x * gaussian_std
        });
        weights.slice_mut(s![n_batch..]).fill((1.0 - alpha) / n_gauss as f64);
    }
    let measure = DiscreteMeasure::new(points, weights)?;
    Ok(HybridTarget { alpha, gaussian_std, n_batch, n_gauss, measure })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WsConfig {
    /// Weight of the transport term in the composite loss.
    pub lambda: f64,
    pub alpha: f64,
    pub gaussian_std: f64,
    /// Gaussian atoms per target; `None` uses the batch size.
    pub n_gauss: Option<usize>,
    /// Entropic regularization; `None` uses `0.05 * mean(C)` per solve.
    pub eps: Option<f64>,
    pub metric: Metric,
    /// One target per latent component instead of a single pooled target.
    pub per_q: bool,
    pub max_iter: usize,
    pub tol: f64,
    /// Per-solve regularization that overrides `eps`, in solve order. The
    /// automatic `eps` is a stop-gradient quantity; pinning it lets a caller
    /// re-evaluate the loss at perturbed parameters with the same `eps`.
    pub eps_per_solve: Option<Vec<f64>>,
}

impl Default for WsConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            alpha: 0.5,
            gaussian_std: 1.0,
            n_gauss: None,
            eps: None,
            metric: Metric::SqEuclidean,
            per_q: false,
            max_iter: 2000,
            tol: 1e-6,
            eps_per_solve: None,
        }
    }
}

impl WsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if let Some(eps) = self.eps {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(config(format!("eps must be > 0, got {eps}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    fn sinkhorn_options(&self, c: ArrayView2<'_, f64>) -> SinkhornOptions {
        let eps = self.eps.unwrap_or_else(|| ot::default_eps(c)).max(1e-12);
        SinkhornOptions { eps, max_iter: self.max_iter, tol: self.tol }
    }
}

/// Builds the hybrid targets for a `B x Q x D` latent batch: a single pooled
/// target over all `B * Q` slices, or one per component when `per_q` is set.
pub fn targets_for_batch(z: ArrayView3<'_, f64>, cfg: &WsConfig, seed: u64) -> Result<Vec<HybridTarget>> {
    let (b, q, d) = z.dim();
    if cfg.per_q {
        let g = cfg.n_gauss.unwrap_or(b);
        (0..q)
            .map(|qi| build_hybrid_target(z.index_axis(Axis(1), qi), cfg.alpha, cfg.gaussian_std, g, seed.wrapping_add(qi as u64)))
            .collect()
    } else {
        let pooled = z.to_shape((b * q, d)).map_err(|e| contract(e.to_string()))?;
        let g = cfg.n_gauss.unwrap_or(b);
        Ok(vec![build_hybrid_target(pooled.view(), cfg.alpha, cfg.gaussian_std, g, seed)?])
    }
}

/// Transport-term value and gradients.
#[derive(Debug, Clone)]
pub struct WsOutput {
    pub value: f64,
    /// False when any Sinkhorn solve hit its iteration cap.
    pub converged: bool,
    pub grad_codewords: Array2<f64>,
    /// Same shape as the codebook logits.
    pub grad_logits: Array2<f64>,
    /// Per target, gradient in its batch-latent atoms (`n_batch x D`).
    pub grad_latents: Vec<Array2<f64>>,
    pub plans: Vec<TransportPlan>,
}

/// `(1/Q) sum_q W(P_H^q, P_{E, pi^q})` computed with Sinkhorn, with gradients in
/// the codewords, the logits, and the batch-latent atoms of each target.
///
/// `warm` optionally supplies target potentials from a previous call (one per
/// solve) to warm-start Sinkhorn.
pub fn ws_regularizer(
    targets: &[HybridTarget],
    cb: &Codebook,
    cfg: &WsConfig,
    warm: Option<&[Array1<f64>]>,
) -> Result<WsOutput> {
    let q = cb.q();
    if targets.is_empty() || (targets.len() != 1 && targets.len() != q) {
        return Err(contract(format!("expected 1 or {q} targets, got {}", targets.len())));
    }
    if targets.iter().any(|t| t.measure.dim() != cb.d()) {
        return Err(contract("target dimension does not match codeword dimension"));
    }
    // Distinct (target, logit row) pairs; each is weighted by how many
    // components share it.
    let rows = cb.logits.nrows();
    let mut solves: Vec<(usize, usize, f64)> = Vec::new();
    for qi in 0..q {
        let t = if targets.len() == 1 { 0 } else { qi };
        let r = if rows == 1 { 0 } else { qi };
        match solves.iter_mut().find(|(a, b, _)| *a == t && *b == r) {
            Some(entry) => entry.2 += 1.0 / q as f64,
            None => solves.push((t, r, 1.0 / q as f64)),
        }
    }
    let results = par::map_range(solves.len(), |si| -> Result<(TransportPlan, DiscreteMeasure, Array1<f64>)> {
        let (t, r, _) = solves[si];
        let pi = codeword_weights(cb.logits.row(r))?;
        let target_measure = DiscreteMeasure::new(cb.codewords.clone(), pi.clone())?;
        let c = ot::cost_matrix(&targets[t].measure, &target_measure, cfg.metric)?;
        let mut opts = cfg.sinkhorn_options(c.view());
        if let Some(&eps) = cfg.eps_per_solve.as_ref().and_then(|e| e.get(si)) {
            opts.eps = eps;
        }
        let warm_v = warm.and_then(|w| w.get(si)).map(|v| v.view());
        let plan = ot::sinkhorn_with(&targets[t].measure, &target_measure, c.view(), &opts, warm_v)?;
        Ok((plan, target_measure, pi))
    });
    let mut value = 0.0;
    let mut converged = true;
    let mut grad_codewords = Array2::zeros(cb.codewords.dim());
    let mut grad_logits = Array2::zeros(cb.logits.dim());
    let mut grad_latents: Vec<Array2<f64>> =
        targets.iter().map(|t| Array2::zeros((t.n_batch, cb.d()))).collect();
    let mut plans = Vec::with_capacity(solves.len());
    for (res, &(t, r, w)) in results.into_iter().zip(&solves) {
        let (plan, codebook_measure, pi) = res?;
        let target = &targets[t];
        value += w * plan.objective;
        converged &= plan.converged;
        let g_cw = ot::ot_grad_target_points(&plan, &target.measure, &codebook_measure, cfg.metric)?;
        grad_codewords.scaled_add(w, &g_cw);
        if target.n_batch > 0 {
            let g_src = ot::ot_grad_points(&plan, &target.measure, &codebook_measure, cfg.metric)?;
            grad_latents[t].scaled_add(w, &g_src.slice(s![..target.n_batch, ..]));
        }
        let v = ot::ot_grad_weights(&plan)?;
        let mean = pi.dot(&v);
        let g_beta = &pi * &(&v - mean);
        grad_logits.row_mut(r).scaled_add(w, &g_beta);
        plans.push(plan);
    }
    Ok(WsOutput { value, converged, grad_codewords, grad_logits, grad_latents, plans })
}

/// Scatters per-target latent-atom gradients back into a `B x Q x D` block.
pub fn latent_grad_block(out: &WsOutput, b: usize, q: usize, d: usize) -> Array3<f64> {
    let mut g = Array3::zeros((b, q, d));
    if out.grad_latents.len() == 1 {
        let pooled = &out.grad_latents[0];
        if pooled.nrows() == b * q {
            g.assign(&pooled.to_shape((b, q, d)).expect("pooled gradient shape"));
        }
    } else {
        for (qi, gq) in out.grad_latents.iter().enumerate() {
            if gq.nrows() == b {
                g.index_axis_mut(Axis(1), qi).assign(gq);
            }
        }
    }
    g
}

/// A scalar objective with gradients in the latents, codewords, and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub value: f64,
    pub latents: Array3<f64>,
    pub codewords: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Objective {
    pub fn zero(latent_shape: (usize, usize, usize), cb: &Codebook) -> Self {
        Self {
            value: 0.0,
            latents: Array3::zeros(latent_shape),
            codewords: Array2::zeros(cb.codewords.dim()),
            logits: Array2::zeros(cb.logits.dim()),
        }
    }

    pub fn from_ws(out: &WsOutput, latent_shape: (usize, usize, usize)) -> Self {
        let (b, q, d) = latent_shape;
        Self {
            value: out.value,
            latents: latent_grad_block(out, b, q, d),
            codewords: out.grad_codewords.clone(),
            logits: out.grad_logits.clone(),
        }
    }
}

/// `task + lambda * ws`, blockwise.
pub fn composite_loss(task: &Objective, ws: &Objective, lambda: f64) -> Result<Objective> {
    if !task.value.is_finite() || !ws.value.is_finite() {
        return Err(contract("composite loss inputs must be finite"));
    }
    if task.latents.dim() != ws.latents.dim() || task.codewords.dim() != ws.codewords.dim() || task.logits.dim() != ws.logits.dim() {
        return Err(contract("gradient blocks of the task and transport terms differ in shape"));
    }
    if lambda == 0.0 {
        return Ok(task.clone());
    }
    Ok(Objective {
        value: task.value + lambda * ws.value,
        latents: &task.latents + &(&ws.latents * lambda),
        codewords: &task.codewords + &(&ws.codewords * lambda),
        logits: &task.logits + &(&ws.logits * lambda),
    })
}

/// Minimizes the transport term alone over the codewords with fixed weights
/// `pi` and the batch as the whole target (`alpha = 1`). Each round solves the
/// entropic plan and moves every codeword to its plan barycentre, which is a
/// gradient step of size `1 / (2 pi_k)`.
pub fn fit_codewords_ws(
    latents: ArrayView2<'_, f64>,
    init: Array2<f64>,
    pi: &Array1<f64>,
    eps_scale: f64,
    rounds: usize,
) -> Result<Array2<f64>> {
    let source = DiscreteMeasure::uniform(latents.to_owned())?;
    let mut codewords = init;
    let mut warm: Option<Array1<f64>> = None;
    for _ in 0..rounds {
        let target = DiscreteMeasure::new(codewords.clone(), pi.clone())?;
        let c = ot::cost_matrix(&source, &target, Metric::SqEuclidean)?;
        let opts = SinkhornOptions { eps: eps_scale * c.mean().unwrap_or(1.0), max_iter: 20_000, tol: 1e-7 };
        let plan = ot::sinkhorn_with(&source, &target, c.view(), &opts, warm.as_ref().map(|v| v.view()))?;
        let grad = ot::ot_grad_target_points(&plan, &source, &target, Metric::SqEuclidean)?;
        let step = pi.mapv(|p| 1.0 / (2.0 * p)).insert_axis(Axis(1));
        let next = &codewords - &(&grad * &step);
        let moved = (&next - &codewords).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        codewords = next;
        warm = plan.dual_v;
        if moved < 1e-8 {
            break;
        }
    }
    Ok(codewords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::Init;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn target_mixing_arithmetic() {
        let mut rng = seeded_rng(1, 0);
        let z = Array2::from_shape_fn((32, 3), |_| rng.random_range(-1.0..1.0));
        let t = build_hybrid_target(z.view(), 1.0, 1.0, 16, 0).unwrap();
        assert_eq!(t.measure.len(), 32);
        assert!(t.measure.weights.iter().all(|&w| w == 1.0 / 32.0));
        let t = build_hybrid_target(z.view(), 0.0, 1.0, 64, 0).unwrap();
        assert_eq!(t.measure.len(), 64);
        assert!(t.measure.weights.iter().all(|&w| w == 1.0 / 64.0));
        let t = build_hybrid_target(z.view(), 0.5, 1.0, 32, 0).unwrap();
        assert_eq!(t.measure.len(), 64);
        assert!(t.measure.weights.slice(s![..32]).iter().all(|&w| w == 1.0 / 64.0));
        assert_eq!(t.measure.points.slice(s![..32, ..]), z);
        assert!((t.measure.weights.sum() - 1.0).abs() < 1e-12);
        assert!(build_hybrid_target(z.view(), 1.5, 1.0, 4, 0).is_err());
        assert!(build_hybrid_target(z.view(), -0.1, 1.0, 4, 0).is_err());
        assert!(build_hybrid_target(z.view(), 0.5, 1.0, 0, 0).is_err());
    }

    #[test]
    fn gaussian_atoms_are_seeded() {
        let z = Array2::zeros((4, 2));
        let a = build_hybrid_target(z.view(), 0.0, 2.0, 2000, 9).unwrap();
        let b = build_hybrid_target(z.view(), 0.0, 2.0, 2000, 9).unwrap();
        assert_eq!(a.measure, b.measure);
        let var = a.measure.points.mapv(|x| x * x).mean().unwrap();
        assert!((var - 4.0).abs() < 0.3, "variance {var}");
    }

    #[test]
    fn self_transport_bound() {
        let cb = Codebook::new(6, 2, 1, Init::Gaussian, 3).unwrap();
        let cfg = WsConfig { alpha: 1.0, eps: Some(0.01), tol: 1e-10, max_iter: 10_000, ..WsConfig::default() };
        // One latent per codeword reproduces the codebook measure under uniform pi.
        let z = cb.codewords.clone().into_shape_with_order((6, 1, 2)).unwrap();
        let targets = targets_for_batch(z.view(), &cfg, 0).unwrap();
        let out = ws_regularizer(&targets, &cb, &cfg, None).unwrap();
        assert!(out.value <= 0.01 * 6f64.ln() + 1e-9, "{}", out.value);
    }

    #[test]
    fn logit_gradient_prefers_matching_codeword() {
        let cb = Codebook::from_codewords(array![[0.0], [1.0]], 1).unwrap();
        let z = Array3::zeros((1, 1, 1));
        let cfg = WsConfig { alpha: 1.0, eps: Some(0.01), ..WsConfig::default() };
        let targets = targets_for_batch(z.view(), &cfg, 0).unwrap();
        let out = ws_regularizer(&targets, &cb, &cfg, None).unwrap();
        // Descent raises beta_0 and lowers beta_1.
        assert!(out.grad_logits[[0, 0]] < 0.0 && out.grad_logits[[0, 1]] > 0.0, "{}", out.grad_logits);
    }

    fn fd_instance() -> (Codebook, Array3<f64>, WsConfig) {
        let mut cb = Codebook::new(4, 2, 2, Init::Gaussian, 5).unwrap();
        let mut rng = seeded_rng(6, 0);
        cb.logits = Array2::from_shape_fn((1, 4), |_| rng.random_range(-0.5..0.5));
        let z = Array3::from_shape_fn((8, 2, 2), |_| rng.random_range(-1.0..1.0));
        let cfg = WsConfig { alpha: 0.5, eps: Some(0.05), tol: 1e-13, max_iter: 100_000, ..WsConfig::default() };
        (cb, z, cfg)
    }

    fn value_at(cb: &Codebook, z: &Array3<f64>, cfg: &WsConfig) -> f64 {
        let targets = targets_for_batch(z.view(), cfg, 42).unwrap();
        ws_regularizer(&targets, cb, cfg, None).unwrap().value
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (cb, z, cfg) = fd_instance();
        let targets = targets_for_batch(z.view(), &cfg, 42).unwrap();
        let out = ws_regularizer(&targets, &cb, &cfg, None).unwrap();
        assert!(out.converged);
        let gz = latent_grad_block(&out, 8, 2, 2);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in [(0, 0, 0), (3, 1, 1), (7, 0, 1), (5, 1, 0)] {
            let (mut up, mut dn) = (z.clone(), z.clone());
            up[idx] += h;
            dn[idx] -= h;
            let fd = (value_at(&cb, &up, &cfg) - value_at(&cb, &dn, &cfg)) / (2.0 * h);
            worst = worst.max(rel(fd, gz[idx]));
        }
        for k in 0..4 {
            for j in 0..2 {
                let (mut up, mut dn) = (cb.clone(), cb.clone());
                up.codewords[[k, j]] += h;
                dn.codewords[[k, j]] -= h;
                let fd = (value_at(&up, &z, &cfg) - value_at(&dn, &z, &cfg)) / (2.0 * h);
                worst = worst.max(rel(fd, out.grad_codewords[[k, j]]));
            }
            let (mut up, mut dn) = (cb.clone(), cb.clone());
            up.logits[[0, k]] += h;
            dn.logits[[0, k]] -= h;
            let fd = (value_at(&up, &z, &cfg) - value_at(&dn, &z, &cfg)) / (2.0 * h);
            worst = worst.max(rel(fd, out.grad_logits[[0, k]]));
        }
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn per_component_targets_and_logits() {
        let (mut cb, z, mut cfg) = fd_instance();
        cfg.per_q = true;
        cb.logits = array![[0.1, -0.2, 0.3, 0.0], [0.0, 0.5, -0.5, 0.2]];
        let targets = targets_for_batch(z.view(), &cfg, 42).unwrap();
        assert_eq!(targets.len(), 2);
        let out = ws_regularizer(&targets, &cb, &cfg, None).unwrap();
        assert_eq!(out.plans.len(), 2);
        assert_eq!(out.grad_logits.dim(), (2, 4));
        assert!(out.grad_logits.row(1).iter().any(|x| x.abs() > 0.0));
    }

    #[test]
    fn permutation_invariant() {
        let (cb, z, cfg) = fd_instance();
        let targets = targets_for_batch(z.view(), &cfg, 42).unwrap();
        let base = ws_regularizer(&targets, &cb, &cfg, None).unwrap().value;
        let perm = [2, 0, 3, 1];
        let mut p = cb.clone();
        for k in 0..4 {
            p.codewords.row_mut(perm[k]).assign(&cb.codewords.row(k));
            p.logits[[0, perm[k]]] = cb.logits[[0, k]];
        }
        let permuted = ws_regularizer(&targets, &p, &cfg, None).unwrap().value;
        assert!((base - permuted).abs() < 1e-9);
    }

    #[test]
    fn mixture_convexity() {
        let (cb, z, mut cfg) = fd_instance();
        cfg.eps = Some(1e-3);
        cfg.n_gauss = Some(16);
        let at = |alpha: f64| {
            let cfg = WsConfig { alpha, ..cfg.clone() };
            value_at(&cb, &z, &cfg)
        };
        let (v0, v1) = (at(0.0), at(1.0));
        for alpha in [0.2, 0.4, 0.6, 0.8] {
            assert!(at(alpha) <= alpha * v1 + (1.0 - alpha) * v0 + 1e-6);
        }
    }

    #[test]
    fn composite_cases() {
        let cb = Codebook::new(4, 2, 1, Init::Gaussian, 0).unwrap();
        let mut task = Objective::zero((2, 1, 2), &cb);
        task.value = 1.0;
        task.latents.fill(1.0);
        let mut ws = Objective::zero((2, 1, 2), &cb);
        ws.value = 0.5;
        ws.codewords.fill(2.0);
        assert_eq!(composite_loss(&task, &ws, 0.0).unwrap(), task);
        assert_eq!(composite_loss(&task, &Objective::zero((2, 1, 2), &cb), 3.0).unwrap().value, 1.0);
        let total = composite_loss(&task, &ws, 2.0).unwrap();
        assert_eq!(total.value, 2.0);
        assert!(total.codewords.iter().all(|&x| x == 4.0));
        assert!(total.latents.iter().all(|&x| x == 1.0));
        ws.value = f64::NAN;
        assert!(composite_loss(&task, &ws, 1.0).is_err());
    }

    #[test]
    fn ws_fit_reaches_cluster_centres() {
        let centres = array![[-3.0, 0.0], [3.0, 0.0], [0.0, 3.0], [0.0, -3.0]];
        let mut rng = seeded_rng(2, 0);
        let z = Array2::from_shape_fn((80, 2), |(i, j)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            centres[[i % 4, j]] + 0.3 * n
        });
        let init = crate::codebook::forgy_init(z.view(), 4, &mut rng);
        let pi = Array1::from_elem(4, 0.25);
        let fitted = fit_codewords_ws(z.view(), init, &pi, 1e-3, 200).unwrap();
        let d = crate::codebook::quantization_distortion(z.view(), &fitted);
        assert!(d < 0.3, "distortion {d}");
    }
}

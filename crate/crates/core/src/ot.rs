//! Discrete optimal transport between weighted point sets.
//!
//! [`ot_exact`] solves the transport linear program by successive shortest
//! augmenting paths (with an assignment fast path for uniform `n`-vs-`n`
//! problems). [`sinkhorn`] solves the entropic problem
//! `min <P, C> + eps * KL(P | a x b)` in the log domain and returns dual
//! potentials, which give exact gradients of the regularized objective in
//! the marginal weights.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::codebook::check_finite;
use crate::error::{config, contract, Error, Result};
use crate::par;

/// Default cell cap for [`ot_exact`].
pub const EXACT_CELL_CAP: usize = 4096;

/// Weights this close to each other are treated as a uniform marginal.
const UNIFORM_TOL: f64 = 1e-12;
/// Flow amounts below this are treated as zero by the exact solver.
const FLOW_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    /// `M x D` support.
    pub points: Array2<f64>,
    /// Length `M`, nonnegative, sums to one.
    pub weights: Array1<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(contract("measure needs at least one atom"));
        }
        if points.nrows() != weights.len() {
            return Err(contract(format!("{} points but {} weights", points.nrows(), weights.len())));
        }
        check_finite(points.iter(), "measure support")?;
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(contract("measure weights must be finite and nonnegative"));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(contract(format!("measure weights sum to {total}, not 1")));
        }
        Ok(Self { points, weights })
    }

    /// Equal weight on every row of `points`.
    pub fn uniform(points: Array2<f64>) -> Result<Self> {
        let n = points.nrows();
        Self::new(points, Array1::from_elem(n, 1.0 / n.max(1) as f64))
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }
}

/// Ground metric between support points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Metric {
    #[default]
    SqEuclidean,
    Euclidean,
}

impl Metric {
    pub fn eval(self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        let sq: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        match self {
            Metric::SqEuclidean => sq,
            Metric::Euclidean => sq.sqrt(),
        }
    }
}

/// A coupling between two measures together with its cost and, for entropic
/// solves, the dual potentials.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// `M x N` nonnegative coupling.
    pub coupling: Array2<f64>,
    /// Transport cost `<coupling, C>`.
    pub value: f64,
    /// Value of the solved objective: equal to `value` for exact solves, the
    /// entropic objective `<P, C> + eps KL(P | a x b)` for Sinkhorn.
    pub objective: f64,
    pub dual_u: Option<Array1<f64>>,
    /// Centred to zero mean.
    pub dual_v: Option<Array1<f64>>,
    /// Entropic regularization, `0` for exact plans.
    pub eps: f64,
    pub converged: bool,
    pub iterations: usize,
    /// L1 violation of the source marginal at exit.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Array1<f64> {
        self.coupling.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.coupling.sum_axis(Axis(0))
    }
}

pub fn cost_matrix(a: &DiscreteMeasure, b: &DiscreteMeasure, metric: Metric) -> Result<Array2<f64>> {
    cost_matrix_points(a.points.view(), b.points.view(), metric)
}

pub fn cost_matrix_points(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, metric: Metric) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(contract(format!("point dimensions differ: {} vs {}", a.ncols(), b.ncols())));
    }
    let (m, n) = (a.nrows(), b.nrows());
    let rows = par::map_range(m, |i| (0..n).map(|j| metric.eval(a.row(i), b.row(j))).collect::<Vec<_>>());
    Ok(Array2::from_shape_vec((m, n), rows.concat()).expect("shape"))
}

fn check_problem(a: &DiscreteMeasure, b: &DiscreteMeasure, c: ArrayView2<'_, f64>) -> Result<()> {
    if c.dim() != (a.len(), b.len()) {
        return Err(contract(format!("cost matrix is {:?}, measures have {} and {} atoms", c.dim(), a.len(), b.len())));
    }
    check_finite(c.iter(), "cost matrix")
}

/// Exact optimal transport with the default cell cap.
pub fn ot_exact(a: &DiscreteMeasure, b: &DiscreteMeasure, c: ArrayView2<'_, f64>) -> Result<TransportPlan> {
    ot_exact_capped(a, b, c, EXACT_CELL_CAP)
}

pub fn ot_exact_capped(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    cap: usize,
) -> Result<TransportPlan> {
    check_problem(a, b, c)?;
    let cells = a.len() * b.len();
    if cells > cap {
        return Err(Error::Capacity { cells, cap });
    }
    let coupling = if is_uniform_square(&a.weights, &b.weights) {
        let perm = assignment(c);
        let n = perm.len();
        let mut p = Array2::zeros((n, n));
        for (i, &j) in perm.iter().enumerate() {
            p[[i, j]] = 1.0 / n as f64;
        }
        p
    } else {
        min_cost_flow(a.weights.view(), b.weights.view(), c)
    };
    let value = (&coupling * &c).sum();
    let marginal_error = (&coupling.sum_axis(Axis(1)) - &a.weights).mapv(f64::abs).sum();
    Ok(TransportPlan {
        coupling,
        value,
        objective: value,
        dual_u: None,
        dual_v: None,
        eps: 0.0,
        converged: true,
        iterations: 0,
        marginal_error,
    })
}

fn is_uniform_square(a: &Array1<f64>, b: &Array1<f64>) -> bool {
    let n = a.len();
    n == b.len() && {
        let w = 1.0 / n as f64;
        a.iter().chain(b.iter()).all(|&x| (x - w).abs() <= UNIFORM_TOL)
    }
}

/// Minimum-cost perfect matching (Hungarian method with potentials).
/// Returns `perm` with row `i` matched to column `perm[i]`.
pub fn assignment(c: ArrayView2<'_, f64>) -> Vec<usize> {
    let n = c.nrows();
    // 1-based arrays; index 0 is the virtual unmatched column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        matched_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    perm
}

/// Successive shortest paths on the bipartite transport network with
/// Dijkstra over reduced costs. Rows are nodes `0..m`, columns `m..m+n`.
fn min_cost_flow(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, c: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, n) = c.dim();
    let mut flow = Array2::<f64>::zeros((m, n));
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut pot = vec![0.0; m + n];
    for j in 0..n {
        pot[m + j] = c.column(j).iter().cloned().fold(f64::INFINITY, f64::min);
    }
    let mut dist = vec![f64::INFINITY; m + n];
    let mut pred = vec![usize::MAX; m + n];
    let mut done = vec![false; m + n];
    loop {
        if !supply.iter().any(|&s| s > FLOW_TOL) || !demand.iter().any(|&d| d > FLOW_TOL) {
            break;
        }
        dist.fill(f64::INFINITY);
        pred.fill(usize::MAX);
        done.fill(false);
        for i in 0..m {
            if supply[i] > FLOW_TOL {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for (v, &d) in dist.iter().enumerate() {
                if !done[v] && d < best {
                    best = d;
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < m {
                for j in 0..n {
                    let v = m + j;
                    let nd = best + (c[[u, j]] + pot[u] - pot[v]).max(0.0);
                    if nd < dist[v] {
                        dist[v] = nd;
                        pred[v] = u;
                    }
                }
            } else {
                let j = u - m;
                for i in 0..m {
                    if flow[[i, j]] > FLOW_TOL {
                        let nd = best + (-c[[i, j]] + pot[u] - pot[i]).max(0.0);
                        if nd < dist[i] {
                            dist[i] = nd;
                            pred[i] = u;
                        }
                    }
                }
            }
        }
        let target = (0..n)
            .filter(|&j| demand[j] > FLOW_TOL && dist[m + j].is_finite())
            .min_by(|&x, &y| dist[m + x].total_cmp(&dist[m + y]));
        let Some(tj) = target else { break };
        // Walk back to the source row, collecting the bottleneck.
        let mut amount = demand[tj];
        let mut v = m + tj;
        loop {
            let p = pred[v];
            if p == usize::MAX {
                amount = amount.min(supply[v]);
                break;
            }
            if p >= m {
                // backward edge p(col) -> v(row) cancels flow[v, p-m]
                amount = amount.min(flow[[v, p - m]]);
            }
            v = p;
        }
        let mut v = m + tj;
        loop {
            let p = pred[v];
            if p == usize::MAX {
                supply[v] -= amount;
                break;
            }
            if p < m {
                flow[[p, v - m]] += amount;
            } else {
                let f = &mut flow[[v, p - m]];
                *f -= amount;
                if *f < FLOW_TOL {
                    *f = 0.0;
                }
            }
            v = p;
        }
        demand[tj] -= amount;
        let cap = dist[m + tj];
        for (p, &d) in pot.iter_mut().zip(&dist) {
            if d.is_finite() {
                *p += d.min(cap);
            }
        }
    }
    flow
}

/// `0.05 * mean(C)`, the default entropic regularization.
pub fn default_eps(c: ArrayView2<'_, f64>) -> f64 {
    0.05 * c.mean().unwrap_or(0.0)
}

#[derive(Debug, Clone)]
pub struct SinkhornOptions {
    pub eps: f64,
    pub max_iter: usize,
    /// Stop once the L1 source-marginal violation falls below this.
    pub tol: f64,
}

impl SinkhornOptions {
    pub fn new(eps: f64) -> Self {
        Self { eps, max_iter: 2000, tol: 1e-6 }
    }

    pub fn for_cost(c: ArrayView2<'_, f64>) -> Self {
        Self::new(default_eps(c))
    }
}

fn ln_weights(w: &Array1<f64>) -> Vec<f64> {
    w.iter().map(|&x| if x > 0.0 { x.ln() } else { f64::NEG_INFINITY }).collect()
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Rows handled per rayon task only pay off above this many cost cells.
const PAR_CELLS: usize = 1 << 15;

fn soft_min_rows(
    c: ArrayView2<'_, f64>,
    ln_w: &[f64],
    pot: &[f64],
    eps: f64,
) -> Vec<f64> {
    let row = |i: usize| {
        let ci = c.row(i);
        log_sum_exp((0..ln_w.len()).map(move |j| ln_w[j] + (pot[j] - ci[j]) / eps))
    };
    if c.len() >= PAR_CELLS {
        par::map_range(c.nrows(), row)
    } else {
        (0..c.nrows()).map(row).collect()
    }
}

/// Log-domain Sinkhorn with the default iteration budget and tolerance.
pub fn sinkhorn(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    sinkhorn_with(a, b, c, &SinkhornOptions { eps, max_iter, tol }, None)
}

/// Log-domain Sinkhorn, optionally warm-started from a target potential.
/// Non-convergence is reported through [`TransportPlan::converged`].
pub fn sinkhorn_with(
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    c: ArrayView2<'_, f64>,
    opts: &SinkhornOptions,
    warm_v: Option<ArrayView1<'_, f64>>,
) -> Result<TransportPlan> {
    check_problem(a, b, c)?;
    let eps = opts.eps;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(config(format!("sinkhorn needs eps > 0, got {eps}")));
    }
    let (m, n) = c.dim();
    let ct = c.t().as_standard_layout().into_owned();
    let ln_a = ln_weights(&a.weights);
    let ln_b = ln_weights(&b.weights);
    let mut g = match warm_v {
        Some(v) if v.len() == n && v.iter().all(|x| x.is_finite()) => v.to_vec(),
        _ => vec![0.0; n],
    };
    let mut f = vec![0.0; m];
    let mut iterations = 0;
    let err = loop {
        let s = soft_min_rows(c, &ln_b, &g, eps);
        if iterations > 0 {
            let err: f64 = (0..m)
                .map(|i| if ln_a[i].is_finite() { ((ln_a[i] + f[i] / eps + s[i]).exp() - a.weights[i]).abs() } else { 0.0 })
                .sum();
            if err < opts.tol || iterations >= opts.max_iter {
                break err;
            }
        }
        for i in 0..m {
            f[i] = -eps * s[i];
        }
        let t = soft_min_rows(ct.view(), &ln_a, &f, eps);
        for j in 0..n {
            g[j] = -eps * t[j];
        }
        iterations += 1;
    };
    let shift = g.iter().sum::<f64>() / n as f64;
    g.iter_mut().for_each(|x| *x -= shift);
    f.iter_mut().for_each(|x| *x += shift);
    let coupling = Array2::from_shape_fn((m, n), |(i, j)| {
        let l = ln_a[i] + ln_b[j] + (f[i] + g[j] - c[[i, j]]) / eps;
        if l == f64::NEG_INFINITY { 0.0 } else { l.exp() }
    });
    let value = (&coupling * &c).sum();
    let mass = coupling.sum();
    let objective = (0..m).filter(|&i| a.weights[i] > 0.0).map(|i| a.weights[i] * f[i]).sum::<f64>()
        + (0..n).filter(|&j| b.weights[j] > 0.0).map(|j| b.weights[j] * g[j]).sum::<f64>()
        - eps * (mass - 1.0);
    Ok(TransportPlan {
        coupling,
        value,
        objective,
        dual_u: Some(Array1::from(f)),
        dual_v: Some(Array1::from(g)),
        eps,
        converged: err < opts.tol,
        iterations,
        marginal_error: err,
    })
}

/// Gradient of `sum_ij P_ij |x_i - y_j|^2` in the source points with the plan
/// held fixed: `2 sum_j P_ij (x_i - y_j)`.
pub fn ot_grad_points(plan: &TransportPlan, a: &DiscreteMeasure, b: &DiscreteMeasure, metric: Metric) -> Result<Array2<f64>> {
    if metric != Metric::SqEuclidean {
        return Err(Error::Unsupported(format!("transport gradients need the squared-Euclidean metric, got {metric:?}")));
    }
    if plan.coupling.dim() != (a.len(), b.len()) || a.dim() != b.dim() {
        return Err(contract("plan and measures have inconsistent shapes"));
    }
    let rows = plan.row_sums();
    let pulled = plan.coupling.dot(&b.points);
    let mut grad = &a.points * &rows.insert_axis(Axis(1)) - pulled;
    grad *= 2.0;
    Ok(grad)
}

/// Same as [`ot_grad_points`] for the target support.
pub fn ot_grad_target_points(
    plan: &TransportPlan,
    a: &DiscreteMeasure,
    b: &DiscreteMeasure,
    metric: Metric,
) -> Result<Array2<f64>> {
    if metric != Metric::SqEuclidean {
        return Err(Error::Unsupported(format!("transport gradients need the squared-Euclidean metric, got {metric:?}")));
    }
    if plan.coupling.dim() != (a.len(), b.len()) || a.dim() != b.dim() {
        return Err(contract("plan and measures have inconsistent shapes"));
    }
    let cols = plan.col_sums();
    let pulled = plan.coupling.t().dot(&a.points);
    let mut grad = &b.points * &cols.insert_axis(Axis(1)) - pulled;
    grad *= 2.0;
    Ok(grad)
}

/// Gradient of the entropic objective in the target weights, projected onto
/// the simplex tangent (the centred target potential).
pub fn ot_grad_weights(plan: &TransportPlan) -> Result<Array1<f64>> {
    plan.dual_v
        .clone()
        .ok_or_else(|| Error::Unsupported("exact plans carry no dual potentials; solve with sinkhorn".into()))
}

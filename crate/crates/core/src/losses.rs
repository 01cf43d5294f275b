//! Loss terms, the entropic transport solver and mixup.
//!
//! Each loss exists in two forms: a graph builder used by the training loops
//! (batched, differentiable) and a plain function over slices used for
//! inspection and tests. The plain functions build a tiny graph and evaluate
//! it, so both forms share one implementation.

use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::diffmath::{evaluate, finite_difference_check, Bindings, Graph, NodeId, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Added to masked logits before temperature scaling; `exp` of the result
/// underflows to exactly zero.
const MASK: f64 = 1e4;

/// A loss expressed as a graph with its bindings and output node.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub graph: Graph,
    pub bindings: Bindings,
    pub output: NodeId,
}

impl LossGraph {
    pub fn value(&self) -> Result<f64> {
        Ok(evaluate(&self.graph, &self.bindings)?.scalar(self.output))
    }

    pub fn finite_difference_error(&self, step: f64) -> Result<f64> {
        Ok(finite_difference_check(&self.graph, &self.bindings, self.output, step)?)
    }
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    let s: f64 = v.iter().sum();
    if v.iter().any(|&x| x < 0.0 || !x.is_finite()) || (s - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{name} is not a probability vector (sum {s})")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Cross-entropy

/// `-Σ_k y_k ln p_k` over probabilities.
pub fn cross_entropy_graph(p: &[f64], y: &[f64]) -> Result<LossGraph> {
    if p.len() != y.len() {
        return Err(Error::Dimension { expected: y.len(), got: p.len() });
    }
    check_distribution("p", p)?;
    check_distribution("y", y)?;
    if p.iter().zip(y).any(|(&pk, &yk)| yk > 0.0 && pk <= 0.0) {
        return Err(Error::invalid("zero probability on a labelled class"));
    }
    // Only the supported coordinates enter the log, so zero entries of `p`
    // elsewhere stay legal.
    let support: Vec<usize> = (0..y.len()).filter(|&k| y[k] > 0.0).collect();
    let mut g = Graph::new();
    let pn = g.param("p");
    let sel = Tensor::matrix(
        p.len(),
        support.len(),
        (0..p.len()).flat_map(|r| support.iter().map(move |&c| if r == c { 1.0 } else { 0.0 })).collect(),
    );
    let sel = g.constant(sel);
    let picked = g.matmul(pn, sel);
    let lp = g.log(picked);
    let w = g.constant(Tensor::vector(support.iter().map(|&k| y[k]).collect()));
    let prod = g.mul(lp, w);
    let s = g.sum(prod);
    let output = g.neg(s);
    let bindings = [("p".to_string(), Tensor::vector(p.to_vec()))].into_iter().collect();
    Ok(LossGraph { graph: g, bindings, output })
}

pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    cross_entropy_graph(p, y)?.value()
}

/// Mean cross-entropy of `softmax(logits)` against target rows (one-hot or
/// soft).
pub fn cross_entropy_logits(g: &mut Graph, logits: NodeId, targets: Tensor) -> NodeId {
    let n = targets.rows() as f64;
    let t = g.constant(targets);
    let lp = g.log_softmax(logits);
    let prod = g.mul(lp, t);
    let s = g.sum(prod);
    g.scale(s, -1.0 / n)
}

// ---------------------------------------------------------------------------
// Chain-contrastive

/// How per-negative margins depend on the grade gap between anchor and
/// negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginSchedule {
    /// `beta0 * |gap|`.
    GradeGap,
    /// `beta0 * (K - 1 - |gap|)`: neighbouring grades get the largest margin
    /// and may stay closest.
    Adjacency,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub tau: f64,
    pub gamma: f64,
    pub beta0: f64,
    pub schedule: MarginSchedule,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { tau: 0.1, gamma: 0.0, beta0: 0.1, schedule: MarginSchedule::Adjacency }
    }
}

impl ChainConfig {
    pub fn margin(&self, anchor: usize, negative: usize, classes: usize) -> f64 {
        let gap = anchor.abs_diff(negative);
        match self.schedule {
            MarginSchedule::GradeGap => self.beta0 * gap as f64,
            MarginSchedule::Adjacency => self.beta0 * (classes.saturating_sub(1 + gap)) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config { key: "chain.tau".into(), reason: "must be positive".into() });
        }
        if !(self.gamma >= 0.0 && self.beta0 >= 0.0) || !self.gamma.is_finite() || !self.beta0.is_finite() {
            return Err(Error::Config {
                key: "chain".into(),
                reason: "margins must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Temperature and margins for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainContrastiveParams {
    pub tau: f64,
    pub gamma: f64,
    /// One margin per negative.
    pub betas: Vec<f64>,
}

impl ChainContrastiveParams {
    /// Margins from a grade schedule for negatives with the given grades.
    pub fn from_grades(cfg: &ChainConfig, anchor_grade: usize, negative_grades: &[usize], classes: usize) -> Self {
        Self {
            tau: cfg.tau,
            gamma: cfg.gamma,
            betas: negative_grades.iter().map(|&n| cfg.margin(anchor_grade, n, classes)).collect(),
        }
    }
}

/// `-ln[e^{(a·k⁺-γ)/τ} / (e^{(a·k⁺-γ)/τ} + Σ_j e^{(a·k⁻_j-β_j)/τ})]` on
/// L2-normalised vectors.
pub fn chain_contrastive_graph(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    params: &ChainContrastiveParams,
) -> Result<LossGraph> {
    if negatives.is_empty() {
        return Err(Error::invalid("chain-contrastive loss needs at least one negative"));
    }
    if params.betas.len() != negatives.len() {
        return Err(Error::Dimension { expected: negatives.len(), got: params.betas.len() });
    }
    if !(params.tau > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let d = anchor.len();
    if positive.len() != d || negatives.iter().any(|n| n.len() != d) {
        return Err(Error::invalid("feature dimensions differ"));
    }
    // Row 0 of the key matrix is the positive, the rest are negatives.
    let mut g = Graph::new();
    let a = g.param("anchor");
    let keys = g.param("keys");
    let an = g.normalize(a);
    let kn = g.normalize(keys);
    let sims = g.matmul(kn, an);
    let mut margins = vec![params.gamma];
    margins.extend(&params.betas);
    let mvec = g.constant(Tensor::vector(margins));
    let shifted = g.sub(sims, mvec);
    let logits = g.scale(shifted, 1.0 / params.tau);
    let ls = g.log_softmax(logits);
    let mut first = vec![0.0; negatives.len() + 1];
    first[0] = 1.0;
    let sel = g.constant(Tensor::vector(first));
    let picked = g.mul(ls, sel);
    let s = g.sum(picked);
    let output = g.neg(s);
    let mut rows = vec![positive.to_vec()];
    rows.extend(negatives.iter().cloned());
    let bindings =
        [("anchor".to_string(), Tensor::vector(anchor.to_vec())), ("keys".to_string(), Tensor::from_rows(&rows))]
            .into_iter()
            .collect();
    Ok(LossGraph { graph: g, bindings, output })
}

pub fn chain_contrastive(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    params: &ChainContrastiveParams,
) -> Result<f64> {
    chain_contrastive_graph(anchor, positive, negatives, params)?.value()
}

/// Batched chain-contrastive loss. Each anchor uses the next same-class
/// batch mate (cyclically) as positive and every other-class batch mate as a
/// negative. Anchors lacking either are skipped; returns `None` when no
/// anchor qualifies.
pub fn chain_contrastive_batch(
    g: &mut Graph,
    features: NodeId,
    labels: &[usize],
    classes: usize,
    cfg: &ChainConfig,
) -> Option<NodeId> {
    let n = labels.len();
    let mut margins = vec![MASK; n * n];
    let mut select = vec![0.0; n * n];
    let mut anchors = Vec::new();
    for i in 0..n {
        let positive = (1..n).map(|k| (i + k) % n).find(|&j| labels[j] == labels[i]);
        let has_negative = labels.iter().any(|&l| l != labels[i]);
        if let (Some(p), true) = (positive, has_negative) {
            anchors.push((i, p));
        }
    }
    if anchors.is_empty() {
        return None;
    }
    let w = 1.0 / anchors.len() as f64;
    for &(i, p) in &anchors {
        margins[i * n + p] = cfg.gamma;
        select[i * n + p] = w;
        for j in 0..n {
            if labels[j] != labels[i] {
                margins[i * n + j] = cfg.margin(labels[i], labels[j], classes);
            }
        }
    }
    let fnorm = g.normalize(features);
    let ft = g.transpose(fnorm);
    let sims = g.matmul(fnorm, ft);
    let m = g.constant(Tensor::matrix(n, n, margins));
    let shifted = g.sub(sims, m);
    let logits = g.scale(shifted, 1.0 / cfg.tau);
    let ls = g.log_softmax(logits);
    let sel = g.constant(Tensor::matrix(n, n, select));
    let picked = g.mul(ls, sel);
    let s = g.sum(picked);
    Some(g.neg(s))
}

// ---------------------------------------------------------------------------
// Prototype contrastive

/// InfoNCE of a feature against class prototypes, positive = own class.
pub fn prototype_contrastive_graph(h: &[f64], prototypes: &Tensor, label: usize, tau: f64) -> Result<LossGraph> {
    let k = prototypes.rows();
    if k < 2 || prototypes.shape().len() != 2 {
        return Err(Error::invalid("prototype contrastive loss needs at least two prototypes"));
    }
    if label >= k {
        return Err(Error::ClassOutOfRange { class: label, classes: k });
    }
    if h.len() != prototypes.cols() {
        return Err(Error::Dimension { expected: prototypes.cols(), got: h.len() });
    }
    let mut g = Graph::new();
    let hn = g.param("h");
    let out = prototype_contrastive_batch(&mut g, hn, prototypes, &[label], tau);
    let bindings = [("h".to_string(), Tensor::matrix(1, h.len(), h.to_vec()))].into_iter().collect();
    Ok(LossGraph { graph: g, bindings, output: out })
}

pub fn prototype_contrastive(h: &[f64], prototypes: &Tensor, label: usize, tau: f64) -> Result<f64> {
    prototype_contrastive_graph(h, prototypes, label, tau)?.value()
}

/// Mean prototype-contrastive loss of a `[n, d]` feature batch. Prototypes
/// are constants.
pub fn prototype_contrastive_batch(
    g: &mut Graph,
    features: NodeId,
    prototypes: &Tensor,
    labels: &[usize],
    tau: f64,
) -> NodeId {
    let p = g.constant(prototypes.clone());
    let pn = g.normalize(p);
    let pt = g.transpose(pn);
    let hn = g.normalize(features);
    let sims = g.matmul(hn, pt);
    let logits = g.scale(sims, 1.0 / tau);
    cross_entropy_logits(g, logits, Tensor::one_hot(labels, prototypes.rows()))
}

// ---------------------------------------------------------------------------
// Entropic optimal transport

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub eps: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self { eps: 0.05, max_iters: 200, tol: 1e-6 }
    }
}

/// Entropic transport plan between row and column marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// `[n, K]`
    pub plan: Tensor,
    pub row_marginal: Vec<f64>,
    pub col_marginal: Vec<f64>,
    pub eps: f64,
    pub iterations: usize,
    /// Largest absolute marginal violation of the returned plan.
    pub violation: f64,
    /// Set when `violation` is still above the tolerance after `max_iters`.
    pub not_converged: bool,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Regularisation ratio between consecutive solver stages.
const STAGE_FACTOR: f64 = 4.0;
const STAGE_TOL: f64 = 1e-6;
const STAGE_CAP: usize = 20;
const SWEEPS_PER_STAGE: usize = 3;
const STEP_CAP: f64 = 10.0;

/// Dual objective `<a, f> + <b, g> - ε Σ exp((f_i + g_j - C_ij) / ε)`.
fn dual_value(c: &[f64], a: &[f64], b: &[f64], eps: f64, f: &[f64], g: &[f64]) -> f64 {
    let k = b.len();
    let mut mass = 0.0;
    for (i, fi) in f.iter().enumerate() {
        for (j, gj) in g.iter().enumerate() {
            mass += ((fi + gj - c[i * k + j]) / eps).exp();
        }
    }
    crate::diffmath::dot(a, f) + crate::diffmath::dot(b, g) - eps * mass
}

/// Largest absolute marginal violation of the plan for potentials `f, g`.
fn marginal_gap(c: &[f64], a: &[f64], b: &[f64], eps: f64, f: &[f64], g: &[f64]) -> f64 {
    let k = b.len();
    let mut cols = vec![0.0; k];
    let mut worst = 0.0f64;
    for (i, fi) in f.iter().enumerate() {
        let mut row = 0.0;
        for (j, gj) in g.iter().enumerate() {
            let p = ((fi + gj - c[i * k + j]) / eps).exp();
            row += p;
            cols[j] += p;
        }
        worst = worst.max((row - a[i]).abs());
    }
    cols.iter().zip(b).fold(worst, |w, (s, bj)| w.max((s - bj).abs()))
}

/// One damped Newton ascent step on the dual with the last column
/// potential held fixed. Returns false when the system is singular or no
/// ascent step is found, leaving the potentials unchanged.
fn newton_step(c: &[f64], a: &[f64], b: &[f64], eps: f64, f: &mut [f64], g: &mut [f64]) -> bool {
    let (n, k) = (a.len(), b.len());
    let m = n + k - 1;
    let mut p = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..k {
            p[i * k + j] = ((f[i] + g[j] - c[i * k + j]) / eps).exp();
        }
    }
    let rows: Vec<f64> = (0..n).map(|i| p[i * k..(i + 1) * k].iter().sum()).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..n).map(|i| p[i * k + j]).sum()).collect();
    // Negated Hessian times ε, and ε times the gradient.
    let mut h = vec![0.0; m * m];
    let mut rhs = vec![0.0; m];
    for i in 0..n {
        h[i * m + i] = rows[i];
        rhs[i] = eps * (a[i] - rows[i]);
        for j in 0..k - 1 {
            h[i * m + n + j] = p[i * k + j];
            h[(n + j) * m + i] = p[i * k + j];
        }
    }
    for j in 0..k - 1 {
        h[(n + j) * m + n + j] = cols[j];
        rhs[n + j] = eps * (b[j] - cols[j]);
    }
    let Some(mut step) = solve_dense(h, rhs, m) else { return false };
    // Nearly disconnected supports give huge steps; each entry of the plan
    // may change by at most a factor e^STEP_CAP per step.
    let longest = step.iter().fold(0.0f64, |w, v| w.max(v.abs()));
    if longest > STEP_CAP * eps {
        let s = STEP_CAP * eps / longest;
        step.iter_mut().for_each(|v| *v *= s);
    }
    let grad_dot: f64 = (0..n).map(|i| (a[i] - rows[i]) * step[i]).sum::<f64>()
        + (0..k - 1).map(|j| (b[j] - cols[j]) * step[n + j]).sum::<f64>();
    if !(grad_dot > 0.0) {
        return false;
    }
    let d0 = dual_value(c, a, b, eps, f, g);
    let v0 = marginal_gap(c, a, b, eps, f, g);
    // Near the optimum dual gains drop below rounding; then a step that
    // shrinks the marginal gap without losing dual value is accepted.
    let noise = 64.0 * f64::EPSILON * (d0.abs() + 1.0);
    let mut t = 1.0;
    for _ in 0..40 {
        let nf: Vec<f64> = (0..n).map(|i| f[i] + t * step[i]).collect();
        let ng: Vec<f64> = (0..k).map(|j| g[j] + if j + 1 < k { t * step[n + j] } else { 0.0 }).collect();
        let d1 = dual_value(c, a, b, eps, &nf, &ng);
        let armijo = d1 >= d0 + 1e-4 * t * grad_dot;
        if d1.is_finite() && (armijo || (d1 >= d0 - noise && marginal_gap(c, a, b, eps, &nf, &ng) < v0)) {
            f.copy_from_slice(&nf);
            g.copy_from_slice(&ng);
            return true;
        }
        t *= 0.5;
    }
    false
}

/// Gaussian elimination with partial pivoting on a row-major `m × m`
/// system.
fn solve_dense(mut h: Vec<f64>, mut r: Vec<f64>, m: usize) -> Option<Vec<f64>> {
    for col in 0..m {
        let piv = (col..m).max_by(|&x, &y| h[x * m + col].abs().total_cmp(&h[y * m + col].abs()))?;
        if !(h[piv * m + col].abs() > 1e-300) {
            return None;
        }
        if piv != col {
            for j in 0..m {
                h.swap(col * m + j, piv * m + j);
            }
            r.swap(col, piv);
        }
        for row in col + 1..m {
            let factor = h[row * m + col] / h[col * m + col];
            if factor != 0.0 {
                for j in col..m {
                    h[row * m + j] -= factor * h[col * m + j];
                }
                r[row] -= factor * r[col];
            }
        }
    }
    let mut x = vec![0.0; m];
    for row in (0..m).rev() {
        let s: f64 = (row + 1..m).map(|j| h[row * m + j] * x[j]).sum();
        x[row] = (r[row] - s) / h[row * m + row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Entropic transport plan for `min <π, C> - ε H(π)` s.t. `π 1 = a`,
/// `πᵀ 1 = b`, by log-domain Sinkhorn sweeps with Newton acceleration.
/// `iterations` counts sweeps and Newton steps together.
pub fn sinkhorn(cost: &Tensor, a: &[f64], b: &[f64], eps: f64, max_iters: usize, tol: f64) -> Result<TransportPlan> {
    let (n, k) = (cost.rows(), cost.cols());
    if cost.shape().len() != 2 || a.len() != n || b.len() != k {
        return Err(Error::invalid(format!(
            "cost {:?} incompatible with marginals of length {} and {}",
            cost.shape(),
            a.len(),
            b.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("entropic regularisation must be positive"));
    }
    for (name, m) in [("row", a), ("column", b)] {
        if m.iter().any(|&x| !(x > 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("{name} marginal must be positive and sum to 1")));
        }
    }
    if !cost.all_finite() {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let log_a: Vec<f64> = a.iter().map(|x| x.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|x| x.ln()).collect();
    let c = cost.data();
    let mut f = vec![0.0; n];
    let mut gp = vec![0.0; k];
    let plan_of_eps = |f: &[f64], gp: &[f64], e: f64| -> Vec<f64> {
        let mut p = vec![0.0; n * k];
        for i in 0..n {
            for j in 0..k {
                p[i * k + j] = ((f[i] + gp[j] - c[i * k + j]) / e).exp();
            }
        }
        p
    };
    let violation_of = |p: &[f64]| -> f64 {
        let mut v = 0.0f64;
        for i in 0..n {
            v = v.max((p[i * k..(i + 1) * k].iter().sum::<f64>() - a[i]).abs());
        }
        for j in 0..k {
            v = v.max(((0..n).map(|i| p[i * k + j]).sum::<f64>() - b[j]).abs());
        }
        v
    };
    let sweep = |f: &mut [f64], gp: &mut [f64], e: f64| {
        for i in 0..n {
            let row = (0..k).map(|j| (gp[j] - c[i * k + j]) / e);
            f[i] = e * (log_a[i] - log_sum_exp(row));
        }
        for j in 0..k {
            let col = (0..n).map(|i| (f[i] - c[i * k + j]) / e);
            gp[j] = e * (log_b[j] - log_sum_exp(col));
        }
    };
    // Regularisation is lowered geometrically from the cost range to `eps`
    // so the potentials stay close to each stage's optimum. Within a stage a
    // few plain sweeps are followed by Newton steps on the dual (sweeps
    // again whenever Newton makes no progress).
    let (cmin, cmax) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut schedule = Vec::new();
    let mut e = eps;
    while e < cmax - cmin {
        schedule.push(e);
        e *= STAGE_FACTOR;
    }
    schedule.reverse();
    if schedule.is_empty() {
        schedule.push(eps);
    }
    let mut iterations = 0;
    let mut violation = f64::INFINITY;
    for (s, &e) in schedule.iter().enumerate() {
        let last = s + 1 == schedule.len();
        let stage_tol = if last { tol } else { tol.max(STAGE_TOL) };
        let mut it = 0;
        while iterations < max_iters && (last || it < STAGE_CAP) {
            iterations += 1;
            it += 1;
            if it <= SWEEPS_PER_STAGE || !newton_step(c, a, b, e, &mut f, &mut gp) {
                sweep(&mut f, &mut gp, e);
            }
            violation = violation_of(&plan_of_eps(&f, &gp, e));
            if violation < stage_tol {
                break;
            }
        }
    }
    let plan = plan_of_eps(&f, &gp, eps);
    Ok(TransportPlan {
        plan: Tensor::matrix(n, k, plan),
        row_marginal: a.to_vec(),
        col_marginal: b.to_vec(),
        eps,
        iterations,
        violation,
        not_converged: violation >= tol,
    })
}

// ---------------------------------------------------------------------------
// Inter-domain consistency

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub sinkhorn: SinkhornConfig,
    /// Sharpening applied to the row-normalised plan before the softmax.
    pub tau_scale: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self { sinkhorn: SinkhornConfig::default(), tau_scale: 10.0 }
    }
}

/// Soft labels from transporting weak-view features onto the prototypes:
/// cost `1 - cos`, uniform marginals, then `softmax(tau_scale * π_i / a_i)`.
pub fn transport_soft_labels(
    weak: &Tensor,
    prototypes: &Tensor,
    cfg: &TransportConfig,
) -> Result<(Tensor, TransportPlan)> {
    let k = prototypes.rows();
    transport_soft_labels_with(weak, prototypes, &vec![1.0 / k as f64; k], cfg)
}

/// As [`transport_soft_labels`] with an explicit class marginal `b`.
pub fn transport_soft_labels_with(
    weak: &Tensor,
    prototypes: &Tensor,
    b: &[f64],
    cfg: &TransportConfig,
) -> Result<(Tensor, TransportPlan)> {
    let (n, k) = (weak.rows(), prototypes.rows());
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if weak.cols() != prototypes.cols() {
        return Err(Error::Dimension { expected: prototypes.cols(), got: weak.cols() });
    }
    let mut cost = Vec::with_capacity(n * k);
    for w in weak.iter_rows() {
        for p in prototypes.iter_rows() {
            cost.push(1.0 - crate::diffmath::cosine(w, p));
        }
    }
    let a = vec![1.0 / n as f64; n];
    let s = cfg.sinkhorn;
    let plan = sinkhorn(&Tensor::matrix(n, k, cost), &a, b, s.eps, s.max_iters, s.tol)?;
    let mut soft = Vec::with_capacity(n * k);
    for (i, row) in plan.plan.iter_rows().enumerate() {
        let scaled: Vec<f64> = row.iter().map(|&p| cfg.tau_scale * p / a[i]).collect();
        soft.extend(crate::diffmath::softmax(&scaled));
    }
    Ok((Tensor::matrix(n, k, soft), plan))
}

/// Mean L1 distance between `softmax(strong_logits)` rows and fixed soft
/// labels.
pub fn inter_consistency_batch(g: &mut Graph, strong_logits: NodeId, soft_labels: Tensor) -> NodeId {
    let n = soft_labels.rows() as f64;
    let q = g.constant(soft_labels);
    let p = g.softmax(strong_logits);
    let d = g.l1_distance(p, q);
    g.scale(d, 1.0 / n)
}

pub fn inter_consistency_graph(
    weak: &Tensor,
    prototypes: &Tensor,
    strong_logits: &Tensor,
    cfg: &TransportConfig,
) -> Result<LossGraph> {
    let (soft, _) = transport_soft_labels(weak, prototypes, cfg)?;
    if strong_logits.shape() != soft.shape() {
        return Err(Error::invalid(format!(
            "strong logits {:?} do not match soft labels {:?}",
            strong_logits.shape(),
            soft.shape()
        )));
    }
    let mut g = Graph::new();
    let s = g.param("strong");
    let output = inter_consistency_batch(&mut g, s, soft);
    let bindings = [("strong".to_string(), strong_logits.clone())].into_iter().collect();
    Ok(LossGraph { graph: g, bindings, output })
}

pub fn inter_consistency(
    weak: &Tensor,
    prototypes: &Tensor,
    strong_logits: &Tensor,
    cfg: &TransportConfig,
) -> Result<f64> {
    inter_consistency_graph(weak, prototypes, strong_logits, cfg)?.value()
}

// ---------------------------------------------------------------------------
// Intra-domain consistency

/// Sum of all entries of `p_w p_sᵀ` minus its trace, i.e. `1 - p_w · p_s`.
pub fn intra_consistency_graph(p_w: &[f64], p_s: &[f64]) -> Result<LossGraph> {
    if p_w.len() != p_s.len() {
        return Err(Error::Dimension { expected: p_w.len(), got: p_s.len() });
    }
    check_distribution("p_w", p_w)?;
    check_distribution("p_s", p_s)?;
    let mut g = Graph::new();
    let w = g.param("p_w");
    let s = g.param("p_s");
    let o = g.outer(w, s);
    let total = g.sum(o);
    let tr = g.trace(o);
    let output = g.sub(total, tr);
    let bindings =
        [("p_w".to_string(), Tensor::vector(p_w.to_vec())), ("p_s".to_string(), Tensor::vector(p_s.to_vec()))]
            .into_iter()
            .collect();
    Ok(LossGraph { graph: g, bindings, output })
}

pub fn intra_consistency(p_w: &[f64], p_s: &[f64]) -> Result<f64> {
    intra_consistency_graph(p_w, p_s)?.value()
}

/// Batch mean of the per-sample off-diagonal mass of `p_w p_sᵀ`.
pub fn intra_consistency_batch(g: &mut Graph, p_w: NodeId, p_s: NodeId, n: usize) -> NodeId {
    let rw = g.row_sum(p_w);
    let rs = g.row_sum(p_s);
    let full = g.mul(rw, rs);
    let full = g.sum(full);
    let diag = g.mul(p_w, p_s);
    let diag = g.sum(diag);
    let off = g.sub(full, diag);
    g.scale(off, 1.0 / n as f64)
}

// ---------------------------------------------------------------------------
// Mixup

#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lambda: f64,
}

/// Convex blend with a fixed weight `lambda` on the first sample.
pub fn mix_with(lambda: f64, x_i: &[f64], y_i: &[f64], x_j: &[f64], y_j: &[f64]) -> Mixed {
    let blend = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| lambda * p + (1.0 - lambda) * q).collect();
    Mixed { x: blend(x_i, x_j), y: blend(y_i, y_j), lambda }
}

/// Mixup with `lambda ~ Beta(alpha, beta)`.
pub fn mixup(
    x_i: &[f64],
    y_i: &[f64],
    x_j: &[f64],
    y_j: &[f64],
    alpha: f64,
    beta: f64,
    rng: &mut Rng,
) -> Result<Mixed> {
    let lambda = sample_beta(alpha, beta, rng)?;
    Ok(mix_with(lambda, x_i, y_i, x_j, y_j))
}

pub fn sample_beta(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64> {
    let dist = Beta::new(alpha, beta).map_err(|e| Error::invalid(format!("beta({alpha}, {beta}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Uniform permutation partner for each row, used to pair mixup samples.
pub fn mixup_partners(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

// ---------------------------------------------------------------------------
// Overall objective

/// Weights of the four auxiliary adaptation terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_alg: f64,
    pub w_inter: f64,
    pub w_intra: f64,
    pub w_mix: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_alg: 1.0, w_inter: 1.0, w_intra: 1.0, w_mix: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in
            [("w_alg", self.w_alg), ("w_inter", self.w_inter), ("w_intra", self.w_intra), ("w_mix", self.w_mix)]
        {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config {
                    key: format!("lpda.weights.{k}"),
                    reason: "must be finite and >= 0".into(),
                });
            }
        }
        Ok(())
    }
}

/// Values of the five adaptation terms on one mini-batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub alignment: f64,
    pub inter: f64,
    pub intra: f64,
    pub mixup: f64,
}

pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    Ok(terms.ce
        + weights.w_alg * terms.alignment
        + weights.w_inter * terms.inter
        + weights.w_intra * terms.intra
        + weights.w_mix * terms.mixup)
}

/// Graph form of [`total_loss`]; absent terms contribute nothing.
pub fn total_loss_node(g: &mut Graph, ce: NodeId, weighted: &[(Option<NodeId>, f64)]) -> NodeId {
    let mut acc = ce;
    for &(term, w) in weighted {
        if let Some(t) = term {
            if w != 0.0 {
                let s = g.scale(t, w);
                acc = g.add(acc, s);
            }
        }
    }
    acc
}

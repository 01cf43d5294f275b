//! Acceptance checks. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing the capture of the test harness) and then asserts.
//!
//! Reference values come from oracles written here: central differences,
//! exhaustive subset search, LP vertex enumeration, rank statistics and
//! closed-form kappa.

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use rand::Rng as _;
use sfada_core::active::{greedy_select, mmd_squared, Kernel};
use sfada_core::config::RunConfig;
use sfada_core::diffmath::{evaluate, gradient, Bindings, Graph, NodeId, Tensor};
use sfada_core::harness::{self, GridOutcome};
use sfada_core::losses::{
    chain_contrastive_batch, chain_contrastive_graph, cross_entropy_graph, cross_entropy_logits,
    inter_consistency_batch, inter_consistency_graph, intra_consistency_batch, intra_consistency_graph, mix_with,
    prototype_contrastive_batch, prototype_contrastive_graph, sinkhorn, total_loss_node, transport_soft_labels,
    ChainConfig, ChainContrastiveParams, LossGraph, TransportConfig,
};
use sfada_core::metrics::{binary_roc, confusion, kappa, roc_auc, summary, ConfusionMatrix, Weighting};
use sfada_core::rng::{numbered, Rng};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Training-heavy checks run one at a time so the grid timing is not
/// shared with other work.
fn heavy() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(name: &str, ok: bool, detail: &str) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn randn(rng: &mut Rng) -> f64 {
    // Box-Muller keeps the oracle side free of the library's samplers.
    let u: f64 = rng.random::<f64>().max(1e-300);
    let v: f64 = rng.random();
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

fn randn_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| randn(rng)).collect()
}

fn simplex(k: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| 0.05 + rng.random::<f64>()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

// ---------------------------------------------------------------------------
// Gradients

const FD_STEP: f64 = 1e-5;
/// Entries smaller than this are compared on an absolute scale.
const FD_FLOOR: f64 = 1e-6;

/// Max relative disagreement between reverse-mode gradients and central
/// differences over every differentiable input.
fn fd_error(graph: &Graph, bindings: &Bindings, output: NodeId) -> f64 {
    let grads = gradient(graph, bindings, output).expect("gradient");
    let value_at = |b: &Bindings| evaluate(graph, b).expect("evaluate").scalar(output);
    let mut worst = 0.0f64;
    let names: Vec<String> = graph.inputs().filter(|(_, d)| *d).map(|(n, _)| n.to_string()).collect();
    for name in names {
        let g = grads.get(&name).expect("gradient for every parameter").clone();
        let mut probe = bindings.clone();
        for k in 0..g.len() {
            let x0 = bindings[&name].data()[k];
            probe.get_mut(&name).unwrap().data_mut()[k] = x0 + FD_STEP;
            let up = value_at(&probe);
            probe.get_mut(&name).unwrap().data_mut()[k] = x0 - FD_STEP;
            let down = value_at(&probe);
            probe.get_mut(&name).unwrap().data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = g.data()[k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR));
        }
    }
    worst
}

fn fd_loss(l: &LossGraph) -> f64 {
    fd_error(&l.graph, &l.bindings, l.output)
}

fn bind(pairs: Vec<(&str, Tensor)>) -> Bindings {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn mat(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    Tensor::matrix(rows, cols, randn_vec(rows * cols, rng))
}

/// Two-layer map `x -> tanh(x W) C` shared by the composite checks.
fn tiny_net(g: &mut Graph, x: NodeId, w: NodeId, c: NodeId) -> (NodeId, NodeId) {
    let pre = g.matmul(x, w);
    let h = g.tanh(pre);
    let logits = g.matmul(h, c);
    (h, logits)
}

fn ce_instance(rng: &mut Rng) -> f64 {
    let k = rng.random_range(2..7);
    let p = simplex(k, rng);
    let y = simplex(k, rng);
    let plain = fd_loss(&cross_entropy_graph(&p, &y).unwrap());
    let n = rng.random_range(1..5);
    let mut g = Graph::new();
    let z = g.param("z");
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let out = cross_entropy_logits(&mut g, z, Tensor::one_hot(&labels, k));
    plain.max(fd_error(&g, &bind(vec![("z", mat(n, k, rng))]), out))
}

fn chain_instance(rng: &mut Rng) -> f64 {
    let d = rng.random_range(2..8);
    let m = rng.random_range(1..6);
    let k = 5;
    let cfg =
        ChainConfig { tau: 0.1 + rng.random::<f64>(), gamma: 0.1 * rng.random::<f64>(), ..ChainConfig::default() };
    let grades: Vec<usize> = (0..m).map(|_| rng.random_range(1..k)).collect();
    let params = ChainContrastiveParams::from_grades(&cfg, 0, &grades, k);
    let negs: Vec<Vec<f64>> = (0..m).map(|_| randn_vec(d, rng)).collect();
    let single = fd_loss(&chain_contrastive_graph(&randn_vec(d, rng), &randn_vec(d, rng), &negs, &params).unwrap());
    // Batched form with every class present at least twice.
    let labels: Vec<usize> = (0..2 * k).map(|i| i % k).collect();
    let mut g = Graph::new();
    let f = g.param("f");
    let out = chain_contrastive_batch(&mut g, f, &labels, k, &cfg).expect("anchors exist");
    single.max(fd_error(&g, &bind(vec![("f", mat(labels.len(), d, rng))]), out))
}

fn prototype_instance(rng: &mut Rng) -> f64 {
    let d = rng.random_range(2..8);
    let k = rng.random_range(2..6);
    let protos = mat(k, d, rng);
    let tau = 0.05 + rng.random::<f64>();
    let label = rng.random_range(0..k);
    let single = fd_loss(&prototype_contrastive_graph(&randn_vec(d, rng), &protos, label, tau).unwrap());
    let n = rng.random_range(1..6);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut g = Graph::new();
    let f = g.param("f");
    let out = prototype_contrastive_batch(&mut g, f, &protos, &labels, tau);
    single.max(fd_error(&g, &bind(vec![("f", mat(n, d, rng))]), out))
}

fn inter_instance(rng: &mut Rng) -> f64 {
    let d = rng.random_range(2..6);
    let k = rng.random_range(2..6);
    let n = rng.random_range(1..8);
    let l = inter_consistency_graph(&mat(n, d, rng), &mat(k, d, rng), &mat(n, k, rng), &TransportConfig::default())
        .unwrap();
    fd_loss(&l)
}

fn intra_instance(rng: &mut Rng) -> f64 {
    let k = rng.random_range(2..7);
    let single = fd_loss(&intra_consistency_graph(&simplex(k, rng), &simplex(k, rng)).unwrap());
    let n = rng.random_range(1..6);
    let mut g = Graph::new();
    let a = g.param("a");
    let b = g.param("b");
    let pa = g.softmax(a);
    let pb = g.softmax(b);
    let out = intra_consistency_batch(&mut g, pa, pb, n);
    single.max(fd_error(&g, &bind(vec![("a", mat(n, k, rng)), ("b", mat(n, k, rng))]), out))
}

fn mixup_instance(rng: &mut Rng) -> f64 {
    let (d, hdim, k, n) =
        (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6));
    let x = mat(n, d, rng);
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let onehot = Tensor::one_hot(&y, k);
    let lambda: f64 = rng.random();
    let mut xm = Vec::new();
    let mut ym = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        let m = mix_with(lambda, x.row(i), onehot.row(i), x.row(j), onehot.row(j));
        xm.extend(m.x);
        ym.extend(m.y);
    }
    let mut g = Graph::new();
    let xi = g.input("x");
    let w = g.param("w");
    let c = g.param("c");
    let (_, logits) = tiny_net(&mut g, xi, w, c);
    let out = cross_entropy_logits(&mut g, logits, Tensor::matrix(n, k, ym));
    let b = bind(vec![("x", Tensor::matrix(n, d, xm)), ("w", mat(d, hdim, rng)), ("c", mat(hdim, k, rng))]);
    fd_error(&g, &b, out)
}

fn total_instance(rng: &mut Rng) -> f64 {
    let (d, hdim, k, n) =
        (rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..5), rng.random_range(2..6));
    let x = mat(n, d, rng);
    let xs = Tensor::matrix(n, d, x.data().iter().map(|v| v + 0.1 * randn(rng)).collect());
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let protos = mat(k, hdim, rng);
    let (soft, _) = transport_soft_labels(&mat(n, hdim, rng), &protos, &TransportConfig::default()).unwrap();
    let onehot = Tensor::one_hot(&labels, k);
    let lambda: f64 = rng.random();
    let mut xm = Vec::new();
    let mut ym = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        let m = mix_with(lambda, x.row(i), onehot.row(i), x.row(j), onehot.row(j));
        xm.extend(m.x);
        ym.extend(m.y);
    }
    let mut g = Graph::new();
    let (xw, xsn, xmn) = (g.input("x"), g.input("xs"), g.input("xm"));
    let (w, c) = (g.param("w"), g.param("c"));
    let (h, logits) = tiny_net(&mut g, xw, w, c);
    let (_, strong) = tiny_net(&mut g, xsn, w, c);
    let (_, mixed) = tiny_net(&mut g, xmn, w, c);
    let ce = cross_entropy_logits(&mut g, logits, onehot.clone());
    let alg = prototype_contrastive_batch(&mut g, h, &protos, &labels, 0.1);
    let inter = inter_consistency_batch(&mut g, strong, soft);
    let pw = g.softmax(logits);
    let ps = g.softmax(strong);
    let intra = intra_consistency_batch(&mut g, pw, ps, n);
    let mix = cross_entropy_logits(&mut g, mixed, Tensor::matrix(n, k, ym));
    let weights: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
    let out = total_loss_node(
        &mut g,
        ce,
        &[(Some(alg), weights[0]), (Some(inter), weights[1]), (Some(intra), weights[2]), (Some(mix), weights[3])],
    );
    let b = bind(vec![
        ("x", x),
        ("xs", xs),
        ("xm", Tensor::matrix(n, d, xm)),
        ("w", mat(d, hdim, rng)),
        ("c", mat(hdim, k, rng)),
    ]);
    fd_error(&g, &b, out)
}

#[test]
fn gradients_match_central_differences() {
    let t0 = Instant::now();
    let losses: [(&str, fn(&mut Rng) -> f64); 7] = [
        ("cross-entropy", ce_instance),
        ("chain", chain_instance),
        ("prototype", prototype_instance),
        ("inter", inter_instance),
        ("intra", intra_instance),
        ("mixup", mixup_instance),
        ("total", total_instance),
    ];
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for (i, (name, f)) in losses.iter().enumerate() {
        let mut rng = numbered(100 + i as u64, 0);
        let e = (0..50).map(|_| f(&mut rng)).fold(0.0, f64::max);
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    let ok = worst < 1e-4 && secs < 60.0;
    verdict(
        "gradients",
        ok,
        &format!("max rel err {worst:.1e} over 7x50 instances in {secs:.1}s ({})", parts.join(", ")),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// MMD selection

fn kernel_oracle(k: &Kernel, a: &[f64], b: &[f64]) -> f64 {
    match *k {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf { sigma } => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
            (-d2 / (2.0 * sigma * sigma)).exp()
        }
    }
}

fn mmd_oracle(set: &[usize], pts: &[Vec<f64>], k: &Kernel) -> f64 {
    let n = pts.len() as f64;
    let m = set.len() as f64;
    let ss: f64 = set
        .iter()
        .flat_map(|&i| set.iter().map(move |&j| (i, j)))
        .map(|(i, j)| kernel_oracle(k, &pts[i], &pts[j]))
        .sum();
    let xx: f64 = pts.iter().flat_map(|a| pts.iter().map(move |b| kernel_oracle(k, a, b))).sum();
    let sx: f64 = set.iter().flat_map(|&i| pts.iter().map(move |b| kernel_oracle(k, &pts[i], b))).sum();
    ss / (m * m) + xx / (n * n) - 2.0 * sx / (m * n)
}

#[test]
fn greedy_mmd_matches_exhaustive_search() {
    let mut rng = numbered(200, 0);
    let mut mismatches = 0;
    let mut steps = 0;
    let mut self_mmd = 0.0f64;
    for inst in 0..25 {
        let n = rng.random_range(3..=12);
        let d = rng.random_range(1..4);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| randn_vec(d, &mut rng)).collect();
        let kernel = if inst % 2 == 0 { Kernel::Linear } else { Kernel::Rbf { sigma: 0.5 + rng.random::<f64>() } };
        let n_lab = rng.random_range(0..=2.min(n - 1));
        let labeled: Vec<usize> = rand::seq::index::sample(&mut rng, n, n_lab).into_vec();
        let budget = rng.random_range(1..=n - n_lab);
        let picks = greedy_select(&pts, &labeled, budget, &kernel).unwrap();
        let mut chosen = labeled.clone();
        for &p in &picks {
            let best = (0..n)
                .filter(|j| !chosen.contains(j))
                .map(|j| {
                    let mut s = chosen.clone();
                    s.push(j);
                    (mmd_oracle(&s, &pts, &kernel), j)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap();
            steps += 1;
            if best.1 != p {
                mismatches += 1;
            }
            chosen.push(p);
        }
        self_mmd = self_mmd.max(mmd_squared(&pts, &pts, &kernel).unwrap().abs());
    }

    // Two tight clusters; one pick per cluster matches the pooled mean.
    let mut crng = numbered(201, 0);
    let pts: Vec<Vec<f64>> = (0..12)
        .map(|i| vec![if i < 6 { -5.0 } else { 5.0 } + 0.3 * randn(&mut crng), 0.3 * randn(&mut crng)])
        .collect();
    let picks = greedy_select(&pts, &[], 2, &Kernel::Linear).unwrap();
    let split = |a: usize, b: usize| (a < 6) != (b < 6);
    let mut best = (f64::INFINITY, 0, 0);
    for a in 0..12 {
        for b in a + 1..12 {
            let v = mmd_oracle(&[a, b], &pts, &Kernel::Linear);
            if v < best.0 {
                best = (v, a, b);
            }
        }
    }
    let clusters_ok = picks.len() == 2 && split(picks[0], picks[1]) && split(best.1, best.2);

    let ok = mismatches == 0 && self_mmd < 1e-12 && clusters_ok;
    verdict(
        "mmd selection",
        ok,
        &format!(
            "{mismatches} of {steps} greedy steps differ from exhaustive argmin; max MMD²(A,A) {self_mmd:.1e}; two-cluster picks {picks:?}, best pair ({}, {})",
            best.1, best.2
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Sinkhorn

#[test]
fn sinkhorn_meets_marginals_and_limits() {
    let mut rng = numbered(300, 0);
    let mut worst_violation = 0.0f64;
    let mut max_iters = 0;
    for _ in 0..100 {
        let n = rng.random_range(1..=16);
        let k = rng.random_range(1..=16);
        let eps = 0.01 * 10f64.powf(rng.random::<f64>() * 2.0);
        let cost = Tensor::matrix(n, k, (0..n * k).map(|_| rng.random::<f64>()).collect());
        let a = simplex(n, &mut rng);
        let b = simplex(k, &mut rng);
        let p = sinkhorn(&cost, &a, &b, eps, 500, 1e-7).unwrap();
        let rows: Vec<f64> = p.plan.iter_rows().map(|r| r.iter().sum()).collect();
        let cols: Vec<f64> = (0..k).map(|j| p.plan.iter_rows().map(|r| r[j]).sum()).collect();
        let v = rows.iter().zip(&a).chain(cols.iter().zip(&b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst_violation = worst_violation.max(v);
        max_iters = max_iters.max(p.iterations);
    }

    let mut product_err = 0.0f64;
    for _ in 0..20 {
        let (n, k) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let a = simplex(n, &mut rng);
        let b = simplex(k, &mut rng);
        let c = rng.random::<f64>() * 3.0;
        let p =
            sinkhorn(&Tensor::matrix(n, k, vec![c; n * k]), &a, &b, 0.01 + rng.random::<f64>(), 500, 1e-12).unwrap();
        for i in 0..n {
            for j in 0..k {
                product_err = product_err.max((p.plan.get(i, j) - a[i] * b[j]).abs());
            }
        }
    }

    // 2x2: the plan is fixed by its (0,0) entry t, and the LP optimum sits
    // at an end of the feasible interval.
    let mut lp_err = 0.0f64;
    let mut done = 0;
    while done < 20 {
        let c: Vec<f64> = (0..4).map(|_| rng.random::<f64>()).collect();
        if (c[0] + c[3] - c[1] - c[2]).abs() < 0.2 {
            continue;
        }
        let a0 = 0.2 + 0.6 * rng.random::<f64>();
        let b0 = 0.2 + 0.6 * rng.random::<f64>();
        let (a, b) = ([a0, 1.0 - a0], [b0, 1.0 - b0]);
        let plan_of = |t: f64| [t, a[0] - t, b[0] - t, a[1] - b[0] + t];
        let value = |q: [f64; 4]| q.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
        let lo = (a[0] - b[1]).max(0.0);
        let hi = a[0].min(b[0]);
        let lp = if value(plan_of(lo)) <= value(plan_of(hi)) { plan_of(lo) } else { plan_of(hi) };
        let p = sinkhorn(&Tensor::matrix(2, 2, c.clone()), &a, &b, 0.01, 500, 1e-9).unwrap();
        for (x, y) in p.plan.data().iter().zip(lp) {
            lp_err = lp_err.max((x - y).abs());
        }
        done += 1;
    }

    let ok = worst_violation < 1e-6 && max_iters <= 500 && product_err < 1e-10 && lp_err < 1e-3;
    verdict(
        "sinkhorn",
        ok,
        &format!(
            "max marginal violation {worst_violation:.1e} (max {max_iters} iterations, eps in [0.01, 1]); constant cost vs outer(a,b) {product_err:.1e}; 2x2 vs LP {lp_err:.1e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Metrics

fn expand(cm: &ConfusionMatrix) -> (Vec<usize>, Vec<usize>) {
    let (mut t, mut p) = (Vec::new(), Vec::new());
    for i in 0..cm.classes {
        for j in 0..cm.classes {
            for _ in 0..cm.counts[i][j] {
                t.push(i);
                p.push(j);
            }
        }
    }
    (t, p)
}

fn f1_oracle(t: &[usize], p: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = t.iter().zip(p).filter(|&(&a, &b)| a == c && b == c).count() as f64;
        let fp = t.iter().zip(p).filter(|&(&a, &b)| a != c && b == c).count() as f64;
        let fnn = t.iter().zip(p).filter(|&(&a, &b)| a == c && b != c).count() as f64;
        total += if tp > 0.0 { 2.0 * tp / (2.0 * tp + fp + fnn) } else { 0.0 };
    }
    total / k as f64
}

fn kappa_oracle(t: &[usize], p: &[usize], k: usize) -> Option<f64> {
    let n = t.len() as f64;
    let po = t.iter().zip(p).filter(|(a, b)| a == b).count() as f64 / n;
    let pe: f64 = (0..k)
        .map(|c| t.iter().filter(|&&x| x == c).count() as f64 * p.iter().filter(|&&x| x == c).count() as f64)
        .sum::<f64>()
        / (n * n);
    (pe < 1.0).then(|| (po - pe) / (1.0 - pe))
}

/// Quadratic kappa as `2 cov / (var_t + var_p + (mean_t - mean_p)^2)`.
fn qwk_oracle(t: &[usize], p: &[usize]) -> Option<f64> {
    let n = t.len() as f64;
    let mt = t.iter().sum::<usize>() as f64 / n;
    let mp = p.iter().sum::<usize>() as f64 / n;
    let vt = t.iter().map(|&x| (x as f64 - mt).powi(2)).sum::<f64>() / n;
    let vp = p.iter().map(|&x| (x as f64 - mp).powi(2)).sum::<f64>() / n;
    let cov = t.iter().zip(p).map(|(&a, &b)| (a as f64 - mt) * (b as f64 - mp)).sum::<f64>() / n;
    let den = vt + vp + (mt - mp).powi(2);
    (den > 0.0).then(|| 2.0 * cov / den)
}

/// Mann-Whitney statistic with ties counted one half.
fn auc_oracle(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

fn opt_close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = numbered(400, 0);
    let tol = 1e-10;
    let mut bad = Vec::new();
    for inst in 0..100 {
        let k = rng.random_range(2..=6);
        let counts: Vec<Vec<u64>> = (0..k)
            .map(|_| (0..k).map(|_| if rng.random::<f64>() < 0.3 { 0 } else { rng.random_range(0..20) }).collect())
            .collect();
        let cm = ConfusionMatrix::from_counts(counts).unwrap();
        if cm.total() == 0 {
            continue;
        }
        let (t, p) = expand(&cm);
        let rebuilt = confusion(&p, &t, k).unwrap();
        let s = summary(&rebuilt).unwrap();
        let acc = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
        if (s.accuracy - acc).abs() > tol || (s.macro_f1 - f1_oracle(&t, &p, k)).abs() > tol {
            bad.push(format!("accuracy/F1 #{inst}"));
        }
        if !opt_close(kappa(&cm, Weighting::None).ok(), kappa_oracle(&t, &p, k), tol) {
            bad.push(format!("kappa #{inst}"));
        }
        if !opt_close(kappa(&cm, Weighting::Quadratic).ok(), qwk_oracle(&t, &p), tol) {
            bad.push(format!("QWK #{inst}"));
        }
    }
    for inst in 0..100 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(2..=40);
        // Small integer weights produce many tied scores.
        let coarse = inst % 2 == 0;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let w: Vec<f64> = (0..k)
                    .map(|_| if coarse { rng.random_range(1..4) as f64 } else { rng.random::<f64>() + 1e-3 })
                    .collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            })
            .collect();
        let truths: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let report = roc_auc(&Tensor::from_rows(&rows), &truths).unwrap();
        let mut defined = Vec::new();
        for c in 0..k {
            let s: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = truths.iter().map(|&t| t == c).collect();
            let want = auc_oracle(&s, &pos);
            if !opt_close(report.per_class[c], want, tol) || !opt_close(binary_roc(&s, &pos).1, want, tol) {
                bad.push(format!("AUC #{inst} class {c}"));
            }
            defined.extend(want);
        }
        let macro_want = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        if !opt_close(report.macro_auc, macro_want, tol) {
            bad.push(format!("macro AUC #{inst}"));
        }
    }
    let ok = bad.is_empty();
    verdict(
        "metrics",
        ok,
        &if ok {
            "accuracy, macro F1, kappa, QWK on 100 confusion matrices and AUC on 100 score sets agree to 1e-10"
                .to_string()
        } else {
            format!("mismatches: {}", bad.join(", "))
        },
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Source geometry

fn class_cosines(features: &Tensor, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = features.cols();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0.0; k];
    for (row, &l) in features.iter_rows().zip(labels) {
        for (m, v) in means[l].iter_mut().zip(row) {
            *m += v;
        }
        counts[l] += 1.0;
    }
    for (m, c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c);
    }
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    means.iter().map(|a| means.iter().map(|b| cos(a, b)).collect()).collect()
}

/// Mean first off-diagonal similarity and the (0, K-1) entry.
fn geometry(cfg: &RunConfig) -> (f64, f64) {
    let data = harness::make_data(cfg).unwrap();
    let (model, _, _) = harness::pretrain(cfg, &data).unwrap();
    let feats = model.features(&data.source.features).unwrap();
    let k = cfg.model.classes;
    let m = class_cosines(&feats, &data.source.labels, k);
    ((0..k - 1).map(|i| m[i][i + 1]).sum::<f64>() / (k - 1) as f64, m[0][k - 1])
}

#[test]
fn chain_loss_orders_class_geometry() {
    let _guard = heavy();
    let mut hits = 0;
    let mut ce_hits = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let (adj, far) = geometry(&cfg);
        let mut ce_cfg = cfg.clone();
        ce_cfg.stage1.chain_weight = 0.0;
        let (ce_adj, ce_far) = geometry(&ce_cfg);
        hits += usize::from(adj > far);
        ce_hits += usize::from(ce_adj > ce_far);
        parts.push(format!("{adj:.3}/{far:.3}"));
    }
    let ok = hits >= 4;
    verdict(
        "chain geometry",
        ok,
        &format!(
            "adjacent > (0,K-1) cosine in {hits}/5 seeds with chain loss [{}]; CE only {ce_hits}/5 (not asserted)",
            parts.join(" ")
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// End-to-end grid

fn grid() -> &'static GridOutcome {
    static GRID: OnceLock<GridOutcome> = OnceLock::new();
    GRID.get_or_init(|| {
        let _guard = heavy();
        let mut variants = harness::lpda_variants();
        variants.push(harness::random_selection_variant());
        variants.push(harness::threshold_only_variant());
        harness::run_grid(&RunConfig::default(), &SEEDS, &variants, None, |_| {}).unwrap()
    })
}

#[test]
fn adaptation_beats_baselines() {
    let g = grid();
    let acc = |v: &str| g.mean_accuracy(v).unwrap() * 100.0;
    let (ce, full, random) = (acc("ce"), acc("full"), acc("full/random"));
    let ladder = ["ce", "ce+alg", "ce+alg+inter+intra", "full"];
    let steps: Vec<f64> = ladder.windows(2).map(|w| acc(w[1]) - acc(w[0])).collect();
    let margin_ok = full >= ce + 5.0;
    let alrm_ok = full >= random;
    let ladder_ok = steps.iter().all(|&s| s >= -1.0);
    let time_ok = g.wall_secs < 1800.0;
    let ok = margin_ok && alrm_ok && ladder_ok && time_ok;
    let ladder_text: Vec<String> = ladder.iter().map(|v| format!("{v} {:.2}", acc(v))).collect();
    verdict(
        "end-to-end",
        ok,
        &format!(
            "full {full:.2} vs CE {ce:.2} (+{:.2}, need 5) [{}]; ALRM {full:.2} vs random {random:.2} [{}]; ladder {} [{}]; grid {:.0}s [{}]",
            full - ce,
            pf(margin_ok),
            pf(alrm_ok),
            ladder_text.join(" -> "),
            pf(ladder_ok),
            g.wall_secs,
            pf(time_ok)
        ),
    );
    assert!(ok);
}

fn pf(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "miss"
    }
}

#[test]
fn pseudo_labels_keep_invariants_and_precision() {
    let g = grid();
    let violations: usize = g.runs.iter().map(|r| r.report.invariants.violations).sum();
    let checked: usize = g.runs.iter().map(|r| r.report.invariants.steps_checked).sum();
    let mut pf_full = Vec::new();
    let mut pf_thr = Vec::new();
    let mut counts = Vec::new();
    for &seed in &SEEDS {
        let a = &g.run("full", seed).unwrap().accepted_correct;
        let b = &g.run("threshold-only", seed).unwrap().accepted_correct;
        if let Some((m, pa, pb)) = harness::matched_precision(a, b) {
            pf_full.push(pa);
            pf_thr.push(pb);
            counts.push(m);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let precision_ok = pf_full.len() == SEEDS.len() && mean(&pf_full) >= mean(&pf_thr);
    let ok = violations == 0 && checked > 0 && precision_ok;
    verdict(
        "pseudo labels",
        ok,
        &format!(
            "{violations} invariant violations over {checked} steps; matched precision full {:.4} vs threshold-only {:.4} at counts {counts:?}",
            mean(&pf_full),
            mean(&pf_thr)
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Determinism

#[test]
fn run_all_is_byte_identical() {
    let _guard = heavy();
    let cfg = RunConfig { seed: 11, ..RunConfig::default() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        harness::run_all(&cfg, d.path()).unwrap();
    }
    let a = std::fs::read(dirs[0].path().join("report.json")).unwrap();
    let b = std::fs::read(dirs[1].path().join("report.json")).unwrap();
    let ok = a == b && !a.is_empty();
    verdict(
        "determinism",
        ok,
        &format!(
            "two run-all report.json files of {} bytes are {}",
            a.len(),
            if a == b { "identical" } else { "different" }
        ),
    );
    assert!(ok);
}

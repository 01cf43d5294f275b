//! Browser demo: three small interactive readouts over the core
//! primitives. Every export takes plain numbers and returns a JSON string,
//! so the page needs no bindings beyond `wasm-bindgen`'s.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;
use sfada_core::active::{greedy_select, mmd_squared, KernelSpec};
use sfada_core::diffmath::{cosine, softmax, Tensor};
use sfada_core::losses::{chain_contrastive, intra_consistency, sinkhorn, ChainConfig, ChainContrastiveParams};
use sfada_core::rng::{numbered, Rng};
use wasm_bindgen::prelude::*;

fn to_json(v: impl Serialize) -> String {
    serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string())
}

fn error(e: impl ToString) -> String {
    json!({ "error": e.to_string() }).to_string()
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Entropic transport between `n` uniform rows and `k` uniform columns
/// for a seeded random cost matrix.
#[wasm_bindgen]
pub fn sinkhorn_plan(seed: u32, n: usize, k: usize, eps: f64) -> String {
    if !(1..=32).contains(&n) || !(1..=32).contains(&k) {
        return error("n and k must lie in 1..=32");
    }
    let mut rng = numbered(seed as u64, 0);
    let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random::<f64>()).collect()).collect();
    let c = Tensor::from_rows(&cost);
    let a = vec![1.0 / n as f64; n];
    let b = vec![1.0 / k as f64; k];
    match sinkhorn(&c, &a, &b, eps, 500, 1e-9) {
        Ok(p) => {
            let plan: Vec<Vec<f64>> = p.plan.iter_rows().map(|r| r.to_vec()).collect();
            let transport_cost: f64 = plan.iter().flatten().zip(cost.iter().flatten()).map(|(p, c)| p * c).sum();
            let entropy: f64 = plan.iter().flatten().filter(|&&v| v > 0.0).map(|v| -v * v.ln()).sum();
            to_json(json!({
                "cost": cost,
                "plan": plan,
                "iterations": p.iterations,
                "violation": p.violation,
                "converged": !p.not_converged,
                "transport_cost": transport_cost,
                "entropy": entropy,
            }))
        }
        Err(e) => error(e),
    }
}

/// Greedy MMD selection of `budget` points from a seeded 2-D cloud of
/// `clusters` Gaussian blobs. `kernel` is `"linear"` or `"rbf"`.
#[wasm_bindgen]
pub fn mmd_selection(seed: u32, n: usize, clusters: usize, budget: usize, kernel: &str) -> String {
    if !(2..=400).contains(&n) || clusters == 0 || budget == 0 || budget > n {
        return error("need 2 <= n <= 400, at least one cluster and 1 <= budget <= n");
    }
    let spec = match kernel {
        "linear" => KernelSpec::Linear,
        "rbf" => KernelSpec::Rbf { bandwidth: None },
        other => return error(format!("unknown kernel `{other}`")),
    };
    let mut rng = numbered(seed as u64, 1);
    let centres: Vec<[f64; 2]> = (0..clusters).map(|_| [4.0 * normal(&mut rng), 4.0 * normal(&mut rng)]).collect();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = centres[i % clusters];
            let s = 0.3 + 0.7 * (i % clusters) as f64 / clusters as f64;
            vec![c[0] + s * normal(&mut rng), c[1] + s * normal(&mut rng)]
        })
        .collect();
    let k = spec.resolve(&points);
    let selected = match greedy_select(&points, &[], budget, &k) {
        Ok(s) => s,
        Err(e) => return error(e),
    };
    let trace: Vec<f64> = (1..=selected.len())
        .map(|m| {
            let sub: Vec<Vec<f64>> = selected[..m].iter().map(|&i| points[i].clone()).collect();
            mmd_squared(&sub, &points, &k).unwrap_or(f64::NAN)
        })
        .collect();
    let random: Vec<usize> = rand::seq::index::sample(&mut rng, n, budget).into_vec();
    let rsub: Vec<Vec<f64>> = random.iter().map(|&i| points[i].clone()).collect();
    to_json(json!({
        "points": points,
        "selected": selected,
        "mmd_trace": trace,
        "random_selected": random,
        "random_mmd": mmd_squared(&rsub, &points, &k).unwrap_or(f64::NAN),
    }))
}

/// Five ordinal classes on an arc of `spread` radians with noise `sigma`.
/// Reports the mean chain-contrastive loss under two margin settings, the
/// class cosine matrix and the intra-consistency loss between each point's
/// class scores and those of a perturbed copy.
#[wasm_bindgen]
pub fn loss_readout(seed: u32, spread: f64, sigma: f64, tau: f64, beta0: f64) -> String {
    const K: usize = 5;
    const PER: usize = 12;
    if !(tau > 0.0) || !(sigma >= 0.0) || !(beta0 >= 0.0) {
        return error("tau must be positive, sigma and beta0 non-negative");
    }
    let mut rng = numbered(seed as u64, 2);
    let angle = |c: usize| spread * c as f64 / (K - 1) as f64;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for c in 0..K {
        for _ in 0..PER {
            points.push(vec![angle(c).cos() + sigma * normal(&mut rng), angle(c).sin() + sigma * normal(&mut rng)]);
            labels.push(c);
        }
    }
    let chain = |cfg: &ChainConfig| -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (i, p) in points.iter().enumerate() {
            let c = labels[i];
            let pos = c * PER + (i + 1 - c * PER) % PER;
            let (negs, grades): (Vec<Vec<f64>>, Vec<usize>) =
                points.iter().zip(&labels).filter(|(_, &l)| l != c).map(|(q, &l)| (q.clone(), l)).unzip();
            let params = ChainContrastiveParams::from_grades(cfg, c, &grades, K);
            if let Ok(v) = chain_contrastive(p, &points[pos], &negs, &params) {
                total += v;
                count += 1;
            }
        }
        total / count.max(1) as f64
    };
    let base = ChainConfig { tau, beta0, ..ChainConfig::default() };
    let flat = ChainConfig { beta0: 0.0, ..base };
    let means: Vec<Vec<f64>> = (0..K)
        .map(|c| {
            let pts = &points[c * PER..(c + 1) * PER];
            (0..2).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / PER as f64).collect()
        })
        .collect();
    let cos: Vec<Vec<f64>> = means.iter().map(|a| means.iter().map(|b| cosine(a, b)).collect()).collect();
    let scores = |p: &[f64]| {
        softmax(
            &means.iter().map(|m| -((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)) / tau.max(1e-3)).collect::<Vec<_>>(),
        )
    };
    let mut intra = 0.0;
    for p in &points {
        let q = [p[0] + 0.2 * normal(&mut rng), p[1] + 0.2 * normal(&mut rng)];
        intra += intra_consistency(&scores(p), &scores(&q)).unwrap_or(f64::NAN);
    }
    to_json(json!({
        "points": points,
        "labels": labels,
        "chain_loss": chain(&base),
        "chain_loss_no_margin": chain(&flat),
        "cosine": cos,
        "adjacent_cosine": (0..K - 1).map(|i| cos[i][i + 1]).sum::<f64>() / (K - 1) as f64,
        "far_cosine": cos[0][K - 1],
        "intra_consistency": intra / points.len() as f64,
    }))
}

//! Stage 2: local representations, squared MMD and greedy subset matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffmath::{dot, normalize_rows, Tensor};
use crate::rng::Rng;
use crate::synth::Oracle;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalRepresentation {
    pub id: usize,
    pub vector: Vec<f64>,
    /// Self first, then the most cosine-similar samples.
    pub neighbors: Vec<usize>,
}

/// `k_nn` nearest ids of every row by cosine similarity, self first, ties
/// broken by lower id.
pub fn cosine_neighbors(features: &Tensor, k_nn: usize) -> Result<Vec<Vec<usize>>> {
    let n = features.rows();
    if k_nn == 0 || k_nn > n {
        return Err(Error::invalid(format!("K_nn = {k_nn} must lie in [1, {n}]")));
    }
    let unit = normalize_rows(features);
    let mut out = Vec::with_capacity(n);
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        sims.clear();
        let ui = unit.row(i);
        sims.extend((0..n).filter(|&j| j != i).map(|j| (dot(ui, unit.row(j)), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let take = k_nn - 1;
        if take > 0 && take < sims.len() {
            sims.select_nth_unstable_by(take - 1, cmp);
        }
        let top = &mut sims[..take];
        top.sort_by(cmp);
        let mut nb = vec![i];
        nb.extend(top.iter().map(|&(_, j)| j));
        out.push(nb);
    }
    Ok(out)
}

/// `h ⊙ (p W) + h` for one sample, `W` being `[K, d]`.
fn reweighted(h: &[f64], p: &[f64], w: &Tensor) -> Vec<f64> {
    let mut proto = vec![0.0; h.len()];
    for (k, &pk) in p.iter().enumerate() {
        for (acc, &wv) in proto.iter_mut().zip(w.row(k)) {
            *acc += pk * wv;
        }
    }
    h.iter().zip(&proto).map(|(hv, pw)| hv * pw + hv).collect()
}

/// Local representations of every target sample: the mean of the
/// reweighted features of its `k_nn` cosine neighbours.
pub fn local_representations(
    features: &Tensor,
    probs: &Tensor,
    w: &Tensor,
    k_nn: usize,
) -> Result<Vec<LocalRepresentation>> {
    let n = features.rows();
    if probs.rows() != n || probs.cols() != w.rows() || w.cols() != features.cols() {
        return Err(Error::invalid(format!(
            "shapes disagree: features {:?}, probs {:?}, W {:?}",
            features.shape(),
            probs.shape(),
            w.shape()
        )));
    }
    let neighbors = cosine_neighbors(features, k_nn)?;
    let rw: Vec<Vec<f64>> = (0..n).map(|i| reweighted(features.row(i), probs.row(i), w)).collect();
    Ok(neighbors
        .into_iter()
        .enumerate()
        .map(|(id, nb)| {
            let mut v = vec![0.0; features.cols()];
            for &j in &nb {
                v.iter_mut().zip(&rw[j]).for_each(|(a, b)| *a += b);
            }
            v.iter_mut().for_each(|a| *a /= nb.len() as f64);
            LocalRepresentation { id, vector: v, neighbors: nb }
        })
        .collect())
}

/// Single-sample form of [`local_representations`].
pub fn local_representation(
    id: usize,
    features: &Tensor,
    probs: &Tensor,
    w: &Tensor,
    k_nn: usize,
) -> Result<LocalRepresentation> {
    if id >= features.rows() {
        return Err(Error::invalid(format!("unknown sample id {id}")));
    }
    Ok(local_representations(features, probs, w, k_nn)?.swap_remove(id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Linear,
    /// `exp(-|x-y|² / (2 σ²))`; `bandwidth: None` uses the median pairwise
    /// distance of the full set.
    Rbf {
        bandwidth: Option<f64>,
    },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf { bandwidth: None }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel with a resolved bandwidth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { sigma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => dot(a, b),
            Kernel::Rbf { sigma } => (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp(),
        }
    }
}

/// Median of pairwise Euclidean distances; 1.0 when that median is 0.
pub fn median_distance(points: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if *m > 0.0 {
        *m
    } else {
        1.0
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if let KernelSpec::Rbf { bandwidth: Some(b) } = self {
            if !(*b > 0.0) {
                return Err(Error::Config { key: "active.kernel.bandwidth".into(), reason: "must be positive".into() });
            }
        }
        Ok(())
    }

    pub fn resolve(&self, points: &[Vec<f64>]) -> Kernel {
        match *self {
            KernelSpec::Linear => Kernel::Linear,
            KernelSpec::Rbf { bandwidth: Some(s) } => Kernel::Rbf { sigma: s },
            KernelSpec::Rbf { bandwidth: None } => Kernel::Rbf { sigma: median_distance(points) },
        }
    }
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], k: &Kernel) -> f64 {
    let mut s = 0.0;
    for x in a {
        for y in b {
            s += k.eval(x, y);
        }
    }
    s / (a.len() * b.len()) as f64
}

/// Biased estimate `mean k(A,A) + mean k(B,B) - 2 mean k(A,B)`.
pub fn mmd_squared(a: &[Vec<f64>], b: &[Vec<f64>], kernel: &Kernel) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("MMD of an empty set"));
    }
    Ok(mean_kernel(a, a, kernel) + mean_kernel(b, b, kernel) - 2.0 * mean_kernel(a, b, kernel))
}

/// Greedy matching state over a precomputed Gram matrix.
struct Matcher {
    n: usize,
    gram: Vec<f64>,
    /// Mean kernel value of each point against the full set.
    col_mean: Vec<f64>,
    full_mean: f64,
}

impl Matcher {
    fn new(points: &[Vec<f64>], kernel: &Kernel) -> Self {
        let n = points.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = kernel.eval(&points[i], &points[j]);
                gram[i * n + j] = v;
                gram[j * n + i] = v;
            }
        }
        let col_mean: Vec<f64> = (0..n).map(|j| (0..n).map(|i| gram[i * n + j]).sum::<f64>() / n as f64).collect();
        let full_mean = col_mean.iter().sum::<f64>() / n as f64;
        Self { n, gram, col_mean, full_mean }
    }

    fn k(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.n + j]
    }

    /// MMD² between the full set and a subset with the given sufficient
    /// statistics.
    fn value(&self, m: usize, inner: f64, cross: f64) -> f64 {
        let m = m as f64;
        self.full_mean + inner / (m * m) - 2.0 * cross / m
    }

    fn of_set(&self, set: &[usize]) -> Option<f64> {
        if set.is_empty() {
            return None;
        }
        let inner: f64 = set.iter().flat_map(|&a| set.iter().map(move |&b| (a, b))).map(|(a, b)| self.k(a, b)).sum();
        let cross: f64 = set.iter().map(|&a| self.col_mean[a]).sum();
        Some(self.value(set.len(), inner, cross))
    }

    fn greedy(&self, labeled: &[usize], budget: usize) -> Vec<usize> {
        let mut st = Subset { in_set: vec![false; self.n], row_sum: vec![0.0; self.n], inner: 0.0, cross: 0.0, m: 0 };
        for &l in labeled {
            if !st.in_set[l] {
                st.add(self, l);
            }
        }
        let mut picked = Vec::with_capacity(budget);
        for _ in 0..budget {
            let mut best: Option<(f64, usize)> = None;
            for j in (0..self.n).filter(|&j| !st.in_set[j]) {
                let v =
                    self.value(st.m + 1, st.inner + 2.0 * st.row_sum[j] + self.k(j, j), st.cross + self.col_mean[j]);
                if best.is_none_or(|(bv, _)| v < bv) {
                    best = Some((v, j));
                }
            }
            let Some((_, j)) = best else { break };
            st.add(self, j);
            picked.push(j);
        }
        picked
    }
}

/// Running sums of a growing subset: kernel row sums against the subset,
/// the inner kernel sum and the cross term.
struct Subset {
    in_set: Vec<bool>,
    row_sum: Vec<f64>,
    inner: f64,
    cross: f64,
    m: usize,
}

impl Subset {
    fn add(&mut self, mt: &Matcher, j: usize) {
        self.inner += 2.0 * self.row_sum[j] + mt.k(j, j);
        self.cross += mt.col_mean[j];
        self.m += 1;
        self.in_set[j] = true;
        for (i, r) in self.row_sum.iter_mut().enumerate() {
            *r += mt.k(i, j);
        }
    }
}

/// Greedily extends `labeled` by `budget` ids, each step taking the
/// candidate whose addition minimises MMD² to the full set. Lowest id wins
/// ties.
pub fn greedy_select(points: &[Vec<f64>], labeled: &[usize], budget: usize, kernel: &Kernel) -> Result<Vec<usize>> {
    let n = points.len();
    if let Some(&bad) = labeled.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("labelled id {bad} out of range")));
    }
    let free = n - labeled.iter().collect::<BTreeSet<_>>().len();
    if budget > free {
        return Err(Error::invalid(format!("budget {budget} exceeds the {free} unlabelled samples")));
    }
    if budget == 0 {
        return Ok(Vec::new());
    }
    Ok(Matcher::new(points, kernel).greedy(labeled, budget))
}

/// Actively labelled ids with their oracle labels, plus the unlabelled pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPartition {
    pub size: usize,
    pub oracle_labeled: BTreeMap<usize, usize>,
    pub unlabeled: BTreeSet<usize>,
}

impl DatasetPartition {
    pub fn new(size: usize) -> Self {
        Self { size, oracle_labeled: BTreeMap::new(), unlabeled: (0..size).collect() }
    }

    pub fn labeled_ids(&self) -> Vec<usize> {
        self.oracle_labeled.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Greedy local-representation matching.
    Alrm,
    Random,
}

/// One selection-log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: Strategy,
    pub selected: Vec<usize>,
    /// MMD² of the labelled set before and after the round, in LR space.
    pub mmd_before: Option<f64>,
    pub mmd_after: Option<f64>,
}

/// Selects `budget` ids from the unlabelled pool, queries the oracle for
/// them and moves them into the labelled set.
pub fn run_round(
    partition: &mut DatasetPartition,
    lrs: &[LocalRepresentation],
    round: usize,
    budget: usize,
    strategy: Strategy,
    kernel: &KernelSpec,
    oracle: &mut Oracle,
    rng: &mut Rng,
) -> Result<RoundRecord> {
    if budget > partition.unlabeled.len() {
        return Err(Error::invalid(format!(
            "round budget {budget} exceeds the {} unlabelled samples",
            partition.unlabeled.len()
        )));
    }
    if lrs.len() != partition.size {
        return Err(Error::Dimension { expected: partition.size, got: lrs.len() });
    }
    let points: Vec<Vec<f64>> = lrs.iter().map(|l| l.vector.clone()).collect();
    let kern = kernel.resolve(&points);
    let matcher = Matcher::new(&points, &kern);
    let labeled = partition.labeled_ids();
    let selected = match strategy {
        Strategy::Alrm => matcher.greedy(&labeled, budget),
        Strategy::Random => {
            let pool: Vec<usize> = partition.unlabeled.iter().copied().collect();
            let mut pick: Vec<usize> =
                rand::seq::index::sample(rng, pool.len(), budget).into_iter().map(|i| pool[i]).collect();
            pick.sort_unstable();
            pick
        }
    };
    let mmd_before = matcher.of_set(&labeled);
    for &id in &selected {
        debug_assert!(partition.unlabeled.contains(&id));
        let y = oracle.label(id)?;
        partition.unlabeled.remove(&id);
        partition.oracle_labeled.insert(id, y);
    }
    let mmd_after = matcher.of_set(&partition.labeled_ids());
    Ok(RoundRecord { round, strategy, selected, mmd_before, mmd_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use rand::Rng as _;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|r| r.to_vec()).collect()
    }

    #[test]
    fn zero_weights_give_neighbour_mean() {
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let p = Tensor::from_rows(&[[0.5, 0.5]; 3]);
        let lr = local_representation(0, &f, &p, &Tensor::zeros(&[2, 2]), 2).unwrap();
        assert_eq!(lr.neighbors, vec![0, 1]);
        assert!((lr.vector[0] - 0.95).abs() < 1e-15 && (lr.vector[1] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn hand_arithmetic_example() {
        let f = Tensor::from_rows(&[vec![1.0, 1.0]]);
        let p = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let w = Tensor::from_rows(&[vec![2.0, 3.0], vec![5.0, 7.0]]);
        assert_eq!(local_representation(0, &f, &p, &w, 1).unwrap().vector, vec![3.0, 4.0]);
        assert!(local_representation(0, &f, &p, &w, 2).is_err());
    }

    #[test]
    fn identical_samples_identical_lrs() {
        let f = Tensor::from_rows(&[[0.3, -0.2, 1.0]; 5]);
        let p = Tensor::from_rows(&[[0.1, 0.9]; 5]);
        let w = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let lrs = local_representations(&f, &p, &w, 3).unwrap();
        assert!(lrs.windows(2).all(|w| w[0].vector == w[1].vector));
    }

    #[test]
    fn mmd_examples() {
        let a = pts(&[&[0.3, 1.0], &[-2.0, 0.5]]);
        assert!(mmd_squared(&a, &a, &Kernel::Rbf { sigma: 0.7 }).unwrap().abs() < 1e-12);
        assert_eq!(mmd_squared(&pts(&[&[0.0]]), &pts(&[&[2.0]]), &Kernel::Linear).unwrap(), 4.0);
        assert!(mmd_squared(&[], &a, &Kernel::Linear).is_err());
    }

    #[test]
    fn identical_points_tie_to_lowest_ids() {
        let p = vec![vec![1.0, 1.0]; 6];
        assert_eq!(greedy_select(&p, &[1], 3, &Kernel::Rbf { sigma: 1.0 }).unwrap(), vec![0, 2, 3]);
        assert_eq!(greedy_select(&p, &[], 0, &Kernel::Linear).unwrap(), Vec::<usize>::new());
        assert!(greedy_select(&p, &[], 7, &Kernel::Linear).is_err());
    }

    #[test]
    fn incremental_value_matches_direct_mmd() {
        let mut rng = stream(3, Stream::Select);
        let p: Vec<Vec<f64>> = (0..9).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let k = Kernel::Rbf { sigma: 0.8 };
        let m = Matcher::new(&p, &k);
        let set = [2, 5, 7];
        let sub: Vec<Vec<f64>> = set.iter().map(|&i| p[i].clone()).collect();
        assert!((m.of_set(&set).unwrap() - mmd_squared(&p, &sub, &k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn round_bookkeeping() {
        let spec = crate::synth::DomainSpec { n: 30, ..Default::default() };
        let mut t = crate::synth::make_target(&spec, &spec, 1).unwrap();
        let lrs: Vec<LocalRepresentation> = (0..30)
            .map(|i| LocalRepresentation { id: i, vector: t.features.row(i).to_vec(), neighbors: vec![i] })
            .collect();
        let mut part = DatasetPartition::new(30);
        let mut rng = stream(1, Stream::Select);
        let r =
            run_round(&mut part, &lrs, 0, 6, Strategy::Alrm, &KernelSpec::default(), &mut t.oracle, &mut rng).unwrap();
        assert_eq!(part.oracle_labeled.len(), 6);
        let r2 = run_round(&mut part, &lrs, 1, 6, Strategy::Random, &KernelSpec::default(), &mut t.oracle, &mut rng)
            .unwrap();
        assert!(r2.selected.iter().all(|id| !r.selected.contains(id)));
        assert!(r2.mmd_before.is_some());
        let rest = part.unlabeled.len();
        run_round(&mut part, &lrs, 2, rest, Strategy::Alrm, &KernelSpec::Linear, &mut t.oracle, &mut rng).unwrap();
        assert!(part.unlabeled.is_empty());
        assert_eq!(t.oracle.distinct_calls(), 30);
        assert!(run_round(&mut part, &lrs, 3, 1, Strategy::Alrm, &KernelSpec::Linear, &mut t.oracle, &mut rng).is_err());
    }
}

//! Synthetic two-domain benchmark with ordinal classes.
//!
//! Class means sit on a helix in the first three coordinates, so the
//! distance between two class means grows with their grade gap. The target
//! domain pushes draws from the same process through an invertible affine
//! map, adds noise and replaces a fixed fraction of points by far-field
//! outliers. Target labels stay inside an [`Oracle`].

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::diffmath::Tensor;
use crate::rng::{self, Rng, Stream};
use crate::{Error, Result};

/// Grade proportions of the reference clinical collection.
pub const REFERENCE_COUNTS: [f64; 5] = [906.0, 553.0, 720.0, 247.0, 390.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Curve {
    pub radius: f64,
    /// Angle between consecutive class means.
    pub angle_step: f64,
    /// Height gained per grade.
    pub pitch: f64,
}

impl Default for Curve {
    fn default() -> Self {
        Self { radius: 2.0, angle_step: PI / 4.0, pitch: 0.5 }
    }
}

/// Affine map applied to target draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftMap {
    Identity,
    /// Rotates each informative coordinate `i < 3` towards coordinate
    /// `3 + i` by `angle`, then scales by `scale` and adds `offset` to every
    /// informative coordinate.
    Rotation {
        angle: f64,
        scale: f64,
        offset: f64,
    },
    /// Explicit `A` (row-major, `d_in × d_in`) and `b`.
    Affine {
        matrix: Vec<Vec<f64>>,
        offset: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Shift {
    pub map: ShiftMap,
    /// Standard deviation of isotropic noise added after the map.
    pub noise: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Self::none()
    }
}

impl Shift {
    pub fn none() -> Self {
        Self { map: ShiftMap::Identity, noise: 0.0 }
    }

    /// `(A, b)` for input dimension `d`.
    pub fn affine(&self, d: usize) -> Result<(Tensor, Vec<f64>)> {
        match &self.map {
            ShiftMap::Identity => Ok((Tensor::identity(d), vec![0.0; d])),
            ShiftMap::Rotation { angle, scale, offset } => {
                if d < 6 {
                    return Err(Error::Config {
                        key: "shift.map".into(),
                        reason: "rotation shift needs d_in >= 6".into(),
                    });
                }
                let mut a = Tensor::identity(d);
                let (c, s) = (angle.cos(), angle.sin());
                for i in 0..3 {
                    let j = 3 + i;
                    let m = a.data_mut();
                    m[i * d + i] = c;
                    m[i * d + j] = -s;
                    m[j * d + i] = s;
                    m[j * d + j] = c;
                }
                let a = a.map(|v| v * scale);
                let mut b = vec![0.0; d];
                b[..3].iter_mut().for_each(|v| *v = *offset);
                Ok((a, b))
            }
            ShiftMap::Affine { matrix, offset } => {
                if matrix.len() != d || matrix.iter().any(|r| r.len() != d) || offset.len() != d {
                    return Err(Error::Config {
                        key: "shift.map".into(),
                        reason: format!("matrix must be {d}x{d} with offset of length {d}"),
                    });
                }
                Ok((Tensor::from_rows(matrix), offset.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub n: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub curve: Curve,
    /// Per-class isotropic standard deviation.
    pub class_sigma: Vec<f64>,
    pub proportions: Vec<f64>,
    pub shift: Shift,
    pub outlier_fraction: f64,
    /// Side of the outlier hypercube in units of the mean class sigma.
    pub outlier_width: f64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        let total: f64 = REFERENCE_COUNTS.iter().sum();
        Self {
            n: 2000,
            input_dim: 32,
            classes: 5,
            curve: Curve::default(),
            class_sigma: vec![0.4; 5],
            proportions: REFERENCE_COUNTS.iter().map(|c| c / total).collect(),
            shift: Shift::none(),
            outlier_fraction: 0.0,
            outlier_width: 5.0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("data.{key}"), reason: reason.into() });
        if self.classes < 2 {
            return bad("classes", "need at least two classes");
        }
        if self.input_dim < 3 {
            return bad("input_dim", "need at least three coordinates for the class curve");
        }
        if self.proportions.len() != self.classes || self.class_sigma.len() != self.classes {
            return bad("proportions", "proportions and class_sigma need one entry per class");
        }
        if self.proportions.iter().any(|&p| !(p >= 0.0)) || (self.proportions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("proportions", "must be non-negative and sum to 1");
        }
        if self.class_sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            return bad("class_sigma", "must be finite and non-negative");
        }
        if !(0.0..=0.2).contains(&self.outlier_fraction) {
            return bad("outlier_fraction", "must lie in [0, 0.2]");
        }
        if !(self.outlier_width > 0.0) {
            return bad("outlier_width", "must be positive");
        }
        if !(self.shift.noise >= 0.0) {
            return bad("shift.noise", "must be non-negative");
        }
        Ok(())
    }

    /// Class means along the helix, padded with zeros.
    pub fn class_means(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|c| {
                let t = c as f64 * self.curve.angle_step;
                let mut m = vec![0.0; self.input_dim];
                m[0] = self.curve.radius * t.cos();
                m[1] = self.curve.radius * t.sin();
                m[2] = self.curve.pitch * c as f64;
                m
            })
            .collect()
    }

    /// Per-class counts by largest-remainder rounding of `n * proportions`.
    pub fn class_counts(&self) -> Vec<usize> {
        largest_remainder(self.n, &self.proportions)
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_fraction * self.n as f64).round() as usize
    }
}

/// Apportions `n` by largest remainder; ties go to the lower class index.
pub fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &c in order.iter().take(n.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Labelled points; ids are row indices.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Ground-truth lookup for target samples that records every query.
#[derive(Debug, Clone)]
pub struct Oracle {
    labels: Vec<usize>,
    outliers: Vec<bool>,
    queried: BTreeSet<usize>,
    calls: usize,
}

impl Oracle {
    fn new(labels: Vec<usize>, outliers: Vec<bool>) -> Self {
        Self { labels, outliers, queried: BTreeSet::new(), calls: 0 }
    }

    /// Generating label of target sample `id`; repeated queries count once
    /// toward the budget.
    pub fn label(&mut self, id: usize) -> Result<usize> {
        let l = *self.labels.get(id).ok_or_else(|| Error::invalid(format!("unknown target id {id}")))?;
        self.calls += 1;
        self.queried.insert(id);
        Ok(l)
    }

    pub fn distinct_calls(&self) -> usize {
        self.queried.len()
    }

    pub fn total_calls(&self) -> usize {
        self.calls
    }

    pub fn queried(&self) -> &BTreeSet<usize> {
        &self.queried
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Full label vector for scoring. Never pass this to training code.
    pub fn ground_truth_for_evaluation(&self) -> &[usize] {
        &self.labels
    }

    /// Which target points were replaced by outliers.
    pub fn outlier_flags(&self) -> &[bool] {
        &self.outliers
    }
}

#[derive(Debug, Clone)]
pub struct TargetDomain {
    pub features: Tensor,
    pub classes: usize,
    pub oracle: Oracle,
}

impl TargetDomain {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn draw_process(spec: &DomainSpec, means: &[Vec<f64>], sigma: &[f64], rng: &mut Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut labels: Vec<usize> =
        spec.class_counts().iter().enumerate().flat_map(|(c, &k)| std::iter::repeat_n(c, k)).collect();
    labels.shuffle(rng);
    let points = labels
        .iter()
        .map(|&c| means[c].iter().map(|m| m + sigma[c] * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    (points, labels)
}

/// Labelled source sample drawn from the class process of `spec`.
pub fn make_source(spec: &DomainSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::Data);
    let means = spec.class_means();
    check_distinct_means(&means)?;
    let (points, labels) = draw_process(spec, &means, &spec.class_sigma, &mut rng);
    Ok(LabeledDataset { features: rows_or_empty(&points, spec.input_dim), labels, classes: spec.classes })
}

/// Target sample: `A x + b + noise` with `x` from the process of
/// `source_spec` (class proportions and size from `spec`), then outliers.
pub fn make_target(spec: &DomainSpec, source_spec: &DomainSpec, seed: u64) -> Result<TargetDomain> {
    spec.validate()?;
    source_spec.validate()?;
    if spec.input_dim != source_spec.input_dim || spec.classes != source_spec.classes {
        return Err(Error::invalid("target and source specs disagree on input_dim or classes"));
    }
    let d = spec.input_dim;
    let (a, b) = spec.shift.affine(d)?;
    if is_singular(&a) {
        return Err(Error::Config { key: "data.target.shift.map".into(), reason: "shift matrix is singular".into() });
    }
    // Separate stream from the source draw so equal seeds do not reuse draws.
    let mut rng = rng::numbered(seed, 1);
    let means = source_spec.class_means();
    check_distinct_means(&means)?;
    let (points, labels) = draw_process(spec, &means, &source_spec.class_sigma, &mut rng);
    let map = |x: &[f64]| -> Vec<f64> { (0..d).map(|i| crate::diffmath::dot(a.row(i), x) + b[i]).collect() };
    let mut shifted: Vec<Vec<f64>> = points
        .iter()
        .map(|x| {
            let mut y = map(x);
            if spec.shift.noise > 0.0 {
                y.iter_mut().for_each(|v| *v += spec.shift.noise * rng.sample::<f64, _>(StandardNormal));
            }
            y
        })
        .collect();
    let mut labels = labels;
    let mut outliers = vec![false; spec.n];
    let n_out = spec.outlier_count();
    if n_out > 0 {
        let target_means: Vec<Vec<f64>> = means.iter().map(|m| map(m)).collect();
        let centre: Vec<f64> =
            (0..d).map(|i| target_means.iter().map(|m| m[i]).sum::<f64>() / target_means.len() as f64).collect();
        let sigma = source_spec.class_sigma.iter().sum::<f64>() / source_spec.classes as f64;
        let half = 0.5 * spec.outlier_width * sigma.max(f64::MIN_POSITIVE);
        for id in rand::seq::index::sample(&mut rng, spec.n, n_out).into_iter() {
            let x: Vec<f64> = centre.iter().map(|c| c + rng.random_range(-half..=half)).collect();
            labels[id] = nearest(&x, &target_means);
            shifted[id] = x;
            outliers[id] = true;
        }
    }
    Ok(TargetDomain {
        features: rows_or_empty(&shifted, d),
        classes: spec.classes,
        oracle: Oracle::new(labels, outliers),
    })
}

fn rows_or_empty(rows: &[Vec<f64>], d: usize) -> Tensor {
    if rows.is_empty() {
        Tensor::matrix(0, d, vec![])
    } else {
        Tensor::from_rows(rows)
    }
}

fn nearest(x: &[f64], means: &[Vec<f64>]) -> usize {
    let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    for (c, m) in means.iter().enumerate().skip(1) {
        if dist(m) < dist(&means[best]) {
            best = c;
        }
    }
    best
}

fn check_distinct_means(means: &[Vec<f64>]) -> Result<()> {
    for i in 0..means.len() {
        for j in i + 1..means.len() {
            if means[i] == means[j] {
                return Err(Error::Config {
                    key: "data.curve".into(),
                    reason: format!("classes {i} and {j} share a mean"),
                });
            }
        }
    }
    Ok(())
}

/// LU with partial pivoting; singular when a pivot is negligible relative
/// to the largest entry.
fn is_singular(a: &Tensor) -> bool {
    let n = a.rows();
    let mut m = a.data().to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return true;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| m[r * n + col].abs().total_cmp(&m[s * n + col].abs())).unwrap_or(col);
        if m[piv * n + col].abs() <= 1e-12 * scale {
            return true;
        }
        if piv != col {
            for k in 0..n {
                m.swap(piv * n + k, col * n + k);
            }
        }
        for r in col + 1..n {
            let f = m[r * n + col] / m[col * n + col];
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Export / import

/// Writes `<stem>_features.csv`, `<stem>_labels.csv` and `<stem>_spec.json`
/// into `dir`. Labels live in their own file.
pub fn export_dataset(
    dir: &Path,
    stem: &str,
    features: &Tensor,
    labels: Option<&[usize]>,
    spec: &DomainSpec,
    prov: &Provenance,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fpath = dir.join(format!("{stem}_features.csv"));
    write_with(&fpath, |w| {
        writeln!(w, "{}", prov.comment_line())?;
        let cols: Vec<String> = (0..features.cols()).map(|j| format!("x{j}")).collect();
        writeln!(w, "id,{}", cols.join(","))?;
        for (i, row) in features.iter_rows().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{i},{}", vals.join(","))?;
        }
        Ok(())
    })?;
    if let Some(labels) = labels {
        let lpath = dir.join(format!("{stem}_labels.csv"));
        write_with(&lpath, |w| {
            writeln!(w, "{}", prov.comment_line())?;
            writeln!(w, "id,label")?;
            for (i, l) in labels.iter().enumerate() {
                writeln!(w, "{i},{l}")?;
            }
            Ok(())
        })?;
    }
    let spath = dir.join(format!("{stem}_spec.json"));
    let body = serde_json::json!({ "config_hash": prov.config_hash, "seed": prov.seed, "spec": spec });
    std::fs::write(&spath, serde_json::to_string_pretty(&body)? + "\n").map_err(|e| Error::io(&spath, e))
}

pub(crate) fn write_with(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<std::fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads an `id,x0,...` feature file written by [`export_dataset`].
pub fn read_features(path: &Path) -> Result<Tensor> {
    let rows = read_csv_rows(path)?;
    let d = rows.first().map(|r| r.len().saturating_sub(1)).unwrap_or(0);
    let mut data = Vec::with_capacity(rows.len() * d);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d + 1 || r[0] != i as f64 {
            return Err(Error::Format { path: path.into(), reason: format!("row {i} malformed") });
        }
        data.extend(&r[1..]);
    }
    Ok(Tensor::matrix(rows.len(), d, data))
}

/// Reads an `id,label` file; only evaluation code should call this.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    read_csv_rows(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            [id, l] if *id == i as f64 && *l >= 0.0 && l.fract() == 0.0 => Ok(*l as usize),
            _ => Err(Error::Format { path: path.into(), reason: format!("row {i} malformed") }),
        })
        .collect()
}

/// Numeric rows of a CSV file, skipping `#` comments and the header.
pub(crate) fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(str::parse::<f64>).collect();
        rows.push(row.map_err(|e| Error::Format { path: path.into(), reason: format!("line {}: {e}", ln + 1) })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_spec(n: usize) -> DomainSpec {
        DomainSpec { n, proportions: vec![0.2; 5], ..DomainSpec::default() }
    }

    #[test]
    fn uniform_proportions_give_equal_counts() {
        let ds = make_source(&uniform_spec(1000), 3).unwrap();
        for c in 0..5 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 200);
        }
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        let p: Vec<f64> = REFERENCE_COUNTS.iter().map(|c| c / 2816.0).collect();
        for n in [1, 7, 100, 2000, 2816] {
            assert_eq!(largest_remainder(n, &p).iter().sum::<usize>(), n);
        }
        assert_eq!(largest_remainder(2816, &p), vec![906, 553, 720, 247, 390]);
    }

    #[test]
    fn zero_sigma_collapses_to_means() {
        let spec = DomainSpec { class_sigma: vec![0.0; 5], ..uniform_spec(50) };
        let ds = make_source(&spec, 1).unwrap();
        let means = spec.class_means();
        for (row, &l) in ds.features.iter_rows().zip(&ds.labels) {
            assert_eq!(row, means[l].as_slice());
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let spec = uniform_spec(100);
        assert_eq!(make_source(&spec, 9).unwrap(), make_source(&spec, 9).unwrap());
        assert_ne!(make_source(&spec, 9).unwrap(), make_source(&spec, 10).unwrap());
    }

    #[test]
    fn mean_distance_grows_with_grade_gap() {
        let means = DomainSpec::default().class_means();
        let dist = |a: usize, b: usize| {
            crate::diffmath::norm(&means[a].iter().zip(&means[b]).map(|(x, y)| x - y).collect::<Vec<_>>())
        };
        for a in 0..5 {
            for gap in 1..5 - a {
                if a + gap + 1 < 5 {
                    assert!(dist(a, a + gap) < dist(a, a + gap + 1));
                }
            }
        }
    }

    #[test]
    fn unshifted_target_matches_source_process() {
        let src = uniform_spec(2000);
        let s = make_source(&src, 4).unwrap();
        let t = make_target(&src, &src, 4).unwrap();
        let mean = |x: &Tensor| -> Vec<f64> {
            (0..x.cols()).map(|j| x.iter_rows().map(|r| r[j]).sum::<f64>() / x.rows() as f64).collect()
        };
        let (ms, mt) = (mean(&s.features), mean(&t.features));
        let mmd: f64 = ms.iter().zip(&mt).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(mmd < 1e-2, "{mmd}");
    }

    #[test]
    fn outlier_count_is_exact() {
        let src = DomainSpec::default();
        let tgt = DomainSpec { outlier_fraction: 0.05, ..src.clone() };
        let t = make_target(&tgt, &src, 2).unwrap();
        assert_eq!(t.oracle.outlier_flags().iter().filter(|&&o| o).count(), 100);
    }

    #[test]
    fn oracle_returns_generating_labels_and_counts_distinct_ids() {
        let src = DomainSpec { class_sigma: vec![0.0; 5], ..DomainSpec::default() };
        let mut t = make_target(&src, &src, 5).unwrap();
        let means = src.class_means();
        for id in [0, 3, 3, 17] {
            let l = t.oracle.label(id).unwrap();
            assert_eq!(t.features.row(id), means[l].as_slice());
        }
        assert_eq!(t.oracle.distinct_calls(), 3);
        assert_eq!(t.oracle.total_calls(), 4);
        assert!(t.oracle.label(5000).is_err());
    }

    #[test]
    fn singular_shift_rejected() {
        let src = DomainSpec { input_dim: 3, class_sigma: vec![0.1; 5], ..DomainSpec::default() };
        let map = ShiftMap::Affine {
            matrix: vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![0.0, 0.0, 1.0]],
            offset: vec![0.0; 3],
        };
        let tgt = DomainSpec { shift: Shift { map, noise: 0.0 }, ..src.clone() };
        assert!(make_target(&tgt, &src, 1).is_err());
        let zero = DomainSpec {
            shift: Shift { map: ShiftMap::Rotation { angle: 0.3, scale: 0.0, offset: 0.0 }, noise: 0.0 },
            ..DomainSpec::default()
        };
        assert!(make_target(&zero, &DomainSpec::default(), 1).is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(DomainSpec { outlier_fraction: 0.3, ..DomainSpec::default() }.validate().is_err());
        assert!(DomainSpec { proportions: vec![0.5; 5], ..DomainSpec::default() }.validate().is_err());
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = uniform_spec(20);
        let ds = make_source(&spec, 8).unwrap();
        let prov = Provenance { config_hash: "abc".into(), seed: 8 };
        export_dataset(dir.path(), "source", &ds.features, Some(&ds.labels), &spec, &prov).unwrap();
        assert_eq!(read_features(&dir.path().join("source_features.csv")).unwrap(), ds.features);
        assert_eq!(read_labels(&dir.path().join("source_labels.csv")).unwrap(), ds.labels);
        let text = std::fs::read_to_string(dir.path().join("source_features.csv")).unwrap();
        assert!(text.starts_with("# config_hash=abc seed=8"));
    }
}

//! Stage 1: source model pretraining and source feature generator training.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::diffmath::{gradient, Bindings, Graph, NodeId, Tensor};
use crate::losses::{chain_contrastive_batch, cross_entropy_logits, ChainConfig};
use crate::nets::{
    adadelta_step, AdadeltaConfig, AdadeltaState, ArchConfig, ClassifierParams, GeneratorParams, Model, Parameters,
};
use crate::rng::{self, Stream};
use crate::synth::{read_csv_rows, write_with, LabeledDataset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceTrainConfig {
    pub epochs_model: usize,
    pub epochs_generator: usize,
    pub batch_size: usize,
    /// Generator mini-batches per generator epoch.
    pub generator_steps_per_epoch: usize,
    pub chain: ChainConfig,
    /// Weight of the chain-contrastive term for both networks.
    pub chain_weight: f64,
    pub optimizer: AdadeltaConfig,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs_model: 100,
            epochs_generator: 1000,
            batch_size: 64,
            generator_steps_per_epoch: 1,
            chain: ChainConfig::default(),
            chain_weight: 1.0,
            optimizer: AdadeltaConfig::default(),
        }
    }
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("stage1.{key}"), reason: reason.into() });
        if self.epochs_model == 0 {
            return bad("epochs_model", "must be at least 1");
        }
        if self.epochs_generator == 0 {
            return bad("epochs_generator", "must be at least 1");
        }
        if self.generator_steps_per_epoch == 0 {
            return bad("generator_steps_per_epoch", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "contrastive pairs need a batch of at least 2");
        }
        if !(self.chain_weight >= 0.0) {
            return bad("chain_weight", "must be non-negative");
        }
        self.chain.validate()
    }
}

/// Per-epoch mean loss and the final training accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epoch_loss: Vec<f64>,
    pub final_accuracy: f64,
}

/// `L_ce + w L_chn` on one batch; the chain term is omitted when its weight
/// is zero or the batch has no valid anchor.
fn supervised_objective(
    g: &mut Graph,
    h: NodeId,
    logits: NodeId,
    labels: &[usize],
    classes: usize,
    cfg: &SourceTrainConfig,
) -> NodeId {
    let ce = cross_entropy_logits(g, logits, Tensor::one_hot(labels, classes));
    if cfg.chain_weight == 0.0 {
        return ce;
    }
    match chain_contrastive_batch(g, h, labels, classes, &cfg.chain) {
        Some(chn) => {
            let w = g.scale(chn, cfg.chain_weight);
            g.add(ce, w)
        }
        None => ce,
    }
}

/// Trains encoder and classifier on labelled source data.
pub fn pretrain_source(
    data: &LabeledDataset,
    arch: &ArchConfig,
    cfg: &SourceTrainConfig,
    seed: u64,
) -> Result<(Model, TrainTrace)> {
    arch.validate()?;
    cfg.validate()?;
    let k = arch.classes;
    if data.classes != k {
        return Err(Error::invalid(format!("data has {} classes, model {k}", data.classes)));
    }
    if data.features.cols() != arch.input_dim {
        return Err(Error::Dimension { expected: arch.input_dim, got: data.features.cols() });
    }
    for c in 0..k {
        if !data.labels.contains(&c) {
            return Err(Error::invalid(format!("class {c} is absent from the source data")));
        }
    }
    let mut model = Model::random(arch, &mut rng::stream(seed, Stream::Init));
    let mut order_rng = rng::stream(seed, Stream::SourceTrain);
    let mut opt = AdadeltaState::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs_model);
    for _ in 0..cfg.epochs_model {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0;
        for ids in order.chunks(cfg.batch_size) {
            let x = data.features.select_rows(ids);
            let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let xin = g.input("x");
            let h = model.encoder.build(&mut g, xin, true);
            let logits = model.classifier.build_logits(&mut g, h, true);
            let loss = supervised_objective(&mut g, h, logits, &labels, k, cfg);
            let mut b = Bindings::new();
            model.bind(&mut b);
            b.insert("x".into(), x);
            let grads = gradient(&g, &b, loss)?;
            adadelta_step(&mut model, &grads.by_input, &mut opt)?;
            total += grads.value;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    let preds = model.predict(&data.features)?;
    let acc = preds.iter().zip(&data.labels).filter(|(p, t)| p == t).count() as f64 / data.len() as f64;
    Ok((model, TrainTrace { epoch_loss: trace, final_accuracy: acc }))
}

/// Trains a label-conditioned generator whose features the frozen
/// classifier assigns to the conditioning label.
pub fn train_generator(
    classifier: &ClassifierParams,
    arch: &ArchConfig,
    cfg: &SourceTrainConfig,
    seed: u64,
) -> Result<(GeneratorParams, TrainTrace)> {
    if !classifier.is_frozen() {
        return Err(Error::NotFrozen);
    }
    arch.validate()?;
    cfg.validate()?;
    let k = classifier.classes();
    if k != arch.classes || classifier.feature_dim() != arch.feature_dim {
        return Err(Error::invalid("classifier does not match the architecture"));
    }
    let mut init = rng::stream(seed, Stream::Init);
    // Skip past the model draws so the generator does not reuse them.
    let _ = Model::random(arch, &mut init);
    let mut gen = GeneratorParams::random(arch, &mut init);
    let mut rng = rng::stream(seed, Stream::Generator);
    let mut opt = AdadeltaState::new(cfg.optimizer);
    let mut trace = Vec::with_capacity(cfg.epochs_generator);
    let mut cls_bindings = Bindings::new();
    classifier.bind(&mut cls_bindings);
    for _ in 0..cfg.epochs_generator {
        let mut total = 0.0;
        for _ in 0..cfg.generator_steps_per_epoch {
            let labels: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..k)).collect();
            let noise = gen.sample_noise(cfg.batch_size, &mut rng);
            let mut g = Graph::new();
            let z = g.input("z");
            let y = g.input("y");
            let h = gen.build(&mut g, z, y, true);
            let logits = classifier.build_logits(&mut g, h, false);
            let loss = supervised_objective(&mut g, h, logits, &labels, k, cfg);
            let mut b = cls_bindings.clone();
            gen.bind(&mut b);
            b.insert("z".into(), noise);
            b.insert("y".into(), Tensor::one_hot(&labels, k));
            let grads = gradient(&g, &b, loss)?;
            adadelta_step(&mut gen, &grads.by_input, &mut opt)?;
            total += grads.value;
        }
        trace.push(total / cfg.generator_steps_per_epoch as f64);
    }
    let acc = generator_accuracy(&gen, classifier, 100 * k, seed)?;
    Ok((gen, TrainTrace { epoch_loss: trace, final_accuracy: acc }))
}

/// Fraction of generated features (balanced labels, fresh noise) that the
/// classifier assigns to their conditioning label.
pub fn generator_accuracy(gen: &GeneratorParams, classifier: &ClassifierParams, n: usize, seed: u64) -> Result<f64> {
    let k = gen.classes();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let noise = gen.sample_noise(n, &mut rng::numbered(seed, 2));
    let h = gen.generate_batch(&noise, &labels)?;
    let preds = classifier.classify(&h)?.argmax_rows();
    Ok(preds.iter().zip(&labels).filter(|(p, t)| p == t).count() as f64 / n as f64)
}

/// `[K, K]` mean pairwise cosine similarity between features of class `i`
/// and class `j`. Rows for absent classes are NaN.
pub fn class_cosine_matrix(features: &Tensor, labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in features.iter_rows().zip(labels) {
        let n = crate::diffmath::norm(row);
        if n > 0.0 {
            sums[l].iter_mut().zip(row).for_each(|(s, v)| *s += v / n);
        }
        counts[l] += 1;
    }
    let means: Vec<Vec<f64>> =
        sums.iter().zip(&counts).map(|(s, &c)| s.iter().map(|v| v / c as f64).collect()).collect();
    (0..classes).map(|i| (0..classes).map(|j| crate::diffmath::dot(&means[i], &means[j])).collect()).collect()
}

/// Mean of the first off-diagonal of a class similarity matrix.
pub fn adjacent_similarity(m: &[Vec<f64>]) -> f64 {
    let k = m.len();
    (0..k - 1).map(|i| 0.5 * (m[i][i + 1] + m[i + 1][i])).sum::<f64>() / (k - 1) as f64
}

/// Writes a feature dump: provenance comment, a `# n=.. d=.. source=..`
/// line, a header and one `f0..,label` row per feature (`-1` when
/// unlabelled).
pub fn export_features(
    path: &Path,
    tag: &str,
    features: &Tensor,
    labels: Option<&[usize]>,
    prov: &Provenance,
) -> Result<()> {
    let n = if features.is_empty() { 0 } else { features.rows() };
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Dimension { expected: n, got: l.len() });
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let d = features.cols();
    write_with(path, |w| {
        use std::io::Write;
        writeln!(w, "{}", prov.comment_line())?;
        writeln!(w, "# n={n} d={d} source={tag}")?;
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        writeln!(w, "{}", header.join(","))?;
        for i in 0..n {
            let mut vals: Vec<String> = features.row(i).iter().map(|v| v.to_string()).collect();
            vals.push(labels.map_or("-1".into(), |l| l[i].to_string()));
            writeln!(w, "{}", vals.join(","))?;
        }
        Ok(())
    })
}

/// Reads a dump written by [`export_features`].
pub fn read_features(path: &Path) -> Result<(Tensor, Vec<Option<usize>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let d = text
        .lines()
        .find_map(|l| {
            l.strip_prefix("# n=")
                .and_then(|r| r.split(" d=").nth(1))
                .and_then(|r| r.split(' ').next())
                .and_then(|v| v.parse::<usize>().ok())
        })
        .ok_or_else(|| Error::Format { path: path.into(), reason: "missing `# n= d=` line".into() })?;
    let rows = read_csv_rows(path)?;
    let mut data = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d + 1 {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("row {i} has {} columns, expected {}", r.len(), d + 1),
            });
        }
        data.extend(&r[..d]);
        labels.push((r[d] >= 0.0).then_some(r[d] as usize));
    }
    Ok((Tensor::matrix(rows.len(), d, data), labels))
}

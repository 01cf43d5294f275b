//! Experiment orchestration: the staged pipeline behind the CLI, run
//! reports, report comparison and the ablation grid.
//!
//! Stages talk to each other only through files in the output directory,
//! so `run_all` and a chain of single-stage invocations produce the same
//! artifacts. Every file carries the config hash and seed of its run.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{RoundRecord, Strategy};
use crate::adapt::{
    self, first_events, Ablation, AdaptOutcome, EpochMetrics, EventKind, InvariantReport, PseudoSummary,
};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{Provenance, RunConfig};
use crate::diffmath::Tensor;
use crate::metrics::{self, Evaluation};
use crate::nets::{GeneratorParams, Model};
use crate::rng;
use crate::source::{self, TrainTrace};
use crate::synth::{self, write_with, LabeledDataset, TargetDomain};
use crate::{Error, Result};

pub const REPORT_FORMAT: &str = "sfada-report";

pub const SOURCE_CKPT: &str = "source_model.ckpt";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const ADAPTED_CKPT: &str = "adapted_model.ckpt";
const STAGE1_FILE: &str = "stage1.json";
const ADAPT_FILE: &str = "adapt_summary.json";

/// Generated features per class in `features_generated.csv`.
const GENERATED_PER_CLASS: usize = 100;

// ---------------------------------------------------------------------------
// Report types

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Summary {
    pub source_train_accuracy: f64,
    pub source_final_loss: f64,
    /// Share of generated features the frozen classifier assigns to their
    /// conditioning label; unset until the generator stage has run.
    pub generator_accuracy: Option<f64>,
    pub generator_final_loss: Option<f64>,
    /// Mean inter-class cosine similarity of source features under the
    /// source model.
    pub cosine_matrix: Vec<Vec<f64>>,
    pub adjacent_similarity: f64,
    /// Entry `(0, K-1)` of the cosine matrix.
    pub far_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub strategy: Strategy,
    pub total_budget: usize,
    pub round_budget: usize,
    pub oracle_distinct_calls: usize,
    pub oracle_total_calls: usize,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptSummary {
    pub config_hash: String,
    pub seed: u64,
    /// The source model on the target set, before adaptation.
    pub source_only: Evaluation,
    pub selection: SelectionSummary,
    pub epochs: Vec<EpochMetrics>,
    pub pseudo: PseudoSummary,
    pub invariants: InvariantReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stage1File {
    config_hash: String,
    seed: u64,
    summary: Stage1Summary,
    source_trace: Vec<f64>,
    generator_trace: Option<Vec<f64>>,
}

/// The final record of one run. Contains no wall-clock data, so two runs
/// of one config and seed serialise to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub label: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seed: u64,
    pub classes: usize,
    pub target_size: usize,
    pub config: RunConfig,
    pub stage1: Stage1Summary,
    pub selection: SelectionSummary,
    pub source_only: Evaluation,
    pub epochs: Vec<EpochMetrics>,
    #[serde(rename = "final")]
    pub final_eval: Evaluation,
    pub pseudo: PseudoSummary,
    pub invariants: InvariantReport,
}

impl RunReport {
    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.config_hash.clone(), seed: self.seed }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
        if r.format != REPORT_FORMAT {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("not a run report (format `{}`)", r.format),
            });
        }
        Ok(r)
    }
}

/// Short name for a configuration, used as the comparison row label.
pub fn default_label(cfg: &RunConfig) -> String {
    let a = &cfg.ablation;
    let strategy = match cfg.active.strategy {
        Strategy::Alrm => "alrm",
        Strategy::Random => "random",
    };
    if *a == Ablation::full() {
        return format!("full/{strategy}");
    }
    let on: Vec<&str> = [
        (a.alignment, "alg"),
        (a.inter_consistency, "inter"),
        (a.intra_consistency, "intra"),
        (a.mixup, "mixup"),
        (a.add_pl, "add"),
        (a.mis_pl, "mis"),
        (a.rev_pl, "rev"),
    ]
    .iter()
    .filter(|(b, _)| *b)
    .map(|(_, n)| *n)
    .collect();
    if on.is_empty() {
        format!("ce/{strategy}")
    } else {
        format!("ce+{}/{strategy}", on.join("+"))
    }
}

// ---------------------------------------------------------------------------
// In-memory pipeline

pub struct Data {
    pub source: LabeledDataset,
    pub target: TargetDomain,
}

pub fn make_data(cfg: &RunConfig) -> Result<Data> {
    Ok(Data {
        source: synth::make_source(&cfg.source, cfg.seed)?,
        target: synth::make_target(&cfg.target, &cfg.source, cfg.seed)?,
    })
}

/// Trains the source model and freezes its classifier.
pub fn pretrain(cfg: &RunConfig, data: &Data) -> Result<(Model, TrainTrace, Stage1Summary)> {
    let (mut model, trace) = source::pretrain_source(&data.source, &cfg.model, &cfg.stage1, cfg.seed)?;
    model.classifier.freeze();
    let feats = model.features(&data.source.features)?;
    let m = source::class_cosine_matrix(&feats, &data.source.labels, cfg.model.classes);
    let k = m.len();
    let summary = Stage1Summary {
        source_train_accuracy: trace.final_accuracy,
        source_final_loss: trace.epoch_loss.last().copied().unwrap_or(f64::NAN),
        generator_accuracy: None,
        generator_final_loss: None,
        adjacent_similarity: source::adjacent_similarity(&m),
        far_similarity: m[0][k - 1],
        cosine_matrix: m,
    };
    Ok((model, trace, summary))
}

pub fn train_generator(
    cfg: &RunConfig,
    model: &Model,
    summary: &mut Stage1Summary,
) -> Result<(GeneratorParams, TrainTrace)> {
    let (gen, trace) = source::train_generator(&model.classifier, &cfg.model, &cfg.stage1, cfg.seed)?;
    summary.generator_accuracy = Some(trace.final_accuracy);
    summary.generator_final_loss = trace.epoch_loss.last().copied();
    Ok((gen, trace))
}

/// Stages 2 and 3 on a private copy of the target set.
pub fn adapt_run(
    cfg: &RunConfig,
    target: &TargetDomain,
    model: &Model,
    gen: &GeneratorParams,
) -> Result<(AdaptOutcome, AdaptSummary)> {
    let truth = target.oracle.ground_truth_for_evaluation().to_vec();
    let (source_only, _) = metrics::evaluate(&model.probabilities(&target.features)?, &truth)?;
    let mut target = target.clone();
    let outcome = adapt::adapt(model, gen, &mut target, &cfg.active, &cfg.lpda, &cfg.ablation, cfg.seed)?;
    let n = target.len();
    let total_budget = cfg.active.total_budget(n);
    let calls = target.oracle.distinct_calls();
    if calls > total_budget {
        return Err(Error::invalid(format!("oracle answered {calls} distinct queries, budget is {total_budget}")));
    }
    let summary = AdaptSummary {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        source_only,
        selection: SelectionSummary {
            strategy: cfg.active.strategy,
            total_budget,
            round_budget: cfg.active.round_budget(n),
            oracle_distinct_calls: calls,
            oracle_total_calls: target.oracle.total_calls(),
            rounds: outcome.rounds.iter().map(|r| r.record.clone()).collect(),
        },
        epochs: outcome.epochs.clone(),
        pseudo: outcome.pseudo.clone(),
        invariants: outcome.invariants,
    };
    Ok((outcome, summary))
}

pub fn build_report(
    cfg: &RunConfig,
    label: &str,
    stage1: &Stage1Summary,
    adapt: &AdaptSummary,
    final_eval: Evaluation,
) -> RunReport {
    RunReport {
        format: REPORT_FORMAT.into(),
        label: label.into(),
        config_hash: cfg.config_hash(),
        dataset_hash: cfg.dataset_hash(),
        seed: cfg.seed,
        classes: cfg.model.classes,
        target_size: cfg.target.n,
        config: cfg.clone(),
        stage1: stage1.clone(),
        selection: adapt.selection.clone(),
        source_only: adapt.source_only.clone(),
        epochs: adapt.epochs.clone(),
        final_eval,
        pseudo: adapt.pseudo.clone(),
        invariants: adapt.invariants,
    }
}

// ---------------------------------------------------------------------------
// Writers

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a T,
}

fn write_jsonl<T: Serialize>(path: &Path, prov: &Provenance, records: &[T]) -> Result<()> {
    write_with(path, |w| {
        for r in records {
            let line = serde_json::to_string(&Stamped { config_hash: &prov.config_hash, seed: prov.seed, record: r })?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_metrics_csv(path: &Path, prov: &Provenance, epochs: &[EpochMetrics]) -> Result<()> {
    write_with(path, |w| {
        writeln!(w, "{}", prov.comment_line())?;
        writeln!(
            w,
            "epoch,accuracy,macro_f1,kappa,qwk,macro_auc,loss_ce,loss_alignment,loss_inter,loss_intra,loss_mixup,total_loss,oracle_labeled,pseudo_labeled,pseudo_precision,sinkhorn_not_converged"
        )?;
        for e in epochs {
            let l = &e.losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.accuracy,
                e.macro_f1,
                opt(e.kappa),
                opt(e.qwk),
                opt(e.macro_auc),
                l.ce,
                l.alignment,
                l.inter,
                l.intra,
                l.mixup,
                e.total_loss,
                e.oracle_labeled,
                e.pseudo_labeled,
                opt(e.pseudo_precision),
                e.sinkhorn_not_converged
            )?;
        }
        Ok(())
    })
}

fn write_roc(out: &Path, prov: &Provenance, curves: &[metrics::RocCurve]) -> Result<()> {
    for (c, curve) in curves.iter().enumerate() {
        write_with(&out.join(format!("roc_{c}.csv")), |w| {
            writeln!(w, "{}", prov.comment_line())?;
            writeln!(w, "fpr,tpr")?;
            for (f, t) in curve {
                writeln!(w, "{f},{t}")?;
            }
            Ok(())
        })?;
    }
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct Timings {
    config_hash: String,
    seed: u64,
    stages_ms: BTreeMap<String, u128>,
    rounds_ms: Vec<u128>,
}

/// Wall-clock times live in their own file, outside the report.
fn record_timing(out: &Path, prov: &Provenance, stage: &str, ms: u128, rounds_ms: Option<Vec<u128>>) -> Result<()> {
    let path = out.join("timings.json");
    let mut t = read_json::<Timings>(&path)
        .ok()
        .filter(|t| t.config_hash == prov.config_hash && t.seed == prov.seed)
        .unwrap_or_else(|| Timings { config_hash: prov.config_hash.clone(), seed: prov.seed, ..Timings::default() });
    t.stages_ms.insert(stage.into(), ms);
    if let Some(r) = rounds_ms {
        t.rounds_ms = r;
    }
    write_json(&path, &t)
}

fn write_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(
        &out.join("config.json"),
        &serde_json::json!({ "config_hash": cfg.config_hash(), "seed": cfg.seed, "config": cfg }),
    )
}

fn write_dataset(dir: &Path, cfg: &RunConfig, data: &Data) -> Result<()> {
    let prov = cfg.provenance();
    synth::export_dataset(dir, "source", &data.source.features, Some(&data.source.labels), &cfg.source, &prov)?;
    synth::export_dataset(
        dir,
        "target",
        &data.target.features,
        Some(data.target.oracle.ground_truth_for_evaluation()),
        &cfg.target,
        &prov,
    )
}

fn write_stage1_checkpoints(out: &Path, cfg: &RunConfig, model: &Model, gen: &GeneratorParams) -> Result<()> {
    let prov = cfg.provenance();
    Checkpoint::of_model(CheckpointKind::SourceModel, &prov, &cfg.model, model).write(&out.join(SOURCE_CKPT))?;
    Checkpoint::of_generator(&prov, &cfg.model, gen).write(&out.join(GENERATOR_CKPT))
}

fn write_adapt_artifacts(out: &Path, cfg: &RunConfig, outcome: &AdaptOutcome, summary: &AdaptSummary) -> Result<()> {
    let prov = cfg.provenance();
    Checkpoint::of_model(CheckpointKind::AdaptedModel, &prov, &cfg.model, &outcome.model)
        .write(&out.join(ADAPTED_CKPT))?;
    write_jsonl(&out.join("selection.jsonl"), &prov, &summary.selection.rounds)?;
    write_jsonl(&out.join("pseudo_events.jsonl"), &prov, &outcome.events)?;
    write_metrics_csv(&out.join("metrics.csv"), &prov, &outcome.epochs)?;
    write_json(&out.join(ADAPT_FILE), summary)
}

fn write_eval_artifacts(
    out: &Path,
    cfg: &RunConfig,
    model: &Model,
    target: &TargetDomain,
    report: &RunReport,
) -> Result<Vec<metrics::RocCurve>> {
    let prov = cfg.provenance();
    let truth = target.oracle.ground_truth_for_evaluation();
    let (_, curves) = metrics::evaluate(&model.probabilities(&target.features)?, truth)?;
    write_roc(out, &prov, &curves)?;
    source::export_features(
        &out.join("features_target_adapted.csv"),
        "target_adapted",
        &model.features(&target.features)?,
        Some(truth),
        &prov,
    )?;
    std::fs::write(out.join("report.json"), report.to_json()).map_err(|e| Error::io(out.join("report.json"), e))?;
    Ok(curves)
}

fn load_checkpoint(path: &Path, prov: &Provenance) -> Result<Checkpoint> {
    let ck = Checkpoint::read(path)?;
    ck.check_provenance(prov, path)?;
    Ok(ck)
}

// ---------------------------------------------------------------------------
// File-backed stages

/// Stage 1a: data export, source pretraining, source feature dump.
pub fn stage_pretrain_source(cfg: &RunConfig, out: &Path) -> Result<Stage1Summary> {
    cfg.validate()?;
    ensure_dir(out)?;
    let t0 = Instant::now();
    let prov = cfg.provenance();
    write_config(out, cfg)?;
    let data = make_data(cfg)?;
    write_dataset(&out.join("dataset"), cfg, &data)?;
    let (model, trace, summary) = pretrain(cfg, &data)?;
    Checkpoint::of_model(CheckpointKind::SourceModel, &prov, &cfg.model, &model).write(&out.join(SOURCE_CKPT))?;
    let feats = model.features(&data.source.features)?;
    source::export_features(&out.join("features_source.csv"), "source", &feats, Some(&data.source.labels), &prov)?;
    let file = Stage1File {
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        summary: summary.clone(),
        source_trace: trace.epoch_loss,
        generator_trace: None,
    };
    write_json(&out.join(STAGE1_FILE), &file)?;
    record_timing(out, &prov, "pretrain_source", t0.elapsed().as_millis(), None)?;
    Ok(summary)
}

/// Stage 1b: generator training against the frozen source classifier.
pub fn stage_train_generator(cfg: &RunConfig, out: &Path) -> Result<Stage1Summary> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prov = cfg.provenance();
    let model = load_checkpoint(&out.join(SOURCE_CKPT), &prov)?.to_model()?;
    let mut file: Stage1File = read_json(&out.join(STAGE1_FILE))?;
    let (gen, trace) = train_generator(cfg, &model, &mut file.summary)?;
    Checkpoint::of_generator(&prov, &cfg.model, &gen).write(&out.join(GENERATOR_CKPT))?;
    let k = cfg.model.classes;
    let labels: Vec<usize> = (0..GENERATED_PER_CLASS * k).map(|i| i % k).collect();
    let noise = gen.sample_noise(labels.len(), &mut rng::numbered(cfg.seed, 3));
    let feats = gen.generate_batch(&noise, &labels)?;
    source::export_features(&out.join("features_generated.csv"), "generated", &feats, Some(&labels), &prov)?;
    file.generator_trace = Some(trace.epoch_loss);
    write_json(&out.join(STAGE1_FILE), &file)?;
    record_timing(out, &prov, "train_generator", t0.elapsed().as_millis(), None)?;
    Ok(file.summary)
}

/// Stages 2 and 3 from the stage-1 checkpoints in `out`.
pub fn stage_adapt(cfg: &RunConfig, out: &Path) -> Result<AdaptSummary> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prov = cfg.provenance();
    let model = load_checkpoint(&out.join(SOURCE_CKPT), &prov)?.to_model()?;
    let gen = load_checkpoint(&out.join(GENERATOR_CKPT), &prov)?.to_generator()?;
    let data = make_data(cfg)?;
    let (outcome, summary) = adapt_run(cfg, &data.target, &model, &gen)?;
    write_adapt_artifacts(out, cfg, &outcome, &summary)?;
    let rounds = outcome.rounds.iter().map(|r| r.wall_ms).collect();
    record_timing(out, &prov, "adapt", t0.elapsed().as_millis(), Some(rounds))?;
    Ok(summary)
}

/// Scores the adapted checkpoint and writes the run report.
pub fn stage_evaluate(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let t0 = Instant::now();
    let prov = cfg.provenance();
    let model = load_checkpoint(&out.join(ADAPTED_CKPT), &prov)?.to_model()?;
    let stage1: Stage1File = read_json(&out.join(STAGE1_FILE))?;
    let summary: AdaptSummary = read_json(&out.join(ADAPT_FILE))?;
    for (name, hash, seed) in
        [(STAGE1_FILE, &stage1.config_hash, stage1.seed), (ADAPT_FILE, &summary.config_hash, summary.seed)]
    {
        if *hash != prov.config_hash || seed != prov.seed {
            return Err(Error::Format {
                path: out.join(name),
                reason: format!("written for config {hash} seed {seed}"),
            });
        }
    }
    let data = make_data(cfg)?;
    let truth = data.target.oracle.ground_truth_for_evaluation();
    let (final_eval, _) = metrics::evaluate(&model.probabilities(&data.target.features)?, truth)?;
    let report = build_report(cfg, &default_label(cfg), &stage1.summary, &summary, final_eval);
    write_eval_artifacts(out, cfg, &model, &data.target, &report)?;
    record_timing(out, &prov, "evaluate", t0.elapsed().as_millis(), None)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureData {
    Source,
    Target,
    /// Generator output, balanced over classes.
    Generated,
}

/// Dumps features of `data` under the checkpoint at `checkpoint` into
/// `out/features_<tag>.csv`.
pub fn stage_export_features(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data_sel: FeatureData,
    tag: &str,
) -> Result<PathBuf> {
    cfg.validate()?;
    ensure_dir(out)?;
    let prov = cfg.provenance();
    let ck = load_checkpoint(checkpoint, &prov)?;
    let path = out.join(format!("features_{tag}.csv"));
    match data_sel {
        FeatureData::Generated => {
            let gen = ck.to_generator()?;
            let k = gen.classes();
            let labels: Vec<usize> = (0..GENERATED_PER_CLASS * k).map(|i| i % k).collect();
            let noise = gen.sample_noise(labels.len(), &mut rng::numbered(cfg.seed, 3));
            source::export_features(&path, tag, &gen.generate_batch(&noise, &labels)?, Some(&labels), &prov)?;
        }
        FeatureData::Source | FeatureData::Target => {
            let model = ck.to_model()?;
            let data = make_data(cfg)?;
            let (x, labels): (&Tensor, &[usize]) = match data_sel {
                FeatureData::Source => (&data.source.features, &data.source.labels),
                _ => (&data.target.features, data.target.oracle.ground_truth_for_evaluation()),
            };
            source::export_features(&path, tag, &model.features(x)?, Some(labels), &prov)?;
        }
    }
    Ok(path)
}

#[derive(Serialize)]
struct FailureRecord<'a> {
    config_hash: &'a str,
    seed: u64,
    stage: &'a str,
    error: String,
}

/// All stages in order. An invalid config fails before anything is
/// written; a later failure leaves the partial artifacts plus
/// `failure.json`.
pub fn run_all(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    cfg.validate()?;
    ensure_dir(out)?;
    let t0 = Instant::now();
    let prov = cfg.provenance();
    let mut stage = "pretrain_source";
    let result = (|| {
        stage_pretrain_source(cfg, out)?;
        stage = "train_generator";
        stage_train_generator(cfg, out)?;
        stage = "adapt";
        stage_adapt(cfg, out)?;
        stage = "evaluate";
        stage_evaluate(cfg, out)
    })();
    match result {
        Ok(r) => {
            record_timing(out, &prov, "run_all", t0.elapsed().as_millis(), None)?;
            Ok(r)
        }
        Err(e) => {
            let rec = FailureRecord { config_hash: &prov.config_hash, seed: prov.seed, stage, error: e.to_string() };
            write_json(&out.join("failure.json"), &rec)?;
            Err(e)
        }
    }
}

// ---------------------------------------------------------------------------
// Comparison

/// Metrics compared across reports, with their accessors.
pub const COMPARED_METRICS: [(&str, fn(&Evaluation) -> Option<f64>); 5] = [
    ("accuracy", |e| Some(e.accuracy)),
    ("macro_f1", |e| Some(e.macro_f1)),
    ("kappa", |e| e.kappa),
    ("qwk", |e| e.qwk),
    ("macro_auc", |e| e.macro_auc),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub metric: String,
    /// Reports in which the metric was defined.
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; 0 for a single report.
    pub std: Option<f64>,
    /// Mean minus the first row's mean.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub classes: usize,
    pub dataset_hash: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    Some((mean, std))
}

/// Groups reports by label (in order of first appearance) and summarises
/// each metric over the group's seeds.
pub fn compare(reports: &[RunReport]) -> Result<Comparison> {
    let first = reports.first().ok_or_else(|| Error::invalid("nothing to compare"))?;
    for r in reports {
        if r.classes != first.classes {
            return Err(Error::invalid(format!(
                "report `{}` has {} classes, `{}` has {}",
                r.label, r.classes, first.label, first.classes
            )));
        }
        if r.dataset_hash != first.dataset_hash {
            return Err(Error::invalid(format!(
                "report `{}` was produced on a different dataset ({} vs {})",
                r.label, r.dataset_hash, first.dataset_hash
            )));
        }
    }
    let mut groups: Vec<(String, Vec<&RunReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.label.clone(), vec![r])),
        }
    }
    let mut rows: Vec<ComparisonRow> = groups
        .into_iter()
        .map(|(label, g)| ComparisonRow {
            label,
            seeds: g.iter().map(|r| r.seed).collect(),
            metrics: COMPARED_METRICS
                .iter()
                .map(|(name, get)| {
                    let xs: Vec<f64> = g.iter().filter_map(|r| get(&r.final_eval)).collect();
                    let ms = mean_std(&xs);
                    MetricStat {
                        metric: (*name).into(),
                        n: xs.len(),
                        mean: ms.map(|m| m.0),
                        std: ms.map(|m| m.1),
                        delta: None,
                    }
                })
                .collect(),
        })
        .collect();
    let base: Vec<Option<f64>> = rows[0].metrics.iter().map(|m| m.mean).collect();
    for row in &mut rows {
        for (m, b) in row.metrics.iter_mut().zip(&base) {
            m.delta = m.mean.zip(*b).map(|(x, y)| x - y);
        }
    }
    Ok(Comparison { classes: first.classes, dataset_hash: first.dataset_hash.clone(), rows })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,seeds");
        for (m, _) in COMPARED_METRICS {
            s.push_str(&format!(",{m}_mean,{m}_std,{m}_delta"));
        }
        s.push('\n');
        for r in &self.rows {
            let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
            s.push_str(&format!("{},{}", r.label, seeds.join(" ")));
            for m in &r.metrics {
                s.push_str(&format!(",{},{},{}", opt(m.mean), opt(m.std), opt(m.delta)));
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<width$}  {:>5}", "label", "seeds");
        for (m, _) in COMPARED_METRICS {
            s.push_str(&format!("  {m:>20}"));
        }
        s.push('\n');
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        for r in &self.rows {
            s.push_str(&format!("{:<width$}  {:>5}", r.label, r.seeds.len()));
            for m in &r.metrics {
                let cell = format!(
                    "{}±{} ({}{})",
                    pct(m.mean),
                    pct(m.std),
                    if m.delta.unwrap_or(0.0) < 0.0 { "" } else { "+" },
                    pct(m.delta)
                );
                s.push_str(&format!("  {cell:>20}"));
            }
            s.push('\n');
        }
        s.push_str("values in percent: mean±std over seeds (delta vs first row)\n");
        s
    }

    pub fn mean(&self, label: &str, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.label == label)?.metrics.iter().find(|m| m.metric == metric)?.mean
    }
}

// ---------------------------------------------------------------------------
// Ablation grid

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub ablation: Ablation,
    pub strategy: Strategy,
}

impl Variant {
    fn new(name: &str, keys: &[&str]) -> Self {
        let mut ablation = Ablation::ce_only();
        for k in keys {
            ablation.set(k, true).expect("known switch");
        }
        Self { name: name.into(), ablation, strategy: Strategy::Alrm }
    }
}

/// Component ablation: each row adds to the previous.
pub fn lpda_variants() -> Vec<Variant> {
    vec![
        Variant::new("ce", &[]),
        Variant::new("ce+alg", &["alignment"]),
        Variant::new("ce+alg+inter", &["alignment", "inter_consistency"]),
        Variant::new("ce+alg+intra", &["alignment", "intra_consistency"]),
        Variant::new("ce+alg+inter+intra", &["alignment", "inter_consistency", "intra_consistency"]),
        Variant::new("full", &["alignment", "inter_consistency", "intra_consistency", "spmis"]),
    ]
}

/// The full method with random instead of ALRM selection.
pub fn random_selection_variant() -> Variant {
    Variant {
        strategy: Strategy::Random,
        name: "full/random".into(),
        ..Variant::new("", &["alignment", "inter_consistency", "intra_consistency", "spmis"])
    }
}

/// The full method accepting pseudo labels on the confidence gate alone.
pub fn threshold_only_variant() -> Variant {
    Variant::new("threshold-only", &["alignment", "inter_consistency", "intra_consistency", "mixup", "add_pl"])
}

/// Pseudo-label ablation on top of all LPDA terms.
pub fn spmis_variants() -> Vec<Variant> {
    let base = ["alignment", "inter_consistency", "intra_consistency"];
    let with = |name: &str, extra: &[&str]| {
        let keys: Vec<&str> = base.iter().chain(extra).copied().collect();
        Variant::new(name, &keys)
    };
    vec![
        with("spmis:none", &[]),
        with("spmis:mixup", &["mixup"]),
        with("spmis:mixup+add", &["mixup", "add_pl"]),
        with("spmis:mixup+add+mis", &["mixup", "add_pl", "mis_pl"]),
        with("spmis:mixup+add+mis+rev", &["mixup", "add_pl", "mis_pl", "rev_pl"]),
        with("spmis:add+mis+rev", &["add_pl", "mis_pl", "rev_pl"]),
    ]
}

pub fn variant_config(base: &RunConfig, v: &Variant, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.ablation = v.ablation;
    cfg.active.strategy = v.strategy;
    cfg
}

#[derive(Debug, Clone)]
pub struct GridRun {
    pub variant: String,
    pub seed: u64,
    pub report: RunReport,
    /// Correctness of each distinct accepted pseudo label, in acceptance
    /// order.
    pub accepted_correct: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub runs: Vec<GridRun>,
    pub wall_secs: f64,
}

impl GridOutcome {
    pub fn reports(&self) -> Vec<RunReport> {
        self.runs.iter().map(|r| r.report.clone()).collect()
    }

    pub fn run(&self, variant: &str, seed: u64) -> Option<&GridRun> {
        self.runs.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    /// Mean final accuracy of a variant over its seeds.
    pub fn mean_accuracy(&self, variant: &str) -> Option<f64> {
        let xs: Vec<f64> =
            self.runs.iter().filter(|r| r.variant == variant).map(|r| r.report.final_eval.accuracy).collect();
        mean_std(&xs).map(|m| m.0)
    }
}

/// Precision of the first `m` accepted labels of two runs, where `m` is
/// the smaller acceptance count. `None` when either run accepted nothing.
pub fn matched_precision(a: &[bool], b: &[bool]) -> Option<(usize, f64, f64)> {
    let m = a.len().min(b.len());
    if m == 0 {
        return None;
    }
    let p = |v: &[bool]| v[..m].iter().filter(|&&c| c).count() as f64 / m as f64;
    Some((m, p(a), p(b)))
}

/// Runs every variant on every seed. Stage 1 is trained once per seed and
/// shared, since it does not depend on the adaptation switches. With
/// `out`, each run's artifacts go to `out/<variant>/seed_<seed>/` and the
/// stage-1 artifacts to `out/stage1/seed_<seed>/`.
pub fn run_grid(
    base: &RunConfig,
    seeds: &[u64],
    variants: &[Variant],
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<GridOutcome> {
    base.validate()?;
    let t0 = Instant::now();
    let mut runs = Vec::new();
    for &seed in seeds {
        let seed_cfg = RunConfig { seed, ..base.clone() };
        let data = make_data(&seed_cfg)?;
        let (model, _, mut summary) = pretrain(&seed_cfg, &data)?;
        let (gen, _) = train_generator(&seed_cfg, &model, &mut summary)?;
        if let Some(out) = out {
            let dir = out.join("stage1").join(format!("seed_{seed}"));
            ensure_dir(&dir)?;
            write_config(&dir, &seed_cfg)?;
            write_stage1_checkpoints(&dir, &seed_cfg, &model, &gen)?;
        }
        progress(&format!("seed {seed}: stage 1 done ({:.0}s)", t0.elapsed().as_secs_f64()));
        let truth = data.target.oracle.ground_truth_for_evaluation();
        for v in variants {
            let cfg = variant_config(base, v, seed);
            cfg.validate()?;
            let (outcome, adapt_summary) = adapt_run(&cfg, &data.target, &model, &gen)?;
            let report = build_report(&cfg, &v.name, &summary, &adapt_summary, outcome.final_eval.clone());
            if let Some(out) = out {
                let dir = out.join(&v.name).join(format!("seed_{seed}"));
                ensure_dir(&dir)?;
                write_config(&dir, &cfg)?;
                write_adapt_artifacts(&dir, &cfg, &outcome, &adapt_summary)?;
                write_eval_artifacts(&dir, &cfg, &outcome.model, &data.target, &report)?;
            }
            let accepted_correct =
                first_events(&outcome.events, EventKind::Add).iter().map(|&(id, l)| truth[id] == l).collect();
            progress(&format!(
                "seed {seed}: {:<28} acc {:.4} ({:.0}s)",
                v.name,
                report.final_eval.accuracy,
                t0.elapsed().as_secs_f64()
            ));
            runs.push(GridRun { variant: v.name.clone(), seed, report, accepted_correct });
        }
    }
    let outcome = GridOutcome { runs, wall_secs: t0.elapsed().as_secs_f64() };
    if let Some(out) = out {
        let cmp = compare(&outcome.reports())?;
        std::fs::write(out.join("grid.csv"), format!("{}\n{}", base.provenance().comment_line(), cmp.to_csv()))
            .map_err(|e| Error::io(out, e))?;
        std::fs::write(out.join("grid.txt"), cmp.to_text()).map_err(|e| Error::io(out, e))?;
    }
    Ok(outcome)
}

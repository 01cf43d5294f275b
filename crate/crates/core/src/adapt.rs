//! Stage 3: memory banks, the pseudo-label state machine and the adaptation
//! loop that alternates with active selection.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::active::{self, DatasetPartition, KernelSpec, RoundRecord, Strategy};
use crate::diffmath::{argmax, cosine, normalize_rows, Bindings, Graph, Tensor};
use crate::losses::{
    cross_entropy_logits, inter_consistency_batch, intra_consistency_batch, mix_with, mixup_partners,
    prototype_contrastive_batch, sample_beta, total_loss_node, transport_soft_labels_with, LossTerms, LossWeights,
    TransportConfig,
};
use crate::metrics::{self, Evaluation, RocCurve};
use crate::nets::{adadelta_step, AdadeltaConfig, AdadeltaState, GeneratorParams, Model, Parameters};
use crate::rng::{self, Rng, Stream};
use crate::synth::TargetDomain;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Banks

/// EMA-smoothed class prototypes of generated source features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    /// `[K, d]`
    pub prototypes: Tensor,
    pub beta: f64,
}

impl PrototypeBank {
    pub fn new(prototypes: Tensor, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config { key: "lpda.proto_ema".into(), reason: "must lie in [0, 1]".into() });
        }
        if !prototypes.all_finite() {
            return Err(Error::invalid("non-finite prototype"));
        }
        Ok(Self { prototypes, beta })
    }

    /// `h_i <- beta h_i + (1 - beta) o_i` for every class with a batch mean.
    /// Returns the classes left unchanged.
    pub fn update(&mut self, class_means: &[Option<Vec<f64>>]) -> Vec<usize> {
        let mut missing = Vec::new();
        for (i, o) in class_means.iter().enumerate() {
            match o {
                Some(o) => {
                    for (h, &ov) in self.prototypes.row_mut(i).iter_mut().zip(o) {
                        *h = self.beta * *h + (1.0 - self.beta) * ov;
                    }
                }
                None => missing.push(i),
            }
        }
        missing
    }
}

/// Per-class means of a generated batch; `None` for classes not drawn.
pub fn class_means(features: &Tensor, labels: &[usize], classes: usize) -> Vec<Option<Vec<f64>>> {
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &l) in features.iter_rows().zip(labels) {
        sums[l].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        counts[l] += 1;
    }
    sums.into_iter().zip(counts).map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| v / c as f64).collect())).collect()
}

/// One local-representation vector per target sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    /// `[n, d]`
    pub entries: Tensor,
    pub ema: f64,
}

impl FeatureBank {
    pub fn new(entries: Tensor, ema: f64) -> Self {
        Self { entries, ema }
    }

    pub fn update(&mut self, id: usize, lr: &[f64]) {
        let a = self.ema;
        for (w, &v) in self.entries.row_mut(id).iter_mut().zip(lr) {
            *w = a * *w + (1.0 - a) * v;
        }
    }
}

/// The `k_top` eligible ids least cosine-similar to `query`, most
/// dissimilar first; ties go to the lower id.
pub fn candidates(
    query: &[f64],
    bank: &FeatureBank,
    eligible: impl Iterator<Item = usize>,
    k_top: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = eligible.map(|id| (cosine(query, bank.entries.row(id)), id)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k_top).map(|(_, id)| id).collect()
}

// ---------------------------------------------------------------------------
// Pseudo-label state machine

/// Origin of a label in the training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Oracle,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoSwitches {
    /// Accept pseudo labels at all.
    pub add_pl: bool,
    /// Require the mixed-sample check before accepting and re-check
    /// accepted labels.
    pub mis_pl: bool,
    /// Revoke pseudo labels that fail the re-check.
    pub rev_pl: bool,
}

impl Default for PseudoSwitches {
    fn default() -> Self {
        Self { add_pl: true, mis_pl: true, rev_pl: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoConfig {
    pub phi_a: f64,
    pub phi_b: f64,
    pub k_top: usize,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        Self { phi_a: 0.95, phi_b: 0.80, k_top: 5 }
    }
}

/// Training pool `S` and the pending additions / revocations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoState {
    /// Every labelled id in the pool with its label and origin.
    pub pool: BTreeMap<usize, (usize, LabelSource)>,
    pub d_add: BTreeMap<usize, usize>,
    pub d_rev: BTreeSet<usize>,
}

impl PseudoState {
    pub fn oracle_count(&self) -> usize {
        self.pool.values().filter(|(_, s)| *s == LabelSource::Oracle).count()
    }

    pub fn pseudo_count(&self) -> usize {
        self.pool.values().filter(|(_, s)| *s == LabelSource::Pseudo).count()
    }

    pub fn is_pseudo(&self, id: usize) -> bool {
        matches!(self.pool.get(&id), Some((_, LabelSource::Pseudo)))
    }

    pub fn add_oracle(&mut self, id: usize, label: usize) {
        self.pool.insert(id, (label, LabelSource::Oracle));
    }

    /// Oracle-labelled ids carrying `label`, ascending.
    pub fn oracle_with_label(&self, label: usize) -> Vec<usize> {
        self.pool.iter().filter(|(_, &(l, s))| l == label && s == LabelSource::Oracle).map(|(&id, _)| id).collect()
    }

    /// `S <- S \ D_rev ∪ D_add`, then clears both sets. Fails if an oracle
    /// label would be revoked or the sets overlap.
    pub fn reconcile(&mut self) -> Result<(Vec<usize>, Vec<usize>)> {
        if let Some(id) = self.d_add.keys().find(|id| self.d_rev.contains(id)) {
            return Err(Error::invalid(format!("id {id} is both added and revoked")));
        }
        if let Some(id) = self.d_rev.iter().find(|&&id| !self.is_pseudo(id)) {
            return Err(Error::invalid(format!("attempt to revoke non-pseudo label of id {id}")));
        }
        let revoked: Vec<usize> = std::mem::take(&mut self.d_rev).into_iter().collect();
        for id in &revoked {
            self.pool.remove(id);
        }
        let added: Vec<usize> = self.d_add.keys().copied().collect();
        for (id, l) in std::mem::take(&mut self.d_add) {
            self.pool.entry(id).or_insert((l, LabelSource::Pseudo));
        }
        Ok((added, revoked))
    }
}

/// What the state machine needs from the current model. Blends are formed
/// on whatever `sample` returns (raw inputs or encoder features).
pub trait Predictor {
    fn sample(&mut self, id: usize) -> Result<Vec<f64>>;
    /// Class probabilities for a vector in the same space as `sample`.
    fn probs(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Class marginal used when transporting weak-view features to prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassMarginal {
    Uniform,
    /// Add-one smoothed label histogram of the oracle-labelled samples.
    #[default]
    Labeled,
}

impl ClassMarginal {
    pub fn weights(&self, state: &PseudoState, classes: usize) -> Vec<f64> {
        match self {
            Self::Uniform => vec![1.0 / classes as f64; classes],
            Self::Labeled => {
                let mut c = vec![1.0; classes];
                for (l, src) in state.pool.values() {
                    if *src == LabelSource::Oracle {
                        c[*l] += 1.0;
                    }
                }
                let t: f64 = c.iter().sum();
                c.into_iter().map(|v| v / t).collect()
            }
        }
    }
}

/// Space in which the 0.5/0.5 verification blends are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixSpace {
    /// Raw target vectors, passed through the encoder afterwards.
    #[default]
    Input,
    /// Encoder outputs, passed straight to the classifier.
    Feature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Candidate passed the first confidence gate.
    Gate,
    /// Accepted into D_add.
    Add,
    /// Candidate passed the gate but failed the mixed-sample check.
    Reject,
    /// Accepted label failed its re-check and was put in D_rev.
    Revise,
    /// Gate passed but no oracle sample carries the pseudo label.
    NoPartner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEvent {
    pub epoch: usize,
    pub iteration: usize,
    pub kind: EventKind,
    pub id: usize,
    pub label: usize,
    pub confidence: f64,
    pub mix_confidence: Option<f64>,
    pub partner: Option<usize>,
}

/// Counters for the invariants checked on every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InvariantReport {
    pub steps_checked: usize,
    pub reconciliations: usize,
    pub blend_checks: usize,
    pub violations: usize,
}

/// Everything a single step reads besides the predictor.
pub struct StepContext<'a> {
    pub bank: &'a FeatureBank,
    pub cfg: &'a PseudoConfig,
    pub switches: PseudoSwitches,
    pub epoch: usize,
    pub iteration: usize,
    pub target_size: usize,
}

/// `0.5 a + 0.5 b`.
pub fn blend(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * x + 0.5 * y).collect()
}

fn blend_is_exact(xs: &[f64], a: &[f64], b: &[f64]) -> bool {
    xs.iter().zip(a.iter().zip(b)).all(|(s, (x, y))| s.to_bits() == (0.5 * x + 0.5 * y).to_bits())
}

/// One pass of the state machine for labelled pool member `x_tl`.
pub fn spmis_step(
    predictor: &mut dyn Predictor,
    x_tl: usize,
    state: &mut PseudoState,
    ctx: &StepContext<'_>,
    rng: &mut Rng,
    events: &mut Vec<PseudoEvent>,
    inv: &mut InvariantReport,
) -> Result<()> {
    let Some(&(y_tl, _)) = state.pool.get(&x_tl) else {
        return Err(Error::invalid(format!("x_tl {x_tl} is not in the training pool")));
    };
    let sw = ctx.switches;
    if !sw.add_pl {
        return Ok(());
    }
    let ev = |kind, id, label, confidence, mix_confidence, partner| PseudoEvent {
        epoch: ctx.epoch,
        iteration: ctx.iteration,
        kind,
        id,
        label,
        confidence,
        mix_confidence,
        partner,
    };

    // Re-check of an accepted pseudo label.
    if state.is_pseudo(x_tl) && sw.mis_pl && sw.rev_pl && !state.d_rev.contains(&x_tl) {
        let partners = state.oracle_with_label(y_tl);
        if !partners.is_empty() {
            let partner = partners[rng.random_range(0..partners.len())];
            let (a, b) = (predictor.sample(x_tl)?, predictor.sample(partner)?);
            let xs = blend(&a, &b);
            inv.blend_checks += 1;
            if !blend_is_exact(&xs, &a, &b) {
                inv.violations += 1;
            }
            let ps = predictor.probs(&xs)?;
            let ys = argmax(&ps);
            if ys != y_tl {
                state.d_rev.insert(x_tl);
                let conf = predictor.probs(&a)?;
                events.push(ev(EventKind::Revise, x_tl, y_tl, conf[y_tl], Some(ps[ys]), Some(partner)));
            }
        }
    }

    // Candidate search and acceptance.
    let query = ctx.bank.entries.row(x_tl).to_vec();
    let eligible = (0..ctx.target_size).filter(|id| !state.pool.contains_key(id) && !state.d_add.contains_key(id));
    let cands = candidates(&query, ctx.bank, eligible, ctx.cfg.k_top);
    if cands.is_empty() {
        inv.steps_checked += 1;
        return Ok(());
    }
    let x_r = cands[rng.random_range(0..cands.len())];
    let h_r = predictor.sample(x_r)?;
    let p_r = predictor.probs(&h_r)?;
    let y_r = argmax(&p_r);
    if p_r[y_r] >= ctx.cfg.phi_a {
        events.push(ev(EventKind::Gate, x_r, y_r, p_r[y_r], None, None));
        if !sw.mis_pl {
            state.d_add.insert(x_r, y_r);
            events.push(ev(EventKind::Add, x_r, y_r, p_r[y_r], None, None));
        } else {
            let partners = state.oracle_with_label(y_r);
            if partners.is_empty() {
                events.push(ev(EventKind::NoPartner, x_r, y_r, p_r[y_r], None, None));
            } else {
                let partner = partners[rng.random_range(0..partners.len())];
                let h_p = predictor.sample(partner)?;
                let xs = blend(&h_r, &h_p);
                inv.blend_checks += 1;
                if !blend_is_exact(&xs, &h_r, &h_p) {
                    inv.violations += 1;
                }
                let ps = predictor.probs(&xs)?;
                let ys = argmax(&ps);
                if ps[ys] > ctx.cfg.phi_b && ys == y_r {
                    state.d_add.insert(x_r, y_r);
                    events.push(ev(EventKind::Add, x_r, y_r, p_r[y_r], Some(ps[ys]), Some(partner)));
                } else {
                    events.push(ev(EventKind::Reject, x_r, y_r, p_r[y_r], Some(ps[ys]), Some(partner)));
                }
            }
        }
    }
    inv.steps_checked += 1;
    if state.d_add.keys().any(|id| state.d_rev.contains(id)) || state.d_rev.iter().any(|&id| !state.is_pseudo(id)) {
        inv.violations += 1;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub sigma_weak: f64,
    pub sigma_strong: f64,
    pub drop_strong: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { sigma_weak: 0.05, sigma_strong: 0.2, drop_strong: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Weak: Gaussian noise. Strong: larger noise, then each coordinate zeroed
/// with probability `drop_strong`.
pub fn augment(x: &[f64], strength: Strength, cfg: &AugmentConfig, rng: &mut Rng) -> Vec<f64> {
    let sigma = match strength {
        Strength::Weak => cfg.sigma_weak,
        Strength::Strong => cfg.sigma_strong,
    };
    x.iter()
        .map(|&v| {
            let noisy = v + sigma * rng.sample::<f64, _>(StandardNormal);
            if strength == Strength::Strong && rng.random::<f64>() < cfg.drop_strong {
                0.0
            } else {
                noisy
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Configuration

/// Independent switches for every adaptation component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub alignment: bool,
    pub inter_consistency: bool,
    pub intra_consistency: bool,
    pub mixup: bool,
    pub add_pl: bool,
    pub mis_pl: bool,
    pub rev_pl: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::full()
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self {
            alignment: true,
            inter_consistency: true,
            intra_consistency: true,
            mixup: true,
            add_pl: true,
            mis_pl: true,
            rev_pl: true,
        }
    }

    /// Supervised cross-entropy on the selected samples only.
    pub fn ce_only() -> Self {
        Self {
            alignment: false,
            inter_consistency: false,
            intra_consistency: false,
            mixup: false,
            add_pl: false,
            mis_pl: false,
            rev_pl: false,
        }
    }

    pub fn switches(&self) -> PseudoSwitches {
        PseudoSwitches { add_pl: self.add_pl, mis_pl: self.mis_pl, rev_pl: self.rev_pl }
    }

    /// Applies `key=value`; `spmis` toggles mixup and all three PL switches.
    pub fn set(&mut self, key: &str, value: bool) -> Result<()> {
        match key {
            "alignment" => self.alignment = value,
            "inter_consistency" => self.inter_consistency = value,
            "intra_consistency" => self.intra_consistency = value,
            "mixup" => self.mixup = value,
            "add_pl" => self.add_pl = value,
            "mis_pl" => self.mis_pl = value,
            "rev_pl" => self.rev_pl = value,
            "spmis" => {
                self.mixup = value;
                self.add_pl = value;
                self.mis_pl = value;
                self.rev_pl = value;
            }
            other => return Err(Error::Config { key: format!("ablate.{other}"), reason: "unknown switch".into() }),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    /// Fraction of the target set labelled over all rounds.
    pub budget_fraction: f64,
    pub rounds: usize,
    pub k_nn: usize,
    pub kernel: KernelSpec,
    pub strategy: Strategy,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self { budget_fraction: 0.05, rounds: 5, k_nn: 8, kernel: KernelSpec::default(), strategy: Strategy::Alrm }
    }
}

impl ActiveConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("active.{key}"), reason: reason.into() });
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return bad("budget_fraction", "must lie in (0, 1]");
        }
        if self.rounds == 0 {
            return bad("rounds", "need at least one round");
        }
        if self.k_nn == 0 {
            return bad("k_nn", "must be at least 1");
        }
        self.kernel.validate()
    }

    pub fn total_budget(&self, n: usize) -> usize {
        (self.budget_fraction * n as f64).round() as usize
    }

    pub fn round_budget(&self, n: usize) -> usize {
        self.total_budget(n) / self.rounds
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpdaConfig {
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub weights: LossWeights,
    /// Temperature of the prototype contrastive term.
    pub tau_alignment: f64,
    pub transport: TransportConfig,
    pub class_marginal: ClassMarginal,
    pub proto_ema: f64,
    pub bank_ema: f64,
    /// Generated features per class for each prototype refresh.
    pub proto_samples_per_class: usize,
    pub pseudo: PseudoConfig,
    /// Epoch at which pseudo labelling starts; `None` means one epoch after
    /// the last active round.
    pub pseudo_start: Option<usize>,
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    pub augment: AugmentConfig,
    pub optimizer: AdadeltaConfig,
    /// Also update the classifier; by default only the encoder moves.
    pub train_classifier: bool,
    pub mix_space: MixSpace,
    /// Rebuild the pool from oracle labels alone at every epoch start,
    /// dropping accepted pseudo labels.
    pub reset_pool_each_epoch: bool,
}

impl Default for LpdaConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_labeled: 32,
            batch_unlabeled: 32,
            weights: LossWeights { w_mix: 0.1, ..LossWeights::default() },
            tau_alignment: 0.1,
            transport: TransportConfig::default(),
            class_marginal: ClassMarginal::Labeled,
            proto_ema: 0.99,
            bank_ema: 0.9,
            proto_samples_per_class: 8,
            pseudo: PseudoConfig::default(),
            pseudo_start: None,
            mixup_alpha: 0.75,
            mixup_beta: 0.75,
            augment: AugmentConfig::default(),
            optimizer: AdadeltaConfig::default(),
            train_classifier: false,
            mix_space: MixSpace::Input,
            reset_pool_each_epoch: true,
        }
    }
}

impl LpdaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("lpda.{key}"), reason: reason.into() });
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch_labeled", "batch sizes must be positive");
        }
        if !(self.tau_alignment > 0.0) {
            return bad("tau_alignment", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.proto_ema) || !(0.0..=1.0).contains(&self.bank_ema) {
            return bad("proto_ema", "EMA rates must lie in [0, 1]");
        }
        if self.proto_samples_per_class == 0 {
            return bad("proto_samples_per_class", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.pseudo.phi_a) || !(0.0..=1.0).contains(&self.pseudo.phi_b) {
            return bad("pseudo.phi_a", "thresholds must lie in [0, 1]");
        }
        if self.pseudo.k_top == 0 {
            return bad("pseudo.k_top", "must be at least 1");
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_beta > 0.0) {
            return bad("mixup_alpha", "Beta parameters must be positive");
        }
        if !(self.transport.sinkhorn.eps > 0.0) || self.transport.sinkhorn.max_iters == 0 {
            return bad("transport", "eps must be positive and max_iters at least 1");
        }
        self.weights.validate()
    }

    pub fn pseudo_start_epoch(&self, rounds: usize) -> usize {
        self.pseudo_start.unwrap_or(rounds + 1)
    }
}

// ---------------------------------------------------------------------------
// Adaptation loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: Option<f64>,
    pub qwk: Option<f64>,
    pub macro_auc: Option<f64>,
    /// Mean loss terms over the epoch's iterations.
    pub losses: LossTerms,
    pub total_loss: f64,
    pub oracle_labeled: usize,
    pub pseudo_labeled: usize,
    /// Fraction of currently accepted pseudo labels that are correct.
    pub pseudo_precision: Option<f64>,
    pub sinkhorn_not_converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedRound {
    #[serde(flatten)]
    pub record: RoundRecord,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    /// Distinct ids ever accepted.
    pub accepted: usize,
    /// Precision of each distinct id's first accepted label.
    pub accepted_precision: Option<f64>,
    /// Distinct ids that passed the confidence gate.
    pub gated: usize,
    pub gated_precision: Option<f64>,
    /// Pseudo labels in the pool at the end.
    pub final_count: usize,
    pub final_precision: Option<f64>,
    pub revoked: usize,
}

/// Each distinct id's first `kind` event as `(id, label)`, in log order.
pub fn first_events(events: &[PseudoEvent], kind: EventKind) -> Vec<(usize, usize)> {
    let mut seen = BTreeSet::new();
    events.iter().filter(|e| e.kind == kind && seen.insert(e.id)).map(|e| (e.id, e.label)).collect()
}

/// Fraction of `(id, label)` pairs whose label matches `truth`.
pub fn label_precision(pairs: &[(usize, usize)], truth: &[usize]) -> Option<f64> {
    precision(pairs.iter().copied(), truth)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: Model,
    pub epochs: Vec<EpochMetrics>,
    pub rounds: Vec<TimedRound>,
    pub events: Vec<PseudoEvent>,
    pub invariants: InvariantReport,
    pub pseudo: PseudoSummary,
    pub final_eval: Evaluation,
    pub roc_curves: Vec<RocCurve>,
    pub final_probs: Tensor,
    pub final_lrs: Tensor,
    pub state: PseudoState,
}

/// Features and probabilities of the whole target set under a model.
struct TargetCache {
    features: Tensor,
    probs: Tensor,
}

impl TargetCache {
    fn compute(model: &Model, x: &Tensor) -> Result<Self> {
        let features = model.features(x)?;
        let probs = model.classifier.classify(&features)?;
        Ok(Self { features, probs })
    }
}

/// Current model over the target set, in the configured mixing space.
struct LivePredictor<'a> {
    model: &'a Model,
    x: &'a Tensor,
    space: MixSpace,
    memo: BTreeMap<usize, Vec<f64>>,
}

impl Predictor for LivePredictor<'_> {
    fn sample(&mut self, id: usize) -> Result<Vec<f64>> {
        let row = self.x.row(id);
        match self.space {
            MixSpace::Input => Ok(row.to_vec()),
            MixSpace::Feature => {
                if let Some(h) = self.memo.get(&id) {
                    return Ok(h.clone());
                }
                let h = self.model.encoder.encode(&Tensor::vector(row.to_vec()))?.into_data();
                self.memo.insert(id, h.clone());
                Ok(h)
            }
        }
    }

    fn probs(&self, v: &[f64]) -> Result<Vec<f64>> {
        let v = Tensor::vector(v.to_vec());
        let h = match self.space {
            MixSpace::Input => self.model.encoder.encode(&v)?,
            MixSpace::Feature => v,
        };
        Ok(self.model.classifier.classify(&h)?.into_data())
    }
}

/// LR of each id in `ids` against the full cached feature set.
fn batch_lrs(cache: &TargetCache, w: &Tensor, ids: &[usize], k_nn: usize) -> Vec<Vec<f64>> {
    let unit = normalize_rows(&cache.features);
    let n = unit.rows();
    let k = k_nn.min(n);
    ids.iter()
        .map(|&i| {
            let ui = unit.row(i);
            let mut sims: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (crate::diffmath::dot(ui, unit.row(j)), j)).collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut nb = vec![i];
            nb.extend(sims.iter().take(k - 1).map(|&(_, j)| j));
            let d = cache.features.cols();
            let mut v = vec![0.0; d];
            for &j in &nb {
                let h = cache.features.row(j);
                let p = cache.probs.row(j);
                let mut proto = vec![0.0; d];
                for (c, &pc) in p.iter().enumerate() {
                    proto.iter_mut().zip(w.row(c)).for_each(|(a, &wv)| *a += pc * wv);
                }
                v.iter_mut().zip(h.iter().zip(&proto)).for_each(|(a, (hv, pw))| *a += hv * pw + hv);
            }
            v.iter_mut().for_each(|a| *a /= nb.len() as f64);
            v
        })
        .collect()
}

fn generated_means(gen: &GeneratorParams, per_class: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    let k = gen.classes();
    let labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    let noise = gen.sample_noise(labels.len(), rng);
    Ok((gen.generate_batch(&noise, &labels)?, labels))
}

fn precision(ids: impl Iterator<Item = (usize, usize)>, truth: &[usize]) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for (id, l) in ids {
        n += 1;
        ok += usize::from(truth[id] == l);
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// Runs active rounds and adaptation epochs on the target domain.
///
/// `source` is the pretrained model. The generator stays fixed.
pub fn adapt(
    source: &Model,
    generator: &GeneratorParams,
    target: &mut TargetDomain,
    active_cfg: &ActiveConfig,
    cfg: &LpdaConfig,
    ablation: &Ablation,
    seed: u64,
) -> Result<AdaptOutcome> {
    active_cfg.validate()?;
    cfg.validate()?;
    let n = target.len();
    let k = target.classes;
    let x = target.features.clone();
    let truth = target.oracle.ground_truth_for_evaluation().to_vec();
    let round_budget = active_cfg.round_budget(n);
    if round_budget == 0 {
        return Err(Error::Config {
            key: "active.budget_fraction".into(),
            reason: "per-round budget rounds to zero".into(),
        });
    }
    if active_cfg.k_nn > n {
        return Err(Error::Config { key: "active.k_nn".into(), reason: format!("exceeds target size {n}") });
    }

    let mut model = source.clone();
    if cfg.train_classifier {
        model.classifier.unfreeze();
    } else {
        model.classifier.freeze();
    }
    let mut opt = AdadeltaState::new(cfg.optimizer);
    let mut select_rng = rng::stream(seed, Stream::Select);
    let mut order_rng = rng::stream(seed, Stream::Adapt);
    let mut aug_rng = rng::stream(seed, Stream::Augment);
    let mut spmis_rng = rng::stream(seed, Stream::Spmis);
    let mut mix_rng = rng::numbered(seed, 10);
    let mut proto_rng = rng::numbered(seed, 11);

    let (g0, l0) = generated_means(generator, cfg.proto_samples_per_class, &mut proto_rng)?;
    let init: Vec<Vec<f64>> = class_means(&g0, &l0, k).into_iter().map(|m| m.expect("every class generated")).collect();
    let mut protos = PrototypeBank::new(Tensor::from_rows(&init), cfg.proto_ema)?;

    let mut partition = DatasetPartition::new(n);
    let mut state = PseudoState::default();
    let mut cache = TargetCache::compute(&model, &x)?;
    let lrs0 = active::local_representations(&cache.features, &cache.probs, &model.classifier.weight, active_cfg.k_nn)?;
    let mut bank =
        FeatureBank::new(Tensor::from_rows(&lrs0.iter().map(|l| l.vector.clone()).collect::<Vec<_>>()), cfg.bank_ema);

    let pseudo_start = cfg.pseudo_start_epoch(active_cfg.rounds);
    let switches = ablation.switches();
    let mut rounds = Vec::new();
    let mut events = Vec::new();
    let mut inv = InvariantReport::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut ever_revoked = 0usize;

    for epoch in 0..cfg.epochs {
        cache = TargetCache::compute(&model, &x)?;
        if epoch < active_cfg.rounds {
            let t0 = Instant::now();
            let lrs = active::local_representations(
                &cache.features,
                &cache.probs,
                &model.classifier.weight,
                active_cfg.k_nn,
            )?;
            let record = active::run_round(
                &mut partition,
                &lrs,
                epoch,
                round_budget,
                active_cfg.strategy,
                &active_cfg.kernel,
                &mut target.oracle,
                &mut select_rng,
            )?;
            for &id in &record.selected {
                // An id pseudo-labelled earlier becomes oracle-labelled.
                state.d_add.remove(&id);
                state.d_rev.remove(&id);
                state.add_oracle(id, partition.oracle_labeled[&id]);
            }
            rounds.push(TimedRound { record, wall_ms: t0.elapsed().as_millis() });
        }
        if state.pool.is_empty() {
            return Err(Error::invalid("no labelled target samples at the first supervised step"));
        }
        let pseudo_on = switches.add_pl && epoch >= pseudo_start;
        state.d_add.clear();
        state.d_rev.clear();
        if cfg.reset_pool_each_epoch {
            state.pool.retain(|_, (_, src)| *src == LabelSource::Oracle);
        }

        let mut unl: Vec<usize> = partition.unlabeled.iter().copied().collect();
        unl.shuffle(&mut order_rng);
        let iterations = unl.len().div_ceil(cfg.batch_unlabeled).max(1);
        let mut s_order: Vec<usize> = state.pool.keys().copied().collect();
        s_order.shuffle(&mut order_rng);
        let mut s_pos = 0;
        let mut sums = LossTerms::default();
        let mut total_sum = 0.0;
        let mut not_converged = 0;

        for it in 0..iterations {
            let (gb, gl) = generated_means(generator, cfg.proto_samples_per_class, &mut proto_rng)?;
            protos.update(&class_means(&gb, &gl, k));

            if s_pos >= s_order.len() {
                if pseudo_on {
                    inv.reconciliations += 1;
                    let (_, revoked) = state.reconcile()?;
                    ever_revoked += revoked.len();
                    if state.pool.len() != state.oracle_count() + state.pseudo_count() {
                        inv.violations += 1;
                    }
                }
                s_order = state.pool.keys().copied().collect();
                s_order.shuffle(&mut order_rng);
                s_pos = 0;
            }
            let lab_ids: Vec<usize> = s_order[s_pos..(s_pos + cfg.batch_labeled).min(s_order.len())].to_vec();
            s_pos += lab_ids.len();
            let lab_y: Vec<usize> = lab_ids.iter().map(|id| state.pool[id].0).collect();
            let u_ids: Vec<usize> = if unl.is_empty() {
                Vec::new()
            } else {
                unl[(it * cfg.batch_unlabeled).min(unl.len())..((it + 1) * cfg.batch_unlabeled).min(unl.len())].to_vec()
            };

            // Build the objective.
            let mut g = Graph::new();
            let mut b = Bindings::new();
            model.bind(&mut b);
            let xl = g.input("x_l");
            b.insert("x_l".into(), x.select_rows(&lab_ids));
            let hl = model.encoder.build(&mut g, xl, true);
            let logits_l = model.classifier.build_logits(&mut g, hl, true);
            let ce = cross_entropy_logits(&mut g, logits_l, Tensor::one_hot(&lab_y, k));
            let mut terms: Vec<(Option<crate::diffmath::NodeId>, f64)> = Vec::new();
            let mut names: Vec<&str> = Vec::new();

            if ablation.alignment {
                let a = prototype_contrastive_batch(&mut g, hl, &protos.prototypes, &lab_y, cfg.tau_alignment);
                terms.push((Some(a), cfg.weights.w_alg));
                names.push("alignment");
            }
            if ablation.mixup && lab_ids.len() >= 2 {
                let partners = mixup_partners(lab_ids.len(), &mut mix_rng);
                let mut xm = Vec::with_capacity(lab_ids.len());
                let mut ym = Vec::with_capacity(lab_ids.len());
                for (i, &j) in partners.iter().enumerate() {
                    let lam = sample_beta(cfg.mixup_alpha, cfg.mixup_beta, &mut mix_rng)?;
                    let yi = Tensor::one_hot(&[lab_y[i]], k).into_data();
                    let yj = Tensor::one_hot(&[lab_y[j]], k).into_data();
                    let m = mix_with(lam, x.row(lab_ids[i]), &yi, x.row(lab_ids[j]), &yj);
                    xm.push(m.x);
                    ym.push(m.y);
                }
                let xmn = g.input("x_mix");
                b.insert("x_mix".into(), Tensor::from_rows(&xm));
                let hm = model.encoder.build(&mut g, xmn, true);
                let lm = model.classifier.build_logits(&mut g, hm, true);
                let mix = cross_entropy_logits(&mut g, lm, Tensor::from_rows(&ym));
                terms.push((Some(mix), cfg.weights.w_mix));
                names.push("mixup");
            }
            let need_unl = (ablation.inter_consistency || ablation.intra_consistency) && !u_ids.is_empty();
            if need_unl {
                let xw: Vec<Vec<f64>> =
                    u_ids.iter().map(|&i| augment(x.row(i), Strength::Weak, &cfg.augment, &mut aug_rng)).collect();
                let xs: Vec<Vec<f64>> =
                    u_ids.iter().map(|&i| augment(x.row(i), Strength::Strong, &cfg.augment, &mut aug_rng)).collect();
                let (xw, xs) = (Tensor::from_rows(&xw), Tensor::from_rows(&xs));
                let xsn = g.input("x_s");
                b.insert("x_s".into(), xs);
                let hs = model.encoder.build(&mut g, xsn, true);
                let ls = model.classifier.build_logits(&mut g, hs, true);
                if ablation.inter_consistency {
                    let hw_val = model.encoder.encode(&xw)?;
                    let marginal = cfg.class_marginal.weights(&state, k);
                    let (soft, plan) =
                        transport_soft_labels_with(&hw_val, &protos.prototypes, &marginal, &cfg.transport)?;
                    not_converged += usize::from(plan.not_converged);
                    let inter = inter_consistency_batch(&mut g, ls, soft);
                    terms.push((Some(inter), cfg.weights.w_inter));
                    names.push("inter");
                }
                if ablation.intra_consistency {
                    let xwn = g.input("x_w");
                    b.insert("x_w".into(), xw);
                    let hw = model.encoder.build(&mut g, xwn, true);
                    let lw = model.classifier.build_logits(&mut g, hw, true);
                    let pw = g.softmax(lw);
                    let ps = g.softmax(ls);
                    let intra = intra_consistency_batch(&mut g, pw, ps, u_ids.len());
                    terms.push((Some(intra), cfg.weights.w_intra));
                    names.push("intra");
                }
            }
            let total = total_loss_node(&mut g, ce, &terms);
            let eval = crate::diffmath::evaluate(&g, &b)?;
            sums.ce += eval.scalar(ce);
            for ((node, _), name) in terms.iter().zip(&names) {
                let v = eval.scalar(node.expect("term present"));
                match *name {
                    "alignment" => sums.alignment += v,
                    "mixup" => sums.mixup += v,
                    "inter" => sums.inter += v,
                    _ => sums.intra += v,
                }
            }
            let grads = crate::diffmath::gradient_from(&g, &eval, total)?;
            total_sum += grads.value;
            adadelta_step(&mut model, &grads.by_input, &mut opt)?;

            // Refresh cached rows and the feature bank for the unlabelled batch.
            if !u_ids.is_empty() {
                let hu = model.features(&x.select_rows(&u_ids))?;
                let pu = model.classifier.classify(&hu)?;
                for (r, &id) in u_ids.iter().enumerate() {
                    cache.features.row_mut(id).copy_from_slice(hu.row(r));
                    cache.probs.row_mut(id).copy_from_slice(pu.row(r));
                }
                let lrs = batch_lrs(&cache, &model.classifier.weight, &u_ids, active_cfg.k_nn);
                for (&id, lr) in u_ids.iter().zip(&lrs) {
                    bank.update(id, lr);
                }
            }

            if pseudo_on {
                let mut pred = LivePredictor { model: &model, x: &x, space: cfg.mix_space, memo: BTreeMap::new() };
                let ctx = StepContext { bank: &bank, cfg: &cfg.pseudo, switches, epoch, iteration: it, target_size: n };
                for &id in &lab_ids {
                    if state.pool.contains_key(&id) {
                        spmis_step(&mut pred, id, &mut state, &ctx, &mut spmis_rng, &mut events, &mut inv)?;
                    }
                }
            }
        }

        let probs = model.probabilities(&x)?;
        let (ev, _) = metrics::evaluate(&probs, &truth)?;
        let it = iterations as f64;
        let pseudo_ids =
            state.pool.iter().filter(|(_, (_, s))| *s == LabelSource::Pseudo).map(|(&id, &(l, _))| (id, l));
        epochs.push(EpochMetrics {
            epoch,
            accuracy: ev.accuracy,
            macro_f1: ev.macro_f1,
            kappa: ev.kappa,
            qwk: ev.qwk,
            macro_auc: ev.macro_auc,
            losses: LossTerms {
                ce: sums.ce / it,
                alignment: sums.alignment / it,
                inter: sums.inter / it,
                intra: sums.intra / it,
                mixup: sums.mixup / it,
            },
            total_loss: total_sum / it,
            oracle_labeled: state.oracle_count(),
            pseudo_labeled: state.pseudo_count(),
            pseudo_precision: precision(pseudo_ids, &truth),
            sinkhorn_not_converged: not_converged,
        });
    }

    // Pending additions that never reached a loop boundary are dropped.
    let final_probs = model.probabilities(&x)?;
    let (final_eval, roc_curves) = metrics::evaluate(&final_probs, &truth)?;
    let final_pseudo: Vec<(usize, usize)> =
        state.pool.iter().filter(|(_, (_, s))| *s == LabelSource::Pseudo).map(|(&id, &(l, _))| (id, l)).collect();
    let accepted = first_events(&events, EventKind::Add);
    let gated = first_events(&events, EventKind::Gate);
    let pseudo = PseudoSummary {
        accepted: accepted.len(),
        accepted_precision: label_precision(&accepted, &truth),
        gated: gated.len(),
        gated_precision: label_precision(&gated, &truth),
        final_count: final_pseudo.len(),
        final_precision: label_precision(&final_pseudo, &truth),
        revoked: ever_revoked,
    };
    cache = TargetCache::compute(&model, &x)?;
    let lrs = active::local_representations(&cache.features, &cache.probs, &model.classifier.weight, active_cfg.k_nn)?;
    let final_lrs = Tensor::from_rows(&lrs.iter().map(|l| l.vector.clone()).collect::<Vec<_>>());
    Ok(AdaptOutcome {
        model,
        epochs,
        rounds,
        events,
        invariants: inv,
        pseudo,
        final_eval,
        roc_curves,
        final_probs,
        final_lrs,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    #[test]
    fn prototype_ema_examples() {
        let mut b = PrototypeBank::new(Tensor::matrix(1, 1, vec![1.0]), 0.99).unwrap();
        b.update(&[Some(vec![0.5])]);
        assert!((b.prototypes.data()[0] - 0.995).abs() < 1e-15);
        let mut one = PrototypeBank::new(Tensor::matrix(1, 2, vec![1.0, 2.0]), 1.0).unwrap();
        one.update(&[Some(vec![7.0, 7.0])]);
        assert_eq!(one.prototypes.data(), &[1.0, 2.0]);
        let mut zero = PrototypeBank::new(Tensor::matrix(2, 1, vec![1.0, 2.0]), 0.0).unwrap();
        let missing = zero.update(&[Some(vec![5.0]), None]);
        assert_eq!(zero.prototypes.data(), &[5.0, 2.0]);
        assert_eq!(missing, vec![1]);
    }

    #[test]
    fn candidates_examples() {
        let bank = FeatureBank::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.7, 0.7]]), 0.9);
        let q = [1.0, 0.0];
        assert_eq!(candidates(&q, &bank, 0..4, 1), vec![2]);
        assert_eq!(candidates(&q, &bank, 0..4, 4), vec![2, 1, 3, 0]);
        assert_eq!(candidates(&q, &bank, [0, 3].into_iter(), 5), vec![3, 0]);
        assert!(candidates(&q, &bank, std::iter::empty(), 3).is_empty());
    }

    #[test]
    fn candidates_match_exhaustive_sort() {
        let mut rng = stream(5, Stream::Spmis);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let bank = FeatureBank::new(Tensor::from_rows(&rows), 0.9);
        let q = [0.2, -0.5, 0.9];
        let mut all: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (cosine(&q, r), i)).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let oracle: Vec<usize> = all.iter().take(2).map(|p| p.1).collect();
        assert_eq!(candidates(&q, &bank, 0..4, 2), oracle);
    }

    /// Predictor over fixed features with a fixed linear classifier.
    struct Fixed {
        feats: Vec<Vec<f64>>,
        w: Tensor,
    }

    impl Predictor for Fixed {
        fn sample(&mut self, id: usize) -> Result<Vec<f64>> {
            Ok(self.feats[id].clone())
        }
        fn probs(&self, h: &[f64]) -> Result<Vec<f64>> {
            let logits: Vec<f64> = self.w.iter_rows().map(|r| crate::diffmath::dot(r, h)).collect();
            Ok(crate::diffmath::softmax(&logits))
        }
    }

    fn setup(conf_scale: f64) -> (Fixed, PseudoState, FeatureBank) {
        // Ids 0,1 oracle-labelled (classes 0,1); id 2 unlabelled and the only
        // candidate.
        let feats = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let w = Tensor::from_rows(&[[conf_scale, 0.0], [0.0, conf_scale]]);
        let mut s = PseudoState::default();
        s.add_oracle(0, 0);
        s.add_oracle(1, 1);
        let bank = FeatureBank::new(Tensor::from_rows(&feats), 0.9);
        (Fixed { feats, w }, s, bank)
    }

    fn ctx<'a>(bank: &'a FeatureBank, cfg: &'a PseudoConfig) -> StepContext<'a> {
        StepContext { bank, cfg, switches: PseudoSwitches::default(), epoch: 0, iteration: 0, target_size: 3 }
    }

    #[test]
    fn below_gate_leaves_state_unchanged() {
        let (mut p, mut s, bank) = setup(1.0);
        let before = s.clone();
        let cfg = PseudoConfig::default();
        let mut ev = Vec::new();
        let mut inv = InvariantReport::default();
        spmis_step(&mut p, 0, &mut s, &ctx(&bank, &cfg), &mut stream(1, Stream::Spmis), &mut ev, &mut inv).unwrap();
        assert_eq!(s, before);
        assert!(ev.is_empty());
    }

    #[test]
    fn confident_consistent_candidate_is_added() {
        let (mut p, mut s, bank) = setup(10.0);
        let cfg = PseudoConfig::default();
        let mut ev = Vec::new();
        let mut inv = InvariantReport::default();
        spmis_step(&mut p, 0, &mut s, &ctx(&bank, &cfg), &mut stream(1, Stream::Spmis), &mut ev, &mut inv).unwrap();
        assert_eq!(s.d_add.get(&2), Some(&1));
        assert_eq!(ev.last().unwrap().kind, EventKind::Add);
        assert_eq!(ev.last().unwrap().partner, Some(1));
        s.reconcile().unwrap();
        assert!(s.is_pseudo(2));
        assert_eq!(inv.violations, 0);
        assert_eq!(inv.blend_checks, 1);
    }

    #[test]
    fn failed_recheck_revokes_pseudo_label() {
        let (mut p, mut s, bank) = setup(10.0);
        // id 2 was accepted as class 0 but its feature says class 1, so the
        // blend with oracle sample 0 lands on the boundary and fails.
        s.pool.insert(2, (0, LabelSource::Pseudo));
        p.feats[2] = vec![-1.0, 3.0];
        let cfg = PseudoConfig::default();
        let mut ev = Vec::new();
        let mut inv = InvariantReport::default();
        let c = StepContext { target_size: 3, ..ctx(&bank, &cfg) };
        spmis_step(&mut p, 2, &mut s, &c, &mut stream(1, Stream::Spmis), &mut ev, &mut inv).unwrap();
        assert!(s.d_rev.contains(&2));
        let (_, revoked) = s.reconcile().unwrap();
        assert_eq!(revoked, vec![2]);
        assert!(!s.pool.contains_key(&2));
        assert_eq!(s.oracle_count(), 2);
    }

    #[test]
    fn oracle_labels_cannot_be_revoked() {
        let mut s = PseudoState::default();
        s.add_oracle(4, 1);
        s.d_rev.insert(4);
        assert!(s.reconcile().is_err());
        let mut s = PseudoState::default();
        s.pool.insert(4, (1, LabelSource::Pseudo));
        s.d_rev.insert(4);
        s.d_add.insert(4, 1);
        assert!(s.reconcile().is_err());
    }

    #[test]
    fn blend_is_exact_half_mix() {
        let a = [0.3, -1.7, 1e-300];
        let b = [2.0, 0.1, 5.0];
        let m = blend(&a, &b);
        assert!(blend_is_exact(&m, &a, &b));
        assert_eq!(m[0], 0.5 * 0.3 + 0.5 * 2.0);
    }

    #[test]
    fn augment_examples() {
        let x = [1.0, -2.0, 3.5];
        let zero = AugmentConfig { sigma_weak: 0.0, sigma_strong: 0.0, drop_strong: 0.0 };
        let mut r = stream(2, Stream::Augment);
        assert_eq!(augment(&x, Strength::Weak, &zero, &mut r), x.to_vec());
        assert_eq!(augment(&x, Strength::Strong, &zero, &mut r), x.to_vec());
        let cfg = AugmentConfig::default();
        let w = augment(&x, Strength::Weak, &cfg, &mut stream(3, Stream::Augment));
        let s = augment(&x, Strength::Strong, &cfg, &mut stream(3, Stream::Augment));
        assert_ne!(w, s);
        assert_eq!(w, augment(&x, Strength::Weak, &cfg, &mut stream(3, Stream::Augment)));
    }

    #[test]
    fn ablation_keys() {
        let mut a = Ablation::full();
        a.set("spmis", false).unwrap();
        assert!(!a.mixup && !a.add_pl && !a.mis_pl && !a.rev_pl && a.alignment);
        assert!(a.set("nonsense", true).is_err());
    }
}

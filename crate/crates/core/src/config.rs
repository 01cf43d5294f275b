//! Run configuration, overrides, hashing and provenance stamps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{Ablation, ActiveConfig, LpdaConfig};
use crate::nets::ArchConfig;
use crate::source::SourceTrainConfig;
use crate::synth::{DomainSpec, Shift, ShiftMap};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Config hash and seed stamped into every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    /// `# config_hash=<hash> seed=<seed>`, the first line of CSV outputs.
    pub fn comment_line(&self) -> String {
        format!("# config_hash={} seed={}", self.config_hash, self.seed)
    }

    /// Parses a line produced by [`Provenance::comment_line`].
    pub fn parse_comment(line: &str) -> Option<Self> {
        let rest = line.strip_prefix("# ")?;
        let mut hash = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("config_hash", v)) => hash = Some(v.to_string()),
                Some(("seed", v)) => seed = v.parse().ok(),
                _ => {}
            }
        }
        Some(Self { config_hash: hash?, seed: seed? })
    }
}

/// Everything needed to reproduce one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub model: ArchConfig,
    pub stage1: SourceTrainConfig,
    pub active: ActiveConfig,
    pub lpda: LpdaConfig,
    pub ablation: Ablation,
}

impl Default for RunConfig {
    /// The standard benchmark.
    fn default() -> Self {
        let input_dim = 64;
        let source = DomainSpec { input_dim, class_sigma: vec![0.3; 5], ..DomainSpec::default() };
        let target = DomainSpec {
            shift: Shift {
                map: ShiftMap::Rotation { angle: std::f64::consts::FRAC_PI_2, scale: 1.0, offset: 0.5 },
                noise: 0.1,
            },
            outlier_fraction: 0.05,
            ..source.clone()
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            source,
            target,
            model: ArchConfig { input_dim, ..ArchConfig::default() },
            stage1: SourceTrainConfig::default(),
            active: ActiveConfig::default(),
            lpda: LpdaConfig::default(),
            ablation: Ablation::full(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<f64>,
    pub rounds: Option<usize>,
    pub ablate: Vec<(String, bool)>,
}

/// Parses `KEY=BOOL`.
pub fn parse_ablate(s: &str) -> Result<(String, bool)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config { key: "ablate".into(), reason: format!("expected KEY=BOOL, got `{s}`") })?;
    let v = match v.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "on" | "yes" => true,
        "false" | "0" | "off" | "no" => false,
        _ => return Err(Error::Config { key: format!("ablate.{k}"), reason: format!("`{v}` is not a boolean") }),
    };
    Ok((k.trim().to_string(), v))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config { key: "<config>".into(), reason: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { reason, .. } => Error::Config { key: path.display().to_string(), reason },
            other => other,
        })
    }

    /// File if given, else defaults; then overrides; then validation.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(b) = o.budget {
            self.active.budget_fraction = b;
        }
        if let Some(r) = o.rounds {
            self.active.rounds = r;
        }
        for (k, v) in &o.ablate {
            self.ablation.set(k, *v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                key: "schema_version".into(),
                reason: format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            });
        }
        let scoped = |prefix: &'static str| {
            move |e: Error| match e {
                Error::Config { key, reason } => {
                    Error::Config { key: format!("{prefix}.{}", key.strip_prefix("data.").unwrap_or(&key)), reason }
                }
                other => Error::Config { key: prefix.into(), reason: other.to_string() },
            }
        };
        self.source.validate().map_err(scoped("source"))?;
        self.target.validate().map_err(scoped("target"))?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.active.validate()?;
        self.lpda.validate()?;
        let mismatch = |key: &str, reason: String| Err(Error::Config { key: key.into(), reason });
        if self.source.input_dim != self.model.input_dim || self.target.input_dim != self.model.input_dim {
            return mismatch("model.input_dim", "must equal source.input_dim and target.input_dim".into());
        }
        if self.source.classes != self.model.classes || self.target.classes != self.model.classes {
            return mismatch("model.classes", "must equal source.classes and target.classes".into());
        }
        if self.active.k_nn > self.target.n {
            return mismatch("active.k_nn", format!("exceeds target size {}", self.target.n));
        }
        if self.active.round_budget(self.target.n) == 0 {
            return mismatch("active.budget_fraction", "per-round budget rounds to zero samples".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the seed zeroed, so runs of one
    /// configuration over several seeds share a hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        sha256_hex(&serde_json::to_vec(&c).expect("config serialises"))
    }

    /// SHA-256 of the two data-generating specs.
    pub fn dataset_hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(&(&self.source, &self.target)).expect("specs serialise"))
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.config_hash(), seed: self.seed }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

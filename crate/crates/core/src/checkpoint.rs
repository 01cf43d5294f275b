//! Parameter checkpoints: one JSON header line followed by one CSV block
//! per tensor. Values are written in shortest round-trip form, so reading
//! a checkpoint back reproduces every parameter bit for bit.
//!
//! ```text
//! {"format":"sfada-checkpoint","version":1,...,"tensors":[{"name":"enc.0.w","shape":[64,64]},...]}
//! # enc.0.w
//! 0.0123,-0.2,...
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Provenance;
use crate::diffmath::Tensor;
use crate::nets::{ArchConfig, GeneratorParams, Model, Parameters};
use crate::{Error, Result};

pub const FORMAT: &str = "sfada-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    SourceModel,
    Generator,
    AdaptedModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub config_hash: String,
    pub seed: u64,
    pub arch: ArchConfig,
    pub classifier_frozen: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    fn from_named(
        kind: CheckpointKind,
        prov: &Provenance,
        arch: &ArchConfig,
        classifier_frozen: bool,
        named: Vec<(String, &Tensor)>,
    ) -> Self {
        let tensors: BTreeMap<String, Tensor> = named.into_iter().map(|(n, t)| (n, t.clone())).collect();
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            kind,
            config_hash: prov.config_hash.clone(),
            seed: prov.seed,
            arch: arch.clone(),
            classifier_frozen,
            tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        Self { header, tensors }
    }

    pub fn of_model(kind: CheckpointKind, prov: &Provenance, arch: &ArchConfig, model: &Model) -> Self {
        Self::from_named(kind, prov, arch, model.classifier.is_frozen(), model.named())
    }

    pub fn of_generator(prov: &Provenance, arch: &ArchConfig, gen: &GeneratorParams) -> Self {
        Self::from_named(CheckpointKind::Generator, prov, arch, true, gen.named())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.header.config_hash.clone(), seed: self.header.seed }
    }

    /// Fails unless the checkpoint was written under `prov`.
    pub fn check_provenance(&self, prov: &Provenance, path: &Path) -> Result<()> {
        if self.provenance() != *prov {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!(
                    "written for config {} seed {}, current run is config {} seed {}",
                    self.header.config_hash, self.header.seed, prov.config_hash, prov.seed
                ),
            });
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.header.kind == CheckpointKind::Generator {
            return Err(Error::invalid("checkpoint holds a generator, not a model"));
        }
        let mut m = Model::zeros(&self.header.arch);
        m.load_named(&self.tensors)?;
        if self.header.classifier_frozen {
            m.classifier.freeze();
        }
        Ok(m)
    }

    pub fn to_generator(&self) -> Result<GeneratorParams> {
        if self.header.kind != CheckpointKind::Generator {
            return Err(Error::invalid("checkpoint does not hold a generator"));
        }
        let mut g = GeneratorParams::zeros(&self.header.arch);
        g.load_named(&self.tensors)?;
        Ok(g)
    }

    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serialises");
        out.push('\n');
        for entry in &self.header.tensors {
            let t = &self.tensors[&entry.name];
            let _ = writeln!(out, "# {}", entry.name);
            let cols = if t.shape().len() >= 2 { *t.shape().last().unwrap_or(&1) } else { t.len().max(1) };
            for row in t.data().chunks(cols.max(1)) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: path.to_path_buf(), reason };
        let mut lines = text.lines();
        let header_line = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let header: Header = serde_json::from_str(header_line).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let mut blocks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (i, line) in lines.enumerate() {
            if let Some(name) = line.strip_prefix("# ") {
                if blocks.contains_key(name) {
                    return Err(bad(format!("duplicate block `{name}`")));
                }
                blocks.insert(name.to_string(), Vec::new());
                current = Some(name.to_string());
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let name = current.as_ref().ok_or_else(|| bad(format!("line {}: values before any block", i + 2)))?;
            let vals = blocks.get_mut(name).expect("block registered");
            for tok in line.split(',') {
                vals.push(tok.trim().parse::<f64>().map_err(|e| bad(format!("line {}: `{tok}`: {e}", i + 2)))?);
            }
        }
        let mut tensors = BTreeMap::new();
        for entry in &header.tensors {
            let data = blocks.remove(&entry.name).ok_or_else(|| bad(format!("missing block `{}`", entry.name)))?;
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(format!("block `{}`: {e}", entry.name)))?;
            tensors.insert(entry.name.clone(), t);
        }
        if let Some(extra) = blocks.keys().next() {
            return Err(bad(format!("block `{extra}` not listed in header")));
        }
        Ok(Self { header, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn prov() -> Provenance {
        Provenance { config_hash: "h".into(), seed: 3 }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let arch = ArchConfig::default();
        let mut m = Model::random(&arch, &mut stream(1, Stream::Init));
        m.classifier.freeze();
        let ck = Checkpoint::of_model(CheckpointKind::SourceModel, &prov(), &arch, &m);
        let back = Checkpoint::parse(&ck.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        assert!(m2.classifier.is_frozen());
        for ((n1, a), (n2, b)) in m.named().into_iter().zip(m2.named()) {
            assert_eq!(n1, n2);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{n1}");
        }
    }

    #[test]
    fn generator_round_trip_and_kind_checks() {
        let arch = ArchConfig::default();
        let g = GeneratorParams::random(&arch, &mut stream(2, Stream::Init));
        let ck = Checkpoint::of_generator(&prov(), &arch, &g);
        let back = Checkpoint::parse(&ck.to_text(), Path::new("x")).unwrap();
        assert_eq!(back.to_generator().unwrap().named(), g.named());
        assert!(back.to_model().is_err());
    }

    #[test]
    fn awkward_values_survive() {
        let vals = vec![0.1, -0.0, 1e-310, f64::MAX, -1.0 / 3.0, 123456789.123456789];
        let mut ck =
            Checkpoint::of_generator(&prov(), &ArchConfig::default(), &GeneratorParams::zeros(&ArchConfig::default()));
        ck.tensors.insert("x".into(), Tensor::vector(vals.clone()));
        ck.header.tensors.push(TensorEntry { name: "x".into(), shape: vec![vals.len()] });
        let back = Checkpoint::parse(&ck.to_text(), Path::new("x")).unwrap();
        let got: Vec<u64> = back.tensors["x"].data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = vals.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let arch = ArchConfig::default();
        let g = GeneratorParams::zeros(&arch);
        let text = Checkpoint::of_generator(&prov(), &arch, &g).to_text();
        let p = Path::new("x");
        assert!(Checkpoint::parse("", p).is_err());
        assert!(Checkpoint::parse(&text.replacen("# gen.emb", "# gen.other", 1), p).is_err());
        let truncated: String = text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::parse(&truncated, p).is_err());
        let ck = Checkpoint::parse(&text, p).unwrap();
        assert!(ck.check_provenance(&Provenance { config_hash: "h".into(), seed: 4 }, p).is_err());
        assert!(ck.check_provenance(&prov(), p).is_ok());
    }
}

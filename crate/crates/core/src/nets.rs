//! Encoder, classifier and feature generator, plus the Adadelta optimizer.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffmath::{evaluate, Bindings, Graph, NodeId, Tensor};
use crate::rng::Rng;
use crate::{Error, Result};

/// Layer sizes of all three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub classifier_bias: bool,
    pub generator: GeneratorArch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorArch {
    pub noise_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self { noise_dim: 16, embed_dim: 16, hidden: vec![64] }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            hidden: vec![64, 64],
            feature_dim: 32,
            classes: 5,
            classifier_bias: true,
            generator: GeneratorArch::default(),
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: key.into(), reason: reason.into() });
        if self.input_dim == 0 {
            return bad("model.input_dim", "must be positive");
        }
        if self.feature_dim == 0 {
            return bad("model.feature_dim", "must be positive");
        }
        if self.classes < 2 {
            return bad("model.classes", "need at least two classes");
        }
        if self.hidden.iter().chain(&self.generator.hidden).any(|&h| h == 0) {
            return bad("model.hidden", "hidden sizes must be positive");
        }
        if self.generator.noise_dim == 0 {
            return bad("model.generator.noise_dim", "must be positive");
        }
        Ok(())
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim];
        s.extend(&self.hidden);
        s.push(self.feature_dim);
        s
    }

    pub fn generator_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.generator.noise_dim + self.generator.embed_dim];
        s.extend(&self.generator.hidden);
        s.push(self.feature_dim);
        s
    }

    /// Parameter counts of (encoder, classifier, generator).
    pub fn parameter_counts(&self) -> (usize, usize, usize) {
        let mlp = |s: &[usize]| s.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        let enc = mlp(&self.encoder_sizes());
        let cls = self.classes * self.feature_dim + if self.classifier_bias { self.classes } else { 0 };
        let gen = self.classes * self.generator.embed_dim + mlp(&self.generator_sizes());
        (enc, cls, gen)
    }
}

/// Named access to trainable tensors. Names are unique across a model.
pub trait Parameters {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn frozen(&self) -> bool {
        false
    }

    fn bind(&self, b: &mut Bindings) {
        for (name, t) in self.named() {
            b.insert(name, t.clone());
        }
    }

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Overwrites every tensor from `values`; names and shapes must match.
    fn load_named(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, t) in self.named_mut() {
            let v = values.get(&name).ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))?;
            if v.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    v.shape(),
                    t.shape()
                )));
            }
            *t = v.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Fully connected stack with tanh between layers and a linear last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data)
}

impl Mlp {
    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn random(sizes: &[usize], rng: &mut Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense {
                weight: gaussian(w[0], w[1], 1.0 / (w[0] as f64).sqrt(), rng),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense { weight: Tensor::zeros(&[w[0], w[1]]), bias: Tensor::zeros(&[w[1]]) })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.rows())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    fn build(&self, g: &mut Graph, mut x: NodeId, prefix: &str, trainable: bool) -> NodeId {
        let last = self.layers.len().saturating_sub(1);
        for i in 0..self.layers.len() {
            let (wn, bn) = (format!("{prefix}.{i}.w"), format!("{prefix}.{i}.b"));
            let (w, b) = if trainable { (g.param(wn), g.param(bn)) } else { (g.input(wn), g.input(bn)) };
            let h = g.matmul(x, w);
            x = g.add(h, b);
            if i < last {
                x = g.tanh(x);
            }
        }
        x
    }

    fn named<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &l.weight));
            out.push((format!("{prefix}.{i}.b"), &l.bias));
        }
        out
    }

    fn named_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.w"), &mut l.weight));
            out.push((format!("{prefix}.{i}.b"), &mut l.bias));
        }
        out
    }
}

/// Promotes a single vector to a one-row matrix.
fn as_batch(x: &Tensor, dim: usize) -> Result<Tensor> {
    if x.cols() != dim {
        return Err(Error::Dimension { expected: dim, got: x.cols() });
    }
    match x.shape().len() {
        2 => Ok(x.clone()),
        _ => Ok(Tensor::matrix(1, dim, x.data().to_vec())),
    }
}

fn unbatch(out: Tensor, single: bool) -> Tensor {
    if single {
        Tensor::vector(out.into_data())
    } else {
        out
    }
}

/// Feature extractor `R^{input} -> R^{feature}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub mlp: Mlp,
}

impl EncoderParams {
    pub const PREFIX: &'static str = "enc";

    pub fn random(arch: &ArchConfig, rng: &mut Rng) -> Self {
        Self { mlp: Mlp::random(&arch.encoder_sizes(), rng) }
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        Self { mlp: Mlp::zeros(&arch.encoder_sizes()) }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Adds the encoder to `g`; parameters are differentiable when `trainable`.
    pub fn build(&self, g: &mut Graph, x: NodeId, trainable: bool) -> NodeId {
        self.mlp.build(g, x, Self::PREFIX, trainable)
    }

    /// Features for one input vector or a `[n, input]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let batch = as_batch(x, self.input_dim())?;
        let mut g = Graph::new();
        let xin = g.input("x");
        let out = self.build(&mut g, xin, false);
        let mut b = Bindings::new();
        self.bind(&mut b);
        b.insert("x".into(), batch);
        Ok(unbatch(evaluate(&g, &b)?.into_tensor(out), x.shape().len() == 1))
    }
}

impl Parameters for EncoderParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        self.mlp.named(Self::PREFIX)
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.mlp.named_mut(Self::PREFIX)
    }
}

/// Linear classifier whose rows double as class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `[classes, feature]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    frozen: bool,
}

impl ClassifierParams {
    pub const PREFIX: &'static str = "cls";

    pub fn new(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::invalid("classifier weight must be a matrix"));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.rows()] {
                return Err(Error::Dimension { expected: weight.rows(), got: b.len() });
            }
        }
        Ok(Self { weight, bias, frozen: false })
    }

    pub fn random(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let weight = gaussian(arch.classes, arch.feature_dim, 1.0 / (arch.feature_dim as f64).sqrt(), rng);
        let bias = arch.classifier_bias.then(|| Tensor::zeros(&[arch.classes]));
        Self { weight, bias, frozen: false }
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        let bias = arch.classifier_bias.then(|| Tensor::zeros(&[arch.classes]));
        Self { weight: Tensor::zeros(&[arch.classes, arch.feature_dim]), bias, frozen: false }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Logits `h Wᵀ + b`. Parameters are data inputs when `trainable` is
    /// false or the classifier is frozen.
    pub fn build_logits(&self, g: &mut Graph, h: NodeId, trainable: bool) -> NodeId {
        let trainable = trainable && !self.frozen;
        let w = if trainable { g.param("cls.w") } else { g.input("cls.w") };
        let wt = g.transpose(w);
        let logits = g.matmul(h, wt);
        match &self.bias {
            Some(_) => {
                let b = if trainable { g.param("cls.b") } else { g.input("cls.b") };
                g.add(logits, b)
            }
            None => logits,
        }
    }

    /// `softmax(W h + b)` for one feature vector or a batch.
    pub fn classify(&self, h: &Tensor) -> Result<Tensor> {
        let batch = as_batch(h, self.feature_dim())?;
        let mut g = Graph::new();
        let hin = g.input("h");
        let logits = self.build_logits(&mut g, hin, false);
        let p = g.softmax(logits);
        let mut b = Bindings::new();
        self.bind(&mut b);
        b.insert("h".into(), batch);
        Ok(unbatch(evaluate(&g, &b)?.into_tensor(p), h.shape().len() == 1))
    }
}

impl Parameters for ClassifierParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("cls.w".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("cls.b".to_string(), b));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("cls.w".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("cls.b".to_string(), b));
        }
        v
    }

    fn frozen(&self) -> bool {
        self.frozen
    }
}

/// Label-conditioned feature generator: `mlp([noise, embed(label)])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    /// `[classes, embed]`
    pub embedding: Tensor,
    pub mlp: Mlp,
}

impl GeneratorParams {
    pub const PREFIX: &'static str = "gen";

    /// Embedding and weights drawn from a standard-normal-scaled init.
    pub fn random(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let embedding = gaussian(arch.classes, arch.generator.embed_dim, 1.0, rng);
        Self { embedding, mlp: Mlp::random(&arch.generator_sizes(), rng) }
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        Self {
            embedding: Tensor::zeros(&[arch.classes, arch.generator.embed_dim]),
            mlp: Mlp::zeros(&arch.generator_sizes()),
        }
    }

    pub fn classes(&self) -> usize {
        self.embedding.rows()
    }

    pub fn noise_dim(&self) -> usize {
        self.mlp.input_dim() - self.embedding.cols()
    }

    pub fn build(&self, g: &mut Graph, noise: NodeId, one_hot: NodeId, trainable: bool) -> NodeId {
        let e = if trainable { g.param("gen.emb") } else { g.input("gen.emb") };
        let emb = g.matmul(one_hot, e);
        let z = g.concat_cols(noise, emb);
        self.mlp.build(g, z, Self::PREFIX, trainable)
    }

    /// Feature for one `(noise, label)` pair.
    pub fn generate(&self, noise: &[f64], label: usize) -> Result<Vec<f64>> {
        let noise = Tensor::matrix(1, noise.len(), noise.to_vec());
        Ok(self.generate_batch(&noise, &[label])?.into_data())
    }

    /// Features for a `[n, noise]` batch with one label per row.
    pub fn generate_batch(&self, noise: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let k = self.classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ClassOutOfRange { class: bad, classes: k });
        }
        if noise.cols() != self.noise_dim() {
            return Err(Error::Dimension { expected: self.noise_dim(), got: noise.cols() });
        }
        if noise.rows() != labels.len() {
            return Err(Error::Dimension { expected: labels.len(), got: noise.rows() });
        }
        let mut g = Graph::new();
        let z = g.input("z");
        let y = g.input("y");
        let out = self.build(&mut g, z, y, false);
        let mut b = Bindings::new();
        self.bind(&mut b);
        b.insert("z".into(), noise.clone());
        b.insert("y".into(), Tensor::one_hot(labels, k));
        Ok(evaluate(&g, &b)?.into_tensor(out))
    }

    /// Draws standard-normal noise for `labels`.
    pub fn sample_noise(&self, n: usize, rng: &mut Rng) -> Tensor {
        let d = self.noise_dim();
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())
    }
}

impl Parameters for GeneratorParams {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("gen.emb".to_string(), &self.embedding)];
        v.extend(self.mlp.named(Self::PREFIX));
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("gen.emb".to_string(), &mut self.embedding)];
        v.extend(self.mlp.named_mut(Self::PREFIX));
        v
    }
}

/// Encoder and classifier trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

impl Model {
    pub fn random(arch: &ArchConfig, rng: &mut Rng) -> Self {
        Self { encoder: EncoderParams::random(arch, rng), classifier: ClassifierParams::random(arch, rng) }
    }

    pub fn zeros(arch: &ArchConfig) -> Self {
        Self { encoder: EncoderParams::zeros(arch), classifier: ClassifierParams::zeros(arch) }
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.encode(x)
    }

    pub fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        self.classifier.classify(&self.encoder.encode(x)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.probabilities(x)?.argmax_rows())
    }
}

impl Parameters for Model {
    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.encoder.named();
        v.extend(self.classifier.named());
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.encoder.named_mut();
        v.extend(self.classifier.named_mut());
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub eps: f64,
    pub lr: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self { rho: 0.9, eps: 1e-6, lr: 0.1 }
    }
}

/// Running averages of squared gradients and squared updates, keyed by
/// parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState {
    pub config: AdadeltaConfig,
    square_avg: BTreeMap<String, Tensor>,
    acc_delta: BTreeMap<String, Tensor>,
}

impl AdadeltaState {
    pub fn new(config: AdadeltaConfig) -> Self {
        Self { config, square_avg: BTreeMap::new(), acc_delta: BTreeMap::new() }
    }

    pub fn square_avg(&self, name: &str) -> Option<&Tensor> {
        self.square_avg.get(name)
    }

    pub fn acc_delta(&self, name: &str) -> Option<&Tensor> {
        self.acc_delta.get(name)
    }
}

/// One Adadelta update of every parameter that has an entry in `grads`:
///
/// ```text
/// v  <- rho v + (1 - rho) g²
/// dx  = sqrt(u + eps) / sqrt(v + eps) * g
/// u  <- rho u + (1 - rho) dx²
/// x  <- x - lr dx
/// ```
pub fn adadelta_step<P: Parameters + ?Sized>(
    params: &mut P,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdadeltaState,
) -> Result<()> {
    if params.frozen() {
        return Err(Error::invalid("cannot update frozen parameters"));
    }
    // Validate everything before touching any state.
    for (name, t) in params.named() {
        if let Some(g) = grads.get(&name) {
            if g.shape() != t.shape() {
                return Err(Error::invalid(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    t.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(name));
            }
        }
    }
    let AdadeltaConfig { rho, eps, lr } = state.config;
    for (name, t) in params.named_mut() {
        let Some(g) = grads.get(&name) else { continue };
        let sq = state.square_avg.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(g));
        let acc = state.acc_delta.entry(name).or_insert_with(|| Tensor::zeros_like(g));
        for (((x, &gi), v), u) in
            t.data_mut().iter_mut().zip(g.data()).zip(sq.data_mut().iter_mut()).zip(acc.data_mut().iter_mut())
        {
            *v = rho * *v + (1.0 - rho) * gi * gi;
            let dx = (*u + eps).sqrt() / (*v + eps).sqrt() * gi;
            *u = rho * *u + (1.0 - rho) * dx * dx;
            *x -= lr * dx;
        }
    }
    Ok(())
}

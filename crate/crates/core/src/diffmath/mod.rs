//! Small reverse-mode differentiation engine.
//!
//! A [`Graph`] is an append-only list of primitive applications over
//! [`Tensor`]s of rank 0, 1 or 2. Free inputs are bound by name at
//! evaluation time; inputs declared with [`Graph::param`] receive gradients.
//! Every primitive output is checked for finiteness and the failing node id
//! is reported.

mod graph;
mod tensor;

pub use graph::{evaluate, gradient, gradient_from, Bindings, Evaluation, Gradients, Graph, NodeId};
pub use tensor::{argmax, cosine, dot, matmul, norm, normalize_rows, softmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MathError {
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("node {node} ({op}): incompatible shapes {detail}")]
    ShapeMismatch { node: usize, op: &'static str, detail: String },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("node {node}: zero-norm vector")]
    ZeroNorm { node: usize },
    #[error("input `{name}` is not bound")]
    UnboundInput { name: String },
    #[error("node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    BadStep(f64),
}

/// Largest relative disagreement between the reverse-mode gradient and a
/// central difference, over every coordinate of every differentiable input.
///
/// Relative error is `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn finite_difference_check(
    graph: &Graph,
    bindings: &Bindings,
    output: NodeId,
    step: f64,
) -> Result<f64, MathError> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(MathError::BadStep(step));
    }
    let analytic = gradient(graph, bindings, output)?;
    let mut worst = 0.0f64;
    let mut probe = bindings.clone();
    for (name, grad) in &analytic.by_input {
        let base = bindings.get(name).ok_or_else(|| MathError::UnboundInput { name: name.clone() })?;
        for k in 0..base.len() {
            let x0 = base.data()[k];
            set_coord(&mut probe, name, k, x0 + step);
            let up = evaluate(graph, &probe)?.scalar(output);
            set_coord(&mut probe, name, k, x0 - step);
            let down = evaluate(graph, &probe)?.scalar(output);
            set_coord(&mut probe, name, k, x0);
            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
        }
    }
    Ok(worst)
}

fn set_coord(b: &mut Bindings, name: &str, k: usize, v: f64) {
    if let Some(t) = b.get_mut(name) {
        t.data_mut()[k] = v;
    }
}

use std::collections::{BTreeMap, HashMap};

use super::tensor::{matmul_into, Tensor};
use super::MathError;

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Input {
        name: String,
        differentiable: bool,
    },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    /// Elementwise; a rank-1 right operand is broadcast across matrix rows.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Neg(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Normalize(NodeId),
    Cosine(NodeId, NodeId),
    Trace(NodeId),
    Outer(NodeId, NodeId),
    L1Distance(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    Transpose(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Neg(_) => "neg",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Normalize(_) => "normalize",
            Op::Cosine(..) => "cosine",
            Op::Trace(_) => "trace",
            Op::Outer(..) => "outer",
            Op::L1Distance(..) => "l1_distance",
            Op::ConcatCols(..) => "concat_cols",
            Op::Transpose(_) => "transpose",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        use Op::*;
        match *self {
            Input { .. } | Constant(_) => vec![],
            MatMul(a, b) | Add(a, b) | Mul(a, b) | Cosine(a, b) | Outer(a, b) | L1Distance(a, b) | ConcatCols(a, b) => {
                vec![a, b]
            }
            Scale(a, _)
            | Neg(a)
            | Exp(a)
            | Log(a)
            | Tanh(a)
            | Sum(a)
            | Mean(a)
            | RowSum(a)
            | Softmax(a)
            | LogSoftmax(a)
            | Normalize(a)
            | Trace(a)
            | Transpose(a) => vec![a],
        }
    }
}

/// Append-only computation graph. Node order is evaluation order, so a
/// graph is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
}

pub type Bindings = HashMap<String, Tensor>;

/// Forward values for every node of a graph.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Tensor>,
}

impl Evaluation {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id.0].item()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_tensor(mut self, id: NodeId) -> Tensor {
        self.values.swap_remove(id.0)
    }
}

/// Output value together with the gradient of every differentiable input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub value: f64,
    pub by_input: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_input.get(name)
    }
}

macro_rules! unary {
    ($($fn_name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $fn_name(&mut self, a: NodeId) -> NodeId { self.push(Op::$variant(a)) })*
    };
}

macro_rules! binary {
    ($($fn_name:ident => $variant:ident),* $(,)?) => {
        $(pub fn $fn_name(&mut self, a: NodeId, b: NodeId) -> NodeId { self.push(Op::$variant(a, b)) })*
    };
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "operand from another graph");
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// A named free input whose gradient is reported by [`gradient`].
    pub fn param(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input { name: name.into(), differentiable: true })
    }

    /// A named free input treated as data (no gradient).
    pub fn input(&mut self, name: impl Into<String>) -> NodeId {
        self.push(Op::Input { name: name.into(), differentiable: false })
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    unary! {
        neg => Neg, exp => Exp, log => Log, tanh => Tanh, sum => Sum, mean => Mean,
        row_sum => RowSum, softmax => Softmax, log_softmax => LogSoftmax,
        normalize => Normalize, trace => Trace, transpose => Transpose,
    }

    binary! {
        matmul => MatMul, add => Add, mul => Mul, cosine => Cosine, outer => Outer,
        l1_distance => L1Distance, concat_cols => ConcatCols,
    }

    /// Names of free inputs, in node order.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, bool)> {
        self.nodes.iter().filter_map(|op| match op {
            Op::Input { name, differentiable } => Some((name.as_str(), *differentiable)),
            _ => None,
        })
    }
}

fn mismatch(node: usize, op: &Op, detail: String) -> MathError {
    MathError::ShapeMismatch { node, op: op.name(), detail }
}

fn last_axis(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

/// Applies `f` to each row (last axis) of `t` and writes into a fresh tensor.
fn per_row(t: &Tensor, mut f: impl FnMut(&[f64], &mut [f64])) -> Tensor {
    let mut out = Tensor::zeros_like(t);
    let c = last_axis(t).max(1);
    for (src, dst) in t.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        f(src, dst);
    }
    out
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = (x - m).exp();
        s += *d;
    }
    dst.iter_mut().for_each(|d| *d /= s);
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + src.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    for (d, &x) in dst.iter_mut().zip(src) {
        *d = x - lse;
    }
}

fn matmul_shapes(a: &Tensor, b: &Tensor) -> Option<(usize, usize, usize, Vec<usize>)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Some((*m, *k, *n, vec![*m, *n])),
        ([m, k], [k2]) if k == k2 => Some((*m, *k, 1, vec![*m])),
        ([k], [k2, n]) if k == k2 => Some((1, *k, *n, vec![*n])),
        _ => None,
    }
}

fn forward(node: usize, op: &Op, vals: &[Tensor], bindings: &Bindings) -> Result<Tensor, MathError> {
    let v = |id: &NodeId| &vals[id.0];
    let out = match op {
        Op::Input { name, .. } => {
            bindings.get(name).cloned().ok_or_else(|| MathError::UnboundInput { name: name.clone() })?
        }
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k, n, shape) =
                matmul_shapes(a, b).ok_or_else(|| mismatch(node, op, format!("{:?} x {:?}", a.shape(), b.shape())))?;
            let mut out = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(shape, out)?
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            let f = |x: f64, y: f64| if matches!(op, Op::Add(..)) { x + y } else { x * y };
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(a.shape().to_vec(), data)?
            } else if matches!(op, Op::Add(..)) && a.shape().len() == 2 && b.shape() == [a.shape()[1]] {
                let mut out = a.clone();
                let c = a.cols();
                for row in out.data_mut().chunks_mut(c) {
                    for (o, &y) in row.iter_mut().zip(b.data()) {
                        *o += y;
                    }
                }
                out
            } else {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
        }
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::Neg(a) => v(a).map(|x| -x),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => {
            if v(a).data().iter().any(|&x| x <= 0.0) {
                return Err(MathError::NonFinite { node, op: op.name() });
            }
            v(a).map(f64::ln)
        }
        Op::Tanh(a) => v(a).map(f64::tanh),
        Op::Sum(a) => Tensor::scalar(v(a).sum()),
        Op::Mean(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(mismatch(node, op, "mean of empty tensor".into()));
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Op::RowSum(a) => {
            let a = v(a);
            match a.shape() {
                [m, _] => Tensor::vector(a.iter_rows().take(*m).map(|r| r.iter().sum()).collect()),
                [_] => Tensor::scalar(a.sum()),
                s => return Err(mismatch(node, op, format!("{s:?}"))),
            }
        }
        Op::Softmax(a) => per_row(v(a), softmax_row),
        Op::LogSoftmax(a) => per_row(v(a), log_softmax_row),
        Op::Normalize(a) => {
            let mut zero = false;
            let out = per_row(v(a), |src, dst| {
                let n = src.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    zero = true;
                }
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = x / n;
                }
            });
            if zero {
                return Err(MathError::ZeroNorm { node });
            }
            out
        }
        Op::Cosine(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() || a.shape().is_empty() {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let c = last_axis(a);
            let mut out = Vec::with_capacity(a.rows());
            for (x, y) in a.data().chunks(c).zip(b.data().chunks(c)) {
                let (nx, ny) = (super::tensor::norm(x), super::tensor::norm(y));
                if nx == 0.0 || ny == 0.0 {
                    return Err(MathError::ZeroNorm { node });
                }
                out.push(super::tensor::dot(x, y) / (nx * ny));
            }
            if a.shape().len() == 1 {
                Tensor::scalar(out[0])
            } else {
                Tensor::vector(out)
            }
        }
        Op::Trace(a) => {
            let a = v(a);
            match a.shape() {
                [m, n] if m == n => Tensor::scalar((0..*m).map(|i| a.get(i, i)).sum()),
                s => return Err(mismatch(node, op, format!("{s:?} is not square"))),
            }
        }
        Op::Outer(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape().len() != 1 || b.shape().len() != 1 {
                return Err(mismatch(node, op, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let mut data = Vec::with_capacity(a.len() * b.len());
            for &x in a.data() {
                data.extend(b.data().iter().map(|&y| x * y));
            }
            Tensor::matrix(a.len(), b.len(), data)
        }
        Op::L1Distance(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.shape() != b.shape() {
                return Err(mismatch(node, op, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum())
        }
        Op::ConcatCols(a, b) => {
            let (a, b) = (v(a), v(b));
            match (a.shape(), b.shape()) {
                ([m, p], [m2, q]) if m == m2 => {
                    let mut data = Vec::with_capacity(m * (p + q));
                    for i in 0..*m {
                        data.extend_from_slice(a.row(i));
                        data.extend_from_slice(b.row(i));
                    }
                    Tensor::matrix(*m, p + q, data)
                }
                ([p], [q]) => {
                    let mut data = Vec::with_capacity(p + q);
                    data.extend_from_slice(a.data());
                    data.extend_from_slice(b.data());
                    Tensor::vector(data)
                }
                (sa, sb) => return Err(mismatch(node, op, format!("{sa:?} | {sb:?}"))),
            }
        }
        Op::Transpose(a) => {
            let a = v(a);
            if a.shape().len() != 2 {
                return Err(mismatch(node, op, format!("{:?}", a.shape())));
            }
            a.transpose()
        }
    };
    if !out.all_finite() {
        return Err(MathError::NonFinite { node, op: op.name() });
    }
    Ok(out)
}

/// Forward pass over every node.
pub fn evaluate(graph: &Graph, bindings: &Bindings) -> Result<Evaluation, MathError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    for (i, op) in graph.nodes.iter().enumerate() {
        let t = forward(i, op, &values, bindings)?;
        values.push(t);
    }
    Ok(Evaluation { values })
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Reverse-mode gradient of the scalar node `output` with respect to every
/// input declared with [`Graph::param`].
pub fn gradient(graph: &Graph, bindings: &Bindings, output: NodeId) -> Result<Gradients, MathError> {
    let eval = evaluate(graph, bindings)?;
    gradient_from(graph, &eval, output)
}

/// As [`gradient`], reusing an existing forward pass.
pub fn gradient_from(graph: &Graph, eval: &Evaluation, output: NodeId) -> Result<Gradients, MathError> {
    let out_val = eval.get(output);
    if !out_val.is_scalar() {
        return Err(MathError::NotScalar { node: output.0, shape: out_val.shape().to_vec() });
    }

    // Only nodes downstream of a differentiable input carry adjoints.
    let n = output.0 + 1;
    let mut live = vec![false; n];
    for (i, op) in graph.nodes[..n].iter().enumerate() {
        live[i] = match op {
            Op::Input { differentiable, .. } => *differentiable,
            other => other.operands().iter().any(|o| live[o.0]),
        };
    }

    let mut adj: Vec<Option<Tensor>> = vec![None; n];
    adj[output.0] = Some(Tensor::new(out_val.shape().to_vec(), vec![1.0])?);
    let vals = &eval.values;

    for i in (0..n).rev() {
        if !live[i] {
            continue;
        }
        let Some(g) = adj[i].take() else { continue };
        let op = &graph.nodes[i];
        let y = &vals[i];
        match *op {
            Op::Input { .. } => {
                adj[i] = Some(g);
            }
            Op::Constant(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (m, k, nn, _) = matmul_shapes(av, bv).expect("checked in forward");
                if live[a.0] {
                    // dA = dC · Bᵀ
                    let bt = bv.clone().reshape(vec![k, nn]).expect("shape").transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), m, nn, k, &mut da);
                    accumulate(&mut adj[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if live[b.0] {
                    // dB = Aᵀ · dC
                    let at = av.clone().reshape(vec![m, k]).expect("shape").transpose();
                    let mut db = vec![0.0; k * nn];
                    matmul_into(at.data(), g.data(), k, m, nn, &mut db);
                    accumulate(&mut adj[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Add(a, b) => {
                if live[a.0] {
                    accumulate(&mut adj[a.0], g.clone());
                }
                if live[b.0] {
                    let bv = &vals[b.0];
                    if bv.shape() == g.shape() {
                        accumulate(&mut adj[b.0], g);
                    } else {
                        let c = bv.len();
                        let mut db = vec![0.0; c];
                        for row in g.data().chunks(c) {
                            for (d, &x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        accumulate(&mut adj[b.0], Tensor::vector(db));
                    }
                }
            }
            Op::Mul(a, b) => {
                if live[a.0] {
                    accumulate(&mut adj[a.0], zip_map(&g, &vals[b.0], |x, y| x * y));
                }
                if live[b.0] {
                    accumulate(&mut adj[b.0], zip_map(&g, &vals[a.0], |x, y| x * y));
                }
            }
            Op::Scale(a, c) => accumulate(&mut adj[a.0], g.map(|x| x * c)),
            Op::Neg(a) => accumulate(&mut adj[a.0], g.map(|x| -x)),
            Op::Exp(a) => accumulate(&mut adj[a.0], zip_map(&g, y, |x, e| x * e)),
            Op::Log(a) => accumulate(&mut adj[a.0], zip_map(&g, &vals[a.0], |x, v| x / v)),
            Op::Tanh(a) => accumulate(&mut adj[a.0], zip_map(&g, y, |x, t| x * (1.0 - t * t))),
            Op::Sum(a) => {
                let s = g.item();
                accumulate(&mut adj[a.0], vals[a.0].map(|_| s));
            }
            Op::Mean(a) => {
                let s = g.item() / vals[a.0].len() as f64;
                accumulate(&mut adj[a.0], vals[a.0].map(|_| s));
            }
            Op::RowSum(a) => {
                let av = &vals[a.0];
                let c = last_axis(av);
                let mut da = Tensor::zeros_like(av);
                for (row, &gi) in da.data_mut().chunks_mut(c).zip(g.data()) {
                    row.iter_mut().for_each(|d| *d = gi);
                }
                accumulate(&mut adj[a.0], da);
            }
            Op::Softmax(a) => {
                let c = last_axis(y);
                let mut da = Tensor::zeros_like(y);
                for ((d, s), gr) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let inner: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..c {
                        d[j] = s[j] * (gr[j] - inner);
                    }
                }
                accumulate(&mut adj[a.0], da);
            }
            Op::LogSoftmax(a) => {
                let c = last_axis(y);
                let mut da = Tensor::zeros_like(y);
                for ((d, ls), gr) in da.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[j] = gr[j] - ls[j].exp() * total;
                    }
                }
                accumulate(&mut adj[a.0], da);
            }
            Op::Normalize(a) => {
                let av = &vals[a.0];
                let c = last_axis(y);
                let mut da = Tensor::zeros_like(y);
                for (((d, yr), gr), xr) in
                    da.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)).zip(av.data().chunks(c))
                {
                    let nx = super::tensor::norm(xr);
                    let inner = super::tensor::dot(yr, gr);
                    for j in 0..c {
                        d[j] = (gr[j] - yr[j] * inner) / nx;
                    }
                }
                accumulate(&mut adj[a.0], da);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let c = last_axis(av);
                let mut da = Tensor::zeros_like(av);
                let mut db = Tensor::zeros_like(bv);
                for (r, ((xr, yr), (dxa, dyb))) in av
                    .data()
                    .chunks(c)
                    .zip(bv.data().chunks(c))
                    .zip(da.data_mut().chunks_mut(c).zip(db.data_mut().chunks_mut(c)))
                    .enumerate()
                {
                    let (nx, ny) = (super::tensor::norm(xr), super::tensor::norm(yr));
                    let cs = y.data()[r];
                    let gr = g.data()[r];
                    for j in 0..c {
                        dxa[j] = gr * (yr[j] / (nx * ny) - cs * xr[j] / (nx * nx));
                        dyb[j] = gr * (xr[j] / (nx * ny) - cs * yr[j] / (ny * ny));
                    }
                }
                if live[a.0] {
                    accumulate(&mut adj[a.0], da);
                }
                if live[b.0] {
                    accumulate(&mut adj[b.0], db);
                }
            }
            Op::Trace(a) => {
                let av = &vals[a.0];
                let m = av.rows();
                let mut da = Tensor::zeros_like(av);
                for k in 0..m {
                    da.data_mut()[k * m + k] = g.item();
                }
                accumulate(&mut adj[a.0], da);
            }
            Op::Outer(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                if live[a.0] {
                    let da: Vec<f64> = g.iter_rows().map(|row| super::tensor::dot(row, bv.data())).collect();
                    accumulate(&mut adj[a.0], Tensor::vector(da));
                }
                if live[b.0] {
                    let mut db = vec![0.0; bv.len()];
                    for (row, &x) in g.iter_rows().zip(av.data()) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv * x;
                        }
                    }
                    accumulate(&mut adj[b.0], Tensor::vector(db));
                }
            }
            Op::L1Distance(a, b) => {
                let s = g.item();
                let sign = zip_map(&vals[a.0], &vals[b.0], |x, y| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        0.0
                    }
                });
                if live[b.0] {
                    accumulate(&mut adj[b.0], sign.map(|x| -x));
                }
                if live[a.0] {
                    accumulate(&mut adj[a.0], sign);
                }
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (p, q) = (last_axis(av), last_axis(bv));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for row in g.data().chunks(p + q) {
                    da.extend_from_slice(&row[..p]);
                    db.extend_from_slice(&row[p..]);
                }
                if live[a.0] {
                    accumulate(&mut adj[a.0], Tensor::new(av.shape().to_vec(), da)?);
                }
                if live[b.0] {
                    accumulate(&mut adj[b.0], Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
        }
    }

    let mut by_input = BTreeMap::new();
    for (i, op) in graph.nodes[..n].iter().enumerate() {
        if let Op::Input { name, differentiable: true } = op {
            let g = adj[i].take().unwrap_or_else(|| Tensor::zeros_like(&vals[i]));
            match by_input.get_mut(name) {
                // The same name bound twice shares one tensor; sum contributions.
                Some(acc) => accumulate_tensor(acc, &g),
                None => {
                    by_input.insert(name.clone(), g);
                }
            }
        }
    }
    // Differentiable inputs declared after the output still get a zero entry.
    for (i, op) in graph.nodes.iter().enumerate().skip(n) {
        if let Op::Input { name, differentiable: true } = op {
            by_input.entry(name.clone()).or_insert_with(|| Tensor::zeros_like(&vals[i]));
        }
    }
    Ok(Gradients { value: out_val.item(), by_input })
}

fn accumulate_tensor(acc: &mut Tensor, g: &Tensor) {
    for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += d;
    }
}

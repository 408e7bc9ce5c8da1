use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    ConcatLast(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize, end: usize },
    SliceRows { input: NodeId, start: usize, end: usize },
    TransposeLast2(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    HardSigmoid(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    SoftmaxLast(NodeId),
    CausalSoftmax(NodeId),
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Embed { table: NodeId, indices: Vec<usize> },
    Dropout { input: NodeId, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Tape of recorded primitive applications. Nodes are appended in execution
/// order, so inputs always precede their consumers and a single reverse
/// sweep suffices for backpropagation.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    rng: ChaCha8Rng,
    train: bool,
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hard_sigmoid(x: f64) -> f64 {
    if x <= -3.0 {
        0.0
    } else if x >= 3.0 {
        1.0
    } else {
        x / 6.0 + 0.5
    }
}

// Derivative of hard sigmoid; the kinks at +/-3 take the zero branch.
fn hard_sigmoid_grad(x: f64) -> f64 {
    if x > -3.0 && x < 3.0 {
        1.0 / 6.0
    } else {
        0.0
    }
}

/// Right operand broadcast: shapes equal, or `rhs.shape` is a suffix of
/// `lhs.shape` (rhs repeated over the leading dimensions).
fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn matmul_kernel(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "matmul requires rank-2 tensors, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

// dA = G * B^T without materializing the transpose.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for p in 0..k {
            let brow = &b.data()[p * n..(p + 1) * n];
            let grow = &g.data()[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(vec![m, k], out).expect("shape by construction")
}

// dB = A^T * G without materializing the transpose.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g.data()[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * grow[j];
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("shape by construction")
}

impl Graph {
    /// Tape for a training pass; the seed drives dropout masks.
    pub fn new(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            train: true,
        }
    }

    /// Tape in eval mode: dropout is the identity, no RNG consumption.
    pub fn eval() -> Self {
        let mut g = Graph::new(0);
        g.train = false;
        g
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` root w.r.t. this node, if reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, value)
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, name: &str) -> Result<NodeId> {
        let value = self.eval_op(&op)?;
        value.check_finite(name)?;
        Ok(self.push_unchecked(op, value))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, name: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if !broadcast_ok(sa, sb) {
            return Err(Error::Shape(format!(
                "{name}: incompatible shapes {sa:?} and {sb:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        self.push(Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        self.push(Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        self.push(Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "div")?;
        self.push(Op::Div(a, b), "div")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Neg(a), "neg")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::AddScalar(a, c), "add_scalar")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Matmul(a, b), "matmul")
    }

    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_last: no inputs".into()));
        }
        self.push(Op::ConcatLast(parts.to_vec()), "concat_last")
    }

    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { input, start, end }, "slice_cols")
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceRows { input, start, end }, "slice_rows")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::TransposeLast2(a), "transpose")
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a), "mean")
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of non-positive value".into()));
        }
        self.push(Op::Log(a), "log")
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softplus(a), "softplus")
    }

    pub fn hard_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::HardSigmoid(a), "hard_sigmoid")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a), "tanh")
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Abs(a), "abs")
    }

    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxLast(a), "softmax_last")
    }

    /// Row-wise softmax of a square score matrix where row `i` attends only
    /// to columns `j <= i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape(format!(
                "causal_softmax requires a square rank-2 tensor, got {s:?}"
            )));
        }
        self.push(Op::CausalSoftmax(a), "causal_softmax")
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(input).last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape(format!(
                "layer_norm: gain/bias must have {d} elements"
            )));
        }
        self.push(
            Op::LayerNorm { input, gain, bias, eps: 1e-5 },
            "layer_norm",
        )
    }

    /// Row gather: output row `i` is `table[indices[i]]`.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(table).shape();
        if v.len() != 2 {
            return Err(Error::Shape("embed: table must be rank-2".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v[0]) {
            return Err(Error::Shape(format!(
                "embed: index {bad} out of range for table with {} rows",
                v[0]
            )));
        }
        self.push(
            Op::Embed { table, indices: indices.to_vec() },
            "embed",
        )
    }

    /// Inverted dropout: in train mode kept entries are scaled by 1/(1-p);
    /// eval mode is the exact identity (the input node is returned as-is).
    pub fn dropout(&mut self, input: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0,1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(input);
        }
        let n = self.value(input).numel();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        self.push(Op::Dropout { input, mask }, "dropout")
    }

    fn eval_op(&self, op: &Op) -> Result<Tensor> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let map = |id: NodeId, f: &dyn Fn(f64) -> f64| {
            let t = v(id);
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
        };
        let zip = |a: NodeId, b: NodeId, f: &dyn Fn(f64, f64) -> f64| {
            let (ta, tb) = (v(a), v(b));
            let bn = tb.numel();
            let data = ta
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, tb.data()[i % bn]))
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        };
        match op {
            Op::Leaf => unreachable!("leaves are pushed directly"),
            Op::Add(a, b) => zip(*a, *b, &|x, y| x + y),
            Op::Sub(a, b) => zip(*a, *b, &|x, y| x - y),
            Op::Mul(a, b) => zip(*a, *b, &|x, y| x * y),
            Op::Div(a, b) => zip(*a, *b, &|x, y| x / y),
            Op::Neg(a) => map(*a, &|x| -x),
            Op::Scale(a, c) => {
                let c = *c;
                map(*a, &move |x| c * x)
            }
            Op::AddScalar(a, c) => {
                let c = *c;
                map(*a, &move |x| x + c)
            }
            Op::Matmul(a, b) => matmul_kernel(v(*a), v(*b)),
            Op::ConcatLast(parts) => {
                let first = v(parts[0]);
                let rows = first.rows();
                let mut cols = 0usize;
                for &p in parts {
                    let t = v(p);
                    if t.rows() != rows || t.shape().len() != first.shape().len() {
                        return Err(Error::Shape(format!(
                            "concat_last: mismatched shapes {:?} vs {:?}",
                            first.shape(),
                            t.shape()
                        )));
                    }
                    cols += t.last_dim();
                }
                let mut data = vec![0.0; rows * cols];
                let mut offset = 0;
                for &p in parts {
                    let t = v(p);
                    let d = t.last_dim();
                    for r in 0..rows {
                        data[r * cols + offset..r * cols + offset + d]
                            .copy_from_slice(&t.data()[r * d..(r + 1) * d]);
                    }
                    offset += d;
                }
                let mut shape = first.shape().to_vec();
                *shape.last_mut().unwrap() = cols;
                Tensor::new(shape, data)
            }
            Op::SliceCols { input, start, end } => {
                let t = v(*input);
                let d = t.last_dim();
                if *start >= *end || *end > d {
                    return Err(Error::Shape(format!(
                        "slice_cols [{start}, {end}) out of range for last dim {d}"
                    )));
                }
                let rows = t.rows();
                let w = end - start;
                let mut data = vec![0.0; rows * w];
                for r in 0..rows {
                    data[r * w..(r + 1) * w]
                        .copy_from_slice(&t.data()[r * d + start..r * d + end]);
                }
                let mut shape = t.shape().to_vec();
                *shape.last_mut().unwrap() = w;
                Tensor::new(shape, data)
            }
            Op::SliceRows { input, start, end } => {
                let t = v(*input);
                if t.shape().is_empty() {
                    return Err(Error::Shape("slice_rows on scalar".into()));
                }
                let n0 = t.shape()[0];
                if *start >= *end || *end > n0 {
                    return Err(Error::Shape(format!(
                        "slice_rows [{start}, {end}) out of range for first dim {n0}"
                    )));
                }
                let stride: usize = t.shape()[1..].iter().product::<usize>().max(1);
                let mut shape = t.shape().to_vec();
                shape[0] = end - start;
                Tensor::new(shape, t.data()[start * stride..end * stride].to_vec())
            }
            Op::TransposeLast2(a) => {
                let t = v(*a);
                if t.shape().len() != 2 {
                    return Err(Error::Shape(format!(
                        "transpose requires rank-2, got {:?}",
                        t.shape()
                    )));
                }
                let (m, n) = (t.shape()[0], t.shape()[1]);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = t.data()[i * n + j];
                    }
                }
                Tensor::new(vec![n, m], data)
            }
            Op::Sum(a) => Ok(Tensor::scalar(v(*a).data().iter().sum())),
            Op::Mean(a) => {
                let t = v(*a);
                Ok(Tensor::scalar(
                    t.data().iter().sum::<f64>() / t.numel() as f64,
                ))
            }
            Op::Exp(a) => map(*a, &|x| x.exp()),
            Op::Log(a) => map(*a, &|x| x.ln()),
            Op::Relu(a) => map(*a, &|x| x.max(0.0)),
            Op::Softplus(a) => map(*a, &stable_softplus),
            Op::HardSigmoid(a) => map(*a, &hard_sigmoid),
            Op::Sigmoid(a) => map(*a, &stable_sigmoid),
            Op::Tanh(a) => map(*a, &|x| x.tanh()),
            Op::Abs(a) => map(*a, &|x| x.abs()),
            Op::SoftmaxLast(a) => {
                let t = v(*a);
                let d = t.last_dim();
                let rows = t.rows();
                let mut data = vec![0.0; rows * d];
                for r in 0..rows {
                    let row = &t.data()[r * d..(r + 1) * d];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..d {
                        let e = (row[j] - m).exp();
                        data[r * d + j] = e;
                        denom += e;
                    }
                    for j in 0..d {
                        data[r * d + j] /= denom;
                    }
                }
                Tensor::new(t.shape().to_vec(), data)
            }
            Op::CausalSoftmax(a) => {
                let t = v(*a);
                let n = t.shape()[0];
                let mut data = vec![0.0; n * n];
                for r in 0..n {
                    let row = &t.data()[r * n..(r + 1) * n];
                    let m = row[..=r].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut denom = 0.0;
                    for j in 0..=r {
                        let e = (row[j] - m).exp();
                        data[r * n + j] = e;
                        denom += e;
                    }
                    for j in 0..=r {
                        data[r * n + j] /= denom;
                    }
                }
                Tensor::new(vec![n, n], data)
            }
            Op::LayerNorm { input, gain, bias, eps } => {
                let t = v(*input);
                let (gn, bs) = (v(*gain), v(*bias));
                let d = t.last_dim();
                let rows = t.rows();
                let mut data = vec![0.0; rows * d];
                for r in 0..rows {
                    let row = &t.data()[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        data[r * d + j] = (row[j] - mu) * inv * gn.data()[j] + bs.data()[j];
                    }
                }
                Tensor::new(t.shape().to_vec(), data)
            }
            Op::Embed { table, indices } => {
                let t = v(*table);
                let d = t.shape()[1];
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
                }
                Tensor::new(vec![indices.len(), d], data)
            }
            Op::Dropout { input, mask } => {
                let t = v(*input);
                let data = t
                    .data()
                    .iter()
                    .zip(mask.iter())
                    .map(|(&x, &m)| x * m)
                    .collect();
                Tensor::new(t.shape().to_vec(), data)
            }
        }
    }

    /// Reverse sweep from a scalar root; gradients are retrievable via
    /// [`Graph::grad`] for every node the root depends on.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.accumulate(i, &op, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Gradient of a broadcast right operand: fold the output gradient back
    /// onto the (possibly smaller) rhs shape.
    fn fold_to(&self, g: &[f64], f: impl Fn(usize) -> f64, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        for (i, &gv) in g.iter().enumerate() {
            out[i % n] += gv * f(i);
        }
        Tensor::new(shape.to_vec(), out).expect("shape by construction")
    }

    fn accumulate(&mut self, node: usize, op: &Op, g: &Tensor) -> Result<()> {
        let val = |s: &Self, id: NodeId| s.nodes[id.0].value.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, g.clone());
                let sb = val(self, *b).shape().to_vec();
                let gb = self.fold_to(g.data(), |_| 1.0, &sb);
                self.add_grad(*b, gb);
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, g.clone());
                let sb = val(self, *b).shape().to_vec();
                let gb = self.fold_to(g.data(), |_| -1.0, &sb);
                self.add_grad(*b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(self, *a), val(self, *b));
                let bn = tb.numel();
                let ga = Tensor::new(
                    ta.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * tb.data()[i % bn])
                        .collect(),
                )?;
                self.add_grad(*a, ga);
                let gb = self.fold_to(g.data(), |i| ta.data()[i], tb.shape());
                self.add_grad(*b, gb);
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(self, *a), val(self, *b));
                let bn = tb.numel();
                let ga = Tensor::new(
                    ta.shape().to_vec(),
                    g.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv / tb.data()[i % bn])
                        .collect(),
                )?;
                self.add_grad(*a, ga);
                let gb = self.fold_to(
                    g.data(),
                    |i| -ta.data()[i] / (tb.data()[i % bn] * tb.data()[i % bn]),
                    tb.shape(),
                );
                self.add_grad(*b, gb);
            }
            Op::Neg(a) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&x| -x).collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Scale(a, c) => {
                let ga = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().map(|&x| c * x).collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::AddScalar(a, _) => self.add_grad(*a, g.clone()),
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(self, *a), val(self, *b));
                self.add_grad(*a, matmul_nt(g, &tb));
                self.add_grad(*b, matmul_tn(&ta, g));
            }
            Op::ConcatLast(parts) => {
                let cols = self.nodes[node].value.last_dim();
                let rows = self.nodes[node].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let t = val(self, p);
                    let d = t.last_dim();
                    let mut data = vec![0.0; rows * d];
                    for r in 0..rows {
                        data[r * d..(r + 1) * d].copy_from_slice(
                            &g.data()[r * cols + offset..r * cols + offset + d],
                        );
                    }
                    self.add_grad(p, Tensor::new(t.shape().to_vec(), data)?);
                    offset += d;
                }
            }
            Op::SliceCols { input, start, end } => {
                let t = val(self, *input);
                let d = t.last_dim();
                let rows = t.rows();
                let w = end - start;
                let mut data = vec![0.0; t.numel()];
                for r in 0..rows {
                    data[r * d + start..r * d + end]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.add_grad(*input, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::SliceRows { input, start, end } => {
                let t = val(self, *input);
                let stride: usize = t.shape()[1..].iter().product::<usize>().max(1);
                let mut data = vec![0.0; t.numel()];
                data[start * stride..end * stride].copy_from_slice(g.data());
                self.add_grad(*input, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::TransposeLast2(a) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        data[j * m + i] = g.data()[i * n + j];
                    }
                }
                self.add_grad(*a, Tensor::new(vec![n, m], data)?);
            }
            Op::Sum(a) => {
                let t = val(self, *a);
                let gv = g.data()[0];
                self.add_grad(*a, Tensor::new(t.shape().to_vec(), vec![gv; t.numel()])?);
            }
            Op::Mean(a) => {
                let t = val(self, *a);
                let gv = g.data()[0] / t.numel() as f64;
                self.add_grad(*a, Tensor::new(t.shape().to_vec(), vec![gv; t.numel()])?);
            }
            Op::Exp(a) => {
                let out = &self.nodes[node].value;
                let ga = Tensor::new(
                    out.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y)
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Log(a) => {
                let t = val(self, *a);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &x)| gv / x)
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Relu(a) => {
                let t = val(self, *a);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Softplus(a) => {
                let t = val(self, *a);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &x)| gv * stable_sigmoid(x))
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::HardSigmoid(a) => {
                let t = val(self, *a);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &x)| gv * hard_sigmoid_grad(x))
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Sigmoid(a) => {
                let out = &self.nodes[node].value;
                let ga = Tensor::new(
                    out.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Tanh(a) => {
                let out = &self.nodes[node].value;
                let ga = Tensor::new(
                    out.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::Abs(a) => {
                let t = val(self, *a);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&gv, &x)| {
                            if x > 0.0 {
                                gv
                            } else if x < 0.0 {
                                -gv
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )?;
                self.add_grad(*a, ga);
            }
            Op::SoftmaxLast(a) => {
                let out = self.nodes[node].value.clone();
                let d = out.last_dim();
                let rows = out.rows();
                let mut data = vec![0.0; out.numel()];
                for r in 0..rows {
                    let p = &out.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = p.iter().zip(gr).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..d {
                        data[r * d + j] = p[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(*a, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::CausalSoftmax(a) => {
                let out = self.nodes[node].value.clone();
                let n = out.shape()[0];
                let mut data = vec![0.0; n * n];
                for r in 0..n {
                    let p = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = p[..=r].iter().zip(&gr[..=r]).map(|(&pi, &gi)| pi * gi).sum();
                    for j in 0..=r {
                        data[r * n + j] = p[j] * (gr[j] - dot);
                    }
                }
                self.add_grad(*a, Tensor::new(vec![n, n], data)?);
            }
            Op::LayerNorm { input, gain, bias, eps } => {
                let t = val(self, *input);
                let gn = val(self, *gain);
                let d = t.last_dim();
                let rows = t.rows();
                let mut dx = vec![0.0; t.numel()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let row = &t.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&x| (x - mu) * inv).collect();
                    let dxhat: Vec<f64> =
                        gr.iter().zip(gn.data()).map(|(&gv, &w)| gv * w).collect();
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(&dv, &xv)| dv * xv)
                        .sum::<f64>()
                        / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                }
                self.add_grad(*input, Tensor::new(t.shape().to_vec(), dx)?);
                let gshape = self.nodes[gain.0].value.shape().to_vec();
                let bshape = self.nodes[bias.0].value.shape().to_vec();
                self.add_grad(*gain, Tensor::new(gshape, dgain)?);
                self.add_grad(*bias, Tensor::new(bshape, dbias)?);
            }
            Op::Embed { table, indices } => {
                let t = val(self, *table);
                let d = t.shape()[1];
                let mut data = vec![0.0; t.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] += g.data()[r * d + j];
                    }
                }
                self.add_grad(*table, Tensor::new(t.shape().to_vec(), data)?);
            }
            Op::Dropout { input, mask } => {
                let t = val(self, *input);
                let ga = Tensor::new(
                    t.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &m)| gv * m)
                        .collect(),
                )?;
                self.add_grad(*input, ga);
            }
        }
        Ok(())
    }

    /// Stack rank-2 rows vertically; composed from transpose + concat so
    /// the backward pass comes for free.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let transposed: Vec<NodeId> = parts
            .iter()
            .map(|&p| self.transpose(p))
            .collect::<Result<_>>()?;
        let wide = self.concat_last(&transposed)?;
        self.transpose(wide)
    }

    /// Recompute every node from the leaves and compare with the recorded
    /// values bit-for-bit.
    pub fn replay_matches(&self) -> bool {
        for node in self.nodes.iter() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            match self.eval_op(&node.op) {
                Ok(v) => {
                    if v.data() != node.value.data() {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }
}

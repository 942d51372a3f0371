//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during a forward pass. Nodes are
//! appended in evaluation order, so walking the tape backwards is a valid
//! reverse topological order. Each graph supports exactly one backward pass.

use crate::diagnostics::Warning;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Transpose(NodeId),
    TraceProduct(NodeId, NodeId),
    Frobenius(NodeId),
    PairwiseSqDists(NodeId),
    Center(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor,
        targets: Tensor,
    },
    SqL2 {
        value: NodeId,
        reference: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
    warnings: Vec<Warning>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn check(op: &'static str, t: Tensor) -> Result<Tensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn scalar_shape(op: &'static str, t: &Tensor) -> Result<()> {
    if t.len() == 1 {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a scalar, got {:?}", t.shape())))
    }
}

fn double_center(k: &Tensor) -> Tensor {
    let m = k.rows();
    let mf = m as f64;
    let mut row_means = vec![0.0; m];
    let mut col_means = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            row_means[i] += k.data()[i * m + j];
            col_means[i] += k.data()[j * m + i];
        }
    }
    row_means.iter_mut().for_each(|v| *v /= mf);
    col_means.iter_mut().for_each(|v| *v /= mf);
    let grand = row_means.iter().sum::<f64>() / mf;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = (k.data()[i * m + j] - (row_means[i] + col_means[j])) + grand;
        }
    }
    Tensor::from_raw(vec![m, m], out)
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    pub fn warn(&mut self, w: Warning) {
        self.warnings.push(w);
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    pub fn take_warnings(&mut self) -> Vec<Warning> {
        std::mem::take(&mut self.warnings)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = check("matmul", self.value(a).matmul(self.value(b))?)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = check("add", self.value(a).zip_map(self.value(b), |x, y| x + y))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (av, rv) = (self.value(a), self.value(row));
        if !av.is_matrix() || rv.len() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let n = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + rv.data()[i % n])
            .collect();
        let v = check("add_row", Tensor::from_raw(av.shape().to_vec(), data))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = check("sub", self.value(a).zip_map(self.value(b), |x, y| x - y))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = check("scalar_mul", self.value(a).map(|x| x * c))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = check("add_scalar", self.value(a).map(|x| x + c))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Offset(a), rg))
    }

    pub fn elementwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("elementwise_mul", self.value(a), self.value(b))?;
        let v = check("elementwise_mul", self.value(a).zip_map(self.value(b), |x, y| x * y))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("div", self.value(a), self.value(b))?;
        let v = check("div", self.value(a).zip_map(self.value(b), |x, y| x / y))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        Ok(self.push(v, Op::Relu(a), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = check("exp", self.value(a).map(f64::exp))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Exp(a), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = check("sum", Tensor::scalar(self.value(a).sum()))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = check("mean", Tensor::scalar(t.sum() / t.len() as f64))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Mean(a), rg))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        if !self.value(a).is_matrix() {
            return Err(Error::shape(
                "transpose",
                format!("{:?} is not a matrix", self.value(a).shape()),
            ));
        }
        let v = self.value(a).transpose();
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    /// `tr(A·B)` without forming the product.
    pub fn trace_product(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.shape()[0] != bv.shape()[1] || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "trace_product",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (n, k) = (av.shape()[0], av.shape()[1]);
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..k {
                acc += av.data()[i * k + j] * bv.data()[j * n + i];
            }
        }
        let v = check("trace_product", Tensor::scalar(acc))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::TraceProduct(a, b), rg))
    }

    pub fn frobenius_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = check("frobenius_norm", Tensor::scalar(self.value(a).sq_norm().sqrt()))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Frobenius(a), rg))
    }

    /// `D[i][j] = ‖x_i − x_j‖²` over the rows of an `m×d` matrix, `m ≥ 2`.
    pub fn pairwise_sq_dists(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        if !x.is_matrix() || x.rows() < 2 {
            return Err(Error::shape(
                "pairwise_sq_dists",
                format!("need an m×d matrix with m ≥ 2, got {:?}", x.shape()),
            ));
        }
        let m = x.rows();
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (p - q) * (p - q)).sum();
                d[i * m + j] = s;
                d[j * m + i] = s;
            }
        }
        let v = check("pairwise_sq_dists", Tensor::from_raw(vec![m, m], d))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::PairwiseSqDists(a), rg))
    }

    /// Double centering `H·K·H`, `H = I − 11ᵀ/m`, of a square matrix.
    ///
    /// Evaluated entrywise as `(k_ij − (r_i + c_j)) + g` so a symmetric input
    /// yields a bit-exactly symmetric output.
    pub fn center(&mut self, a: NodeId) -> Result<NodeId> {
        let k = self.value(a);
        if !k.is_matrix() || k.rows() != k.cols() {
            return Err(Error::shape(
                "center",
                format!("expected a square matrix, got {:?}", k.shape()),
            ));
        }
        let v = check("center", double_center(k))?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Center(a), rg))
    }

    /// Mean over rows of `−Σ_c y_c · log softmax(logits)_c`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &Tensor) -> Result<NodeId> {
        let z = self.value(logits);
        if !z.is_matrix() || z.shape() != targets.shape() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?} vs targets {:?}", z.shape(), targets.shape()),
            ));
        }
        let (m, c) = (z.rows(), z.cols());
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        for i in 0..m {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..c {
                let log_p = row[j] - max - log_denom;
                probs[i * c + j] = log_p.exp();
                loss -= targets.at(i, j) * log_p;
            }
        }
        let v = check("softmax_cross_entropy", Tensor::scalar(loss / m as f64))?;
        let rg = self.rg(logits);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits,
                probs: Tensor::from_raw(vec![m, c], probs),
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// `‖value − reference‖²` with the reference held constant.
    pub fn sq_l2_distance(&mut self, value: NodeId, reference: &Tensor) -> Result<NodeId> {
        same_shape("sq_l2_distance", self.value(value), reference)?;
        let s: f64 = self
            .value(value)
            .data()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let v = check("sq_l2_distance", Tensor::scalar(s))?;
        let rg = self.rg(value);
        Ok(self.push(
            v,
            Op::SqL2 {
                value,
                reference: reference.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar node. A graph can be differentiated once.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        scalar_shape("backward", self.value(output))?;
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(self.value(output).shape(), 1.0));

        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for (input, contribution) in self.vjp(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, idx: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[idx];
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.rg(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose()).expect("matmul vjp")));
                }
                if self.rg(*b) {
                    out.push((*b, val(*a).transpose().matmul(g).expect("matmul vjp")));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut col_sums = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    col_sums[i % n] += v;
                }
                let row_shape = val(*row).shape().to_vec();
                vec![(*a, g.clone()), (*row, Tensor::from_raw(row_shape, col_sums))]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Offset(a) => vec![(*a, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gi, (x, y))| -gi * x / (y * y))
                    .collect();
                vec![
                    (*a, g.zip_map(bv, |gi, y| gi / y)),
                    (*b, Tensor::from_raw(bv.shape().to_vec(), db)),
                ]
            }
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }))],
            Op::Exp(a) => vec![(*a, g.zip_map(&node.value, |gi, y| gi * y))],
            Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::filled(val(*a).shape(), g.data()[0] / n))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::TraceProduct(a, b) => {
                let s = g.data()[0];
                vec![
                    (*a, val(*b).transpose().map(|v| v * s)),
                    (*b, val(*a).transpose().map(|v| v * s)),
                ]
            }
            Op::Frobenius(a) => {
                let norm = node.value.data()[0];
                let s = g.data()[0];
                let grad = if norm > 0.0 {
                    val(*a).map(|v| s * v / norm)
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                vec![(*a, grad)]
            }
            Op::PairwiseSqDists(a) => {
                let x = val(*a);
                let (m, d) = (x.rows(), x.cols());
                let mut out = vec![0.0; m * d];
                for i in 0..m {
                    for j in 0..m {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g.data()[i * m + j] + g.data()[j * m + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (x.row(i), x.row(j));
                        for k in 0..d {
                            out[i * d + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
                vec![(*a, Tensor::from_raw(x.shape().to_vec(), out))]
            }
            Op::Center(a) => vec![(*a, double_center(g))],
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let (m, c) = (probs.rows(), probs.cols());
                let s = g.data()[0] / m as f64;
                let mut out = vec![0.0; m * c];
                for i in 0..m {
                    let mass: f64 = targets.row(i).iter().sum();
                    for j in 0..c {
                        out[i * c + j] = s * (probs.at(i, j) * mass - targets.at(i, j));
                    }
                }
                vec![(*logits, Tensor::from_raw(vec![m, c], out))]
            }
            Op::SqL2 { value, reference } => {
                let s = 2.0 * g.data()[0];
                vec![(*value, val(*value).zip_map(reference, |x, r| s * (x - r)))]
            }
        }
    }
}

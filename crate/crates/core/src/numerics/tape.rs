//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`Tape`] records every op as a node holding its output value and the
//! activations its backward rule needs. Nodes are appended in evaluation
//! order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! All tensors on a tape are 2-D. Binary elementwise ops broadcast their
//! second operand when it is `1×c` (row), `r×1` (column) or `1×1`.

use std::collections::HashMap;

use super::tensor::{softmax_in_place, softmax_wide_into, Real, Tensor};
use super::NumericsError;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { a: Var, factor: T },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    BiasedSoftmax { x: Var, bias: Var, bc: Broadcast },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, total_weight: T },
    L1 { a: Var, target: Tensor<T> },
    Sum { a: Var },
    Mean { a: Var },
    Giou { a: Var, target: [T; 4] },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Embedding { .. } => "embedding",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Softmax { .. } => "softmax",
            Op::BiasedSoftmax { .. } => "biased_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L1 { .. } => "l1",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Giou { .. } => "giou",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Gradients produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    named: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
    by_var: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a named parameter; parameters that the loss does not
    /// depend on get a zero tensor.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.named[i].1)
    }

    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.by_var.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.named.iter().map(|(n, t)| (n.as_str(), t))
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

fn shape_err<R>(msg: String) -> Result<R, NumericsError> {
    Err(NumericsError::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), param_index: HashMap::new() }
    }

    /// Drops every node and parameter binding so the tape can record again.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.params.clear();
        self.param_index.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total scalar count held by recorded node values.
    pub fn stored_elements(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b, .. } | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::SliceRows { a, .. }
            | Op::SliceCols { a, .. }
            | Op::L1 { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::Giou { a, .. } => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Gelu { x } | Op::Sigmoid { x } | Op::Softmax { x } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BiasedSoftmax { x, bias, .. } => vec![*x, *bias],
        }
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        let value = as_matrix(value);
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable leaf. Registering the same name twice returns the
    /// first binding, so one tape can span several forward steps.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let value = as_matrix(value.clone());
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul { a, b, transpose_b: false }, value)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        self.push(Op::MatMul { a, b, transpose_b: true }, value)
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &str) -> Result<Broadcast, NumericsError> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if (ar, ac) == (br, bc) {
            Ok(Broadcast::Same)
        } else if (br, bc) == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if br == 1 && bc == ac {
            Ok(Broadcast::Row)
        } else if bc == 1 && br == ar {
            Ok(Broadcast::Col)
        } else {
            shape_err(format!("{op}: cannot broadcast {br}x{bc} onto {ar}x{ac}"))
        }
    }

    fn elementwise(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let av = self.value(a);
        let bv = self.value(b).data();
        let cols = av.cols();
        let out: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bv[i],
                    Broadcast::Row => bv[i % cols],
                    Broadcast::Col => bv[i / cols],
                    Broadcast::Scalar => bv[0],
                };
                f(x, y)
            })
            .collect();
        Tensor::matrix(av.rows(), cols, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bc = self.broadcast_kind(a, b, "add")?;
        let value = self.elementwise(a, b, bc, |x, y| x + y);
        self.push(Op::Add { a, b, bc }, value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let bc = self.broadcast_kind(a, b, "mul")?;
        let value = self.elementwise(a, b, bc, |x, y| x * y);
        self.push(Op::Mul { a, b, bc }, value)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale { a, factor }, value)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing".into());
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return shape_err(format!("concat_rows: {} columns vs {}", t.cols(), cols));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::matrix(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_cols of nothing".into());
        };
        let rows = self.shape(first).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return shape_err(format!("concat_cols: {} rows vs {}", self.shape(*bad).0, rows));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::matrix(rows, cols, data))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(a);
        if start + len > rows {
            return shape_err(format!("slice_rows {start}..{} of {rows}", start + len));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        self.push(Op::SliceRows { a, start }, Tensor::matrix(len, cols, data))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return shape_err(format!("slice_cols {start}..{} of {cols}", start + len));
        }
        let t = self.value(a);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { a, start }, Tensor::matrix(rows, len, data))
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(table);
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return shape_err(format!("embedding id {id} outside table of {rows}"));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::matrix(ids.len(), cols, data);
        self.push(Op::Embedding { table, ids: ids.to_vec() }, value)
    }

    /// Row-wise layer normalisation with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(x);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return shape_err(format!("layer_norm affine params must be 1x{cols}"));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Vec::with_capacity(rows * cols);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[c] + b[c]);
            }
        }
        let value = Tensor::matrix(rows, cols, out);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, value)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let k = T::lit(GELU_K);
        let c = T::lit(GELU_C);
        let half = T::lit(0.5);
        let value = self.value(x).map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()));
        self.push(Op::Gelu { x }, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = self.value(x).softmax_rows();
        self.push(Op::Softmax { x }, value)
    }

    /// `softmax_rows(x + bias)` with the sum formed in f64, so a bias that
    /// is constant along a row cancels exactly even for f32 tensors.
    pub fn softmax_rows_biased(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let bc = self.broadcast_kind(x, bias, "softmax_rows_biased")?;
        let xv = self.value(x);
        let bv = self.value(bias).data();
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![T::zero(); rows * cols];
        let wide = |v: T| v.to_f64().unwrap_or(f64::NAN);
        for r in 0..rows {
            let z: Vec<f64> = (0..cols)
                .map(|c| {
                    let i = r * cols + c;
                    let b = match bc {
                        Broadcast::Same => bv[i],
                        Broadcast::Row => bv[c],
                        Broadcast::Col => bv[r],
                        Broadcast::Scalar => bv[0],
                    };
                    wide(xv.data()[i]) + wide(b)
                })
                .collect();
            softmax_wide_into(&z, &mut out[r * cols..(r + 1) * cols]);
        }
        self.push(Op::BiasedSoftmax { x, bias, bc }, Tensor::matrix(rows, cols, out))
    }

    /// Weighted mean cross-entropy: `Σ w_r·(−log softmax(logits_r)[t_r]) / Σ w_r`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var, NumericsError> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows || weights.len() != rows {
            return shape_err(format!("cross_entropy: {rows} rows, {} targets", targets.len()));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= cols) {
            return shape_err(format!("cross_entropy target {t} outside {cols} classes"));
        }
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(NumericsError::Usage("cross_entropy needs positive total weight".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (r, row) in probs.chunks_mut(cols).enumerate() {
            let logit_t = row[targets[r]];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            loss = loss + weights[r] * (lse - logit_t);
            softmax_in_place(row);
        }
        let value = Tensor::scalar(loss / total_weight);
        self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            value,
        )
    }

    /// `Σ |a − target|` against a constant target of the same shape.
    pub fn l1(&mut self, a: Var, target: &Tensor<T>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.len() != target.len() {
            return shape_err(format!("l1: {} values vs target {}", av.len(), target.len()));
        }
        let s = av.data().iter().zip(target.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>();
        self.push(Op::L1 { a, target: target.clone() }, Tensor::scalar(s))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Op::Sum { a }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Op::Mean { a }, Tensor::scalar(s))
    }

    /// Generalised IoU between a `1×4` centre-form box `(cx, cy, w, h)` and
    /// a constant target box in the same form.
    pub fn giou(&mut self, a: Var, target: [T; 4]) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.len() != 4 {
            return shape_err(format!("giou expects a 1x4 box, got {:?}", av.shape()));
        }
        let p = [av.data()[0], av.data()[1], av.data()[2], av.data()[3]];
        let g = giou_with_grad(p, target).0;
        self.push(Op::Giou { a, target }, Tensor::scalar(g))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_var = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[i].requires_grad {
                    let v = &self.nodes[i].value;
                    by_var.insert(Var(i), Tensor::matrix(v.rows(), v.cols(), g));
                }
            }
        }
        let mut named = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for (name, v) in &self.params {
            let value = self.value(*v);
            let g = by_var
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(&[value.rows(), value.cols()]));
            index.insert(name.clone(), named.len());
            named.push((name.clone(), g));
        }
        Ok(Gradients { named, index, by_var })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if needs(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = G·Bᵀ (B: k×n) or G·B (B stored n×k)
                    let bs = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, g, (n as isize, 1), bv.data(), bs, ga, true);
                }
                if needs(*b) {
                    if *transpose_b {
                        // B is n×k: dB = Gᵀ·A
                        let gb = slot(grads, *b, n * k);
                        T::gemm(n, m, k, g, (1, n as isize), av.data(), (k as isize, 1), gb, true);
                    } else {
                        let gb = slot(grads, *b, k * n);
                        T::gemm(k, m, n, av.data(), (1, k as isize), g, (n as isize, 1), gb, true);
                    }
                }
            }
            Op::Add { a, b, bc } => {
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if needs(*b) {
                    let cols = node.value.cols();
                    let blen = self.value(*b).len();
                    let gb = slot(grads, *b, blen);
                    reduce_broadcast(*bc, cols, g.iter().copied(), gb);
                }
            }
            Op::Mul { a, b, bc } => {
                let cols = node.value.cols();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let b_at = |i: usize| match bc {
                    Broadcast::Same => bv[i],
                    Broadcast::Row => bv[i % cols],
                    Broadcast::Col => bv[i / cols],
                    Broadcast::Scalar => bv[0],
                };
                if needs(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x = *x + g[i] * b_at(i);
                    }
                }
                if needs(*b) {
                    let gb = slot(grads, *b, bv.len());
                    reduce_broadcast(*bc, cols, g.iter().zip(av).map(|(&x, &y)| x * y), gb);
                }
            }
            Op::Scale { a, factor } => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *factor);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if needs(p) {
                        let gp = slot(grads, p, len);
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(x, &y)| *x = *x + y);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if needs(p) {
                        let gp = slot(grads, p, rows * pc);
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] = gp[r * pc + c] + g[r * total + col + c];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let cols = av.cols();
                let ga = slot(grads, *a, av.len());
                let base = start * cols;
                for (i, &y) in g.iter().enumerate() {
                    ga[base + i] = ga[base + i] + y;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let cols = av.cols();
                let len = node.value.cols();
                let ga = slot(grads, *a, av.len());
                for r in 0..node.value.rows() {
                    for c in 0..len {
                        let idx = r * cols + start + c;
                        ga[idx] = ga[idx] + g[r * len + c];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let gt = slot(grads, *table, tv.len());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] = gt[id * cols + c] + g[r * cols + c];
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = node.value.cols();
                let rows = node.value.rows();
                let gam = self.value(*gamma).data();
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, cols);
                    for i in 0..rows * cols {
                        gg[i % cols] = gg[i % cols] + g[i] * xhat[i];
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, cols);
                    for i in 0..rows * cols {
                        gb[i % cols] = gb[i % cols] + g[i];
                    }
                }
                if needs(*x) {
                    let n = T::lit(cols as f64);
                    let gx = slot(grads, *x, rows * cols);
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = g[base + c] * gam[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[base + c];
                        }
                        mean_d = mean_d / n;
                        mean_dx = mean_dx / n;
                        for c in 0..cols {
                            let d = g[base + c] * gam[c];
                            gx[base + c] =
                                gx[base + c] + rstd[r] * (d - mean_d - xhat[base + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let k = T::lit(GELU_K);
                let c = T::lit(GELU_C);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    let v = xv[i];
                    let t = (k * (v + c * v * v * v)).tanh();
                    let d = half * (T::one() + t)
                        + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
                    gx[i] = gx[i] + g[i] * d;
                }
            }
            Op::Sigmoid { x } => {
                let s = node.value.data();
                let gx = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * s[i] * (T::one() - s[i]);
                }
            }
            Op::Softmax { x } => {
                let cols = node.value.cols();
                let s = node.value.data();
                let gx = slot(grads, *x, g.len());
                for r in 0..node.value.rows() {
                    let base = r * cols;
                    let dot: T = (0..cols).map(|c| g[base + c] * s[base + c]).sum();
                    for c in 0..cols {
                        gx[base + c] = gx[base + c] + s[base + c] * (g[base + c] - dot);
                    }
                }
            }
            Op::BiasedSoftmax { x, bias, bc } => {
                let cols = node.value.cols();
                let s = node.value.data();
                let mut dz = vec![T::zero(); g.len()];
                for r in 0..node.value.rows() {
                    let base = r * cols;
                    let dot: T = (0..cols).map(|c| g[base + c] * s[base + c]).sum();
                    for c in 0..cols {
                        dz[base + c] = s[base + c] * (g[base + c] - dot);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    gx.iter_mut().zip(&dz).for_each(|(a, &b)| *a = *a + b);
                }
                if needs(*bias) {
                    let blen = self.value(*bias).len();
                    let gb = slot(grads, *bias, blen);
                    reduce_broadcast(*bc, cols, dz.into_iter(), gb);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                let cols = self.value(*logits).cols();
                let gl = slot(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let w = g[0] * weights[r] / *total_weight;
                    for c in 0..cols {
                        let onehot = if c == t { T::one() } else { T::zero() };
                        gl[r * cols + c] = gl[r * cols + c] + w * (probs[r * cols + c] - onehot);
                    }
                }
            }
            Op::L1 { a, target } => {
                let av = self.value(*a).data();
                let ga = slot(grads, *a, av.len());
                for (i, (&x, &y)) in av.iter().zip(target.data()).enumerate() {
                    let d = x - y;
                    let s = if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    };
                    ga[i] = ga[i] + g[0] * s;
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                let ga = slot(grads, *a, len);
                ga.iter_mut().for_each(|x| *x = *x + g[0]);
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let share = g[0] / T::lit(len as f64);
                let ga = slot(grads, *a, len);
                ga.iter_mut().for_each(|x| *x = *x + share);
            }
            Op::Giou { a, target } => {
                let av = self.value(*a).data();
                let (_, d) = giou_with_grad([av[0], av[1], av[2], av[3]], *target);
                let ga = slot(grads, *a, 4);
                for i in 0..4 {
                    ga[i] = ga[i] + g[0] * d[i];
                }
            }
        }
    }
}

fn as_matrix<T: Real>(t: Tensor<T>) -> Tensor<T> {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same element count")
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn reduce_broadcast<T: Real>(bc: Broadcast, cols: usize, g: impl Iterator<Item = T>, out: &mut [T]) {
    for (i, v) in g.enumerate() {
        let j = match bc {
            Broadcast::Same => i,
            Broadcast::Row => i % cols,
            Broadcast::Col => i / cols,
            Broadcast::Scalar => 0,
        };
        out[j] = out[j] + v;
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// GIoU of centre-form boxes and its gradient w.r.t. the first box.
/// Degenerate (zero-area union or enclosure) inputs give 0 with zero gradient.
pub(crate) fn giou_with_grad<T: Real>(p: [T; 4], t: [T; 4]) -> (T, [T; 4]) {
    let half = T::lit(0.5);
    let zero = T::zero();
    let one = T::one();
    let (x1, x2) = (p[0] - half * p[2], p[0] + half * p[2]);
    let (y1, y2) = (p[1] - half * p[3], p[1] + half * p[3]);
    let (tx1, tx2) = (t[0] - half * t[2], t[0] + half * t[2]);
    let (ty1, ty2) = (t[1] - half * t[3], t[1] + half * t[3]);

    // Each "active" flag is d(term)/d(own coordinate) ∈ {0, 1}.
    let ix_hi_own = x2 <= tx2;
    let ix_lo_own = x1 >= tx1;
    let iy_hi_own = y2 <= ty2;
    let iy_lo_own = y1 >= ty1;
    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let iw = iw_raw.max(zero);
    let ih = ih_raw.max(zero);
    let inter = iw * ih;

    let area_p = (x2 - x1) * (y2 - y1);
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;

    let ex_hi_own = x2 >= tx2;
    let ex_lo_own = x1 <= tx1;
    let ey_hi_own = y2 >= ty2;
    let ey_lo_own = y1 <= ty1;
    let ew = x2.max(tx2) - x1.min(tx1);
    let eh = y2.max(ty2) - y1.min(ty1);
    let enclose = ew * eh;

    if union <= zero || enclose <= zero {
        return (zero, [zero; 4]);
    }
    let g = inter / union - (enclose - union) / enclose;

    let d_inter = one / union;
    let d_union = -inter / (union * union) + one / enclose;
    let d_enclose = -union / (enclose * enclose);
    // union = area_p + area_t − inter
    let d_i_total = d_inter - d_union;
    let d_area_p = d_union;

    let flag = |b: bool| if b { one } else { zero };
    // ∂iw/∂x2, ∂iw/∂x1 (zero when the overlap is clamped)
    let (diw_dx2, diw_dx1) = if iw_raw > zero { (flag(ix_hi_own), -flag(ix_lo_own)) } else { (zero, zero) };
    let (dih_dy2, dih_dy1) = if ih_raw > zero { (flag(iy_hi_own), -flag(iy_lo_own)) } else { (zero, zero) };
    let (dew_dx2, dew_dx1) = (flag(ex_hi_own), -flag(ex_lo_own));
    let (deh_dy2, deh_dy1) = (flag(ey_hi_own), -flag(ey_lo_own));

    let gx2 = d_i_total * ih * diw_dx2 + d_enclose * eh * dew_dx2;
    let gx1 = d_i_total * ih * diw_dx1 + d_enclose * eh * dew_dx1;
    let gy2 = d_i_total * iw * dih_dy2 + d_enclose * ew * deh_dy2;
    let gy1 = d_i_total * iw * dih_dy1 + d_enclose * ew * deh_dy1;

    // area_p = w·h directly in centre form
    let (w, h) = (x2 - x1, y2 - y1);
    let d_cx = gx1 + gx2;
    let d_cy = gy1 + gy2;
    let d_w = half * (gx2 - gx1) + d_area_p * h;
    let d_h = half * (gy2 - gy1) + d_area_p * w;
    (g, [d_cx, d_cy, d_w, d_h])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, name: &str, rows: usize, cols: usize, seed: u64) -> Var {
        let mut rng = crate::rng::XorShift64::new(seed);
        let t = Tensor::from_fn(rows, cols, |_, _| rng.uniform(-1.0, 1.0));
        tape.param(name, &t)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, "p", 3, 4, 1);
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get("p").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn squared_norm_gives_two_p() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, "p", 2, 5, 2);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        let pv = tape.value(p).clone();
        for (gv, v) in g.get("p").unwrap().data().iter().zip(pv.data()) {
            assert!((gv - 2.0 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, "p", 2, 2, 3);
        assert!(matches!(tape.backward(p), Err(NumericsError::Usage(_))));
    }

    #[test]
    fn param_registration_is_idempotent() {
        let mut tape = Tape::<f32>::new();
        let t = Tensor::zeros(&[2, 2]);
        let a = tape.param("w", &t);
        let b = tape.param("w", &t);
        assert_eq!(a, b);
        assert_eq!(tape.params().len(), 1);
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(1e300));
        assert!(matches!(tape.mul(a, a), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn broadcast_shape_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn giou_known_values() {
        // corners (0,0,2,2) vs (1,1,3,3)
        let (g, _) = giou_with_grad::<f64>([1.0, 1.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0]);
        assert!((g - (1.0 / 7.0 - 2.0 / 9.0)).abs() < 1e-15);
        let (g, _) = giou_with_grad::<f64>([0.5, 0.5, 1.0, 1.0], [9.5, 0.5, 1.0, 1.0]);
        assert!((g + 0.8).abs() < 1e-15);
    }
}

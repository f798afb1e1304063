//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Graph`] is an append-only tape of primitive operations. Forward values
//! are computed eagerly as ops are recorded; [`Graph::backward`] replays the
//! tape in reverse and accumulates gradients into every tensor that requires
//! them. One graph per training step; graphs are cheap to build and drop.
//!
//! Scalars are 1x1 tensors. The only broadcasting is scalar-against-tensor
//! (plus an explicit row-bias op for dense layers).

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddScalar { a: usize, scalar: usize },
    Mul(usize, usize),
    MulScalar { a: usize, scalar: usize },
    Matmul(usize, usize),
    Relu(usize),
    AddBias { a: usize, bias: usize },
    ConcatRows(usize, usize),
    MaxOverRows { a: usize, argmax: Vec<usize> },
    MeanOverRows(usize),
    Sum(usize),
    ScaleConst { a: usize, factor: f64 },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
}

impl Node {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool) -> Tensor {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, values, grad: None, needs_grad });
        Tensor { id: self.nodes.len() - 1 }
    }

    fn node(&self, t: Tensor) -> &Node {
        &self.nodes[t.id]
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, rows: usize, cols: usize, values: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: vec![rows, cols],
                right: vec![values.len()],
            });
        }
        Ok(self.push(Op::Leaf, rows, cols, values, requires_grad))
    }

    /// Constant scalar leaf (no gradient).
    pub fn scalar(&mut self, value: f64) -> Tensor {
        self.push(Op::Leaf, 1, 1, vec![value], false)
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        let n = self.node(t);
        (n.rows, n.cols)
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        &self.node(t).values
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        self.node(t).values[0]
    }

    /// Gradient of the last `backward` call, if this tensor took part.
    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.node(t).grad.as_deref()
    }

    fn is_scalar(&self, t: Tensor) -> bool {
        let n = self.node(t);
        n.rows == 1 && n.cols == 1
    }

    /// Elementwise addition; a 1x1 operand broadcasts against the other side.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let needs = self.needs(a.id) || self.needs(b.id);
        if ar == br && ac == bc {
            let values: Vec<f64> = self
                .node(a)
                .values
                .iter()
                .zip(&self.node(b).values)
                .map(|(x, y)| x + y)
                .collect();
            Ok(self.push(Op::Add(a.id, b.id), ar, ac, values, needs))
        } else if self.is_scalar(b) {
            let s = self.scalar_value(b);
            let values: Vec<f64> = self.node(a).values.iter().map(|x| x + s).collect();
            Ok(self.push(Op::AddScalar { a: a.id, scalar: b.id }, ar, ac, values, needs))
        } else if self.is_scalar(a) {
            let s = self.scalar_value(a);
            let values: Vec<f64> = self.node(b).values.iter().map(|x| x + s).collect();
            Ok(self.push(Op::AddScalar { a: b.id, scalar: a.id }, br, bc, values, needs))
        } else {
            Err(Error::ShapeMismatch { op: "add", left: vec![ar, ac], right: vec![br, bc] })
        }
    }

    /// Elementwise product; a 1x1 operand broadcasts against the other side.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let needs = self.needs(a.id) || self.needs(b.id);
        if ar == br && ac == bc {
            let values: Vec<f64> = self
                .node(a)
                .values
                .iter()
                .zip(&self.node(b).values)
                .map(|(x, y)| x * y)
                .collect();
            Ok(self.push(Op::Mul(a.id, b.id), ar, ac, values, needs))
        } else if self.is_scalar(b) {
            let s = self.scalar_value(b);
            let values: Vec<f64> = self.node(a).values.iter().map(|x| x * s).collect();
            Ok(self.push(Op::MulScalar { a: a.id, scalar: b.id }, ar, ac, values, needs))
        } else if self.is_scalar(a) {
            let s = self.scalar_value(a);
            let values: Vec<f64> = self.node(b).values.iter().map(|x| x * s).collect();
            Ok(self.push(Op::MulScalar { a: b.id, scalar: a.id }, br, bc, values, needs))
        } else {
            Err(Error::ShapeMismatch { op: "mul", left: vec![ar, ac], right: vec![br, bc] })
        }
    }

    /// Matrix product: (M x K) @ (K x N) -> (M x N).
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::ShapeMismatch { op: "matmul", left: vec![m, ka], right: vec![kb, n] });
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        let av = &self.node(a).values;
        let bv = &self.node(b).values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = av[i * ka + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(self.push(Op::Matmul(a.id, b.id), m, n, out, needs))
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let needs = self.needs(a.id);
        let values: Vec<f64> = self.node(a).values.iter().map(|&x| x.max(0.0)).collect();
        self.push(Op::Relu(a.id), r, c, values, needs)
    }

    /// Row-broadcast bias: (N x D) + (1 x D).
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != c {
            return Err(Error::ShapeMismatch { op: "add_bias", left: vec![r, c], right: vec![br, bc] });
        }
        let needs = self.needs(a.id) || self.needs(bias.id);
        let bv = self.node(bias).values.clone();
        let values: Vec<f64> = self
            .node(a)
            .values
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        Ok(self.push(Op::AddBias { a: a.id, bias: bias.id }, r, c, values, needs))
    }

    /// Stack rows: (M1 x D) over (M2 x D) -> ((M1+M2) x D).
    pub fn concat_rows(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::ShapeMismatch { op: "concat_rows", left: vec![ar, ac], right: vec![br, bc] });
        }
        let needs = self.needs(a.id) || self.needs(b.id);
        let mut values = self.node(a).values.clone();
        values.extend_from_slice(&self.node(b).values);
        Ok(self.push(Op::ConcatRows(a.id, b.id), ar + br, ac, values, needs))
    }

    /// Column-wise max over rows: (N x D) -> (1 x D). The winning row index is
    /// recorded per column; ties go to the lowest row index.
    pub fn max_over_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::EmptyBatch { what: "max_over_rows" });
        }
        let needs = self.needs(a.id);
        let av = &self.node(a).values;
        let mut out = av[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let v = av[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        Ok(self.push(Op::MaxOverRows { a: a.id, argmax }, 1, c, out, needs))
    }

    /// Column-wise mean over rows: (N x D) -> (1 x D).
    pub fn mean_over_rows(&mut self, a: Tensor) -> Result<Tensor> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::EmptyBatch { what: "mean_over_rows" });
        }
        let needs = self.needs(a.id);
        let av = &self.node(a).values;
        let inv = 1.0 / r as f64;
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av[i * c + j];
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.push(Op::MeanOverRows(a.id), 1, c, out, needs))
    }

    /// Sum of all entries -> scalar.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let needs = self.needs(a.id);
        let total: f64 = self.node(a).values.iter().sum();
        self.push(Op::Sum(a.id), 1, 1, vec![total], needs)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let (r, c) = self.shape(a);
        let needs = self.needs(a.id);
        let values: Vec<f64> = self.node(a).values.iter().map(|x| x * factor).collect();
        self.push(Op::ScaleConst { a: a.id, factor }, r, c, values, needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max-subtraction. logits: (B x K), labels: B class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Tensor, labels: &[usize]) -> Result<Tensor> {
        let (b, k) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::LengthMismatch { what: "cross-entropy labels", left: labels.len(), right: b });
        }
        if b == 0 {
            return Err(Error::EmptyBatch { what: "softmax_cross_entropy" });
        }
        for &label in labels {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        let needs = self.needs(logits.id);
        let lv = &self.node(logits).values;
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for row in 0..b {
            let slice = &lv[row * k..(row + 1) * k];
            let max = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &x) in slice.iter().enumerate() {
                let e = (x - max).exp();
                probs[row * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[row * k + j] /= denom;
            }
            // -log p = log(denom) - (x_label - max)
            loss += denom.ln() - (slice[labels[row]] - max);
        }
        loss /= b as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits: logits.id, labels: labels.to_vec(), probs },
            1,
            1,
            vec![loss],
            needs,
        ))
    }

    /// Backpropagate from a scalar loss. Gradients accumulate additively
    /// across all uses of a tensor; tape order is reverse append order.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        let n = self.node(loss);
        if n.rows != 1 || n.cols != 1 {
            return Err(Error::NonScalarLoss { shape: vec![n.rows, n.cols] });
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad { Some(vec![0.0; node.len()]) } else { None };
        }
        if !self.nodes[loss.id].needs_grad {
            // Loss constant w.r.t. every leaf: nothing to propagate.
            return Ok(());
        }
        self.nodes[loss.id].grad.as_mut().unwrap()[0] = 1.0;

        for id in (0..=loss.id).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let out_grad = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &out_grad);
                    self.accumulate(b, &out_grad);
                }
                Op::AddScalar { a, scalar } => {
                    self.accumulate(a, &out_grad);
                    let total: f64 = out_grad.iter().sum();
                    self.accumulate(scalar, &[total]);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = out_grad.iter().zip(&self.nodes[b].values).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = out_grad.iter().zip(&self.nodes[a].values).map(|(g, v)| g * v).collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::MulScalar { a, scalar } => {
                    let s = self.nodes[scalar].values[0];
                    let ga: Vec<f64> = out_grad.iter().map(|g| g * s).collect();
                    self.accumulate(a, &ga);
                    let gs: f64 = out_grad.iter().zip(&self.nodes[a].values).map(|(g, v)| g * v).sum();
                    self.accumulate(scalar, &[gs]);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[a].rows, self.nodes[a].cols);
                    let n = self.nodes[b].cols;
                    if self.nodes[a].needs_grad {
                        // dA = dOut @ B^T
                        let bv = &self.nodes[b].values;
                        let mut ga = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = out_grad[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for kk in 0..k {
                                    ga[i * k + kk] += g * bv[kk * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &ga);
                    }
                    if self.nodes[b].needs_grad {
                        // dB = A^T @ dOut
                        let av = &self.nodes[a].values;
                        let mut gb = vec![0.0; k * n];
                        for i in 0..m {
                            for kk in 0..k {
                                let aik = av[i * k + kk];
                                if aik == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[kk * n + j] += aik * out_grad[i * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &gb);
                    }
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[a].values)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::AddBias { a, bias } => {
                    self.accumulate(a, &out_grad);
                    let c = self.nodes[bias].cols;
                    let mut gb = vec![0.0; c];
                    for row in out_grad.chunks(c) {
                        for (g, &r) in gb.iter_mut().zip(row) {
                            *g += r;
                        }
                    }
                    self.accumulate(bias, &gb);
                }
                Op::ConcatRows(a, b) => {
                    let alen = self.nodes[a].len();
                    self.accumulate(a, &out_grad[..alen]);
                    self.accumulate(b, &out_grad[alen..]);
                }
                Op::MaxOverRows { a, argmax } => {
                    let c = self.nodes[a].cols;
                    let mut ga = vec![0.0; self.nodes[a].len()];
                    for (j, &row) in argmax.iter().enumerate() {
                        ga[row * c + j] = out_grad[j];
                    }
                    self.accumulate(a, &ga);
                }
                Op::MeanOverRows(a) => {
                    let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
                    let inv = 1.0 / r as f64;
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = out_grad[j] * inv;
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::Sum(a) => {
                    let ga = vec![out_grad[0]; self.nodes[a].len()];
                    self.accumulate(a, &ga);
                }
                Op::ScaleConst { a, factor } => {
                    let ga: Vec<f64> = out_grad.iter().map(|g| g * factor).collect();
                    self.accumulate(a, &ga);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let k = self.nodes[logits].cols;
                    let b = labels.len();
                    let scale = out_grad[0] / b as f64;
                    let mut gl = probs.clone();
                    for (row, &label) in labels.iter().enumerate() {
                        gl[row * k + label] -= 1.0;
                    }
                    for g in &mut gl {
                        *g *= scale;
                    }
                    self.accumulate(logits, &gl);
                }
            }
            self.nodes[id].grad = Some(out_grad);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, grad: &[f64]) {
        if let Some(g) = self.nodes[id].grad.as_mut() {
            for (dst, src) in g.iter_mut().zip(grad) {
                *dst += src;
            }
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` must deterministically map a leaf tensor to a scalar. Returns the
/// maximum over coordinates of |analytic - central| / (|analytic| + 1e-12).
/// Only meaningful away from kinks (relu corners, max-pool ties).
pub fn finite_difference_check<F>(mut f: F, values: &[f64], rows: usize, cols: usize, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, Tensor) -> Result<Tensor>,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(rows, cols, values.to_vec(), true)?;
        let out = f(&mut g, x)?;
        g.backward(out)?;
        g.grad(x).expect("leaf requires grad").to_vec()
    };

    let eval = |vals: &[f64], f: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(rows, cols, vals.to_vec(), false)?;
        let out = f(&mut g, x)?;
        Ok(g.scalar_value(out))
    };

    let mut worst = 0.0f64;
    let mut probe = values.to_vec();
    for i in 0..values.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = eval(&probe, &mut f)?;
        probe[i] = orig - step;
        let minus = eval(&probe, &mut f)?;
        probe[i] = orig;
        let fd = (plus - minus) / (2.0 * step);
        let rel = (analytic[i] - fd).abs() / (analytic[i].abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

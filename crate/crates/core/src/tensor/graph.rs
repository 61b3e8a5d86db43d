use super::kernels::{self, dot};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Activate(Var, Activation),
    Sigmoid(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    ReduceMean(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        lens: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// A dynamic tape recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// [`Graph::backward`] walks the tape once in reverse; a second call fails.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (outer, dim, inner) strides for reducing/concatenating along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = product(&shape[..axis]);
    let inner = product(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("graph values are finite")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    /// Cached attention probabilities of an attention node, laid out as
    /// `[batch, heads, seq, seq]`. Entries for padded keys are exactly 0.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        debug_assert_eq!(product(&shape), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf holding a copy of `t`. Gradients flow to it iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if product(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} with {} values", data.len()),
            ));
        }
        self.push(shape, data, Op::Leaf, false, "constant")
    }

    fn expect_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<&[usize]> {
        let s = self.shape(v);
        if s.len() != rank {
            return Err(Error::shape(
                op,
                format!("expected rank {rank}, got shape {s:?}"),
            ));
        }
        Ok(s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.expect_rank("matmul", a, 2)?.to_vec();
        let sb = self.expect_rank("matmul", b, 2)?.to_vec();
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.expect_rank("transpose", a, 2)?.to_vec();
        let (r, c) = (s[0], s[1]);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![c, r], out, Op::Transpose(a), rg, "transpose")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg, "add")
    }

    /// Adds a vector along the last axis of `x` (bias broadcast over rows).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let rg = self.rg(&[x, bias]);
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::AddBias(x, bias),
            rg,
            "add_bias",
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg, "scale")
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        let f = match act {
            Activation::Gelu => kernels::gelu,
            Activation::Relu => |x: f64| x.max(0.0),
        };
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(
            self.shape(a).to_vec(),
            out,
            Op::Activate(a, act),
            rg,
            "activate",
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.activate(a, Activation::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activate(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid(a), rg, "sigmoid")
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {shape:?}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; dim];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * dim * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    out[base + j * inner] = *b;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax { input: a, axis }, rg, "softmax")
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let rows = product(&shape) / n;
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            inv_std[r] = rstd;
            for j in 0..n {
                let xh = (row[j] - mean) * rstd;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let op = Op::LayerNorm {
            input: x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        self.push(shape, out, op, rg, "layer_norm")
    }

    /// Selects rows of a 2-D table (embedding lookup / row gather).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let s = self.expect_rank("embedding_lookup", table, 2)?.to_vec();
        let (n_rows, d) = (s[0], s[1]);
        if let Some(bad) = rows.iter().find(|&&r| r >= n_rows) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("row {bad} out of range for table {s:?}"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let op = Op::Gather {
            table,
            rows: rows.to_vec(),
        };
        self.push(vec![rows.len(), d], out, op, rg, "embedding_lookup")
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{base:?} with {s:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(product(&shape));
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(inputs);
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push(shape, out, op, rg, "concat")
    }

    /// Copies `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let src_shape = self.shape(a).to_vec();
        if axis >= src_shape.len() || start >= end || end > src_shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {end}) on axis {axis} of {src_shape:?}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&src_shape, axis);
        let width = (end - start) * inner;
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let off = o * dim * inner + start * inner;
            out.extend_from_slice(&src[off..off + width]);
        }
        let mut shape = src_shape;
        shape[axis] = end - start;
        let rg = self.rg(&[a]);
        self.push(
            shape,
            out,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
            "slice",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if product(shape) != self.data(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} to {shape:?}", self.shape(a)),
            ));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape.to_vec(), data, Op::Reshape(a), rg, "reshape")
    }

    /// Mean over every element, producing a scalar.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let src = self.data(a);
        if src.is_empty() {
            return Err(Error::shape("reduce_mean", "empty input"));
        }
        let mean = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![mean], Op::ReduceMean(a), rg, "reduce_mean")
    }

    /// Per-row softmax cross-entropy of `[rows, classes]` logits, via
    /// log-sum-exp. Output has shape `[rows]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.expect_rank("cross_entropy", logits, 2)?.to_vec();
        let (rows, classes) = (s[0], s[1]);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::invalid(format!(
                "cross_entropy: target {t} out of range for {classes} classes"
            )));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; rows * classes];
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * classes..(r + 1) * classes];
            let lse = kernels::log_sum_exp(row);
            out[r] = lse - row[targets[r]];
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropyRows {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(vec![rows], out, op, rg, "cross_entropy")
    }

    /// Scalar cross-entropy of a single logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.data(logits).len();
        let row = self.reshape(logits, &[1, n])?;
        let ce = self.cross_entropy_rows(row, &[target])?;
        self.reshape(ce, &[])
    }

    /// Elementwise binary cross-entropy of logits against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if targets.len() != self.data(logits).len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!(
                    "{} targets for shape {:?}",
                    targets.len(),
                    self.shape(logits)
                ),
            ));
        }
        let out = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &t)| kernels::bce_with_logit(z, t))
            .collect();
        let rg = self.rg(&[logits]);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.to_vec(),
        };
        self.push(self.shape(logits).to_vec(), out, op, rg, "bce_with_logits")
    }

    /// Multi-head scaled dot-product attention over a padded batch.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d_model]`, sequence `b` occupying rows
    /// `b * seq .. (b + 1) * seq`. Only the first `lens[b]` keys of sequence
    /// `b` are attended; padded keys get exactly zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let s = self.expect_rank("attention", q, 2)?.to_vec();
        if self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("q {s:?}, k {:?}, v {:?}", self.shape(k), self.shape(v)),
            ));
        }
        let batch = lens.len();
        let (rows, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 || rows != batch * seq {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows, d {d}, {heads} heads, batch {batch} x seq {seq}"),
            ));
        }
        if lens.iter().any(|&l| l == 0 || l > seq) {
            return Err(Error::shape(
                "attention",
                format!("lengths {lens:?} for seq {seq}"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            let len = lens[b];
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + col..][..dh];
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    for j in 0..len {
                        let kj = &kd[(b * seq + j) * d + col..][..dh];
                        p[j] = dot(qi, kj) * scale;
                    }
                    kernels::softmax_in_place(&mut p[..len]);
                    let o = &mut out[(b * seq + i) * d + col..][..dh];
                    for j in 0..len {
                        let vj = &vd[(b * seq + j) * d + col..][..dh];
                        let w = p[j];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq,
            heads,
            lens: lens.to_vec(),
            probs,
        };
        self.push(s, out, op, rg, "attention")
    }

    /// Reverse pass from a scalar. Consumes the tape: a second call errors.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward(
                "graph already consumed; run a new forward pass".into(),
            ));
        }
        if self.data(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads)?;
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        // Accumulates into the gradient slot of `v` if it participates.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
                f(slot);
            }
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |g| kernels::matmul_nt_acc(gout, bd, g, m, n, k));
                acc(*b, &mut |g| kernels::matmul_tn_acc(ad, gout, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(*a, &mut |g| {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| {
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y)
                    });
                }
            }
            Op::AddBias(x, bias) => {
                let n = nodes[bias.0].data.len();
                acc(*x, &mut |g| {
                    g.iter_mut().zip(gout).for_each(|(a, b)| *a += b)
                });
                acc(*bias, &mut |g| {
                    for row in gout.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bd[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y * s)
                });
            }
            Op::Activate(a, act) => {
                let xd = &nodes[a.0].data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        let d = match act {
                            Activation::Gelu => kernels::gelu_grad(xd[i]),
                            Activation::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        g[i] += gout[i] * d;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.data;
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = &node.data;
                let (outer, dim, inner) = split_axis(&node.shape, *axis);
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * dim * inner + i;
                            let s: f64 = (0..dim)
                                .map(|j| y[base + j * inner] * gout[base + j * inner])
                                .sum();
                            for j in 0..dim {
                                let p = base + j * inner;
                                g[p] += y[p] * (gout[p] - s);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let n = nodes[gamma.0].data.len();
                let gm = &nodes[gamma.0].data;
                let rows = inv_std.len();
                acc(*input, &mut |g| {
                    let mut dxh = vec![0.0; n];
                    for r in 0..rows {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let go = &gout[r * n..(r + 1) * n];
                        for j in 0..n {
                            dxh[j] = go[j] * gm[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dot(&dxh, xh) / n as f64;
                        for j in 0..n {
                            g[r * n + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |g| {
                    for r in 0..rows {
                        for j in 0..n {
                            g[j] += gout[r * n + j] * normalized[r * n + j];
                        }
                    }
                });
                acc(*beta, &mut |g| {
                    for row in gout.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Gather { table, rows } => {
                let d = nodes[table.0].shape[1];
                acc(*table, &mut |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &gout[i * d..(i + 1) * d];
                        g[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(&node.shape, *axis);
                let row_width = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = nodes[v.0].shape[*axis] * inner;
                    acc(v, &mut |g| {
                        for o in 0..outer {
                            let src = &gout[o * row_width + offset..][..chunk];
                            g[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, dim, inner) = split_axis(&nodes[input.0].shape, *axis);
                let width = node.shape[*axis] * inner;
                acc(*input, &mut |g| {
                    for o in 0..outer {
                        let off = o * dim * inner + start * inner;
                        g[off..off + width]
                            .iter_mut()
                            .zip(&gout[o * width..(o + 1) * width])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |g| {
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y)
                });
            }
            Op::ReduceMean(a) => {
                let n = nodes[a.0].data.len() as f64;
                let share = gout[0] / n;
                acc(*a, &mut |g| g.iter_mut().for_each(|x| *x += share));
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                probs,
            } => {
                let classes = nodes[logits.0].shape[1];
                acc(*logits, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        let go = gout[r];
                        if go == 0.0 {
                            continue;
                        }
                        for j in 0..classes {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * classes + j] += go * (probs[r * classes + j] - onehot);
                        }
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = &nodes[logits.0].data;
                acc(*logits, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (kernels::sigmoid(z[i]) - targets[i]);
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                lens,
                probs,
            } => {
                let d = nodes[q.0].shape[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (&nodes[q.0].data, &nodes[k.0].data, &nodes[v.0].data);
                let mut dq = vec![0.0; qd.len()];
                let mut dk = vec![0.0; kd.len()];
                let mut dv = vec![0.0; vd.len()];
                let mut dp = vec![0.0; *seq];
                for b in 0..*batch {
                    let len = lens[b];
                    for h in 0..*heads {
                        let col = h * dh;
                        for i in 0..*seq {
                            let p = &probs[((b * heads + h) * seq + i) * seq..][..len];
                            let go = &gout[(b * seq + i) * d + col..][..dh];
                            for j in 0..len {
                                let vrow = (b * seq + j) * d + col;
                                dp[j] = dot(go, &vd[vrow..vrow + dh]);
                                let dvj = &mut dv[vrow..vrow + dh];
                                for (x, &y) in dvj.iter_mut().zip(go) {
                                    *x += p[j] * y;
                                }
                            }
                            let s = dot(&p[..len], &dp[..len]);
                            let qrow = (b * seq + i) * d + col;
                            for j in 0..len {
                                let ds = p[j] * (dp[j] - s) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * seq + j) * d + col;
                                for c in 0..dh {
                                    dq[qrow + c] += ds * kd[krow + c];
                                    dk[krow + c] += ds * qd[qrow + c];
                                }
                            }
                        }
                    }
                }
                for (var, src) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc(var, &mut |g| {
                        g.iter_mut().zip(src.iter()).for_each(|(a, b)| *a += b)
                    });
                }
            }
        }
        Ok(())
    }
}

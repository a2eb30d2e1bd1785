//! Reverse-mode gradient computation over a fixed primitive set.
//!
//! A [`Graph`] records the forward pass eagerly: every builder method
//! computes its output value at call time and pushes one node. `backward`
//! replays the tape in reverse, accumulating gradients into every parameter
//! leaf reachable from the loss. The primitive set is exactly what the
//! transformer needs (matmul, add, elementwise mul, softmax, layer norm,
//! GELU, embedding lookup, mean/sum reduction, cross-entropy) plus free
//! shape plumbing; each primitive is finite-difference-tested individually.

use super::store::{GradMap, NamedParamStore};
use super::{Tensor, TensorError};

/// Epsilon inside the layer-norm variance square root.
pub const LN_EPS: f64 = 1e-5;

// tanh-approximation GELU constants: sqrt(2/pi) and the cubic coefficient
const GELU_C0: f64 = 0.7978845608028654;
const GELU_C1: f64 = 0.044715;

/// Handle to one node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(String),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    TransposeLast(NodeId),
    SwapAxes12(NodeId),
    Reshape(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    SumAll(NodeId),
    MeanAll(NodeId),
    MeanAxis1(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>> },
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Param(_) => "param",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MatMul(..) => "matmul",
        Op::BatchMatMul(..) => "batch_matmul",
        Op::TransposeLast(_) => "transpose_last",
        Op::SwapAxes12(_) => "swap_axes_1_2",
        Op::Reshape(_) => "reshape",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Embedding { .. } => "embedding",
        Op::SumAll(_) => "sum",
        Op::MeanAll(_) => "mean",
        Op::MeanAxis1(_) => "mean_axis1",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass recorded as a tape. Built fresh per batch and discarded
/// after `backward`; parameters are copied out of the store at `param` time,
/// so the graph never aliases the store.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf (no gradient is reported for it).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// A parameter leaf loaded by name; its gradient lands in the `GradMap`
    /// under the same name. Loading the same parameter twice is allowed and
    /// the gradients accumulate.
    pub fn param(&mut self, store: &NamedParamStore, name: &str) -> NodeId {
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .clone();
        self.push(t, Op::Param(name.to_owned()))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a vector `b` of length d to every row of `x` (shape [..., d]).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let d = *vx.shape().last().expect("add_bias on scalar");
        assert_eq!(vb.shape(), &[d], "bias must have shape [{d}]");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(vb.data()) {
                *v += bv;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::AddBias(x, b))
    }

    /// Elementwise product of two same-shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Scale(a, c))
    }

    /// 2-D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-D, got {:?}", va.shape());
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D, got {:?}", vb.shape());
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b))
    }

    /// Batched matrix product [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 3, "batch_matmul lhs must be 3-D");
        assert_eq!(vb.shape().len(), 3, "batch_matmul rhs must be 3-D");
        let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let (bs2, k2, n) = (vb.shape()[0], vb.shape()[1], vb.shape()[2]);
        assert_eq!(bs, bs2, "batch_matmul batch dims {bs} vs {bs2}");
        assert_eq!(k, k2, "batch_matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            matmul_acc(
                &va.data()[i * m * k..(i + 1) * m * k],
                &vb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(Tensor::from_vec(&[bs, m, n], out), Op::BatchMatMul(a, b))
    }

    /// Swaps the last two axes of a tensor with ndim >= 2.
    pub fn transpose_last(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = transpose_last_tensor(va);
        self.push(out, Op::TransposeLast(a))
    }

    /// Swaps axes 1 and 2 of a 4-D tensor: [a,b,c,d] -> [a,c,b,d].
    pub fn swap_axes_1_2(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let out = swap_axes_1_2_tensor(va);
        self.push(out, Op::SwapAxes12(a))
    }

    /// Reinterprets the data under a new shape with equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let out = self.nodes[a.0].value.reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|&x| gelu_fwd(x)).collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let d = *va.shape().last().expect("softmax on scalar");
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::from_vec(va.shape(), data);
        self.push(out, Op::Softmax(a))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = *vx.shape().last().expect("layer_norm on scalar");
        assert_eq!(vg.shape(), &[d], "layer_norm gain must have shape [{d}]");
        assert_eq!(vb.shape(), &[d], "layer_norm bias must have shape [{d}]");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mu, inv) = ln_row_stats(row);
            for (v, (g, b)) in row.iter_mut().zip(vg.data().iter().zip(vb.data())) {
                *v = (*v - mu) * inv * g + b;
            }
        }
        let out = Tensor::from_vec(vx.shape(), data);
        self.push(out, Op::LayerNorm { x, gain, bias })
    }

    /// Row lookup: `out[r, :] = table[ids[r], :]`, output shape [len(ids), d].
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = &self.nodes[table.0].value;
        assert_eq!(vt.shape().len(), 2, "embedding table must be 2-D");
        let (rows, d) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "embedding id {id} out of range (table has {rows} rows)");
            data.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data);
        self.push(out, Op::Embedding { table, ids: ids.to_vec() })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data().iter().sum();
        let out = Tensor::scalar(s / v.numel() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Mean over axis 1 of a 3-D tensor: [b,l,d] -> [b,d].
    pub fn mean_axis1(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape().len(), 3, "mean_axis1 expects 3-D input");
        let (b, l, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let mut out = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..l {
                let row = &va.data()[(i * l + j) * d..(i * l + j + 1) * d];
                for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                    *o += v;
                }
            }
            for o in out[i * d..(i + 1) * d].iter_mut() {
                *o /= l as f64;
            }
        }
        self.push(Tensor::from_vec(&[b, d], out), Op::MeanAxis1(a))
    }

    /// Mean cross-entropy between rows of `logits` ([n, c]) and integer
    /// targets. Rows with a `None` target are excluded from the mean; at
    /// least one row must have a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let vl = &self.nodes[logits.0].value;
        assert_eq!(vl.shape().len(), 2, "cross_entropy expects 2-D logits");
        let (n, c) = (vl.shape()[0], vl.shape()[1]);
        assert_eq!(targets.len(), n, "one target per logit row");
        let m = targets.iter().filter(|t| t.is_some()).count();
        assert!(m > 0, "cross_entropy needs at least one labeled row");
        let mut total = 0.0;
        for (row, t) in vl.data().chunks(c).zip(targets) {
            if let Some(t) = t {
                assert!(*t < c, "target {t} out of range for {c} classes");
                total += log_sum_exp(row) - row[*t];
            }
        }
        let out = Tensor::scalar(total / m as f64);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec() })
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every
    /// parameter leaf it depends on. Parameters the loss does not reach are
    /// absent from the returned map.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, TensorError> {
        let loss_val = &self.nodes[loss.0].value;
        if !loss_val.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_val.shape().to_vec()));
        }
        // any non-finite forward value poisons the whole pass; report the
        // earliest node so the fault is near its source
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(TensorError::NumericFault { node: i, op: op_name(&node.op).to_owned() });
            }
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads[i] {
                    let t = Tensor::from_vec(node.value.shape(), g.clone());
                    if !t.all_finite() {
                        return Err(TensorError::NumericFault {
                            node: i,
                            op: format!("grad of {name}"),
                        });
                    }
                    out.accumulate(name, &t);
                }
            }
        }
        Ok(out)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], target: NodeId, contribution: &[f64]) {
        let slot = &mut grads[target.0];
        match slot {
            Some(existing) => {
                for (a, b) in existing.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                Self::accumulate(grads, *a, g);
                Self::accumulate(grads, *b, g);
            }
            Op::AddBias(x, b) => {
                Self::accumulate(grads, *x, g);
                let d = self.nodes[b.0].value.numel();
                let mut gb = vec![0.0; d];
                for row in g.chunks(d) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *b, &gb);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let ga: Vec<f64> = g.iter().zip(vb).map(|(gi, y)| gi * y).collect();
                let gb: Vec<f64> = g.iter().zip(va).map(|(gi, x)| gi * x).collect();
                Self::accumulate(grads, *a, &ga);
                Self::accumulate(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                Self::accumulate(grads, *a, &ga);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k * n];
                matmul_bwd(va.data(), vb.data(), g, &mut ga, &mut gb, m, k, n);
                Self::accumulate(grads, *a, &ga);
                Self::accumulate(grads, *b, &gb);
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (bs, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    matmul_bwd(
                        &va.data()[i * m * k..(i + 1) * m * k],
                        &vb.data()[i * k * n..(i + 1) * k * n],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut ga[i * m * k..(i + 1) * m * k],
                        &mut gb[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                Self::accumulate(grads, *a, &ga);
                Self::accumulate(grads, *b, &gb);
            }
            Op::TransposeLast(a) => {
                let gt = transpose_last_tensor(&Tensor::from_vec(node.value.shape(), g.to_vec()));
                Self::accumulate(grads, *a, gt.data());
            }
            Op::SwapAxes12(a) => {
                let gt = swap_axes_1_2_tensor(&Tensor::from_vec(node.value.shape(), g.to_vec()));
                Self::accumulate(grads, *a, gt.data());
            }
            Op::Reshape(a) => {
                Self::accumulate(grads, *a, g);
            }
            Op::Gelu(a) => {
                let va = self.nodes[a.0].value.data();
                let ga: Vec<f64> = g.iter().zip(va).map(|(gi, &x)| gi * gelu_bwd(x)).collect();
                Self::accumulate(grads, *a, &ga);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), or) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((o, y), g) in or.iter_mut().zip(yr).zip(gr) {
                        *o = y * (g - dot);
                    }
                }
                Self::accumulate(grads, *a, &ga);
            }
            Op::LayerNorm { x, gain, bias } => {
                let vx = self.nodes[x.0].value.data();
                let vg = self.nodes[gain.0].value.data();
                let d = vg.len();
                let mut gx = vec![0.0; vx.len()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (row_idx, (xr, gr)) in vx.chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mu, inv) = ln_row_stats(xr);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mu) * inv).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(vg).map(|(g, w)| g * w).collect();
                    let mean_dxhat: f64 = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat: f64 =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let out_row = &mut gx[row_idx * d..(row_idx + 1) * d];
                    for j in 0..d {
                        out_row[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        gg[j] += gr[j] * xhat[j];
                        gb[j] += gr[j];
                    }
                }
                Self::accumulate(grads, *x, &gx);
                Self::accumulate(grads, *gain, &gg);
                Self::accumulate(grads, *bias, &gb);
            }
            Op::Embedding { table, ids } => {
                let vt = &self.nodes[table.0].value;
                let d = vt.shape()[1];
                let mut gt = vec![0.0; vt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *table, &gt);
            }
            Op::SumAll(a) => {
                let n = self.nodes[a.0].value.numel();
                Self::accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.numel();
                Self::accumulate(grads, *a, &vec![g[0] / n as f64; n]);
            }
            Op::MeanAxis1(a) => {
                let va = &self.nodes[a.0].value;
                let (b, l, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let mut ga = vec![0.0; va.numel()];
                for i in 0..b {
                    for j in 0..l {
                        let dst = &mut ga[(i * l + j) * d..(i * l + j + 1) * d];
                        for (o, v) in dst.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                            *o = v / l as f64;
                        }
                    }
                }
                Self::accumulate(grads, *a, &ga);
            }
            Op::CrossEntropy { logits, targets } => {
                let vl = &self.nodes[logits.0].value;
                let c = vl.shape()[1];
                let m = targets.iter().filter(|t| t.is_some()).count() as f64;
                let scale = g[0] / m;
                let mut gl = vec![0.0; vl.numel()];
                for ((row, t), out) in vl.data().chunks(c).zip(targets).zip(gl.chunks_mut(c)) {
                    if let Some(t) = t {
                        let lse = log_sum_exp(row);
                        for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
                            let p = (v - lse).exp();
                            *o = scale * if j == *t { p - 1.0 } else { p };
                        }
                    }
                }
                Self::accumulate(grads, *logits, &gl);
            }
        }
    }
}

/// `out += a @ b` for row-major [m,k] x [k,n].
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Gradients of `c = a @ b`: `ga += g @ b^T`, `gb += a^T @ g`.
fn matmul_bwd(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            ga[i * k + p] += s;
        }
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for (o, gv) in gbrow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose_last_tensor(t: &Tensor) -> Tensor {
    let nd = t.shape().len();
    assert!(nd >= 2, "transpose_last needs ndim >= 2");
    let (m, n) = (t.shape()[nd - 2], t.shape()[nd - 1]);
    let batch = t.numel() / (m * n);
    let mut shape = t.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    let mut data = vec![0.0; t.numel()];
    for bte in 0..batch {
        let src = &t.data()[bte * m * n..(bte + 1) * m * n];
        let dst = &mut data[bte * m * n..(bte + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    Tensor::from_vec(&shape, data)
}

fn swap_axes_1_2_tensor(t: &Tensor) -> Tensor {
    assert_eq!(t.shape().len(), 4, "swap_axes_1_2 needs a 4-D tensor");
    let (a, b, c, d) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
    let mut data = vec![0.0; t.numel()];
    for i0 in 0..a {
        for i1 in 0..b {
            for i2 in 0..c {
                let src = &t.data()[((i0 * b + i1) * c + i2) * d..((i0 * b + i1) * c + i2 + 1) * d];
                let dst_off = ((i0 * c + i2) * b + i1) * d;
                data[dst_off..dst_off + d].copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(&[a, c, b, d], data)
}

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C0 * (x + GELU_C1 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn ln_row_stats(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

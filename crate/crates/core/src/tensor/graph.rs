//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep. Gradients of
//! intermediate nodes live only for the duration of a sweep; leaf gradients
//! persist and accumulate across calls until [`Graph::zero_grad`].

use super::kernels::{self, gemm};
use super::{Array, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    SumRows(NodeId),
    Sum(NodeId),
    MaskedFill {
        x: NodeId,
        mask: Vec<bool>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Pick {
        x: NodeId,
        idx: Vec<usize>,
    },
    RowDot {
        x: NodeId,
        weights: Array,
    },
    ClampMin {
        x: NodeId,
        floor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Array,
    grad: Option<Array>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, a: &Array, b: &Array) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Array, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Array) -> NodeId {
        self.leaf(value, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `[m, n] + [n]`, the bias added to every row.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (m, n) = va.dims2("add_row")?;
        if vb.shape() != [n] {
            return Err(mismatch("add_row", va, vb));
        }
        let mut data = va.data().to_vec();
        for i in 0..m {
            for (x, b) in data[i * n..(i + 1) * n].iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let value = Array::new(vec![m, n], data)?;
        Ok(self.push(value, Op::AddRowBroadcast(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, _) = va.dims2("softmax_rows")?;
        let mut value = va.clone();
        for i in 0..m {
            kernels::softmax_in_place(value.row_mut(i));
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2("log_softmax_rows")?;
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            data.extend(kernels::log_softmax(va.row(i)));
        }
        let value = Array::new(vec![m, n], data)?;
        Ok(self.push(value, Op::LogSoftmaxRows(a), &[a]))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.ln()).collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.exp()).collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Exp(a), &[a])
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let vt = self.value(table);
        let (rows, cols) = vt.dims2("gather")?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: rows,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Array::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `n`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let vx = self.value(x);
        let (m, n) = vx.dims2("layer_norm")?;
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.shape() != [n] {
            return Err(mismatch("layer_norm", vx, vg));
        }
        if vb.shape() != [n] {
            return Err(mismatch("layer_norm", vx, vb));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Array::new(vec![m, n], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2("transpose")?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let value = Array::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let (m, _) = va.dims2("sum_rows")?;
        let data = (0..m).map(|i| va.row(i).iter().sum()).collect();
        let value = Array::new(vec![m], data)?;
        Ok(self.push(value, Op::SumRows(a), &[a]))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().sum();
        self.push(Array::scalar(total), Op::Sum(a), &[a])
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: NodeId, mask: &[bool], fill: f64) -> Result<NodeId> {
        let va = self.value(a);
        if mask.len() != va.len() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                left: va.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = va
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = Array::new(va.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::MaskedFill {
                x: a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2("slice_rows")?;
        if start + len > m {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: m,
            });
        }
        let data = va.data()[start * n..(start + len) * n].to_vec();
        let value = Array::new(vec![len, n], data)?;
        Ok(self.push(value, Op::SliceRows { x: a, start }, &[a]))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2("slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&va.row(i)[start..start + len]);
        }
        let value = Array::new(vec![m, len], data)?;
        Ok(self.push(value, Op::SliceCols { x: a, start }, &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(TensorError::Empty("concat_rows"))?;
        let (_, n) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let vp = self.value(p);
            let (r, c) = vp.dims2("concat_rows")?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(*first), vp));
            }
            rows += r;
            data.extend_from_slice(vp.data());
        }
        let value = Array::new(vec![rows, n], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(TensorError::Empty("concat_cols"))?;
        let (m, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let vp = self.value(p);
            let (r, c) = vp.dims2("concat_cols")?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(*first), vp));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Array::new(vec![m, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// `out[i] = x[i, idx[i]]`.
    pub fn pick(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let (m, n) = va.dims2("pick")?;
        if idx.len() != m {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                left: va.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &k) in idx.iter().enumerate() {
            if k >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: k,
                    bound: n,
                });
            }
            data.push(va.data()[i * n + k]);
        }
        let value = Array::new(vec![m], data)?;
        Ok(self.push(
            value,
            Op::Pick {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
        ))
    }

    /// `out[i] = Σ_j weights[i, j] · x[i, j]` with `weights` held constant.
    pub fn row_dot(&mut self, a: NodeId, weights: Array) -> Result<NodeId> {
        let va = self.value(a);
        let (m, _) = va.dims2("row_dot")?;
        if weights.shape() != va.shape() {
            return Err(mismatch("row_dot", va, &weights));
        }
        let data = (0..m)
            .map(|i| {
                va.row(i)
                    .iter()
                    .zip(weights.row(i))
                    .filter(|(_, &w)| w != 0.0)
                    .map(|(x, w)| x * w)
                    .sum()
            })
            .collect();
        let value = Array::new(vec![m], data)?;
        Ok(self.push(value, Op::RowDot { x: a, weights }, &[a]))
    }

    /// `max(x, floor)` elementwise. At `x == floor` the floor branch is taken,
    /// so the gradient there is zero.
    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| if x > floor { x } else { floor })
            .collect();
        let value = Array::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::ClampMin { x: a, floor }, &[a])
    }

    /// Reverse sweep from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<(usize, Vec<f64>)> = Vec::new();

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, g, &mut grads, &mut leaf_grads);
        }

        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    node.grad = Some(Array::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(
        &self,
        id: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        leaf_grads: &mut Vec<(usize, Vec<f64>)>,
    ) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => leaf_grads.push((id, g)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.wants(*a) {
                    // dA += G · Bᵀ
                    let acc = slot(grads, *a, m * k);
                    gemm(m, n, k, &g, (n as isize, 1), vb.data(), (1, n as isize), acc, 1.0);
                }
                if self.wants(*b) {
                    // dB += Aᵀ · G
                    let acc = slot(grads, *b, k * n);
                    gemm(k, m, n, va.data(), (1, k as isize), &g, (n as isize, 1), acc, 1.0);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        add_into(slot(grads, *p, g.len()), &g);
                    }
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                if self.wants(*a) {
                    add_into(slot(grads, *a, g.len()), &g);
                }
                if self.wants(*bias) {
                    let n = self.value(*bias).len();
                    let acc = slot(grads, *bias, n);
                    for chunk in g.chunks(n) {
                        add_into(acc, chunk);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let acc = slot(grads, *a, g.len());
                    for ((s, gi), y) in acc.iter_mut().zip(&g).zip(vb.data()) {
                        *s += gi * y;
                    }
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, g.len());
                    for ((s, gi), x) in acc.iter_mut().zip(&g).zip(va.data()) {
                        *s += gi * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                let acc = slot(grads, *a, g.len());
                for (s, gi) in acc.iter_mut().zip(&g) {
                    *s += gi * f;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.shape()[1];
                let acc = slot(grads, *a, g.len());
                for ((gr, yr), ar) in g.chunks(n).zip(out.data().chunks(n)).zip(acc.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((s, gi), y) in ar.iter_mut().zip(gr).zip(yr) {
                        *s += y * (gi - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let n = out.shape()[1];
                let acc = slot(grads, *a, g.len());
                for ((gr, lr), ar) in g.chunks(n).zip(out.data().chunks(n)).zip(acc.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((s, gi), l) in ar.iter_mut().zip(gr).zip(lr) {
                        *s += gi - l.exp() * total;
                    }
                }
            }
            Op::Log(a) => {
                let va = self.value(*a);
                let acc = slot(grads, *a, g.len());
                for ((s, gi), x) in acc.iter_mut().zip(&g).zip(va.data()) {
                    *s += gi / x;
                }
            }
            Op::Exp(a) => {
                let acc = slot(grads, *a, g.len());
                for ((s, gi), y) in acc.iter_mut().zip(&g).zip(out.data()) {
                    *s += gi * y;
                }
            }
            Op::Gather { table, ids } => {
                let vt = self.value(*table);
                let cols = vt.shape()[1];
                let acc = slot(grads, *table, vt.len());
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut acc[id * cols..(id + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.shape()[1];
                let vg = self.value(*gamma).data();
                if self.wants(*gamma) {
                    let acc = slot(grads, *gamma, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((s, gi), h) in acc.iter_mut().zip(gr).zip(hr) {
                            *s += gi * h;
                        }
                    }
                }
                if self.wants(*beta) {
                    let acc = slot(grads, *beta, n);
                    for gr in g.chunks(n) {
                        add_into(acc, gr);
                    }
                }
                if self.wants(*x) {
                    let acc = slot(grads, *x, g.len());
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for (i, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * vg[j];
                            sum_d += dxhat[j];
                            sum_dh += dxhat[j] * hr[j];
                        }
                        let r = rstd[i];
                        let ar = &mut acc[i * n..(i + 1) * n];
                        for j in 0..n {
                            ar[j] += r / nf * (nf * dxhat[j] - sum_d - hr[j] * sum_dh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let acc = slot(grads, *a, g.len());
                for ((s, gi), &x) in acc.iter_mut().zip(&g).zip(va.data()) {
                    *s += gi * kernels::gelu_grad(x);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a);
                let acc = slot(grads, *a, g.len());
                for ((s, gi), &x) in acc.iter_mut().zip(&g).zip(va.data()) {
                    if x > 0.0 {
                        *s += gi;
                    }
                }
            }
            Op::Reshape(a) => add_into(slot(grads, *a, g.len()), &g),
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                // out is [m, n] = inputᵀ, input is [n, m]
                let acc = slot(grads, *a, g.len());
                for i in 0..m {
                    for j in 0..n {
                        acc[j * m + i] += g[i * n + j];
                    }
                }
            }
            Op::SumRows(a) => {
                let va = self.value(*a);
                let n = va.shape()[1];
                let acc = slot(grads, *a, va.len());
                for (ar, gi) in acc.chunks_mut(n).zip(&g) {
                    for s in ar.iter_mut() {
                        *s += gi;
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let acc = slot(grads, *a, len);
                for s in acc.iter_mut() {
                    *s += g[0];
                }
            }
            Op::MaskedFill { x, mask } => {
                let acc = slot(grads, *x, g.len());
                for ((s, gi), &m) in acc.iter_mut().zip(&g).zip(mask) {
                    if !m {
                        *s += gi;
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let n = vx.shape()[1];
                let acc = slot(grads, *x, vx.len());
                add_into(&mut acc[start * n..start * n + g.len()], &g);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let n = vx.shape()[1];
                let w = out.shape()[1];
                let acc = slot(grads, *x, vx.len());
                for (i, gr) in g.chunks(w).enumerate() {
                    add_into(&mut acc[i * n + start..i * n + start + w], gr);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.wants(*p) {
                        add_into(slot(grads, *p, len), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut col = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let w = vp.shape()[1];
                    if self.wants(*p) {
                        let acc = slot(grads, *p, vp.len());
                        for (i, ar) in acc.chunks_mut(w).enumerate() {
                            add_into(ar, &g[i * total + col..i * total + col + w]);
                        }
                    }
                    col += w;
                }
            }
            Op::Pick { x, idx } => {
                let vx = self.value(*x);
                let n = vx.shape()[1];
                let acc = slot(grads, *x, vx.len());
                for (i, (&k, gi)) in idx.iter().zip(&g).enumerate() {
                    acc[i * n + k] += gi;
                }
            }
            Op::RowDot { x, weights } => {
                let n = weights.shape()[1];
                let acc = slot(grads, *x, weights.len());
                for ((ar, wr), gi) in acc.chunks_mut(n).zip(weights.data().chunks(n)).zip(&g) {
                    for (s, w) in ar.iter_mut().zip(wr) {
                        if *w != 0.0 {
                            *s += gi * w;
                        }
                    }
                }
            }
            Op::ClampMin { x, floor } => {
                let vx = self.value(*x);
                let acc = slot(grads, *x, g.len());
                for ((s, gi), &v) in acc.iter_mut().zip(&g).zip(vx.data()) {
                    if v > *floor {
                        *s += gi;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

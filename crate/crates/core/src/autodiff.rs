//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and returns gradients for the
//! leaves that asked for them. Graphs are single-threaded and cheap to build;
//! batch parallelism happens one graph per utterance.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Conv1dGeom, Conv2dGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m, n] + [1, n]`
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Elementwise product with a constant tensor (dropout masks).
    MulConst(Var, Tensor),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Embedding(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv1dGeom,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    /// `[c, h, w] -> [h, c]` mean over the last axis.
    MeanLastAxis(Var, [usize; 3]),
    /// `[c, h, w] -> [h, c * w]`.
    FlattenChannels(Var, [usize; 3]),
    StatsPool(Var),
    SoftmaxXent(Var, usize),
    BceLogitsSum(Var, Vec<f64>),
    SqErrSum(Var, Tensor),
    CosineDistance(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Model parameters bound into a graph, indexed by [`ParamId`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects parameter gradients in store order; absent gradients become zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|&p| self.needs(p));
        self.push(value, op, needs)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies every tensor of `store` into the graph. Frozen bindings get
    /// constant leaves, so nothing downstream accumulates into them.
    pub fn bind(&mut self, store: &ParamStore, trainable: bool) -> Bound {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        assert_eq!(k, vb.rows(), "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = vec![0.0; m * n];
        gemm_nn(va.data(), vb.data(), &mut out, m, k, n);
        self.push_op(Tensor::new(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out += self.value(b);
        self.push_op(out, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        let n = out.cols();
        assert_eq!(r.len(), n, "add_row: width mismatch");
        for chunk in out.data_mut().chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push_op(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push_op(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push_op(out, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), c.len(), "mul_const: size mismatch");
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        self.push_op(out, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push_op(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push_op(out, Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_inplace(row);
        }
        self.push_op(out, Op::SoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
                out[r * total + off..r * total + off + w].copy_from_slice(v.row_slice(r));
                off += w;
            }
        }
        self.push_op(
            Tensor::new(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows: width mismatch");
            out.extend_from_slice(v.data());
            rows += v.rows();
        }
        self.push_op(
            Tensor::new(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va.row_slice(r)[start..start + len]);
        }
        self.push_op(
            Tensor::new(vec![rows, len], out),
            Op::SliceCols(a, start),
            &[a],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        assert!(start + len <= va.rows(), "slice_rows out of range");
        let out = va.data()[start * cols..(start + len) * cols].to_vec();
        self.push_op(
            Tensor::new(vec![len, cols], out),
            Op::SliceRows(a, start),
            &[a],
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push_op(out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push_op(out, Op::Reshape(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push_op(out, Op::Sum(a), &[a])
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row_slice(id));
        }
        self.push_op(
            Tensor::new(vec![ids.len(), d], out),
            Op::Embedding(table, ids.to_vec()),
            &[table],
        )
    }

    /// Stride-1 "same" convolution over time. `x: [T, c_in]`,
    /// `w: [c_out, c_in, k]`, `b: [1, c_out]`. Output `[T, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let ws = vw.shape();
        assert_eq!(ws.len(), 3, "conv1d weight must be [out, in, k]");
        let geom = Conv1dGeom {
            time: vx.rows(),
            c_in: vx.cols(),
            kernel: ws[2],
        };
        assert_eq!(ws[1], geom.c_in, "conv1d: input channel mismatch");
        let c_out = ws[0];
        let cols = geom.im2col(vx.data());
        let mut out = vec![0.0; geom.time * c_out];
        gemm_nt(
            &cols,
            vw.data(),
            &mut out,
            geom.time,
            geom.c_in * geom.kernel,
            c_out,
        );
        if let Some(b) = b {
            let vb = self.value(b);
            for row in out.chunks_mut(c_out) {
                for (o, bb) in row.iter_mut().zip(vb.data()) {
                    *o += bb;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            Tensor::new(vec![geom.time, c_out], out),
            Op::Conv1d { x, w, b, geom },
            &parents,
        )
    }

    /// Square-kernel 2-D convolution. `x: [c_in, h, w]`, `w: [c_out, c_in, k, k]`,
    /// `b: [1, c_out]`. Output `[c_out, h', w']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let xs = vx.shape();
        let ws = vw.shape();
        assert_eq!(xs.len(), 3, "conv2d input must be [c, h, w]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [out, in, k, k]");
        let geom = Conv2dGeom {
            c_in: xs[0],
            h: xs[1],
            w: xs[2],
            kernel: ws[2],
            stride,
            pad,
        };
        assert_eq!(ws[1], geom.c_in, "conv2d: input channel mismatch");
        let c_out = ws[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let n = oh * ow;
        let kk = geom.c_in * geom.kernel * geom.kernel;
        let cols = geom.im2col(vx.data());
        let mut out = vec![0.0; c_out * n];
        gemm_nn(vw.data(), &cols, &mut out, c_out, kk, n);
        if let Some(b) = b {
            let vb = self.value(b);
            for (plane, bb) in out.chunks_mut(n).zip(vb.data()) {
                plane.iter_mut().for_each(|o| *o += bb);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push_op(
            Tensor::new(vec![c_out, oh, ow], out),
            Op::Conv2d { x, w, b, geom },
            &parents,
        )
    }

    /// `[c, h, w] -> [h, c]`, averaging the last axis.
    pub fn mean_last_axis(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; h * c];
        for ci in 0..c {
            for hi in 0..h {
                let base = (ci * h + hi) * w;
                let m: f64 = vx.data()[base..base + w].iter().sum::<f64>() / w as f64;
                out[hi * c + ci] = m;
            }
        }
        self.push_op(
            Tensor::new(vec![h, c], out),
            Op::MeanLastAxis(x, [c, h, w]),
            &[x],
        )
    }

    /// `[c, h, w] -> [h, c * w]`: row `hi` holds every channel's slice at `hi`.
    pub fn flatten_channels(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; h * c * w];
        for ci in 0..c {
            for hi in 0..h {
                let src = (ci * h + hi) * w;
                let dst = hi * c * w + ci * w;
                out[dst..dst + w].copy_from_slice(&vx.data()[src..src + w]);
            }
        }
        self.push_op(
            Tensor::new(vec![h, c * w], out),
            Op::FlattenChannels(x, [c, h, w]),
            &[x],
        )
    }

    /// Mean ⧺ population std over the rows of `[T, C]`, giving `[1, 2C]`.
    /// The std carries `eps` inside the square root.
    pub fn stats_pool(&mut self, x: Var, eps: f64) -> Var {
        let out = stats_pool_forward(self.value(x), eps);
        self.push_op(out, Op::StatsPool(x), &[x])
    }

    /// Cross-entropy of softmax(`logits`) against a class index; scalar.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Var {
        let v = self.value(logits);
        assert!(target < v.len(), "class index out of range");
        let lse = log_sum_exp(v.data());
        let out = Tensor::scalar(lse - v.data()[target]);
        self.push_op(out, Op::SoftmaxXent(logits, target), &[logits])
    }

    /// Sum over elements of binary cross-entropy with logits; scalar.
    pub fn bce_logits_sum(&mut self, logits: Var, targets: Vec<f64>) -> Var {
        let v = self.value(logits);
        assert_eq!(v.len(), targets.len(), "bce: length mismatch");
        let s = v
            .data()
            .iter()
            .zip(&targets)
            .map(|(&x, &y)| bce_with_logits(x, y))
            .sum();
        self.push_op(
            Tensor::scalar(s),
            Op::BceLogitsSum(logits, targets),
            &[logits],
        )
    }

    /// `Σ (a - target)²`; scalar.
    pub fn sq_err_sum(&mut self, a: Var, target: Tensor) -> Var {
        let v = self.value(a);
        assert_eq!(v.len(), target.len(), "sq_err_sum: size mismatch");
        let s = v
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum();
        self.push_op(Tensor::scalar(s), Op::SqErrSum(a, target), &[a])
    }

    /// `1 - cos(a, b)`; scalar. Both operands are flattened.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "cosine: length mismatch");
        let c = cosine(va.data(), vb.data());
        self.push_op(Tensor::scalar(1.0 - c), Op::CosineDistance(a, b), &[a, b])
    }

    /// Gradients of the scalar `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let mut acc = |v: Var, g: Tensor| {
            if !self.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gy.data(), vb.data(), &mut da, m, n, k);
                    acc(*a, Tensor::new(va.shape().to_vec(), da));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(va.data(), gy.data(), &mut db, m, k, n);
                    acc(*b, Tensor::new(vb.shape().to_vec(), db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, gy.clone());
                if self.needs(*r) {
                    let vr = self.value(*r);
                    let n = vr.len();
                    let mut dr = vec![0.0; n];
                    for row in gy.data().chunks(n) {
                        for (d, g) in dr.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(*r, Tensor::new(vr.shape().to_vec(), dr));
                }
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    acc(*a, zip_map(gy, vb, |g, y| g * y));
                }
                if self.needs(*b) {
                    acc(*b, zip_map(gy, va, |g, x| g * x));
                }
            }
            Op::MulConst(a, c) => acc(*a, zip_map(gy, c, |g, m| g * m)),
            Op::Scale(a, c) => acc(*a, gy.map(|g| g * c)),
            Op::AddScalar(a) => acc(*a, gy.clone()),
            Op::Sigmoid(a) => acc(*a, zip_map(gy, y, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, zip_map(gy, y, |g, t| g * (1.0 - t * t))),
            Op::Relu(a) => acc(*a, zip_map(gy, y, |g, r| if r > 0.0 { g } else { 0.0 })),
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks(n).zip(gy.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(p, g)| p * (g - dot)));
                }
                acc(*a, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::ConcatCols(parts) => {
                let rows = y.rows();
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let w = vp.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gy.data()[r * total + off..r * total + off + w]);
                        }
                        acc(p, Tensor::new(vp.shape().to_vec(), d));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = y.cols();
                let mut off = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.rows() * cols;
                    if self.needs(p) {
                        let d = gy.data()[off..off + n].to_vec();
                        acc(p, Tensor::new(vp.shape().to_vec(), d));
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let (rows, cols) = (va.rows(), va.cols());
                let w = y.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(gy.row_slice(r));
                }
                acc(*a, Tensor::new(va.shape().to_vec(), d));
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let cols = va.cols();
                let mut d = vec![0.0; va.len()];
                d[start * cols..start * cols + gy.len()].copy_from_slice(gy.data());
                acc(*a, Tensor::new(va.shape().to_vec(), d));
            }
            Op::Transpose(a) => acc(*a, gy.transpose()),
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                acc(*a, gy.clone().reshape(&shape));
            }
            Op::Sum(a) => {
                let g = gy.data()[0];
                acc(*a, Tensor::full(self.value(*a).shape(), g));
            }
            Op::Embedding(table, ids) => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = Tensor::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, g) in dt.row_slice_mut(id).iter_mut().zip(gy.row_slice(r)) {
                        *o += g;
                    }
                }
                debug_assert_eq!(d, gy.cols());
                acc(*table, dt);
            }
            Op::Conv1d { x, w, b, geom } => {
                let vw = self.value(*w);
                let c_out = vw.shape()[0];
                let kk = geom.c_in * geom.kernel;
                if self.needs(*w) {
                    let cols = geom.im2col(self.value(*x).data());
                    let mut dw = vec![0.0; c_out * kk];
                    gemm_tn(gy.data(), &cols, &mut dw, geom.time, c_out, kk);
                    acc(*w, Tensor::new(vw.shape().to_vec(), dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; geom.time * kk];
                    gemm_nn(gy.data(), vw.data(), &mut dcols, geom.time, c_out, kk);
                    let mut dx = vec![0.0; geom.time * geom.c_in];
                    geom.col2im(&dcols, &mut dx);
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![0.0; c_out];
                        for row in gy.data().chunks(c_out) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let vw = self.value(*w);
                let c_out = vw.shape()[0];
                let n = geom.out_h() * geom.out_w();
                let kk = geom.c_in * geom.kernel * geom.kernel;
                if self.needs(*w) {
                    let cols = geom.im2col(self.value(*x).data());
                    let mut dw = vec![0.0; c_out * kk];
                    gemm_nt(gy.data(), &cols, &mut dw, c_out, n, kk);
                    acc(*w, Tensor::new(vw.shape().to_vec(), dw));
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; kk * n];
                    gemm_tn(vw.data(), gy.data(), &mut dcols, c_out, kk, n);
                    let mut dx = vec![0.0; geom.c_in * geom.h * geom.w];
                    geom.col2im(&dcols, &mut dx);
                    acc(*x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = gy.data().chunks(n).map(|p| p.iter().sum()).collect();
                        acc(*b, Tensor::new(self.value(*b).shape().to_vec(), db));
                    }
                }
            }
            Op::MeanLastAxis(x, [c, h, w]) => {
                let (c, h, w) = (*c, *h, *w);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for hi in 0..h {
                        let g = gy.data()[hi * c + ci] / w as f64;
                        let base = (ci * h + hi) * w;
                        dx[base..base + w].iter_mut().for_each(|d| *d = g);
                    }
                }
                acc(*x, Tensor::new(vec![c, h, w], dx));
            }
            Op::FlattenChannels(x, [c, h, w]) => {
                let (c, h, w) = (*c, *h, *w);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for hi in 0..h {
                        let dst = (ci * h + hi) * w;
                        let src = hi * c * w + ci * w;
                        dx[dst..dst + w].copy_from_slice(&gy.data()[src..src + w]);
                    }
                }
                acc(*x, Tensor::new(vec![c, h, w], dx));
            }
            Op::StatsPool(x) => {
                let vx = self.value(*x);
                let (t_len, c) = (vx.rows(), vx.cols());
                let t = t_len as f64;
                let mut dx = vec![0.0; t_len * c];
                for ci in 0..c {
                    let mean = y.data()[ci];
                    let std = y.data()[c + ci];
                    let gm = gy.data()[ci];
                    let gs = gy.data()[c + ci];
                    for ti in 0..t_len {
                        let xv = vx.data()[ti * c + ci];
                        dx[ti * c + ci] = gm / t + gs * (xv - mean) / (t * std);
                    }
                }
                acc(*x, Tensor::new(vx.shape().to_vec(), dx));
            }
            Op::SoftmaxXent(logits, target) => {
                let g = gy.data()[0];
                let vl = self.value(*logits);
                let mut p = vl.data().to_vec();
                softmax_inplace(&mut p);
                p[*target] -= 1.0;
                p.iter_mut().for_each(|v| *v *= g);
                acc(*logits, Tensor::new(vl.shape().to_vec(), p));
            }
            Op::BceLogitsSum(logits, targets) => {
                let g = gy.data()[0];
                let vl = self.value(*logits);
                let d = vl
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| g * (sigmoid(x) - t))
                    .collect();
                acc(*logits, Tensor::new(vl.shape().to_vec(), d));
            }
            Op::SqErrSum(a, target) => {
                let g = gy.data()[0];
                acc(
                    *a,
                    zip_map(self.value(*a), target, |x, t| 2.0 * g * (x - t)),
                );
            }
            Op::CosineDistance(a, b) => {
                let g = gy.data()[0];
                let (va, vb) = (self.value(*a), self.value(*b));
                let na = norm(va.data());
                let nb = norm(vb.data());
                let c = dot(va.data(), vb.data()) / (na * nb);
                // d(1 - cos)/da = -(b / (|a||b|) - cos * a / |a|^2)
                if self.needs(*a) {
                    acc(
                        *a,
                        zip_map(va, vb, |x, yb| -g * (yb / (na * nb) - c * x / (na * na))),
                    );
                }
                if self.needs(*b) {
                    acc(
                        *b,
                        zip_map(vb, va, |yb, x| -g * (x / (na * nb) - c * yb / (nb * nb))),
                    );
                }
            }
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus(x) - y x`, stable for large `|x|`.
pub fn bce_with_logits(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

/// Sums run over each channel's values in sorted order, so any reordering of
/// the frames gives a bit-identical result.
pub(crate) fn stats_pool_forward(x: &Tensor, eps: f64) -> Tensor {
    let (t_len, c) = (x.rows(), x.cols());
    let t = t_len as f64;
    let mut out = vec![0.0; 2 * c];
    let mut col = vec![0.0; t_len];
    for ci in 0..c {
        for (ti, v) in col.iter_mut().enumerate() {
            *v = x.data()[ti * c + ci];
        }
        col.sort_unstable_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / t;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
        out[ci] = mean;
        out[c + ci] = (var + eps).sqrt();
    }
    Tensor::row(out)
}

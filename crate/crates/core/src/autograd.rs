//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]. Node ids are
//! assigned in execution order, so the tape is already topologically sorted
//! and [`Tape::backward`] simply walks it in reverse. A tape is rebuilt for
//! every forward pass; it is single-threaded (`!Sync`) by construction.
//!
//! ```
//! use lanat_core::autograd::Tape;
//! use lanat_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let loss = x.mul(x).unwrap().sum().unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Additive bias used for disallowed attention positions.
pub const MASK_BIAS: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        conv_out_len(self.height, self.kernel, self.stride, self.padding)
    }

    pub fn out_width(&self) -> usize {
        conv_out_len(self.width, self.kernel, self.stride, self.padding)
    }
}

/// Output length of a strided convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding).saturating_sub(kernel) / stride + 1
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, f64),
    Relu(usize),
    Glu(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Im2Col { x: usize, geom: ConvGeometry },
    Gather { table: usize, ids: Vec<usize> },
    PickPerRow { x: usize, idx: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    Reshape(usize),
    Transpose(usize),
    Sum(usize),
    NormalizeRows { x: usize, norms: Vec<f64> },
    Dropout { x: usize, mask: Vec<f64> },
    Precomputed { x: usize, grad: Vec<f64> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in execution order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers an existing shared buffer as a leaf without copying it.
    pub fn leaf_shared(&self, value: Arc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Computes d(loss)/d(leaf) for every trainable leaf reachable from `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |target: usize, f: &dyn Fn(&mut [f64])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let buf = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
                f(buf);
            };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::from_parts(out.shape().to_vec(), g));
                }
                Op::MatMul { a, b, trans_b } => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    let (m, k) = (av.rows(), av.cols());
                    let n = out.cols();
                    acc(*a, &|da| {
                        // dA = G·Bᵀ (or G·B when b was transposed)
                        if *trans_b {
                            gemm(m, n, k, &g, n, 1, bv.data(), k, 1, 1.0, da);
                        } else {
                            gemm(m, n, k, &g, n, 1, bv.data(), 1, n, 1.0, da);
                        }
                    });
                    acc(*b, &|db| {
                        if *trans_b {
                            // dB[n×k] = Gᵀ·A
                            gemm(n, m, k, &g, 1, n, av.data(), k, 1, 1.0, db);
                        } else {
                            // dB[k×n] = Aᵀ·G
                            gemm(k, m, n, av.data(), 1, k, &g, n, 1, 1.0, db);
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &|d| add_into(d, &g));
                    acc(*b, &|d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &|d| add_into(d, &g));
                    acc(*b, &|d| d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g));
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(*a, &|d| {
                        for ((d, g), b) in d.iter_mut().zip(&g).zip(bv.data()) {
                            *d += g * b;
                        }
                    });
                    acc(*b, &|d| {
                        for ((d, g), a) in d.iter_mut().zip(&g).zip(av.data()) {
                            *d += g * a;
                        }
                    });
                }
                Op::AddRow { x, bias } => {
                    acc(*x, &|d| add_into(d, &g));
                    let c = out.cols();
                    acc(*bias, &|d| {
                        for row in g.chunks(c) {
                            add_into(d, row);
                        }
                    });
                }
                Op::Scale(x, s) => {
                    acc(*x, &|d| d.iter_mut().zip(&g).for_each(|(d, g)| *d += s * g));
                }
                Op::Relu(x) => {
                    let xv = &nodes[*x].value;
                    acc(*x, &|d| {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(xv.data()) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    });
                }
                Op::Glu(x) => {
                    let xv = &nodes[*x].value;
                    let half = out.cols();
                    acc(*x, &|d| {
                        for r in 0..out.rows() {
                            let xr = &xv.data()[r * 2 * half..(r + 1) * 2 * half];
                            let dr = &mut d[r * 2 * half..(r + 1) * 2 * half];
                            for j in 0..half {
                                let gj = g[r * half + j];
                                let s = sigmoid(xr[half + j]);
                                dr[j] += gj * s;
                                dr[half + j] += gj * xr[j] * s * (1.0 - s);
                            }
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    acc(*x, &|d| {
                        for o in 0..outer {
                            for n in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + n;
                                let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                                for i in 0..len {
                                    d[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    acc(*x, &|d| {
                        for o in 0..outer {
                            for n in 0..inner {
                                let idx = |i: usize| (o * len + i) * inner + n;
                                let total: f64 = (0..len).map(|i| g[idx(i)]).sum();
                                for i in 0..len {
                                    d[idx(i)] += g[idx(i)] - y[idx(i)].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let c = out.cols();
                    let gv = &nodes[*gain].value;
                    acc(*gain, &|d| {
                        for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                d[j] += grow[j] * xrow[j];
                            }
                        }
                    });
                    acc(*bias, &|d| {
                        for row in g.chunks(c) {
                            add_into(d, row);
                        }
                    });
                    acc(*x, &|d| {
                        for (r, ((grow, xrow), drow)) in
                            g.chunks(c).zip(xhat.chunks(c)).zip(d.chunks_mut(c)).enumerate()
                        {
                            let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gv.data()[j]).collect();
                            let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                            let mean_dx = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                drow[j] += rstd[r] * (dxhat[j] - mean_d - xrow[j] * mean_dx);
                            }
                        }
                    });
                }
                Op::Im2Col { x, geom } => {
                    acc(*x, &|d| col2im_add(&g, geom, d));
                }
                Op::Gather { table, ids } => {
                    let c = out.cols();
                    acc(*table, &|d| {
                        for (row, &id) in g.chunks(c).zip(ids) {
                            add_into(&mut d[id * c..(id + 1) * c], row);
                        }
                    });
                }
                Op::PickPerRow { x, idx } => {
                    let c = nodes[*x].value.cols();
                    acc(*x, &|d| {
                        for (r, &j) in idx.iter().enumerate() {
                            d[r * c + j] += g[r];
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = axis_split(out.shape(), *axis);
                    let mut offset = 0;
                    for &input in inputs {
                        let len = nodes[input].value.shape()[*axis];
                        acc(input, &|d| {
                            for o in 0..outer {
                                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                                add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                            }
                        });
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let (outer, total, inner) = axis_split(nodes[*x].value.shape(), *axis);
                    let len = out.shape()[*axis];
                    acc(*x, &|d| {
                        for o in 0..outer {
                            let dst = &mut d[(o * total + start) * inner..(o * total + start + len) * inner];
                            add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                        }
                    });
                }
                Op::Reshape(x) => acc(*x, &|d| add_into(d, &g)),
                Op::Transpose(x) => {
                    let (r, c) = (out.rows(), out.cols());
                    acc(*x, &|d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Sum(x) => acc(*x, &|d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::NormalizeRows { x, norms } => {
                    let c = out.cols();
                    let y = out.data();
                    acc(*x, &|d| {
                        for (r, norm) in norms.iter().enumerate() {
                            let yr = &y[r * c..(r + 1) * c];
                            let gr = &g[r * c..(r + 1) * c];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[r * c + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &|d| {
                        for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                            *d += g * m;
                        }
                    });
                }
                Op::Precomputed { x, grad } => {
                    acc(*x, &|d| {
                        for (d, p) in d.iter_mut().zip(grad) {
                            *d += g[0] * p;
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn im2col(x: &[f64], geom: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, c) = (geom.kernel, geom.channels);
    let cols = k * k * c;
    let mut out = vec![0.0; ho * wo * cols];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = ((iy as usize) * geom.width + ix as usize) * c;
                    let dst = (ky * k + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

fn col2im_add(g: &[f64], geom: &ConvGeometry, d: &mut [f64]) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let (k, c) = (geom.kernel, geom.channels);
    let cols = k * k * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &g[(oy * wo + ox) * cols..(oy * wo + ox + 1) * cols];
            for ky in 0..k {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * geom.width + ix as usize) * c;
                    let src = (ky * k + kx) * c;
                    add_into(&mut d[dst..dst + c], &row[src..src + c]);
                }
            }
        }
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok(())
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Matrix product `self · other`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// Matrix product `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        check_matrix("matmul", &a)?;
        check_matrix("matmul", &b)?;
        let (m, k) = (a.rows(), a.cols());
        let (kb, n) = if trans_b { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {:?} x {:?}{}", a.shape(), b.shape(), if trans_b { "ᵀ" } else { "" }),
            ));
        }
        let mut c = vec![0.0; m * n];
        if trans_b {
            gemm(m, k, n, a.data(), k, 1, b.data(), 1, k, 0.0, &mut c);
        } else {
            gemm(m, k, n, a.data(), k, 1, b.data(), n, 1, 0.0, &mut c);
        }
        self.tape.push(
            "matmul",
            Tensor::from_parts(vec![m, n], c),
            Op::MatMul { a: self.id, b: other.id, trans_b },
            &[self.id, other.id],
        )
    }

    fn zip_with(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        check_same(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape
            .push(name, Tensor::from_parts(a.shape().to_vec(), data), op, &[self.id, other.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_with(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let (x, b) = (self.value(), bias.value());
        let c = x.cols();
        if b.numel() != c {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            add_into(row, b.data());
        }
        self.tape.push(
            "add_row",
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::AddRow { x: self.id, bias: bias.id },
            &[self.id, bias.id],
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| v * s).collect();
        self.tape
            .push("scale", Tensor::from_parts(x.shape().to_vec(), data), Op::Scale(self.id, s), &[self.id])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        let x = self.value();
        let data = x.data().iter().map(|v| v.max(0.0)).collect();
        self.tape
            .push("relu", Tensor::from_parts(x.shape().to_vec(), data), Op::Relu(self.id), &[self.id])
    }

    /// Gated linear unit over the last axis: `[a; b] -> a ⊙ sigmoid(b)`.
    pub fn glu(self) -> Result<Var<'t>> {
        let x = self.value();
        let w = *x.shape().last().unwrap();
        if w % 2 != 0 {
            return Err(Error::shape("glu", format!("odd width {w}")));
        }
        let half = w / 2;
        let rows = x.numel() / w;
        let mut data = Vec::with_capacity(rows * half);
        for r in x.data().chunks(w) {
            for j in 0..half {
                data.push(r[j] * sigmoid(r[half + j]));
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        self.tape.push("glu", Tensor::from_parts(shape, data), Op::Glu(self.id), &[self.id])
    }

    fn softmax_impl(self, axis: usize, log: bool) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { axis, rank: x.rank() });
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xs = x.data();
        let mut y = vec![0.0; xs.len()];
        for o in 0..outer {
            for n in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + n;
                let max = (0..len).map(|i| xs[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..len).map(|i| (xs[idx(i)] - max).exp()).sum();
                let lz = z.ln();
                for i in 0..len {
                    let shifted = xs[idx(i)] - max;
                    y[idx(i)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        let shape = x.shape().to_vec();
        if log {
            self.tape.push(
                "log_softmax",
                Tensor::from_parts(shape, y),
                Op::LogSoftmax { x: self.id, axis },
                &[self.id],
            )
        } else {
            self.tape
                .push("softmax", Tensor::from_parts(shape, y), Op::Softmax { x: self.id, axis }, &[self.id])
        }
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.softmax_impl(axis, true)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        if gain.value().numel() != c || bias.value().numel() != c {
            return Err(Error::shape("layer_norm", format!("width {c} vs gain/bias")));
        }
        let (gv, bv) = (gain.value(), bias.value());
        let rows = x.numel() / c;
        let mut xhat = vec![0.0; x.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; x.numel()];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.push(
            "layer_norm",
            Tensor::from_parts(x.shape().to_vec(), y),
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            &[self.id, gain.id, bias.id],
        )
    }

    /// Unfolds a `(height·width) × channels` feature map into convolution
    /// patches of shape `(out_h·out_w) × (kernel²·channels)`.
    pub fn im2col(self, geom: ConvGeometry) -> Result<Var<'t>> {
        let x = self.value();
        if x.numel() != geom.height * geom.width * geom.channels {
            return Err(Error::shape("im2col", format!("{:?} vs {geom:?}", x.shape())));
        }
        let (ho, wo) = (geom.out_height(), geom.out_width());
        if ho == 0 || wo == 0 {
            return Err(Error::shape("im2col", "input smaller than kernel"));
        }
        let data = im2col(x.data(), &geom);
        self.tape.push(
            "im2col",
            Tensor::from_parts(vec![ho * wo, geom.kernel * geom.kernel * geom.channels], data),
            Op::Im2Col { x: self.id, geom },
            &[self.id],
        )
    }

    /// 2-D convolution of a `(height·width) × in_channels` map with
    /// `kernels` laid out as `(kernel²·in_channels) × out_channels`.
    pub fn conv2d(self, kernels: Var<'t>, bias: Var<'t>, geom: ConvGeometry) -> Result<Var<'t>> {
        self.im2col(geom)?.matmul(kernels)?.add_row(bias)
    }

    /// Row lookup: `out[i] = self[ids[i]]`.
    pub fn embedding_lookup(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        check_matrix("embedding_lookup", &table)?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding lookup of an empty sequence".into()));
        }
        let (v, c) = (table.rows(), table.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            data.extend_from_slice(table.row(id));
        }
        self.tape.push(
            "embedding_lookup",
            Tensor::from_parts(vec![ids.len(), c], data),
            Op::Gather { table: self.id, ids: ids.to_vec() },
            &[self.id],
        )
    }

    /// `out[i] = self[i, idx[i]]`, a vector of length `rows`.
    pub fn pick_per_row(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        check_matrix("pick_per_row", &x)?;
        if idx.len() != x.rows() {
            return Err(Error::shape("pick_per_row", format!("{} rows vs {} indices", x.rows(), idx.len())));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (r, &j) in idx.iter().enumerate() {
            if j >= x.cols() {
                return Err(Error::TokenOutOfRange { id: j, vocab: x.cols() });
            }
            data.push(x.at(r, j));
        }
        self.tape.push(
            "pick_per_row",
            Tensor::from_parts(vec![idx.len()], data),
            Op::PickPerRow { x: self.id, idx: idx.to_vec() },
            &[self.id],
        )
    }

    pub fn concat(self, other: Var<'t>, axis: usize) -> Result<Var<'t>> {
        concat(&[self, other], axis)
    }

    /// Slice of `len` entries along `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::InvalidAxis { axis, rank: x.rank() });
        }
        let (outer, total, inner) = axis_split(x.shape(), axis);
        if len == 0 || start + len > total {
            return Err(Error::shape("narrow", format!("{start}+{len} > {total}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&x.data()[(o * total + start) * inner..(o * total + start + len) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.tape.push(
            "narrow",
            Tensor::from_parts(shape, data),
            Op::Narrow { x: self.id, axis, start },
            &[self.id],
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = (*x).clone().reshape(shape)?;
        self.tape.push("reshape", t, Op::Reshape(self.id), &[self.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        check_matrix("transpose", &x)?;
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        self.tape
            .push("transpose", Tensor::from_parts(vec![c, r], data), Op::Transpose(self.id), &[self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let x = self.value();
        let c = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm { op: "normalize_rows" });
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.tape.push(
            "normalize_rows",
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::NormalizeRows { x: self.id, norms },
            &[self.id],
        )
    }

    /// Cosine similarity of two equally long vectors, as a scalar.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::shape("cosine_similarity", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let n = a.numel();
        let a = self.reshape(&[1, n])?.normalize_rows().map_err(|_| Error::ZeroNorm { op: "cosine_similarity" })?;
        let b = other.reshape(&[1, n])?.normalize_rows().map_err(|_| Error::ZeroNorm { op: "cosine_similarity" })?;
        a.matmul_t(b)?.reshape(&[1])
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout_with_mask(self, mask: Vec<f64>) -> Result<Var<'t>> {
        let x = self.value();
        if mask.len() != x.numel() {
            return Err(Error::shape("dropout", "mask size"));
        }
        let data = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.tape.push(
            "dropout",
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::Dropout { x: self.id, mask },
            &[self.id],
        )
    }

    /// Records a scalar function of `self` whose value and gradient were
    /// computed outside the tape (used by dynamic-programming losses).
    pub fn precomputed_scalar(self, value: f64, grad: Vec<f64>) -> Result<Var<'t>> {
        if grad.len() != self.value().numel() {
            return Err(Error::shape("precomputed_scalar", "gradient size"));
        }
        self.tape.push(
            "precomputed_scalar",
            Tensor::scalar(value),
            Op::Precomputed { x: self.id, grad },
            &[self.id],
        )
    }
}

/// Concatenates tensors of equal rank along `axis`.
pub fn concat<'t>(vars: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = vars.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
    let tape = first.tape;
    let values: Vec<Arc<Tensor>> = vars.iter().map(|v| v.value()).collect();
    let rank = values[0].rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    let mut shape = values[0].shape().to_vec();
    let mut total = 0;
    for v in &values {
        let s = v.shape();
        if s.len() != rank || s.iter().enumerate().any(|(i, &d)| i != axis && d != shape[i]) {
            return Err(Error::shape("concat", format!("{:?} vs {:?}", shape, s)));
        }
        total += s[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for v in &values {
            let len = v.shape()[axis];
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let ids: Vec<usize> = vars.iter().map(|v| v.id).collect();
    tape.push("concat", Tensor::from_parts(shape, data), Op::Concat { inputs: ids.clone(), axis }, &ids)
}

/// Largest relative error between the analytic gradient of `f` at `x` and
/// its central finite difference with step `h`, taken over coordinates as
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
pub fn check_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&tape, xv)?;
    let analytic = match tape.backward(loss) {
        Ok(mut g) => g.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())),
        Err(Error::Detached) => Tensor::zeros(x.shape()),
        Err(e) => return Err(e),
    };
    let eval = |t: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.leaf(t, false);
        Ok(f(&tape, v)?.value().item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let tape = Tape::new();
        let a = tape.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let b = tape.constant(mat(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 4.0, 5.0, 6.0]);
        let c = tape.constant(mat(&[vec![2.0]]));
        let d = tape.constant(mat(&[vec![3.0]]));
        assert_eq!(c.matmul(d).unwrap().value().data(), &[6.0]);
        let e = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(a.matmul(e), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_gradient_is_ones_times_bt() {
        let a = random(&[3, 4], 1);
        let b = random(&[4, 2], 2);
        let tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let bv = tape.constant(b.clone());
        let loss = av.matmul(bv).unwrap().sum().unwrap();
        let g = tape.backward(loss).unwrap();
        let ga = g.get(av).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expected = b.at(k, 0) + b.at(k, 1);
                assert!((ga.at(i, k) - expected).abs() < 1e-14);
            }
        }
        let bt = b.clone();
        let err = check_gradient(
            move |t, x| x.matmul(t.constant(bt.clone()))?.sum(),
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(
            move |t, x| t.constant(a.clone()).matmul(x)?.sum(),
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_t_gradients() {
        let a = random(&[3, 4], 3);
        let b = random(&[5, 4], 4);
        let w = random(&[3, 5], 5);
        let (b2, w2) = (b.clone(), w.clone());
        let err = check_gradient(
            move |t, x| x.matmul_t(t.constant(b2.clone()))?.mul(t.constant(w2.clone()))?.sum(),
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
        let err = check_gradient(
            move |t, x| t.constant(a.clone()).matmul_t(x)?.mul(t.constant(w.clone()))?.sum(),
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sum_and_square_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(random(&[2, 3, 2], 7), true);
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), true);
        let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(c.sum().unwrap()), Err(Error::Detached)));
    }

    #[test]
    fn softmax_basics() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        assert_eq!(x.softmax(0).unwrap().value().data(), &[0.5, 0.5]);
        assert!(matches!(x.softmax(1), Err(Error::InvalidAxis { .. })));
        let y = tape.constant(random(&[4, 6], 9)).scale(30.0).unwrap();
        for axis in 0..2 {
            let s = y.softmax(axis).unwrap().value();
            let (outer, len, inner) = axis_split(s.shape(), axis);
            for o in 0..outer {
                for n in 0..inner {
                    let total: f64 = (0..len).map(|i| s.data()[(o * len + i) * inner + n]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
            assert!(s.data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let logits = random(&[4, 5], 11);
        let targets = vec![0, 3, 2, 4];
        let err = check_gradient(
            move |_, x| x.log_softmax(1)?.pick_per_row(&targets)?.mean()?.scale(-1.0),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn elementwise_and_shape_op_gradients() {
        let x = random(&[3, 4], 21);
        let w = random(&[3, 4], 22);
        let cases: Vec<Box<dyn for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>>> = vec![
            Box::new(|t, x| x.softmax(0)?.mul(t.constant(random(&[3, 4], 30)))?.sum()),
            Box::new(|t, x| x.softmax(1)?.mul(t.constant(random(&[3, 4], 31)))?.sum()),
            Box::new(|t, x| x.log_softmax(0)?.mul(t.constant(random(&[3, 4], 32)))?.sum()),
            Box::new(|t, x| x.glu()?.mul(t.constant(random(&[3, 2], 33)))?.sum()),
            Box::new(|t, x| x.transpose()?.mul(t.constant(random(&[4, 3], 34)))?.sum()),
            Box::new(|t, x| x.narrow(1, 1, 2)?.mul(t.constant(random(&[3, 2], 35)))?.sum()),
            Box::new(|t, x| x.narrow(0, 1, 2)?.mul(t.constant(random(&[2, 4], 36)))?.sum()),
            Box::new(|t, x| {
                let y = x.scale(2.0)?;
                concat(&[x, y], 1)?.mul(t.constant(random(&[3, 8], 37)))?.sum()
            }),
            Box::new(|t, x| x.concat(x, 0)?.mul(t.constant(random(&[6, 4], 38)))?.sum()),
            Box::new(|t, x| x.normalize_rows()?.mul(t.constant(random(&[3, 4], 39)))?.sum()),
            Box::new(|t, x| {
                let w = t.constant(random(&[4], 40));
                let b = t.constant(random(&[4], 41));
                x.layer_norm(w, b, 1e-10)?.mul(t.constant(random(&[3, 4], 42)))?.sum()
            }),
            Box::new(|t, x| x.add_row(t.constant(random(&[4], 43)))?.mul(x)?.sum()),
            Box::new(|t, x| x.sub(t.constant(random(&[3, 4], 44)))?.mul(x)?.sum()),
            Box::new(|_, x| x.reshape(&[4, 3])?.pick_per_row(&[0, 1, 2, 0])?.sum()),
            Box::new(|_, x| x.embedding_lookup(&[2, 0, 2])?.mul(x.narrow(0, 0, 3)?)?.sum()),
            Box::new(|t, x| x.dropout_with_mask(random(&[3, 4], 45).into_data())?.mul(t.constant(random(&[3, 4], 46)))?.sum()),
        ];
        for (i, f) in cases.iter().enumerate() {
            let err = check_gradient(|t, v| f(t, v), &x, 1e-5).unwrap();
            assert!(err < 1e-6, "case {i}: {err}");
        }
        let err = check_gradient(
            move |t, x| x.mul(x)?.relu()?.mul(t.constant(w.clone()))?.sum(),
            &random(&[3, 4], 23),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::new();
        let x = tape.constant(random(&[5, 16], 50).reshape(&[5, 16]).unwrap().clone()).scale(7.0).unwrap();
        let g = tape.constant(Tensor::ones(&[16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = x.layer_norm(g, b, 1e-10).unwrap().value();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let geom = ConvGeometry { height: 5, width: 4, channels: 2, kernel: 3, stride: 2, padding: 1 };
        let x = random(&[20, 2], 60);
        let k = random(&[18, 3], 61);
        let b = random(&[3], 62);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k.clone()), tape.constant(b.clone()), geom)
            .unwrap()
            .value();
        assert_eq!(y.shape(), &[3 * 2, 3]);
        for oy in 0..3 {
            for ox in 0..2 {
                for co in 0..3 {
                    let mut acc = b.data()[co];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            let ix = (ox * 2 + kx) as isize - 1;
                            if iy < 0 || iy >= 5 || ix < 0 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2 {
                                acc += x.at(iy as usize * 4 + ix as usize, ci) * k.at((ky * 3 + kx) * 2 + ci, co);
                            }
                        }
                    }
                    assert!((y.at(oy * 2 + ox, co) - acc).abs() < 1e-12);
                }
            }
        }
        let w = random(&[6, 3], 63);
        let err = check_gradient(
            move |t, x| x.conv2d(t.constant(k.clone()), t.constant(b.clone()), geom)?.mul(t.constant(w.clone()))?.sum(),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn glu_and_cosine() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert_eq!(x.glu().unwrap().value().data(), &[0.5]);
        let v = tape.constant(Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap());
        let c = v.cosine_similarity(v).unwrap().value().item();
        assert!((c - 1.0).abs() < 1e-15);
        let z = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(v.cosine_similarity(z), Err(Error::ZeroNorm { .. })));
    }

    #[test]
    fn non_finite_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2], 1e200));
        assert!(matches!(x.mul(x), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn masked_softmax_weight_is_exactly_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.3, 1.2, -0.4]).unwrap());
        let m = tape.constant(Tensor::vector(vec![0.0, MASK_BIAS, 0.0]).unwrap());
        let p = x.add(m).unwrap().softmax(0).unwrap().value();
        assert!(p.data()[1] < 1e-300);
        assert!((p.data()[0] + p.data()[2] - 1.0).abs() < 1e-12);
    }
}

//! Append-only tape of primitive operations and its reverse sweep.
//!
//! A [`Tape`] is single-threaded and owned by one worker. [`Var`] is a cheap
//! copyable handle to a node on that tape; the primitive set is the one the
//! model zoo, GAN and inversion code compose.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{fmt_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    BroadcastRows(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    MaxPool2 { x: usize, arg: Vec<usize> },
    Upsample2 { x: usize, h: usize, w: usize },
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Softplus(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    SumLast(usize),
    Reshape(usize),
    ConcatLast(usize, usize),
    Gather { x: usize, idx: Vec<usize> },
    SelectRows { x: usize, rows: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that gradients flow into.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.leaf(Rc::new(t), true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.leaf(Rc::new(t), false)
    }

    pub fn leaf(&self, t: Rc<Tensor>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {}", fmt_shape(root.value.shape())),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accum(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accum_with(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    id: usize,
    f: impl FnOnce(&Tensor) -> Tensor,
) {
    if nodes[id].requires_grad {
        let g = f(&nodes[id].value);
        accum(grads, id, g);
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts_unchecked(a.shape().to_vec(), data)
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensor has at least one axis")
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum_with(nodes, grads, *a, |_| g.clone());
            accum_with(nodes, grads, *b, |_| g.clone());
        }
        Op::Sub(a, b) => {
            accum_with(nodes, grads, *a, |_| g.clone());
            accum_with(nodes, grads, *b, |_| g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            accum_with(nodes, grads, *a, |_| zip_map(g, &bv, |x, y| x * y));
            accum_with(nodes, grads, *b, |_| zip_map(g, &av, |x, y| x * y));
        }
        Op::Div(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            accum_with(nodes, grads, *a, |_| zip_map(g, &bv, |x, y| x / y));
            accum_with(nodes, grads, *b, |_| {
                let q = zip_map(&av, &bv, |x, y| -x / (y * y));
                zip_map(g, &q, |x, y| x * y)
            });
        }
        Op::Scale(a, c) => accum_with(nodes, grads, *a, |_| g.map(|v| v * c)),
        Op::AddScalar(a) => accum_with(nodes, grads, *a, |_| g.clone()),
        Op::BroadcastRows(a) => accum_with(nodes, grads, *a, |av| {
            let m = av.len();
            let mut s = vec![0.0; m];
            for row in g.data().chunks(m) {
                for (acc, v) in s.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Tensor::from_parts_unchecked(av.shape().to_vec(), s)
        }),
        Op::MatMul { a, b, ta, tb } => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            let (m, n) = (out.shape()[0], out.shape()[1]);
            let k = if *ta { av.shape()[0] } else { av.shape()[1] };
            accum_with(nodes, grads, *a, |_| {
                let mut d = vec![0.0; m * k];
                if !*ta {
                    kernels::gemm(m, n, k, g.data(), false, bv.data(), !*tb, 0.0, &mut d);
                } else {
                    kernels::gemm(k, n, m, bv.data(), *tb, g.data(), true, 0.0, &mut d);
                }
                Tensor::from_parts_unchecked(av.shape().to_vec(), d)
            });
            accum_with(nodes, grads, *b, |_| {
                let mut d = vec![0.0; k * n];
                if !*tb {
                    kernels::gemm(k, m, n, av.data(), !*ta, g.data(), false, 0.0, &mut d);
                } else {
                    kernels::gemm(n, m, k, g.data(), true, av.data(), *ta, 0.0, &mut d);
                }
                Tensor::from_parts_unchecked(bv.shape().to_vec(), d)
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let o = nodes[*w].value.shape()[0];
            let plane = geom.plane();
            let rows = geom.rows();
            let gd = g.data();
            if let Some(b) = b {
                accum_with(nodes, grads, *b, |bv| {
                    let mut s = vec![0.0; o];
                    for (i, chunk) in gd.chunks(plane).enumerate() {
                        s[i % o] += chunk.iter().sum::<f64>();
                    }
                    Tensor::from_parts_unchecked(bv.shape().to_vec(), s)
                });
            }
            let xv = Rc::clone(&nodes[*x].value);
            let wv = Rc::clone(&nodes[*w].value);
            let isz = geom.in_size();
            accum_with(nodes, grads, *w, |_| {
                let mut cols = vec![0.0; rows * plane];
                let mut dw = vec![0.0; o * rows];
                for n in 0..geom.n {
                    kernels::im2col(&xv.data()[n * isz..(n + 1) * isz], geom, &mut cols);
                    let gn = &gd[n * o * plane..(n + 1) * o * plane];
                    kernels::gemm(o, plane, rows, gn, false, &cols, true, 1.0, &mut dw);
                }
                Tensor::from_parts_unchecked(wv.shape().to_vec(), dw)
            });
            accum_with(nodes, grads, *x, |_| {
                let mut dcols = vec![0.0; rows * plane];
                let mut dx = vec![0.0; xv.len()];
                for n in 0..geom.n {
                    let gn = &gd[n * o * plane..(n + 1) * o * plane];
                    kernels::gemm(rows, o, plane, wv.data(), true, gn, false, 0.0, &mut dcols);
                    kernels::col2im(&dcols, geom, &mut dx[n * isz..(n + 1) * isz]);
                }
                Tensor::from_parts_unchecked(xv.shape().to_vec(), dx)
            });
        }
        Op::MaxPool2 { x, arg } => accum_with(nodes, grads, *x, |xv| {
            let mut dx = vec![0.0; xv.len()];
            for (gi, &src) in g.data().iter().zip(arg) {
                dx[src] += gi;
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), dx)
        }),
        Op::Upsample2 { x, h, w } => accum_with(nodes, grads, *x, |xv| {
            let planes = xv.len() / (h * w);
            let dx = kernels::upsample2_backward(g.data(), planes, *h, *w);
            Tensor::from_parts_unchecked(xv.shape().to_vec(), dx)
        }),
        Op::Relu(x) => accum_with(nodes, grads, *x, |xv| {
            zip_map(g, xv, |gi, v| if v > 0.0 { gi } else { 0.0 })
        }),
        Op::LeakyRelu(x, s) => accum_with(nodes, grads, *x, |xv| {
            zip_map(g, xv, |gi, v| if v > 0.0 { gi } else { gi * s })
        }),
        Op::Tanh(x) => accum_with(nodes, grads, *x, |_| zip_map(g, out, |gi, y| gi * (1.0 - y * y))),
        Op::Sigmoid(x) => {
            accum_with(nodes, grads, *x, |_| zip_map(g, out, |gi, y| gi * y * (1.0 - y)))
        }
        Op::Exp(x) => accum_with(nodes, grads, *x, |_| zip_map(g, out, |gi, y| gi * y)),
        Op::Log(x) => accum_with(nodes, grads, *x, |xv| zip_map(g, xv, |gi, v| gi / v)),
        Op::Sqrt(x) => accum_with(nodes, grads, *x, |_| zip_map(g, out, |gi, y| gi * 0.5 / y)),
        Op::Softplus(x) => accum_with(nodes, grads, *x, |xv| {
            zip_map(g, xv, |gi, v| gi * sigmoid(v))
        }),
        Op::Clamp { x, lo, hi } => accum_with(nodes, grads, *x, |xv| {
            zip_map(g, xv, |gi, v| if v >= *lo && v <= *hi { gi } else { 0.0 })
        }),
        Op::Softmax(x) => accum_with(nodes, grads, *x, |xv| {
            let m = last_dim(xv);
            let mut d = vec![0.0; xv.len()];
            for ((dr, yr), gr) in d.chunks_mut(m).zip(out.data().chunks(m)).zip(g.data().chunks(m)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = y * (gv - dot);
                }
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), d)
        }),
        Op::LogSoftmax(x) => accum_with(nodes, grads, *x, |xv| {
            let m = last_dim(xv);
            let mut d = vec![0.0; xv.len()];
            for ((dr, yr), gr) in d.chunks_mut(m).zip(out.data().chunks(m)).zip(g.data().chunks(m)) {
                let gs: f64 = gr.iter().sum();
                for ((dv, y), gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *dv = gv - y.exp() * gs;
                }
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), d)
        }),
        Op::Sum(x) => accum_with(nodes, grads, *x, |xv| Tensor::full(xv.shape(), g.item())),
        Op::SumLast(x) => accum_with(nodes, grads, *x, |xv| {
            let m = last_dim(xv);
            let mut d = Vec::with_capacity(xv.len());
            for &gi in g.data() {
                d.extend(std::iter::repeat_n(gi, m));
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), d)
        }),
        Op::Reshape(x) => accum_with(nodes, grads, *x, |xv| {
            Tensor::from_parts_unchecked(xv.shape().to_vec(), g.data().to_vec())
        }),
        Op::ConcatLast(a, b) => {
            let ma = last_dim(&nodes[*a].value);
            let mb = last_dim(&nodes[*b].value);
            accum_with(nodes, grads, *a, |av| {
                let d = g.data().chunks(ma + mb).flat_map(|r| r[..ma].to_vec()).collect();
                Tensor::from_parts_unchecked(av.shape().to_vec(), d)
            });
            accum_with(nodes, grads, *b, |bv| {
                let d = g.data().chunks(ma + mb).flat_map(|r| r[ma..].to_vec()).collect();
                Tensor::from_parts_unchecked(bv.shape().to_vec(), d)
            });
        }
        Op::Gather { x, idx } => accum_with(nodes, grads, *x, |xv| {
            let m = last_dim(xv);
            let mut d = vec![0.0; xv.len()];
            for (row, (&k, &gi)) in idx.iter().zip(g.data()).enumerate() {
                d[row * m + k] += gi;
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), d)
        }),
        Op::SelectRows { x, rows } => accum_with(nodes, grads, *x, |xv| {
            let inner = xv.len() / xv.shape()[0];
            let mut d = vec![0.0; xv.len()];
            for (i, &r) in rows.iter().enumerate() {
                let src = &g.data()[i * inner..(i + 1) * inner];
                for (a, b) in d[r * inner..(r + 1) * inner].iter_mut().zip(src) {
                    *a += b;
                }
            }
            Tensor::from_parts_unchecked(xv.shape().to_vec(), d)
        }),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    // log(1 + e^v) without overflow
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op, self.requires_grad())
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(
                name,
                format!("{} vs {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
            ));
        }
        let v = zip_map(&a, &b, f);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    /// Repeats a vector `[m]` into `[n, m]`.
    pub fn broadcast_rows(self, n: usize) -> Result<Var<'t>> {
        let v = self.value();
        if v.shape().len() != 1 || n == 0 {
            return Err(Error::shape(
                "broadcast_rows",
                format!("expected vector, got {} (n={n})", fmt_shape(v.shape())),
            ));
        }
        let m = v.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_parts_unchecked(vec![n, m], data);
        Ok(self.tape.push(out, Op::BroadcastRows(self.id), self.requires_grad()))
    }

    /// `[n, m] + [m]` with the vector added to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape(
                "add_row",
                format!("{} + {}", fmt_shape(&s), fmt_shape(&bias.shape())),
            ));
        }
        self.add(bias.broadcast_rows(s[0])?)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, false)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_ex(other, false, true)
    }

    pub fn matmul_ex(self, other: Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let bad = || {
            Error::shape(
                "matmul",
                format!(
                    "{}{} x {}{}",
                    fmt_shape(a.shape()),
                    if ta { "ᵀ" } else { "" },
                    fmt_shape(b.shape()),
                    if tb { "ᵀ" } else { "" }
                ),
            )
        };
        if a.shape().len() != 2 || b.shape().len() != 2 {
            return Err(bad());
        }
        let (m, k) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
        let (k2, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
        if k != k2 {
            return Err(bad());
        }
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), ta, b.data(), tb, 0.0, &mut c);
        let out = Tensor::from_parts_unchecked(vec![m, n], c);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::MatMul { a: self.id, b: other.id, ta, tb }, rg))
    }

    /// 2-D convolution of `[n, c, h, w]` with `[o, c, kh, kw]` weights.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        let bad = |why: &str| {
            Error::shape(
                "conv2d",
                format!("input {} weight {}: {why}", fmt_shape(xs), fmt_shape(ws)),
            )
        };
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(bad("channel/rank mismatch"));
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(bad("kernel larger than padded input"));
        }
        let o = ws[0];
        if let Some(b) = bias {
            self.same_tape(&b);
            if b.shape() != [o] {
                return Err(bad("bias length"));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
        };
        let plane = geom.plane();
        let (rows, isz) = (geom.rows(), geom.in_size());
        let mut cols = vec![0.0; rows * plane];
        let mut out = vec![0.0; geom.n * o * plane];
        for n in 0..geom.n {
            kernels::im2col(&x.data()[n * isz..(n + 1) * isz], &geom, &mut cols);
            let dst = &mut out[n * o * plane..(n + 1) * o * plane];
            kernels::gemm(o, rows, plane, w.data(), false, &cols, false, 0.0, dst);
        }
        if let Some(b) = bias {
            let bv = b.value();
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let b0 = bv.data()[i % o];
                chunk.iter_mut().for_each(|v| *v += b0);
            }
        }
        let out = Tensor::from_parts_unchecked(vec![geom.n, o, geom.ho, geom.wo], out);
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        let op = Op::Conv2d {
            x: self.id,
            w: weight.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.tape.push(out, op, rg))
    }

    /// 2×2, stride-2 max pooling; odd extents round up.
    pub fn maxpool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("maxpool2", format!("expected NCHW, got {}", fmt_shape(s))));
        }
        let (out, arg) = kernels::maxpool2(x.data(), s[0], s[1], s[2], s[3]);
        let shape = vec![s[0], s[1], s[2].div_ceil(2), s[3].div_ceil(2)];
        let out = Tensor::from_parts_unchecked(shape, out);
        Ok(self.tape.push(out, Op::MaxPool2 { x: self.id, arg }, self.requires_grad()))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::shape("upsample2", format!("expected NCHW, got {}", fmt_shape(s))));
        }
        let out = kernels::upsample2(x.data(), s[0] * s[1], s[2], s[3]);
        let out = Tensor::from_parts_unchecked(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out);
        let op = Op::Upsample2 { x: self.id, h: s[2], w: s[3] };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(Op::LeakyRelu(self.id, slope), |v| if v > 0.0 { v } else { v * slope })
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    /// `log(1 + eˣ)`.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp { x: self.id, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let m = last_dim(&x);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        self.tape.push(out, Op::Softmax(self.id), self.requires_grad())
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let x = self.value();
        let m = last_dim(&x);
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(m) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::from_parts_unchecked(x.shape().to_vec(), out);
        self.tape.push(out, Op::LogSoftmax(self.id), self.requires_grad())
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(self) -> Var<'t> {
        self.square().sum().sqrt()
    }

    /// Sums the last axis away; a vector reduces to shape `[1]`.
    pub fn sum_last(self) -> Var<'t> {
        let x = self.value();
        let m = last_dim(&x);
        let data: Vec<f64> = x.data().chunks(m).map(|r| r.iter().sum()).collect();
        let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_parts_unchecked(shape, data);
        self.tape.push(out, Op::SumLast(self.id), self.requires_grad())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape(self.id), self.requires_grad()))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(self) -> Result<Var<'t>> {
        let s = self.shape();
        let rest = s[1..].iter().product();
        self.reshape(&[s[0], rest])
    }

    /// Concatenates two `[n, *]` matrices along columns.
    pub fn concat_last(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[0] != b.shape()[0] {
            return Err(Error::shape(
                "concat_last",
                format!("{} ++ {}", fmt_shape(a.shape()), fmt_shape(b.shape())),
            ));
        }
        let (n, ma, mb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(&a.data()[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&b.data()[i * mb..(i + 1) * mb]);
        }
        let out = Tensor::from_parts_unchecked(vec![n, ma + mb], data);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::ConcatLast(self.id, other.id), rg))
    }

    /// Appends a constant column of ones: `[n, d] -> [n, d+1]`.
    pub fn append_ones(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape("append_ones", format!("expected matrix, got {}", fmt_shape(&s))));
        }
        let ones = self.tape.constant(Tensor::full(&[s[0], 1], 1.0));
        self.concat_last(ones)
    }

    /// Picks `x[i, idx[i]]` from an `[n, m]` matrix.
    pub fn gather(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&k| k >= s[1]) {
            return Err(Error::shape(
                "gather",
                format!("{} with {} indices (max {:?})", fmt_shape(s), idx.len(), idx.iter().max()),
            ));
        }
        let data = idx.iter().enumerate().map(|(i, &k)| x.data()[i * s[1] + k]).collect();
        let out = Tensor::from_parts_unchecked(vec![idx.len()], data);
        let op = Op::Gather { x: self.id, idx: idx.to_vec() };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    /// Leading-axis rows `rows` (repeats allowed).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let out = self.value().select_outer(rows)?;
        let op = Op::SelectRows { x: self.id, rows: rows.to_vec() };
        Ok(self.tape.push(out, op, self.requires_grad()))
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class ids.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        Ok(self.log_softmax().gather(targets)?.mean().neg())
    }
}

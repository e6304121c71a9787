//! Reverse-mode autodiff tape.
//!
//! Nodes are recorded eagerly in topological order (inputs always precede
//! their consumers) and `backward` walks them in exact reverse recording
//! order, so gradient accumulation is deterministic: two backward passes over
//! the same tape produce bitwise-identical gradients. Repeated `backward`
//! calls without `zero_grads` accumulate.
//!
//! The tape also carries a forward multiply-accumulate counter (dot-product
//! and convolution multiplies only; rescales, softmax, and additions are not
//! counted) used by the complexity checks and the bench command.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops::attn::{self, AttnDims};
use crate::ops::conv::{self, PadMode};
use crate::ops::layout;
use crate::ops::linalg;
use crate::ops::norm::{self, LnStats};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

impl Var {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

enum Op<E: Elem> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    AddRow(Var, Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, groups: usize, pad: PadMode },
    AvgPool { x: Var, k: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: LnStats<E> },
    Softmax(Var),
    Gelu(Var),
    PixelShuffle(Var, usize),
    PixelUnshuffle(Var, usize),
    ConcatLast(Var, Var),
    NarrowLast { x: Var, start: usize },
    WindowPartition { x: Var, w: usize },
    WindowMerge { x: Var, w: usize },
    PooledToTokens { x: Var, q: usize },
    TokensToPooled { x: Var, q: usize },
    InterleaveRows { d: Var, x: Var, nw: usize, k: usize, s: usize },
    StripRows { x: Var, nw: usize, k: usize, s: usize },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, weights: Option<Vec<E>> },
    Resample { x: Var, r0: usize, c0: usize, r1: usize, c1: usize },
    ReflectPad { x: Var },
    Crop { x: Var },
}

struct Node<E: Elem> {
    value: Option<Tensor<E>>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    check_finite: bool,
    macs: u64,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), check_finite: false, macs: 0 }
    }

    /// Validate every produced value (and gradient) for NaN/Inf. On by
    /// default in the verification suites; the training loop leaves it off
    /// and checks the loss instead.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward multiply-accumulate count so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        self.nodes[v.idx()].value.as_ref().expect("tape value was released")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.idx()).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.idx()).and_then(|g| g.take())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    /// Attention weights saved by an `attention` node, if retained.
    pub fn attention_weights(&self, v: Var) -> Option<&[E]> {
        match &self.nodes[v.idx()].op {
            Op::Attention { weights, .. } => weights.as_deref(),
            _ => None,
        }
    }

    /// Drop stored values of all non-leaf nodes except `keep`. Used by the
    /// no-grad forward path to bound peak memory; a released tape cannot run
    /// `backward`.
    pub fn release_values(&mut self, keep: &[Var]) {
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            if keep.iter().any(|v| v.idx() == i) {
                continue;
            }
            node.value = None;
            if let Op::Attention { weights, .. } = &mut node.op {
                *weights = None;
            }
        }
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node { value: Some(value), op, requires_grad });
        self.grads.push(None);
        Ok(Var(id))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.idx()].requires_grad
    }

    /// Insert a leaf; `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad, "leaf").expect("leaf insert")
    }

    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.leaf(t, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::add(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Add(a, b), req, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::sub(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Sub(a, b), req, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::mul(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Mul(a, b), req, "mul")
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let v = linalg::scale(self.value(x), c);
        let req = self.requires(x);
        self.push(v, Op::Scale(x, c), req, "scale")
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = linalg::add_row(self.value(x), self.value(bias))?;
        let req = self.requires(x) || self.requires(bias);
        self.push(v, Op::AddRow(x, bias), req, "add_row")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|e| e.abs());
        let req = self.requires(x);
        self.push(v, Op::Abs(x), req, "abs")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(linalg::sum_all(self.value(x)));
        let req = self.requires(x);
        self.push(v, Op::Sum(x), req, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.numel().max(1);
        let v = Tensor::scalar(linalg::sum_all(t) * E::from_f64(1.0 / n as f64));
        let req = self.requires(x);
        self.push(v, Op::Mean(x), req, "mean")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = linalg::matmul(self.value(a), self.value(b))?;
        let (m, kk) = (self.value(a).shape()[0], self.value(a).shape()[1]);
        let n = self.value(b).shape()[1];
        self.macs += (m * kk * n) as u64;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::Matmul(a, b), req, "matmul")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, groups: usize, pad: PadMode) -> Result<Var> {
        let v = conv::conv2d(self.value(x), self.value(w), self.value(b), groups, pad)?;
        let ws = self.value(w).shape();
        let (h, wd) = (self.value(x).shape()[1], self.value(x).shape()[2]);
        self.macs += (ws[0] * ws[1] * ws[2] * ws[3] * h * wd) as u64;
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        self.push(v, Op::Conv2d { x, w, b, groups, pad }, req, "conv2d")
    }

    pub fn avg_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let v = conv::avg_pool2d(self.value(x), kernel, stride)?;
        let req = self.requires(x);
        self.push(v, Op::AvgPool { x, k: kernel }, req, "avg_pool2d")
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (v, stats) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(v, Op::LayerNorm { x, gamma, beta, stats }, req, "layer_norm")
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = norm::softmax_lastdim(self.value(x))?;
        let req = self.requires(x);
        self.push(v, Op::Softmax(x), req, "softmax")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = norm::gelu(self.value(x));
        let req = self.requires(x);
        self.push(v, Op::Gelu(x), req, "gelu")
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = layout::pixel_shuffle(self.value(x), r)?;
        let req = self.requires(x);
        self.push(v, Op::PixelShuffle(x, r), req, "pixel_shuffle")
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let v = layout::pixel_unshuffle(self.value(x), r)?;
        let req = self.requires(x);
        self.push(v, Op::PixelUnshuffle(x, r), req, "pixel_unshuffle")
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = layout::concat_lastdim(self.value(a), self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        self.push(v, Op::ConcatLast(a, b), req, "concat_lastdim")
    }

    pub fn narrow_lastdim(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = layout::narrow_lastdim(self.value(x), start, len)?;
        let req = self.requires(x);
        self.push(v, Op::NarrowLast { x, start }, req, "narrow_lastdim")
    }

    /// Inverse of `concat_lastdim`: split the last axis at `left` columns.
    pub fn split_lastdim(&mut self, x: Var, left: usize) -> Result<(Var, Var)> {
        let c = self.value(x).last_dim();
        if left > c {
            return Err(Error::ShapeMismatch {
                op: "split_lastdim",
                detail: format!("split at {left} on axis of {c}"),
            });
        }
        let a = self.narrow_lastdim(x, 0, left)?;
        let b = self.narrow_lastdim(x, left, c - left)?;
        Ok((a, b))
    }

    pub fn window_partition(&mut self, x: Var, w: usize) -> Result<Var> {
        let v = layout::window_partition(self.value(x), w)?;
        let req = self.requires(x);
        self.push(v, Op::WindowPartition { x, w }, req, "window_partition")
    }

    pub fn window_merge(&mut self, tokens: Var, w: usize, c: usize, h: usize, wd: usize) -> Result<Var> {
        let v = layout::window_merge(self.value(tokens), w, c, h, wd)?;
        let req = self.requires(tokens);
        self.push(v, Op::WindowMerge { x: tokens, w }, req, "window_merge")
    }

    pub fn pooled_to_tokens(&mut self, x: Var, q: usize) -> Result<Var> {
        let v = layout::pooled_to_tokens(self.value(x), q)?;
        let req = self.requires(x);
        self.push(v, Op::PooledToTokens { x, q }, req, "pooled_to_tokens")
    }

    pub fn tokens_to_pooled(&mut self, x: Var, rows: usize, cols: usize, q: usize) -> Result<Var> {
        let v = layout::tokens_to_pooled(self.value(x), rows, cols, q)?;
        let req = self.requires(x);
        self.push(v, Op::TokensToPooled { x, q }, req, "tokens_to_pooled")
    }

    pub fn interleave_rows(&mut self, d: Var, x: Var, nw: usize, k: usize, s: usize) -> Result<Var> {
        let v = layout::interleave_rows(self.value(d), self.value(x), nw, k, s)?;
        let req = self.requires(d) || self.requires(x);
        self.push(v, Op::InterleaveRows { d, x, nw, k, s }, req, "interleave_rows")
    }

    pub fn strip_rows(&mut self, x: Var, nw: usize, k: usize, s: usize) -> Result<Var> {
        let v = layout::strip_rows(self.value(x), nw, k, s)?;
        let req = self.requires(x);
        self.push(v, Op::StripRows { x, nw, k, s }, req, "strip_rows")
    }

    /// Windowed multi-head attention over (nw * seq, C) stacks of q/k/v rows.
    /// `save_weights` retains the softmax weights (required for backward and
    /// for the attention probe).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, dims: AttnDims, save_weights: bool) -> Result<Var> {
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        let save = save_weights || req;
        let (out, weights) = attn::attention_forward(self.value(q), self.value(k), self.value(v), &dims, save)?;
        self.macs += dims.mac_count();
        self.push(out, Op::Attention { q, k, v, dims, weights }, req, "attention")
    }

    /// Bilinear token-grid resample from (r0 x c0) to (r1 x c1) windows.
    pub fn resample_grid(&mut self, x: Var, r0: usize, c0: usize, r1: usize, c1: usize) -> Result<Var> {
        let v = layout::bilinear_grid(self.value(x), r0, c0, r1, c1)?;
        let req = self.requires(x);
        self.push(v, Op::Resample { x, r0, c0, r1, c1 }, req, "resample_grid")
    }

    pub fn reflect_pad(&mut self, x: Var, ph: usize, pw: usize) -> Result<Var> {
        let v = layout::reflect_pad(self.value(x), ph, pw)?;
        let req = self.requires(x);
        self.push(v, Op::ReflectPad { x }, req, "reflect_pad")
    }

    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let v = layout::crop(self.value(x), h, w)?;
        let req = self.requires(x);
        self.push(v, Op::Crop { x }, req, "crop")
    }

    /// Reverse-mode sweep from a scalar loss. Each sweep starts from a unit
    /// seed and its results are added into the stored gradients, so repeated
    /// calls without `zero_grads` accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lidx = loss.idx();
        {
            let lt = self.value(loss);
            if lt.numel() != 1 {
                return Err(Error::NonScalarLoss(lt.shape().to_vec()));
            }
        }
        if !self.nodes[lidx].requires_grad {
            return Ok(());
        }
        let seed = Tensor::new(self.value(loss).shape().to_vec(), vec![E::ONE])?;
        let check = self.check_finite;
        let nodes = &self.nodes;
        let mut work: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        let grads = &mut work;
        accum(grads, nodes, loss, seed, check)?;

        for i in (0..=lidx).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum(grads, nodes, *a, g.clone(), check)?;
                    accum(grads, nodes, *b, g.clone(), check)?;
                }
                Op::Sub(a, b) => {
                    accum(grads, nodes, *a, g.clone(), check)?;
                    accum(grads, nodes, *b, linalg::scale(&g, -E::ONE), check)?;
                }
                Op::Mul(a, b) => {
                    accum(grads, nodes, *a, linalg::mul(&g, val(nodes, *b))?, check)?;
                    accum(grads, nodes, *b, linalg::mul(&g, val(nodes, *a))?, check)?;
                }
                Op::Scale(x, c) => {
                    accum(grads, nodes, *x, linalg::scale(&g, *c), check)?;
                }
                Op::AddRow(x, bias) => {
                    accum(grads, nodes, *x, g.clone(), check)?;
                    accum(grads, nodes, *bias, linalg::col_sums(&g), check)?;
                }
                Op::Abs(x) => {
                    let xv = val(nodes, *x);
                    let d = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&v, &gv)| {
                                if v > E::ZERO {
                                    gv
                                } else if v < E::ZERO {
                                    -gv
                                } else {
                                    E::ZERO
                                }
                            })
                            .collect(),
                    )?;
                    accum(grads, nodes, *x, d, check)?;
                }
                Op::Sum(x) => {
                    let gv = g.item()?;
                    accum(grads, nodes, *x, Tensor::full(val(nodes, *x).shape(), gv), check)?;
                }
                Op::Mean(x) => {
                    let xv = val(nodes, *x);
                    let gv = g.item()? * E::from_f64(1.0 / xv.numel().max(1) as f64);
                    accum(grads, nodes, *x, Tensor::full(xv.shape(), gv), check)?;
                }
                Op::Matmul(a, b) => {
                    accum(grads, nodes, *a, linalg::matmul_nt(&g, val(nodes, *b))?, check)?;
                    accum(grads, nodes, *b, linalg::matmul_tn(val(nodes, *a), &g)?, check)?;
                }
                Op::Conv2d { x, w, b, groups, pad } => {
                    let (dx, dw, db) =
                        conv::conv2d_backward(val(nodes, *x), val(nodes, *w), &g, *groups, *pad)?;
                    accum(grads, nodes, *x, dx, check)?;
                    accum(grads, nodes, *w, dw, check)?;
                    accum(grads, nodes, *b, db, check)?;
                }
                Op::AvgPool { x, k } => {
                    let dx = conv::avg_pool2d_backward(val(nodes, *x).shape(), *k, &g)?;
                    accum(grads, nodes, *x, dx, check)?;
                }
                Op::LayerNorm { x, gamma, beta, stats } => {
                    let (dx, dgamma, dbeta) =
                        norm::layer_norm_backward(val(nodes, *x), val(nodes, *gamma), stats, &g)?;
                    accum(grads, nodes, *x, dx, check)?;
                    accum(grads, nodes, *gamma, dgamma, check)?;
                    accum(grads, nodes, *beta, dbeta, check)?;
                }
                Op::Softmax(x) => {
                    let y = nodes[i].value.as_ref().expect("softmax output released");
                    accum(grads, nodes, *x, norm::softmax_backward(y, &g)?, check)?;
                }
                Op::Gelu(x) => {
                    accum(grads, nodes, *x, norm::gelu_backward(val(nodes, *x), &g), check)?;
                }
                Op::PixelShuffle(x, r) => {
                    accum(grads, nodes, *x, layout::pixel_unshuffle(&g, *r)?, check)?;
                }
                Op::PixelUnshuffle(x, r) => {
                    accum(grads, nodes, *x, layout::pixel_shuffle(&g, *r)?, check)?;
                }
                Op::ConcatLast(a, b) => {
                    let ca = val(nodes, *a).last_dim();
                    let cb = val(nodes, *b).last_dim();
                    accum(grads, nodes, *a, layout::narrow_lastdim(&g, 0, ca)?, check)?;
                    accum(grads, nodes, *b, layout::narrow_lastdim(&g, ca, cb)?, check)?;
                }
                Op::NarrowLast { x, start } => {
                    let c = val(nodes, *x).last_dim();
                    accum(grads, nodes, *x, layout::narrow_backward(&g, c, *start)?, check)?;
                }
                Op::WindowPartition { x, w } => {
                    let xs = val(nodes, *x).shape();
                    let dx = layout::window_merge(&g, *w, xs[0], xs[1], xs[2])?;
                    accum(grads, nodes, *x, dx, check)?;
                }
                Op::WindowMerge { x, w } => {
                    accum(grads, nodes, *x, layout::window_partition(&g, *w)?, check)?;
                }
                Op::PooledToTokens { x, q } => {
                    let xs = val(nodes, *x).shape();
                    let dx = layout::tokens_to_pooled(&g, xs[1] / *q, xs[2] / *q, *q)?;
                    accum(grads, nodes, *x, dx, check)?;
                }
                Op::TokensToPooled { x, q } => {
                    accum(grads, nodes, *x, layout::pooled_to_tokens(&g, *q)?, check)?;
                }
                Op::InterleaveRows { d, x, nw, k, s } => {
                    let (dd, dx) = layout::deinterleave_rows(&g, *nw, *k, *s)?;
                    accum(grads, nodes, *d, dd, check)?;
                    accum(grads, nodes, *x, dx, check)?;
                }
                Op::StripRows { x, nw, k, s } => {
                    accum(grads, nodes, *x, layout::strip_rows_backward(&g, *nw, *k, *s)?, check)?;
                }
                Op::Attention { q, k, v, dims, weights } => {
                    let wbuf = weights.as_ref().ok_or_else(|| {
                        Error::MissingGrad(format!("attention weights not retained at node {i}"))
                    })?;
                    let (dq, dk, dv) = attn::attention_backward(
                        val(nodes, *q),
                        val(nodes, *k),
                        val(nodes, *v),
                        wbuf,
                        &g,
                        dims,
                    )?;
                    accum(grads, nodes, *q, dq, check)?;
                    accum(grads, nodes, *k, dk, check)?;
                    accum(grads, nodes, *v, dv, check)?;
                }
                Op::Resample { x, r0, c0, r1, c1 } => {
                    let dx = layout::bilinear_grid_backward(&g, *r0, *c0, *r1, *c1)?;
                    accum(grads, nodes, *x, dx, check)?;
                }
                Op::ReflectPad { x } => {
                    let xs = val(nodes, *x).shape();
                    accum(grads, nodes, *x, layout::reflect_pad_backward(&g, xs[1], xs[2])?, check)?;
                }
                Op::Crop { x } => {
                    let xs = val(nodes, *x).shape();
                    accum(grads, nodes, *x, layout::crop_backward(&g, xs[1], xs[2])?, check)?;
                }
            }
            grads[i] = Some(g);
        }

        // Fold the sweep into the retained gradients.
        if self.grads.len() < nodes.len() {
            self.grads.resize(nodes.len(), None);
        }
        for (slot, delta) in self.grads.iter_mut().zip(work) {
            if let Some(d) = delta {
                match slot {
                    Some(g) => {
                        for (a, &b) in g.data_mut().iter_mut().zip(d.data()) {
                            *a += b;
                        }
                    }
                    None => *slot = Some(d),
                }
            }
        }
        Ok(())
    }
}

fn val<'a, E: Elem>(nodes: &'a [Node<E>], v: Var) -> &'a Tensor<E> {
    nodes[v.idx()].value.as_ref().expect("tape value was released")
}

fn accum<E: Elem>(
    grads: &mut [Option<Tensor<E>>],
    nodes: &[Node<E>],
    v: Var,
    delta: Tensor<E>,
    check: bool,
) -> Result<()> {
    if !nodes[v.idx()].requires_grad {
        return Ok(());
    }
    if check && !delta.is_finite() {
        return Err(Error::NonFinite { op: "backward" });
    }
    match &mut grads[v.idx()] {
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::from_fn(&[2, 3], |i| i as f64), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn half_square_norm_gradient_is_x() {
        let mut t = Tape::new();
        let xt = Tensor::<f64>::new(alloc::vec![3], alloc::vec![3.0, -1.0, 0.5]).unwrap();
        let x = t.leaf(xt.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let half = t.scale(s, 0.5).unwrap();
        t.backward(half).unwrap();
        assert_eq!(t.grad(x).unwrap(), &xt);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::full(&[4], 2.0), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Tensor::full(&[4], 2.0));
        t.zero_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &Tensor::full(&[4], 1.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::zeros(&[3]), true);
        let y = t.abs(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let mut rng = Rng::new(99);
            let mut t = Tape::new();
            let a = t.leaf(Tensor::<f64>::rand_uniform(&[4, 5], &mut rng), true);
            let b = t.leaf(Tensor::<f64>::rand_uniform(&[5, 3], &mut rng), true);
            let m = t.matmul(a, b).unwrap();
            let sm = t.softmax_lastdim(m).unwrap();
            let s = t.sum(sm).unwrap();
            t.backward(s).unwrap();
            (t.grad(a).unwrap().clone(), t.grad(b).unwrap().clone())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::<f64>::full(&[2], 1.0), true);
        let c = t.constant(Tensor::<f64>::full(&[2], 5.0));
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &Tensor::full(&[2], 5.0));
    }

    #[test]
    fn nonfinite_forward_detected() {
        let mut t = Tape::<f64>::new().with_finite_checks(true);
        let x = t.leaf(Tensor::full(&[2], 1.0e308), false);
        let y = t.add(x, x);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}

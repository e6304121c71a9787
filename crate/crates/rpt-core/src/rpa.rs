//! Regional Prior Attention: the dual-token layer that fuses per-input local
//! tokens with learnable, position-anchored regional prior tokens and injects
//! them into window attention.
//!
//! Per layer (k > 0):
//!   1. window tokenization of the (C, H, W) feature map,
//!   2. local tokens L from a lightweight summarizer (1x1 projection,
//!      depthwise 3x3, average pool to one token per window cell),
//!   3. regional prior tokens R, a learnable grid initialized from the first
//!      training batch and distinct per layer,
//!   4. dynamic tokens D = [L || R] (channel concat, no gating),
//!   5. global self-attention over D, then window attention over each
//!      window's sequence with its k dynamic tokens prepended; the dynamic
//!      rows of the output are discarded and windows merged back.
//!
//! Variants: `Rpt` fuses both halves (C/2 each); `Baseline` uses local tokens
//! only at full width; `Static` uses the prior bank only at full width.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops::attn::{attention_forward, dyn_token_mass, AttnDims};
use crate::ops::conv::PadMode;
use crate::ops::layout;
use crate::ops::linalg;
use crate::ops::norm;
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Static,
    Rpt,
}

impl Variant {
    /// Local-token channel width (0 when the variant has no tokenizer).
    pub fn c_loc(self, c: usize) -> usize {
        match self {
            Variant::Rpt => c / 2,
            Variant::Baseline => c,
            Variant::Static => 0,
        }
    }

    /// Prior-token channel width (0 when the variant has no bank).
    pub fn c_pri(self, c: usize) -> usize {
        match self {
            Variant::Rpt => c / 2,
            Variant::Baseline => 0,
            Variant::Static => c,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerCfg {
    pub c: usize,
    pub w: usize,
    pub k: usize,
    pub heads: usize,
    pub variant: Variant,
    pub pad: PadMode,
}

impl LayerCfg {
    /// Tokens per window form a q x q sub-grid; k must be a perfect square
    /// with q dividing the window edge.
    pub fn token_grid(&self) -> Result<usize> {
        let q = int_sqrt(self.k);
        if q * q != self.k || (self.k > 0 && self.w % q != 0) {
            return Err(Error::BadConfig(format!(
                "k = {} must be a perfect square whose root divides window edge {}",
                self.k, self.w
            )));
        }
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.c % self.heads != 0 {
            return Err(Error::BadConfig(format!(
                "channels {} not divisible by heads {}",
                self.c, self.heads
            )));
        }
        if self.variant == Variant::Rpt && self.c % 2 != 0 {
            return Err(Error::BadConfig(format!("channels {} must be even for the rpt variant", self.c)));
        }
        if self.w == 0 {
            return Err(Error::BadConfig(String::from("window edge must be positive")));
        }
        self.token_grid()?;
        Ok(())
    }
}

fn int_sqrt(k: usize) -> usize {
    let mut q = 0;
    while (q + 1) * (q + 1) <= k {
        q += 1;
    }
    q
}

/// LN + multi-head attention + LN + MLP parameter ids for one stage.
#[derive(Clone, Debug)]
pub struct Stage {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub c_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankState {
    pub initialized: bool,
    pub rows0: usize,
    pub cols0: usize,
}

#[derive(Clone, Debug)]
pub struct Bank {
    pub r: ParamId,
    pub c_pri: usize,
    pub state: BankState,
}

#[derive(Clone, Debug)]
pub struct RpaLayer {
    pub cfg: LayerCfg,
    pub tokenizer: Option<Tokenizer>,
    pub bank: Option<Bank>,
    pub dyn_stage: Option<Stage>,
    pub win_stage: Stage,
}

/// Learning-rate multiplier applied to every regional prior bank.
pub const PRIOR_LR_MULT: f64 = 50.0;

pub fn build_stage<E: Elem>(params: &mut ParamSet<E>, prefix: &str, c: usize, rng: &mut Rng) -> Stage {
    let hidden = MLP_RATIO * c;
    let tn = |shape: &[usize], rng: &mut Rng| Tensor::<E>::from_fn(shape, |_| E::from_f64(rng.trunc_normal(INIT_STD)));
    let mut add = |name: String, t: Tensor<E>| params.add(name, t, 1.0);
    Stage {
        ln1_g: add(format!("{prefix}.ln1.g"), Tensor::full(&[c], E::ONE)),
        ln1_b: add(format!("{prefix}.ln1.b"), Tensor::zeros(&[c])),
        wq: add(format!("{prefix}.wq"), tn(&[c, c], rng)),
        bq: add(format!("{prefix}.bq"), Tensor::zeros(&[c])),
        wk: add(format!("{prefix}.wk"), tn(&[c, c], rng)),
        bk: add(format!("{prefix}.bk"), Tensor::zeros(&[c])),
        wv: add(format!("{prefix}.wv"), tn(&[c, c], rng)),
        bv: add(format!("{prefix}.bv"), Tensor::zeros(&[c])),
        wo: add(format!("{prefix}.wo"), tn(&[c, c], rng)),
        bo: add(format!("{prefix}.bo"), Tensor::zeros(&[c])),
        ln2_g: add(format!("{prefix}.ln2.g"), Tensor::full(&[c], E::ONE)),
        ln2_b: add(format!("{prefix}.ln2.b"), Tensor::zeros(&[c])),
        fc1_w: add(format!("{prefix}.fc1.w"), tn(&[c, hidden], rng)),
        fc1_b: add(format!("{prefix}.fc1.b"), Tensor::zeros(&[hidden])),
        fc2_w: add(format!("{prefix}.fc2.w"), tn(&[hidden, c], rng)),
        fc2_b: add(format!("{prefix}.fc2.b"), Tensor::zeros(&[c])),
    }
}

pub fn build_layer<E: Elem>(
    params: &mut ParamSet<E>,
    prefix: &str,
    cfg: LayerCfg,
    rng: &mut Rng,
) -> Result<RpaLayer> {
    cfg.validate()?;
    let c = cfg.c;

    let tokenizer = if cfg.k > 0 && cfg.variant != Variant::Static {
        let c_out = cfg.variant.c_loc(c);
        let proj_w = params.add(
            format!("{prefix}.tok.proj.w"),
            Tensor::<E>::from_fn(&[c_out, c, 1, 1], |_| E::from_f64(rng.trunc_normal(INIT_STD))),
            1.0,
        );
        let proj_b = params.add(format!("{prefix}.tok.proj.b"), Tensor::zeros(&[c_out]), 1.0);
        let dw_w = params.add(
            format!("{prefix}.tok.dw.w"),
            Tensor::<E>::from_fn(&[c_out, 1, 3, 3], |_| E::from_f64(rng.trunc_normal(INIT_STD))),
            1.0,
        );
        let dw_b = params.add(format!("{prefix}.tok.dw.b"), Tensor::zeros(&[c_out]), 1.0);
        Some(Tokenizer { proj_w, proj_b, dw_w, dw_b, c_out })
    } else {
        None
    };

    let bank = if cfg.k > 0 && cfg.variant != Variant::Baseline {
        let c_pri = cfg.variant.c_pri(c);
        // Placeholder until first-batch initialization pins the grid extents.
        let r = params.add(format!("{prefix}.bank"), Tensor::zeros(&[0, c_pri]), PRIOR_LR_MULT);
        Some(Bank { r, c_pri, state: BankState { initialized: false, rows0: 0, cols0: 0 } })
    } else {
        None
    };

    let dyn_stage = if cfg.k > 0 { Some(build_stage(params, &format!("{prefix}.dyn"), c, rng)) } else { None };
    let win_stage = build_stage(params, &format!("{prefix}.win"), c, rng);

    Ok(RpaLayer { cfg, tokenizer, bank, dyn_stage, win_stage })
}

/// One pre-norm transformer stage: x + MSA(LN(x)), then + MLP(LN(.)).
/// Returns the output and the attention node (for weight probes).
pub fn stage_forward<E: Elem>(
    tape: &mut Tape<E>,
    x: Var,
    stage: &Stage,
    bind: &Binding,
    dims: AttnDims,
    save_weights: bool,
) -> Result<(Var, Var)> {
    let n1 = tape.layer_norm(x, bind.var(stage.ln1_g), bind.var(stage.ln1_b), LN_EPS)?;
    let q = tape.matmul(n1, bind.var(stage.wq))?;
    let q = tape.add_row(q, bind.var(stage.bq))?;
    let k = tape.matmul(n1, bind.var(stage.wk))?;
    let k = tape.add_row(k, bind.var(stage.bk))?;
    let v = tape.matmul(n1, bind.var(stage.wv))?;
    let v = tape.add_row(v, bind.var(stage.bv))?;
    let attn = tape.attention(q, k, v, dims, save_weights)?;
    let proj = tape.matmul(attn, bind.var(stage.wo))?;
    let proj = tape.add_row(proj, bind.var(stage.bo))?;
    let x1 = tape.add(x, proj)?;

    let n2 = tape.layer_norm(x1, bind.var(stage.ln2_g), bind.var(stage.ln2_b), LN_EPS)?;
    let h = tape.matmul(n2, bind.var(stage.fc1_w))?;
    let h = tape.add_row(h, bind.var(stage.fc1_b))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bind.var(stage.fc2_w))?;
    let h = tape.add_row(h, bind.var(stage.fc2_b))?;
    let out = tape.add(x1, h)?;
    Ok((out, attn))
}

/// Local token generator: 1x1 projection, depthwise 3x3, average pool down to
/// the per-window token grid, in window-major token order.
pub fn local_tokens<E: Elem>(tape: &mut Tape<E>, f: Var, layer: &RpaLayer, bind: &Binding) -> Result<Var> {
    let tok = layer
        .tokenizer
        .as_ref()
        .ok_or_else(|| Error::BadConfig(String::from("variant has no local tokenizer")))?;
    let q = layer.cfg.token_grid()?;
    let p = tape.conv2d(f, bind.var(tok.proj_w), bind.var(tok.proj_b), 1, layer.cfg.pad)?;
    let d = tape.conv2d(p, bind.var(tok.dw_w), bind.var(tok.dw_b), tok.c_out, layer.cfg.pad)?;
    let kern = layer.cfg.w / q;
    let pooled = tape.avg_pool2d(d, kern, kern)?;
    tape.pooled_to_tokens(pooled, q)
}

/// Parameter-free pooled tokens at full channel width; the static variant's
/// initialization summary (its bank has no tokenizer to copy from).
pub fn pooled_full_tokens<E: Elem>(tape: &mut Tape<E>, f: Var, w: usize, k: usize) -> Result<Var> {
    let q = int_sqrt(k.max(1));
    let pooled = tape.avg_pool2d(f, w / q, w / q)?;
    tape.pooled_to_tokens(pooled, q)
}

/// Copy the batch-mean local tokens into the bank. No-op once initialized;
/// later calls leave the bank bitwise unchanged.
pub fn prior_init_from<E: Elem>(
    layer: &mut RpaLayer,
    params: &mut ParamSet<E>,
    l_batch: &[Tensor<E>],
    rows: usize,
    cols: usize,
) -> Result<()> {
    let bank = match layer.bank.as_mut() {
        Some(b) => b,
        None => return Ok(()),
    };
    if bank.state.initialized {
        return Ok(());
    }
    let n_tokens = layer.cfg.k * rows * cols;
    let mut mean = Tensor::<E>::zeros(&[n_tokens, bank.c_pri]);
    if l_batch.is_empty() {
        return Err(Error::BadConfig(String::from("prior init needs at least one sample")));
    }
    for l in l_batch {
        if l.shape() != mean.shape() {
            return Err(Error::ShapeMismatch {
                op: "prior_init_from",
                detail: format!("local tokens {:?}, bank expects {:?}", l.shape(), mean.shape()),
            });
        }
        for (m, &v) in mean.data_mut().iter_mut().zip(l.data()) {
            *m += v;
        }
    }
    let inv = E::from_f64(1.0 / l_batch.len() as f64);
    for m in mean.data_mut() {
        *m *= inv;
    }
    params.set_value(bank.r, mean);
    bank.state = BankState { initialized: true, rows0: rows, cols0: cols };
    Ok(())
}

/// Bank tokens for the current (rows, cols) window grid: verbatim at the
/// training extents, bilinear token-grid interpolation otherwise.
pub fn resample_prior<E: Elem>(
    tape: &mut Tape<E>,
    layer: &RpaLayer,
    bind: &Binding,
    rows: usize,
    cols: usize,
) -> Result<Var> {
    let bank = layer.bank.as_ref().ok_or(Error::BankUninitialized)?;
    if !bank.state.initialized {
        return Err(Error::BankUninitialized);
    }
    let r = bind.var(bank.r);
    let (r0, c0) = (bank.state.rows0, bank.state.cols0);
    if (rows, cols) == (r0, c0) {
        return Ok(r);
    }
    let q = layer.cfg.token_grid()?;
    if q == 1 {
        return tape.resample_grid(r, r0, c0, rows, cols);
    }
    // k > 1: tokens are window-major; route through the pooled grid layout.
    let grid = tape.tokens_to_pooled(r, r0, c0, q)?;
    let flat = tape.pooled_to_tokens(grid, 1)?;
    let res = tape.resample_grid(flat, r0 * q, c0 * q, rows * q, cols * q)?;
    let back = tape.tokens_to_pooled(res, rows * q, cols * q, 1)?;
    tape.pooled_to_tokens(back, q)
}

/// Fuse local and prior tokens into dynamic tokens D = [L || R].
pub fn fuse<E: Elem>(tape: &mut Tape<E>, l: Var, r: Var) -> Result<Var> {
    tape.concat_lastdim(l, r)
}

/// Global self-attention plus MLP over the dynamic tokens (one sequence over
/// all N_c tokens).
pub fn dyn_token_self_attention<E: Elem>(
    tape: &mut Tape<E>,
    d: Var,
    stage: &Stage,
    bind: &Binding,
    heads: usize,
) -> Result<Var> {
    let n_c = tape.shape(d)[0];
    let c = tape.shape(d)[1];
    let dims = AttnDims { windows: 1, seq: n_c, heads, channels: c };
    let (out, _) = stage_forward(tape, d, stage, bind, dims, false)?;
    Ok(out)
}

/// Window attention with k dynamic tokens prepended to each window sequence.
/// Returns the window-token rows (dynamic rows are dropped) and the attention
/// node. With `dstar` = None (k = 0) this is plain window attention.
#[allow(clippy::too_many_arguments)]
pub fn window_attention_with_dyn<E: Elem>(
    tape: &mut Tape<E>,
    dstar: Option<Var>,
    x_tokens: Var,
    stage: &Stage,
    bind: &Binding,
    nw: usize,
    k: usize,
    s: usize,
    heads: usize,
    save_weights: bool,
) -> Result<(Var, Var)> {
    let c = tape.shape(x_tokens)[1];
    let z = match dstar {
        Some(d) => tape.interleave_rows(d, x_tokens, nw, k, s)?,
        None => x_tokens,
    };
    let dims = AttnDims { windows: nw, seq: k + s, heads, channels: c };
    let (o, attn) = stage_forward(tape, z, stage, bind, dims, save_weights)?;
    let out = if k > 0 { tape.strip_rows(o, nw, k, s)? } else { o };
    Ok((out, attn))
}

/// Output of one RPA layer forward.
pub struct LayerOut {
    pub out: Var,
    /// Window-stage attention node; weights retained when probing.
    pub win_attn: Var,
}

/// One full RPA layer on a (C, H, W) feature map.
pub fn layer_forward<E: Elem>(
    tape: &mut Tape<E>,
    f: Var,
    layer: &RpaLayer,
    bind: &Binding,
    probe: bool,
) -> Result<LayerOut> {
    let shape = tape.shape(f).to_vec();
    let (c, h, wd) = (shape[0], shape[1], shape[2]);
    let w = layer.cfg.w;
    if h % w != 0 || w == 0 {
        return Err(Error::NonDivisible { what: "rpa layer height", extent: h, divisor: w.max(1) });
    }
    if wd % w != 0 {
        return Err(Error::NonDivisible { what: "rpa layer width", extent: wd, divisor: w });
    }
    let (rows, cols) = (h / w, wd / w);
    let nw = rows * cols;
    let s = w * w;
    let k = layer.cfg.k;

    let x_tokens = tape.window_partition(f, w)?;

    let dstar = if k == 0 {
        None
    } else {
        let d = match layer.cfg.variant {
            Variant::Baseline => local_tokens(tape, f, layer, bind)?,
            Variant::Static => resample_prior(tape, layer, bind, rows, cols)?,
            Variant::Rpt => {
                let l = local_tokens(tape, f, layer, bind)?;
                let r = resample_prior(tape, layer, bind, rows, cols)?;
                fuse(tape, l, r)?
            }
        };
        let stage = layer.dyn_stage.as_ref().expect("dyn stage present when k > 0");
        Some(dyn_token_self_attention(tape, d, stage, bind, layer.cfg.heads)?)
    };

    let (tokens_out, win_attn) = window_attention_with_dyn(
        tape,
        dstar,
        x_tokens,
        &layer.win_stage,
        bind,
        nw,
        k,
        s,
        layer.cfg.heads,
        probe,
    )?;
    let out = tape.window_merge(tokens_out, w, c, h, wd)?;
    Ok(LayerOut { out, win_attn })
}

/// Residual block: out = F + layer_n(...layer_1(F)).
pub fn block_forward<E: Elem>(
    tape: &mut Tape<E>,
    f: Var,
    layers: &[RpaLayer],
    bind: &Binding,
    probe_layer: Option<usize>,
) -> Result<(Var, Option<Var>)> {
    let mut cur = f;
    let mut probe_var = None;
    for (i, layer) in layers.iter().enumerate() {
        let probing = probe_layer == Some(i);
        let lo = layer_forward(tape, cur, layer, bind, probing)?;
        cur = lo.out;
        if probing {
            probe_var = Some(lo.win_attn);
        }
    }
    let out = tape.add(f, cur)?;
    Ok((out, probe_var))
}

/// Per-window mean attention mass placed on the dynamic tokens by the window
/// rows of the probed attention node, reshaped to the (rows, cols) window grid.
pub fn probe_mass<E: Elem>(tape: &Tape<E>, attn: Var, k: usize, rows: usize, cols: usize) -> Result<Tensor<f64>> {
    if k == 0 {
        return Err(Error::ProbeUnavailable(String::from("k = 0 layer has no dynamic rows")));
    }
    let weights = tape
        .attention_weights(attn)
        .ok_or_else(|| Error::ProbeUnavailable(String::from("attention weights were not retained")))?;
    let c = tape.shape(attn)[1];
    let nw = rows * cols;
    let seq = tape.shape(attn)[0] / nw;
    let heads = weights.len() / (nw * seq * seq);
    let dims = AttnDims { windows: nw, seq, heads, channels: c };
    let mass = dyn_token_mass(weights, &dims, k);
    Tensor::new(alloc::vec![rows, cols], mass)
}

/// Plain per-window MSA + MLP stage built directly from kernels, window by
/// window, with no dynamic-token plumbing. Reference for the k = 0 reduction
/// check: `window_attention_with_dyn` at k = 0 must match this bitwise.
pub fn reference_window_msa<E: Elem>(
    f: &Tensor<E>,
    w: usize,
    heads: usize,
    weights: &StageWeights<'_, E>,
) -> Result<Tensor<E>> {
    let (c, h, wd) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let grid = crate::window::window_partition(f, w)?;
    let s = w * w;
    let mut out_rows: Vec<E> = Vec::with_capacity(grid.tokens.numel());
    for j in 0..grid.n_windows() {
        let z = Tensor::new(alloc::vec![s, c], grid.window(j).to_vec())?;
        let (n1, _) = norm::layer_norm(&z, weights.ln1_g, weights.ln1_b, LN_EPS)?;
        let q = linalg::add_row(&linalg::matmul(&n1, weights.wq)?, weights.bq)?;
        let k = linalg::add_row(&linalg::matmul(&n1, weights.wk)?, weights.bk)?;
        let v = linalg::add_row(&linalg::matmul(&n1, weights.wv)?, weights.bv)?;
        let dims = AttnDims { windows: 1, seq: s, heads, channels: c };
        let (a, _) = attention_forward(&q, &k, &v, &dims, false)?;
        let proj = linalg::add_row(&linalg::matmul(&a, weights.wo)?, weights.bo)?;
        let z1 = linalg::add(&z, &proj)?;
        let (n2, _) = norm::layer_norm(&z1, weights.ln2_g, weights.ln2_b, LN_EPS)?;
        let hdn = linalg::add_row(&linalg::matmul(&n2, weights.fc1_w)?, weights.fc1_b)?;
        let hdn = norm::gelu(&hdn);
        let hdn = linalg::add_row(&linalg::matmul(&hdn, weights.fc2_w)?, weights.fc2_b)?;
        let o = linalg::add(&z1, &hdn)?;
        out_rows.extend_from_slice(o.data());
    }
    layout::window_merge(&Tensor::new(alloc::vec![grid.n_windows() * s, c], out_rows)?, w, c, h, wd)
}

/// Borrowed stage weights for the reference path.
pub struct StageWeights<'a, E: Elem> {
    pub ln1_g: &'a Tensor<E>,
    pub ln1_b: &'a Tensor<E>,
    pub wq: &'a Tensor<E>,
    pub bq: &'a Tensor<E>,
    pub wk: &'a Tensor<E>,
    pub bk: &'a Tensor<E>,
    pub wv: &'a Tensor<E>,
    pub bv: &'a Tensor<E>,
    pub wo: &'a Tensor<E>,
    pub bo: &'a Tensor<E>,
    pub ln2_g: &'a Tensor<E>,
    pub ln2_b: &'a Tensor<E>,
    pub fc1_w: &'a Tensor<E>,
    pub fc1_b: &'a Tensor<E>,
    pub fc2_w: &'a Tensor<E>,
    pub fc2_b: &'a Tensor<E>,
}

impl<'a, E: Elem> StageWeights<'a, E> {
    pub fn from_stage(params: &'a ParamSet<E>, s: &Stage) -> Self {
        StageWeights {
            ln1_g: params.value(s.ln1_g),
            ln1_b: params.value(s.ln1_b),
            wq: params.value(s.wq),
            bq: params.value(s.bq),
            wk: params.value(s.wk),
            bk: params.value(s.bk),
            wv: params.value(s.wv),
            bv: params.value(s.bv),
            wo: params.value(s.wo),
            bo: params.value(s.bo),
            ln2_g: params.value(s.ln2_g),
            ln2_b: params.value(s.ln2_b),
            fc1_w: params.value(s.fc1_w),
            fc1_b: params.value(s.fc1_b),
            fc2_w: params.value(s.fc2_w),
            fc2_b: params.value(s.fc2_b),
        }
    }
}

//! Full super-resolution network: shallow conv stem, deep body of residual
//! RPA blocks under a per-block window schedule, and a pixel-shuffle
//! reconstruction head with a global residual around the body.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::ops::conv::PadMode;
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::Rng;
use crate::rpa::{
    self, layer_forward, local_tokens, pooled_full_tokens, prior_init_from, LayerCfg, RpaLayer, Variant,
};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub heads: usize,
    pub window_schedule: Vec<usize>,
    pub k: usize,
    pub scale: usize,
    pub variant: Variant,
    pub img_channels: usize,
    pub pad_mode: PadMode,
}

impl ModelConfig {
    /// Published presets plus the desk-scale tiny preset.
    pub fn preset(name: &str) -> Result<ModelConfig> {
        match name {
            "classical" => Ok(ModelConfig {
                channels: 240,
                blocks: 4,
                layers_per_block: 4,
                heads: 6,
                window_schedule: vec![8, 16, 16, 32],
                k: 1,
                scale: 4,
                variant: Variant::Rpt,
                img_channels: 3,
                pad_mode: PadMode::Zero,
            }),
            "light" => Ok(ModelConfig {
                channels: 80,
                blocks: 4,
                layers_per_block: 4,
                heads: 4,
                window_schedule: vec![8, 8, 16, 16],
                k: 1,
                scale: 4,
                variant: Variant::Rpt,
                img_channels: 3,
                pad_mode: PadMode::Zero,
            }),
            "tiny" => Ok(ModelConfig {
                channels: 16,
                blocks: 2,
                layers_per_block: 2,
                heads: 2,
                window_schedule: vec![4, 4],
                k: 1,
                scale: 2,
                variant: Variant::Rpt,
                img_channels: 3,
                pad_mode: PadMode::Zero,
            }),
            other => Err(Error::BadConfig(format!("unknown preset '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.layers_per_block == 0 || self.channels == 0 {
            return Err(Error::BadConfig(String::from("blocks, layers, and channels must be positive")));
        }
        if self.window_schedule.len() != self.blocks {
            return Err(Error::BadConfig(format!(
                "window schedule has {} entries for {} blocks",
                self.window_schedule.len(),
                self.blocks
            )));
        }
        if self.scale == 0 {
            return Err(Error::BadConfig(String::from("scale must be >= 1")));
        }
        if self.img_channels != 3 {
            return Err(Error::BadConfig(String::from("input/output images are 3-channel")));
        }
        if self.k == 0 && self.variant != Variant::Baseline {
            return Err(Error::BadConfig(String::from(
                "k = 0 leaves no dynamic tokens; only the baseline variant supports it",
            )));
        }
        for &w in &self.window_schedule {
            self.layer_cfg(w).validate()?;
        }
        Ok(())
    }

    fn layer_cfg(&self, w: usize) -> LayerCfg {
        LayerCfg {
            c: self.channels,
            w,
            k: self.k,
            heads: self.heads,
            variant: self.variant,
            pad: self.pad_mode,
        }
    }

    /// Least common multiple of the window schedule; feature maps are padded
    /// to this granularity once, ahead of the body.
    pub fn window_lcm(&self) -> usize {
        self.window_schedule.iter().fold(1, |acc, &w| lcm(acc, w))
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

#[derive(Clone, Debug)]
pub(crate) struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct RptSrModel<E: Elem> {
    pub(crate) cfg: ModelConfig,
    pub(crate) params: ParamSet<E>,
    pub(crate) stem: ConvIds,
    pub(crate) blocks: Vec<Vec<RpaLayer>>,
    pub(crate) agg: ConvIds,
    pub(crate) up: ConvIds,
    pub(crate) last: ConvIds,
    pub(crate) seed: u64,
}

/// A recorded training forward pass, ready for a loss and `backward`.
pub struct TrainForward<E: Elem> {
    pub tape: Tape<E>,
    pub out: Var,
    pub binding: Binding,
}

/// Forward pass with the attention probe enabled on one layer.
pub struct ProbeForward<E: Elem> {
    pub output: Tensor<E>,
    /// Per-window mean attention mass on the dynamic tokens, (rows, cols).
    pub map: Tensor<f64>,
}

impl<E: Elem> RptSrModel<E> {
    /// Deterministic build: truncated-normal (std 0.02) projections and conv
    /// weights, zero biases, unit LN scales. Prior banks start uninitialized.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed).fork(0x6d6f64656c);
        let mut params = ParamSet::new();
        let c = cfg.channels;

        let stem = conv_param(&mut params, "stem", c, cfg.img_channels, 3, &mut rng);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for (bi, &w) in cfg.window_schedule.iter().enumerate() {
            let mut layers = Vec::with_capacity(cfg.layers_per_block);
            for li in 0..cfg.layers_per_block {
                layers.push(rpa::build_layer(
                    &mut params,
                    &format!("b{bi}.l{li}"),
                    cfg.layer_cfg(w),
                    &mut rng,
                )?);
            }
            blocks.push(layers);
        }
        let agg = conv_param(&mut params, "agg", c, c, 3, &mut rng);
        let up = conv_param(&mut params, "up", c * cfg.scale * cfg.scale, c, 3, &mut rng);
        let last = conv_param(&mut params, "last", cfg.img_channels, c, 3, &mut rng);

        Ok(RptSrModel { cfg, params, stem, blocks, agg, up, last, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn build_seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamSet<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<E> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.total_values()
    }

    pub fn layers(&self) -> impl Iterator<Item = &RpaLayer> {
        self.blocks.iter().flatten()
    }

    /// True when every prior bank has been initialized (vacuously true for
    /// the baseline variant).
    pub fn priors_initialized(&self) -> bool {
        self.layers().all(|l| l.bank.as_ref().map(|b| b.state.initialized).unwrap_or(true))
    }

    fn check_input(&self, input: &Tensor<E>) -> Result<(usize, usize)> {
        let s = input.shape();
        if s.len() != 3 || s[0] != self.cfg.img_channels {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("expected ({}, H, W), got {:?}", self.cfg.img_channels, s),
            });
        }
        if s[1] == 0 || s[2] == 0 {
            return Err(Error::TooSmall(format!("input extents {:?}", s)));
        }
        Ok((s[1], s[2]))
    }

    fn forward_on(
        &self,
        tape: &mut Tape<E>,
        input: &Tensor<E>,
        requires_grad: bool,
        release: bool,
        probe: Option<(usize, usize)>,
    ) -> Result<(Var, Binding, Option<Var>)> {
        let (h, w) = self.check_input(input)?;
        if let Some((bi, li)) = probe {
            if bi >= self.cfg.blocks || li >= self.cfg.layers_per_block {
                return Err(Error::ProbeUnavailable(format!(
                    "block {bi} layer {li} outside {} x {}",
                    self.cfg.blocks, self.cfg.layers_per_block
                )));
            }
        }
        let bind = Binding::bind_all(tape, &self.params, requires_grad);
        let x = tape.constant(input.clone());
        let f0 = tape.conv2d(x, bind.var(self.stem.w), bind.var(self.stem.b), 1, self.cfg.pad_mode)?;

        let unit = self.cfg.window_lcm();
        let ph = (unit - h % unit) % unit;
        let pw = (unit - w % unit) % unit;
        let mut f = if ph == 0 && pw == 0 { f0 } else { tape.reflect_pad(f0, ph, pw)? };

        let mut probe_attn = None;
        for (bi, layers) in self.blocks.iter().enumerate() {
            let probe_layer = probe.and_then(|(pb, pl)| if pb == bi { Some(pl) } else { None });
            let block_in = f;
            let mut cur = f;
            for (li, layer) in layers.iter().enumerate() {
                let probing = probe_layer == Some(li);
                let lo = layer_forward(tape, cur, layer, &bind, probing)?;
                cur = lo.out;
                if probing {
                    probe_attn = Some(lo.win_attn);
                }
                if release {
                    let mut keep = vec![cur, block_in, f0];
                    if let Some(a) = probe_attn {
                        keep.push(a);
                    }
                    tape.release_values(&keep);
                }
            }
            f = tape.add(block_in, cur)?;
        }

        let fb = if ph == 0 && pw == 0 { f } else { tape.crop(f, h, w)? };
        let fa = tape.conv2d(fb, bind.var(self.agg.w), bind.var(self.agg.b), 1, self.cfg.pad_mode)?;
        let f = tape.add(f0, fa)?;
        let u = tape.conv2d(f, bind.var(self.up.w), bind.var(self.up.b), 1, self.cfg.pad_mode)?;
        let u = tape.pixel_shuffle(u, self.cfg.scale)?;
        let out = tape.conv2d(u, bind.var(self.last.w), bind.var(self.last.b), 1, self.cfg.pad_mode)?;
        if release {
            let mut keep = vec![out];
            if let Some(a) = probe_attn {
                keep.push(a);
            }
            tape.release_values(&keep);
        }
        Ok((out, bind, probe_attn))
    }

    /// Inference forward: (3, H, W) -> (3, rH, rW). Deterministic; prior
    /// banks must be initialized for the rpt/static variants.
    pub fn forward(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let (out, _, _) = self.forward_on(&mut tape, input, false, true, None)?;
        Ok(tape.value(out).clone())
    }

    /// Training forward: retains every intermediate for `backward`.
    pub fn forward_train(&self, input: &Tensor<E>) -> Result<TrainForward<E>> {
        let mut tape = Tape::new();
        let (out, binding, _) = self.forward_on(&mut tape, input, true, false, None)?;
        Ok(TrainForward { tape, out, binding })
    }

    /// Forward with the attention probe on one layer (defaults handled by the
    /// caller). Returns the output image and the raw mass map.
    pub fn forward_probe(&self, input: &Tensor<E>, block_idx: usize, layer_idx: usize) -> Result<ProbeForward<E>> {
        if self.cfg.k == 0 {
            return Err(Error::ProbeUnavailable(String::from("k = 0 configuration has no dynamic rows")));
        }
        let mut tape = Tape::new();
        let (out, _, attn) = self.forward_on(&mut tape, input, false, true, Some((block_idx, layer_idx)))?;
        let attn = attn.ok_or_else(|| Error::ProbeUnavailable(String::from("probe node missing")))?;
        let (h, w) = (input.shape()[1], input.shape()[2]);
        let unit = self.cfg.window_lcm();
        let (hp, wp) = (h + (unit - h % unit) % unit, w + (unit - w % unit) % unit);
        let wb = self.cfg.window_schedule[block_idx];
        let map = rpa::probe_mass(&tape, attn, self.cfg.k, hp / wb, wp / wb)?;
        Ok(ProbeForward { output: tape.value(out).clone(), map })
    }

    /// Per-window mean attention mass on the dynamic tokens for one layer,
    /// values in [0, 1], shape (rows, cols) of the probed layer's grid.
    pub fn attention_probe(&self, input: &Tensor<E>, block_idx: usize, layer_idx: usize) -> Result<Tensor<f64>> {
        Ok(self.forward_probe(input, block_idx, layer_idx)?.map)
    }

    /// First-batch prior initialization. Walks blocks in order so that the
    /// local tokens feeding layer i are computed with every earlier bank
    /// already initialized. No-op for the baseline variant and for banks that
    /// are already initialized.
    pub fn init_prior_banks(&mut self, batch: &[Tensor<E>]) -> Result<()> {
        if self.cfg.variant == Variant::Baseline || self.cfg.k == 0 {
            return Ok(());
        }
        if batch.is_empty() {
            return Err(Error::BadConfig(String::from("prior init needs a non-empty batch")));
        }
        let mut states = Vec::with_capacity(batch.len());
        for input in batch {
            states.push(self.stem_features(input)?);
        }
        for bi in 0..self.blocks.len() {
            let block_in = states.clone();
            for li in 0..self.blocks[bi].len() {
                let needs_init = self.blocks[bi][li]
                    .bank
                    .as_ref()
                    .map(|b| !b.state.initialized)
                    .unwrap_or(false);
                if needs_init {
                    let mut l_batch = Vec::with_capacity(states.len());
                    for st in &states {
                        l_batch.push(self.layer_local_tokens(&self.blocks[bi][li], st)?);
                    }
                    let w = self.blocks[bi][li].cfg.w;
                    let (rows, cols) = (states[0].shape()[1] / w, states[0].shape()[2] / w);
                    let params = &mut self.params;
                    prior_init_from(&mut self.blocks[bi][li], params, &l_batch, rows, cols)?;
                }
                for st in states.iter_mut() {
                    let mut tape = Tape::new();
                    let bind = Binding::bind_all(&mut tape, &self.params, false);
                    let fv = tape.constant(st.clone());
                    let lo = layer_forward(&mut tape, fv, &self.blocks[bi][li], &bind, false)?;
                    *st = tape.value(lo.out).clone();
                }
            }
            for (st, bin) in states.iter_mut().zip(&block_in) {
                for (a, &b) in st.data_mut().iter_mut().zip(bin.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }

    /// Local tokens of every prior-carrying layer for one input, in layer
    /// order. Banks must already be initialized (forward runs through them).
    pub fn collect_local_tokens(&self, input: &Tensor<E>) -> Result<Vec<Tensor<E>>> {
        let mut out = Vec::new();
        let mut state = self.stem_features(input)?;
        for layers in &self.blocks {
            let block_in = state.clone();
            for layer in layers {
                if layer.bank.is_some() {
                    out.push(self.layer_local_tokens(layer, &state)?);
                }
                let mut tape = Tape::new();
                let bind = Binding::bind_all(&mut tape, &self.params, false);
                let fv = tape.constant(state.clone());
                let lo = layer_forward(&mut tape, fv, layer, &bind, false)?;
                state = tape.value(lo.out).clone();
            }
            for (a, &b) in state.data_mut().iter_mut().zip(block_in.data()) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Stem conv plus pad-to-schedule: the feature map entering the body.
    fn stem_features(&self, input: &Tensor<E>) -> Result<Tensor<E>> {
        let (h, w) = self.check_input(input)?;
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &self.params, false);
        let x = tape.constant(input.clone());
        let f0 = tape.conv2d(x, bind.var(self.stem.w), bind.var(self.stem.b), 1, self.cfg.pad_mode)?;
        let unit = self.cfg.window_lcm();
        let ph = (unit - h % unit) % unit;
        let pw = (unit - w % unit) % unit;
        let f = if ph == 0 && pw == 0 { f0 } else { tape.reflect_pad(f0, ph, pw)? };
        Ok(tape.value(f).clone())
    }

    /// The summarizer that feeds prior initialization: the tokenizer for rpt,
    /// the parameter-free pooled summary for static.
    fn layer_local_tokens(&self, layer: &RpaLayer, state: &Tensor<E>) -> Result<Tensor<E>> {
        let mut tape = Tape::new();
        let bind = Binding::bind_all(&mut tape, &self.params, false);
        let fv = tape.constant(state.clone());
        let lv = match layer.cfg.variant {
            Variant::Static => pooled_full_tokens(&mut tape, fv, layer.cfg.w, layer.cfg.k)?,
            _ => local_tokens(&mut tape, fv, layer, &bind)?,
        };
        Ok(tape.value(lv).clone())
    }
}

fn conv_param<E: Elem>(
    params: &mut ParamSet<E>,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    rng: &mut Rng,
) -> ConvIds {
    let w = params.add(
        format!("{name}.w"),
        Tensor::<E>::from_fn(&[cout, cin, k, k], |_| E::from_f64(rng.trunc_normal(0.02))),
        1.0,
    );
    let b = params.add(format!("{name}.b"), Tensor::zeros(&[cout]), 1.0);
    ConvIds { w, b }
}

/// Analytic cost model, multiply-accumulate convention, mirroring the exact
/// op sequence of `forward`. `total_flops` reports 2 * MACs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacBreakdown {
    pub stem: u64,
    pub tokenizer: u64,
    pub dyn_attn_core: u64,
    pub dyn_proj_mlp: u64,
    pub win_attn_core: u64,
    pub win_proj_mlp: u64,
    pub head: u64,
}

impl MacBreakdown {
    pub fn total_macs(&self) -> u64 {
        self.stem
            + self.tokenizer
            + self.dyn_attn_core
            + self.dyn_proj_mlp
            + self.win_attn_core
            + self.win_proj_mlp
            + self.head
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }
}

/// Multiply-accumulate counts for one forward pass of `cfg` on an (H, W)
/// input. Matches the tape's instrumented counter exactly.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> MacBreakdown {
    let c = cfg.channels as u64;
    let unit = cfg.window_lcm();
    let hp = (h + (unit - h % unit) % unit) as u64;
    let wp = (w + (unit - w % unit) % unit) as u64;
    let (h, w) = (h as u64, w as u64);
    let r = cfg.scale as u64;
    let k = cfg.k as u64;

    let mut b = MacBreakdown { stem: 3 * c * 9 * h * w, ..Default::default() };

    for &we in &cfg.window_schedule {
        let we = we as u64;
        let nw = (hp / we) * (wp / we);
        let nc = k * nw;
        let s = we * we;
        let seq = k + s;
        let nt = nw * seq;
        for _ in 0..cfg.layers_per_block {
            if cfg.k > 0 && cfg.variant != Variant::Static {
                let c_loc = cfg.variant.c_loc(cfg.channels) as u64;
                b.tokenizer += c * c_loc * hp * wp; // 1x1 projection
                b.tokenizer += c_loc * 9 * hp * wp; // depthwise 3x3
            }
            if cfg.k > 0 {
                b.dyn_proj_mlp += 4 * nc * c * c;
                b.dyn_attn_core += 2 * nc * nc * c;
                b.dyn_proj_mlp += 2 * nc * c * (rpa::MLP_RATIO as u64 * c);
            }
            b.win_proj_mlp += 4 * nt * c * c;
            b.win_attn_core += 2 * nw * seq * seq * c;
            b.win_proj_mlp += 2 * nt * c * (rpa::MLP_RATIO as u64 * c);
        }
    }

    b.head += c * c * 9 * h * w; // aggregation conv
    b.head += c * (c * r * r) * 9 * h * w; // upsample conv
    b.head += c * 3 * 9 * (r * h) * (r * w); // final conv
    b
}

/// FLOPs (2 * MAC convention) for one forward pass.
pub fn count_flops(cfg: &ModelConfig, h: usize, w: usize) -> u64 {
    count_macs(cfg, h, w).total_flops()
}

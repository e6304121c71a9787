//! Finite-difference verification of every analytic backward rule, plus the
//! composite RPA layer/block checks. Double precision, central differences,
//! h = 1e-5. Random-projection losses keep permutation ops honest (a plain
//! sum would not notice a wrong permutation).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::fd::{finite_diff_grad, max_rel_err};
use crate::ops::attn::AttnDims;
use crate::ops::conv::PadMode;
use crate::params::{Binding, ParamId, ParamSet};
use crate::rng::Rng;
use crate::rpa::{self, block_forward, layer_forward, prior_init_from, LayerCfg, RpaLayer, Variant};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const ATOMIC_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub worst_rel_err: f64,
    pub threshold: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.threshold
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Independent random seeds per check.
    pub seeds: u64,
    pub base_seed: u64,
    /// Run only checks whose name contains this substring.
    pub filter: Option<String>,
    /// Test-harness hook: sign-flip the analytic gradients of matching
    /// checks to prove the checker notices a broken backward rule.
    pub fault: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { seeds: 20, base_seed: 0x67726164, filter: None, fault: None }
    }
}

type LossBuilder<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Compare analytic and finite-difference gradients of a scalar function of
/// plain tensor inputs. Returns the worst relative error over all inputs.
fn check_inputs(inputs: &[Tensor<f64>], f: LossBuilder<'_>, flip: bool) -> Result<f64> {
    let mut tape = Tape::new().with_finite_checks(true);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let mut analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        if flip {
            analytic = analytic.map(|v| -v);
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut t2 = Tape::new();
                let v2: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t2.leaf(if j == i { probe.clone() } else { t.clone() }, false))
                    .collect();
                let l = f(&mut t2, &v2)?;
                Ok(t2.value(l).item()?)
            },
            x,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

type ParamLossBuilder<'a> = &'a dyn Fn(&mut Tape<f64>, &Binding, &[Var]) -> Result<Var>;

/// Same comparison for a function of a parameter set plus extra tensor
/// inputs (the composite layer/block checks).
fn check_params(
    params: &ParamSet<f64>,
    extra: &[Tensor<f64>],
    f: ParamLossBuilder<'_>,
    flip: bool,
) -> Result<f64> {
    let mut tape = Tape::new().with_finite_checks(true);
    let bind = Binding::bind_all(&mut tape, params, true);
    let evars: Vec<Var> = extra.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &bind, &evars)?;
    tape.backward(loss)?;

    let eval = |probe_params: &ParamSet<f64>, probe_extra: &[Tensor<f64>]| -> Result<f64> {
        let mut t2 = Tape::new();
        let b2 = Binding::bind_all(&mut t2, probe_params, false);
        let e2: Vec<Var> = probe_extra.iter().map(|t| t2.leaf(t.clone(), false)).collect();
        let l = f(&mut t2, &b2, &e2)?;
        Ok(t2.value(l).item()?)
    };

    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let id = ParamId(i as u32);
        if params.value(id).numel() == 0 {
            continue;
        }
        let mut analytic = tape
            .grad(bind.var(id))
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params.value(id).shape()));
        if flip {
            analytic = analytic.map(|v| -v);
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut p2 = params.clone();
                p2.set_value(id, probe.clone());
                eval(&p2, extra)
            },
            params.value(id),
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    for (i, x) in extra.iter().enumerate() {
        let mut analytic = tape.grad(evars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        if flip {
            analytic = analytic.map(|v| -v);
        }
        let numeric = finite_diff_grad(
            |probe| {
                let mut e2: Vec<Tensor<f64>> = extra.to_vec();
                e2[i] = probe.clone();
                eval(params, &e2)
            },
            x,
            FD_STEP,
        )?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    Ok(worst)
}

fn proj(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform() * 2.0 - 1.0)
}

/// loss = sum(out * projection): sensitive to every output coordinate.
fn proj_loss(tape: &mut Tape<f64>, out: Var, p: &Tensor<f64>) -> Result<Var> {
    let pv = tape.constant(p.clone());
    let m = tape.mul(out, pv)?;
    tape.sum(m)
}

/// Build the tiny RPA layer used by the composite checks: C=6, w=2, k=1,
/// heads=2 on a (6, 4, 4) map, bank initialized with random tokens.
fn tiny_layer(variant: Variant, rng: &mut Rng) -> Result<(ParamSet<f64>, RpaLayer)> {
    let mut params = ParamSet::new();
    let cfg = LayerCfg { c: 6, w: 2, k: 1, heads: 2, variant, pad: PadMode::Zero };
    let mut layer = rpa::build_layer(&mut params, "l", cfg, rng)?;
    if layer.bank.is_some() {
        let c_pri = variant.c_pri(6);
        let r0 = Tensor::from_fn(&[4, c_pri], |_| rng.uniform() - 0.5);
        prior_init_from(&mut layer, &mut params, &[r0], 2, 2)?;
    }
    Ok((params, layer))
}

fn run_check(name: &'static str, cfg: &GradCheckConfig, threshold: f64, mut body: impl FnMut(&mut Rng, bool) -> Result<f64>) -> Result<Option<CheckOutcome>> {
    if let Some(f) = &cfg.filter {
        if !name.contains(f.as_str()) {
            return Ok(None);
        }
    }
    let flip = cfg.fault.as_deref().map(|f| name.contains(f)).unwrap_or(false);
    let mut worst = 0.0f64;
    for seed in 0..cfg.seeds {
        let mut rng = Rng::new(cfg.base_seed).fork(seed.wrapping_mul(0x9e37) ^ hash_name(name));
        worst = worst.max(body(&mut rng, flip)?);
    }
    Ok(Some(CheckOutcome { name, worst_rel_err: worst, threshold }))
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

/// Run the full suite (or the filtered subset). Composite checks use the
/// relaxed tolerance; everything else the atomic one.
pub fn run_gradcheck(cfg: &GradCheckConfig) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let checks: Vec<(&'static str, f64, fn(&mut Rng, bool) -> Result<f64>)> = vec![
        ("matmul", ATOMIC_TOL, |rng, flip| {
            let a = Tensor::rand_uniform(&[3, 4], rng);
            let b = Tensor::rand_uniform(&[4, 2], rng);
            let p = proj(&[3, 2], rng);
            check_inputs(&[a, b], &|t, v| {
                let m = t.matmul(v[0], v[1])?;
                proj_loss(t, m, &p)
            }, flip)
        }),
        ("conv2d_zero", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[2, 5, 5], rng);
            let w = Tensor::rand_uniform(&[3, 2, 3, 3], rng);
            let b = Tensor::rand_uniform(&[3], rng);
            let p = proj(&[3, 5, 5], rng);
            check_inputs(&[x, w, b], &|t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 1, PadMode::Zero)?;
                proj_loss(t, c, &p)
            }, flip)
        }),
        ("conv2d_circular", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[2, 4, 6], rng);
            let w = Tensor::rand_uniform(&[2, 2, 3, 3], rng);
            let b = Tensor::rand_uniform(&[2], rng);
            let p = proj(&[2, 4, 6], rng);
            check_inputs(&[x, w, b], &|t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 1, PadMode::Circular)?;
                proj_loss(t, c, &p)
            }, flip)
        }),
        ("conv2d_depthwise", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[4, 5, 5], rng);
            let w = Tensor::rand_uniform(&[4, 1, 3, 3], rng);
            let b = Tensor::rand_uniform(&[4], rng);
            let p = proj(&[4, 5, 5], rng);
            check_inputs(&[x, w, b], &|t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 4, PadMode::Zero)?;
                proj_loss(t, c, &p)
            }, flip)
        }),
        ("conv2d_1x1", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[3, 4, 4], rng);
            let w = Tensor::rand_uniform(&[5, 3, 1, 1], rng);
            let b = Tensor::rand_uniform(&[5], rng);
            let p = proj(&[5, 4, 4], rng);
            check_inputs(&[x, w, b], &|t, v| {
                let c = t.conv2d(v[0], v[1], v[2], 1, PadMode::Zero)?;
                proj_loss(t, c, &p)
            }, flip)
        }),
        ("avg_pool", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[3, 8, 8], rng);
            let p8 = proj(&[3, 1, 1], rng);
            let p2 = proj(&[3, 4, 4], rng);
            let w8 = check_inputs(core::slice::from_ref(&x), &|t, v| {
                let y = t.avg_pool2d(v[0], 8, 8)?;
                proj_loss(t, y, &p8)
            }, flip)?;
            let w2 = check_inputs(&[x], &|t, v| {
                let y = t.avg_pool2d(v[0], 2, 2)?;
                proj_loss(t, y, &p2)
            }, flip)?;
            Ok(w8.max(w2))
        }),
        ("layer_norm", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[4, 6], rng);
            let gamma = Tensor::from_fn(&[6], |_| 1.0 + 0.2 * (rng.uniform() - 0.5));
            let beta = Tensor::rand_uniform(&[6], rng);
            let p = proj(&[4, 6], rng);
            check_inputs(&[x, gamma, beta], &|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("softmax", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::from_fn(&[4, 5], |_| 3.0 * (rng.uniform() - 0.5));
            let p = proj(&[4, 5], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.softmax_lastdim(v[0])?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("gelu", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::from_fn(&[40], |_| 4.0 * (rng.uniform() - 0.5));
            let p = proj(&[40], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.gelu(v[0])?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("l1_terms", ATOMIC_TOL, |rng, flip| {
            let a = Tensor::rand_uniform(&[3, 4], rng);
            // Keep |a - b| well away from the kink so central differences
            // stay on one side of it.
            let b = Tensor::from_fn(&[3, 4], |i| {
                let off = 0.05 + 0.5 * rng.uniform();
                a.data()[i] + if rng.uniform() < 0.5 { off } else { -off }
            });
            check_inputs(&[a, b], &|t, v| {
                let d = t.sub(v[0], v[1])?;
                let ab = t.abs(d)?;
                t.mean(ab)
            }, flip)
        }),
        ("add_row", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[5, 3], rng);
            let b = Tensor::rand_uniform(&[3], rng);
            let p = proj(&[5, 3], rng);
            check_inputs(&[x, b], &|t, v| {
                let y = t.add_row(v[0], v[1])?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("elementwise", ATOMIC_TOL, |rng, flip| {
            let a = Tensor::rand_uniform(&[4, 3], rng);
            let b = Tensor::rand_uniform(&[4, 3], rng);
            let p = proj(&[4, 3], rng);
            check_inputs(&[a, b], &|t, v| {
                let s = t.scale(v[0], 1.7)?;
                let m = t.mul(v[0], v[1])?;
                let u = t.add(s, m)?;
                let d = t.sub(u, v[1])?;
                proj_loss(t, d, &p)
            }, flip)
        }),
        ("pixel_shuffle", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[8, 3, 2], rng);
            let p = proj(&[2, 6, 4], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.pixel_shuffle(v[0], 2)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("pixel_unshuffle", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[2, 6, 4], rng);
            let p = proj(&[8, 3, 2], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.pixel_unshuffle(v[0], 2)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("concat_narrow", ATOMIC_TOL, |rng, flip| {
            let a = Tensor::rand_uniform(&[4, 3], rng);
            let b = Tensor::rand_uniform(&[4, 2], rng);
            let p = proj(&[4, 3], rng);
            check_inputs(&[a, b], &|t, v| {
                let z = t.concat_lastdim(v[0], v[1])?;
                let y = t.narrow_lastdim(z, 1, 3)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("window_partition", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[3, 8, 12], rng);
            let p = proj(&[96, 3], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.window_partition(v[0], 4)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("window_merge", ATOMIC_TOL, |rng, flip| {
            let tokens = Tensor::rand_uniform(&[96, 3], rng);
            let p = proj(&[3, 8, 12], rng);
            check_inputs(&[tokens], &|t, v| {
                let y = t.window_merge(v[0], 4, 3, 8, 12)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("pooled_tokens", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[3, 4, 6], rng);
            let p = proj(&[24, 3], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.pooled_to_tokens(v[0], 2)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("interleave_strip", ATOMIC_TOL, |rng, flip| {
            let d = Tensor::rand_uniform(&[6, 3], rng);
            let x = Tensor::rand_uniform(&[12, 3], rng);
            let pz = proj(&[18, 3], rng);
            let py = proj(&[12, 3], rng);
            check_inputs(&[d, x], &|t, v| {
                let z = t.interleave_rows(v[0], v[1], 3, 2, 4)?;
                let y = t.strip_rows(z, 3, 2, 4)?;
                let l1 = proj_loss(t, z, &pz)?;
                let l2 = proj_loss(t, y, &py)?;
                t.add(l1, l2)
            }, flip)
        }),
        ("attention_core", ATOMIC_TOL, |rng, flip| {
            let q = Tensor::rand_uniform(&[10, 6], rng);
            let k = Tensor::rand_uniform(&[10, 6], rng);
            let v = Tensor::rand_uniform(&[10, 6], rng);
            let p = proj(&[10, 6], rng);
            let dims = AttnDims { windows: 2, seq: 5, heads: 2, channels: 6 };
            check_inputs(&[q, k, v], &|t, vs| {
                let y = t.attention(vs[0], vs[1], vs[2], dims, false)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("resample_bilinear", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[6, 4], rng);
            let p = proj(&[15, 4], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.resample_grid(v[0], 2, 3, 3, 5)?;
                proj_loss(t, y, &p)
            }, flip)
        }),
        ("reflect_pad_crop", ATOMIC_TOL, |rng, flip| {
            let x = Tensor::rand_uniform(&[2, 5, 6], rng);
            let pp = proj(&[2, 8, 8], rng);
            let pc = proj(&[2, 4, 4], rng);
            check_inputs(&[x], &|t, v| {
                let y = t.reflect_pad(v[0], 3, 2)?;
                let z = t.crop(y, 4, 4)?;
                let l1 = proj_loss(t, y, &pp)?;
                let l2 = proj_loss(t, z, &pc)?;
                t.add(l1, l2)
            }, flip)
        }),
    ];

    for (name, tol, body) in checks {
        if let Some(o) = run_check(name, cfg, tol, body)? {
            out.push(o);
        }
    }

    // Composite checks: full RPA layer per variant, and a two-layer block.
    for (name, variant) in [
        ("rpa_layer_rpt", Variant::Rpt),
        ("rpa_layer_baseline", Variant::Baseline),
        ("rpa_layer_static", Variant::Static),
    ] {
        if let Some(o) = run_check(name, cfg, COMPOSITE_TOL, |rng, flip| {
            let (params, layer) = tiny_layer(variant, rng)?;
            let f = Tensor::rand_uniform(&[6, 4, 4], rng);
            let p = proj(&[6, 4, 4], rng);
            check_params(&params, &[f], &|t, bind, ev| {
                let lo = layer_forward(t, ev[0], &layer, bind, false)?;
                proj_loss(t, lo.out, &p)
            }, flip)
        })? {
            out.push(o);
        }
    }

    if let Some(o) = run_check("rpa_block", cfg, COMPOSITE_TOL, |rng, flip| {
        let mut params = ParamSet::new();
        let cfg_l = LayerCfg { c: 6, w: 2, k: 1, heads: 2, variant: Variant::Rpt, pad: PadMode::Zero };
        let mut layers = Vec::new();
        for i in 0..2 {
            let mut layer = rpa::build_layer(&mut params, &format!("l{i}"), cfg_l, rng)?;
            let r0 = Tensor::from_fn(&[4, 3], |_| rng.uniform() - 0.5);
            prior_init_from(&mut layer, &mut params, &[r0], 2, 2)?;
            layers.push(layer);
        }
        let f = Tensor::rand_uniform(&[6, 4, 4], rng);
        let p = proj(&[6, 4, 4], rng);
        check_params(&params, &[f], &|t, bind, ev| {
            let (out, _) = block_forward(t, ev[0], &layers, bind, None)?;
            proj_loss(t, out, &p)
        }, flip)
    })? {
        out.push(o);
    }

    Ok(out)
}

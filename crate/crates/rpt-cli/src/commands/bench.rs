//! `rpt bench`: analytic vs instrumented cost, wall-clock timing, and the
//! attention-core k sweep. Exits 1 if the analytic model and the executed
//! multiply counts disagree anywhere.

use std::time::Instant;

use rpt_core::elem::Elem;
use rpt_core::model::{count_macs, ModelConfig, RptSrModel};
use rpt_core::ops::attn::AttnDims;
use rpt_core::rng::Rng;
use rpt_core::Tensor;

use crate::config::{Precision, RunConfig};

use super::{CmdError, CmdResult};

pub fn run(cfg: &RunConfig) -> CmdResult {
    let mc = cfg.model_config()?;
    match cfg.precision()? {
        Precision::F32 => run_typed::<f32>(cfg, mc),
        Precision::F64 => run_typed::<f64>(cfg, mc),
    }
}

fn run_typed<E: Elem>(cfg: &RunConfig, mc: ModelConfig) -> CmdResult {
    let size = cfg.usize_or("bench_size", 32)?;
    let reps = cfg.usize_or("bench_iters", 10)?.max(10);
    let mut mismatch = false;

    let mut model = RptSrModel::<E>::build(mc.clone(), cfg.seed()?)?;
    let mut rng = Rng::new(cfg.seed()? ^ 0xbe9c);
    let input = Tensor::<E>::from_fn(&[3, size, size], |_| E::from_f64(rng.uniform()));
    model.init_prior_banks(std::slice::from_ref(&input))?;

    // Analytic vs instrumented.
    let analytic = count_macs(&mc, size, size);
    let fwd = model.forward_train(&input)?;
    let executed = fwd.tape.macs();
    drop(fwd);
    println!("input {size}x{size}, channels {}, k {}, variant {:?}", mc.channels, mc.k, mc.variant);
    println!(
        "analytic: {} MAC ({} FLOPs) [stem {} | tokenizer {} | dyn attn {} | dyn proj+mlp {} | win attn {} | win proj+mlp {} | head {}]",
        analytic.total_macs(),
        analytic.total_flops(),
        analytic.stem,
        analytic.tokenizer,
        analytic.dyn_attn_core,
        analytic.dyn_proj_mlp,
        analytic.win_attn_core,
        analytic.win_proj_mlp,
        analytic.head
    );
    let ok = analytic.total_macs() == executed;
    mismatch |= !ok;
    println!(
        "instrumented: {executed} MAC -> match: {}",
        if ok { "yes" } else { "NO" }
    );

    // Wall clock over warm repetitions (reported, not asserted).
    for _ in 0..2 {
        let _ = model.forward(&input)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        let _ = model.forward(&input)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / reps as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / reps as f64;
    let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = times.iter().cloned().fold(0.0f64, f64::max);
    println!(
        "wall-clock per forward over {reps} runs: mean {:.6}s (min {:.6}s, max {:.6}s, var {:.3e})",
        mean, min, max, var
    );

    // Attention-core k sweep: per-window multiply increments.
    let ws: Vec<usize> = cfg
        .get("bench_w")
        .unwrap_or("8")
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| CmdError::Usage(format!("bad bench_w entry '{s}'"))))
        .collect::<Result<_, _>>()?;
    let c = mc.channels;
    let heads = mc.heads;
    println!("attention-core sweep (per-window MAC, channels {c}, heads {heads}):");
    for w in ws {
        let w2 = w * w;
        let mut base = 0u64;
        for k in [0usize, 1, 2, 4] {
            let seq = k + w2;
            let mut tape = rpt_core::Tape::<E>::new();
            let q = tape.constant(Tensor::<E>::from_fn(&[seq, c], |_| E::from_f64(rng.uniform() - 0.5)));
            let kv = tape.constant(Tensor::<E>::from_fn(&[seq, c], |_| E::from_f64(rng.uniform() - 0.5)));
            let v = tape.constant(Tensor::<E>::from_fn(&[seq, c], |_| E::from_f64(rng.uniform() - 0.5)));
            tape.attention(q, kv, v, AttnDims { windows: 1, seq, heads, channels: c }, false)?;
            let macs = tape.macs();
            if k == 0 {
                base = macs;
                println!("  w={w} k=0: {macs} MAC");
            } else {
                let expect = (2 * c * (2 * k * w2 + k * k)) as u64;
                let ok = macs - base == expect;
                mismatch |= !ok;
                println!(
                    "  w={w} k={k}: {macs} MAC, increment {} (2C(2kw^2+k^2) = {expect}) -> match: {}",
                    macs - base,
                    if ok { "yes" } else { "NO" }
                );
            }
        }
    }

    if mismatch {
        Err(CmdError::Verify("instrumented multiply counts diverge from the analytic model".into()))
    } else {
        Ok(())
    }
}

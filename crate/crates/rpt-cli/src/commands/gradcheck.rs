//! `rpt gradcheck`: the finite-difference verification suite at double
//! precision. Prints one line per check; exits 1 naming the first offender
//! if any analytic gradient strays past its threshold.

use std::time::Instant;

use rpt_core::verify::{run_gradcheck, GradCheckConfig};

use crate::config::RunConfig;

use super::{CmdError, CmdResult};

pub fn run(cfg: &RunConfig) -> CmdResult {
    let gc = GradCheckConfig {
        seeds: cfg.u64_or("gradcheck_seeds", 20)?,
        base_seed: cfg.u64_or("seed", 0x67726164)?,
        filter: cfg.get("op").map(|s| s.to_string()),
        fault: cfg.get("fault").map(|s| s.to_string()),
    };
    let t0 = Instant::now();
    let outcomes = run_gradcheck(&gc)?;
    if outcomes.is_empty() {
        return Err(CmdError::Usage(format!(
            "no gradcheck op matches filter '{}'",
            gc.filter.unwrap_or_default()
        )));
    }
    let mut failed: Option<&str> = None;
    for o in &outcomes {
        println!(
            "gradcheck {:<22} worst rel err {:>12.4e}  threshold {:>8.1e}  {}",
            o.name,
            o.worst_rel_err,
            o.threshold,
            if o.passed() { "PASS" } else { "FAIL" }
        );
        if !o.passed() && failed.is_none() {
            failed = Some(o.name);
        }
    }
    println!(
        "gradcheck: {} checks, {} seeds each, {:.2}s",
        outcomes.len(),
        gc.seeds,
        t0.elapsed().as_secs_f64()
    );
    match failed {
        Some(name) => Err(CmdError::Verify(format!("gradient check failed for op '{name}'"))),
        None => Ok(()),
    }
}

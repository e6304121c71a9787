//! `rpt train`: seeded training with first-batch prior initialization,
//! per-iteration metric log, and periodic + final checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rpt_core::elem::Elem;
use rpt_core::model::{ModelConfig, RptSrModel};
use rpt_core::train::{train, Schedule, TrainConfig, TrainSink};

use crate::config::{Precision, RunConfig};
use crate::runner::ThreadedRunner;

use super::{build_train_dataset, CmdError, CmdResult};

struct FileSink {
    log: BufWriter<File>,
    out_dir: PathBuf,
}

impl TrainSink for FileSink {
    fn log(&mut self, iter: u64, lr: f64, loss: f64, psnr_db: f64) {
        let _ = writeln!(self.log, "{iter},{lr},{loss},{psnr_db}");
    }

    fn checkpoint(&mut self, iter: u64, bytes: &[u8]) -> rpt_core::Result<()> {
        let path = self.out_dir.join(format!("ckpt_{iter:06}.rptsr"));
        std::fs::write(path, bytes).map_err(|_| rpt_core::Error::Format("checkpoint write failed".into()))
    }
}

pub fn run(cfg: &RunConfig) -> CmdResult {
    let mc = cfg.model_config()?;
    match cfg.precision()? {
        Precision::F32 => run_typed::<f32>(cfg, mc),
        Precision::F64 => run_typed::<f64>(cfg, mc),
    }
}

fn run_typed<E: Elem>(cfg: &RunConfig, mc: ModelConfig) -> CmdResult {
    let seed = cfg.seed()?;
    let iters = cfg.u64_or("iters", 200)?;
    let batch = cfg.usize_or("batch", 4)?;
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CmdError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;

    let dataset = build_train_dataset::<E>(cfg, mc.scale)?;
    let mut model = RptSrModel::<E>::build(mc, seed)?;

    let mut schedule = Schedule::multistep(iters);
    schedule.base_lr = cfg.f64_or("lr", schedule.base_lr)?;

    let tc = TrainConfig { iters, batch, seed, ckpt_every: cfg.u64_or("ckpt_every", 0)? };
    let runner = ThreadedRunner::new(cfg.usize_or("threads", 0)?);

    let log_path = out_dir.join("train_log.csv");
    let log = File::create(&log_path)
        .map_err(|e| CmdError::Usage(format!("cannot create {}: {e}", log_path.display())))?;
    let mut sink = FileSink { log: BufWriter::new(log), out_dir: out_dir.clone() };

    let final_bytes = train(&mut model, dataset.as_ref(), &schedule, &tc, &runner, &mut sink)?;
    sink.log.flush().map_err(|e| CmdError::Usage(format!("log write failed: {e}")))?;

    let final_path = out_dir.join("ckpt_final.rptsr");
    crate::io::write_bytes(&final_path, &final_bytes)?;
    println!(
        "trained {iters} iterations (batch {batch}, seed {seed}); checkpoint {}, log {}",
        final_path.display(),
        log_path.display()
    );
    Ok(())
}

//! `rpt eval`: PSNR / L1 over a paired dataset. With a checkpoint the model
//! produces the predictions; without one the dataset directory must carry a
//! `pred/` folder next to `hr/` (precomputed outputs), which is how the
//! closed-form fixtures are scored.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rpt_core::data::{synth_scene, Image};
use rpt_core::elem::Elem;
use rpt_core::train::{l1_loss, psnr};
use rpt_core::Tensor;

use crate::config::RunConfig;
use crate::io::{checkpoint_dtype, read_checkpoint, read_image};

use super::{synth_spec, CmdError, CmdResult, SYNTH_VAL_BASE};

pub fn run(cfg: &RunConfig) -> CmdResult {
    match cfg.path("checkpoint") {
        Some(ckpt) => match checkpoint_dtype(&ckpt)? {
            1 => with_model::<f32>(cfg, &ckpt),
            2 => with_model::<f64>(cfg, &ckpt),
            t => Err(CmdError::Usage(format!("unsupported checkpoint dtype tag {t}"))),
        },
        None => precomputed(cfg),
    }
}

/// (name, prediction, ground truth) rows in image space ([0, 1], clamped).
fn score_rows(rows: Vec<(String, Image, Image)>, cfg: &RunConfig) -> CmdResult {
    if rows.is_empty() {
        return Err(CmdError::Usage("nothing to evaluate".into()));
    }
    let out_dir = cfg.out_dir();
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CmdError::Usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let csv_path = out_dir.join("eval.csv");
    let mut csv = File::create(&csv_path)
        .map_err(|e| CmdError::Usage(format!("cannot create {}: {e}", csv_path.display())))?;

    let mut psnr_sum = 0.0f64;
    let mut l1_sum = 0.0f64;
    let n = rows.len();
    for (name, pred, gt) in rows {
        if pred.h != gt.h || pred.w != gt.w || pred.channels != gt.channels {
            return Err(CmdError::Usage(format!(
                "{name}: prediction {}x{} does not pair with ground truth {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        let pt = Tensor::<f64>::new(vec![pred.data().len()], pred.data().to_vec()).expect("image buffer");
        let gt_t = Tensor::<f64>::new(vec![gt.data().len()], gt.data().to_vec()).expect("image buffer");
        let p = psnr(&pt, &gt_t, 1.0)?;
        let l = l1_loss(&pt, &gt_t)?;
        psnr_sum += p;
        l1_sum += l;
        println!("{name}: psnr {p} dB, l1 {l}");
        writeln!(csv, "{name},{p},{l}").map_err(|e| CmdError::Usage(format!("csv write failed: {e}")))?;
    }
    let mean_psnr = psnr_sum / n as f64;
    let mean_l1 = l1_sum / n as f64;
    println!("mean: psnr {mean_psnr} dB, l1 {mean_l1} over {n} images");
    writeln!(csv, "mean,{mean_psnr},{mean_l1}")
        .map_err(|e| CmdError::Usage(format!("csv write failed: {e}")))?;
    Ok(())
}

fn with_model<E: Elem>(cfg: &RunConfig, ckpt_path: &Path) -> CmdResult {
    let loaded = read_checkpoint::<E>(ckpt_path)?;
    let model = loaded.model;
    let scale = model.config().scale;

    let mut rows = Vec::new();
    match cfg.get("data").unwrap_or("synth") {
        "synth" => {
            let frames = cfg.usize_or("val_frames", 16)?;
            let hr_edge = cfg.usize_or("synth_hr", 32)?;
            let spec = synth_spec(cfg)?;
            for i in 0..frames {
                let hr = synth_scene(&spec, SYNTH_VAL_BASE + i as u64, hr_edge, hr_edge)?;
                let lr = rpt_core::data::bicubic_resize(&hr, hr_edge / scale, hr_edge / scale)?;
                let pred = model.forward(&lr.to_tensor::<E>())?;
                rows.push((format!("synth_{i:04}"), Image::from_tensor(&pred)?, hr.to_rgb()));
            }
        }
        _ => {
            let root = cfg.path("data").expect("data key present");
            let ds = crate::io::load_dir_dataset::<E>(&root, scale)?;
            for (i, (lr, hr)) in ds.pairs.iter().enumerate() {
                let pred = model.forward(lr)?;
                rows.push((format!("{i:04}"), Image::from_tensor(&pred)?, Image::from_tensor(hr)?));
            }
        }
    }
    score_rows(rows, cfg)
}

/// Compare a `pred/` directory against `hr/` with no model in the loop.
fn precomputed(cfg: &RunConfig) -> CmdResult {
    let root = cfg
        .path("data")
        .ok_or_else(|| CmdError::Usage("eval needs checkpoint=PATH or data=DIR with pred/".into()))?;
    let hr_dir = root.join("hr");
    let pred_dir = root.join("pred");
    let mut names: Vec<String> = std::fs::read_dir(&hr_dir)
        .map_err(|e| CmdError::Usage(format!("dataset not found: {}: {e}", hr_dir.display())))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".pgm") || n.ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CmdError::Usage(format!("dataset not found: no PNM files in {}", hr_dir.display())));
    }
    let mut rows = Vec::new();
    for name in names {
        let gt = read_image(&hr_dir.join(&name))?;
        let pred_path = pred_dir.join(&name);
        if !pred_path.exists() {
            return Err(CmdError::Usage(format!("unpaired file: {} has no prediction", name)));
        }
        let pred = read_image(&pred_path)?;
        rows.push((name, pred, gt));
    }
    score_rows(rows, cfg)
}

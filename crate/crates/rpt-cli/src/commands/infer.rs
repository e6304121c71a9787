//! `rpt infer`: run one image through a trained checkpoint and write the
//! upscaled result. Output format follows the output file extension (.pgm
//! collapses to grayscale, anything else writes PPM).

use std::path::Path;

use rpt_core::data::Image;
use rpt_core::elem::Elem;

use crate::config::RunConfig;
use crate::io::{checkpoint_dtype, read_checkpoint, read_image, write_image};

use super::{CmdError, CmdResult};

pub fn run(cfg: &RunConfig) -> CmdResult {
    let ckpt_path = cfg
        .path("checkpoint")
        .ok_or_else(|| CmdError::Usage("infer needs checkpoint=PATH".into()))?;
    let input_path = cfg
        .path("input")
        .ok_or_else(|| CmdError::Usage("infer needs input=IMAGE".into()))?;
    match checkpoint_dtype(&ckpt_path)? {
        1 => run_typed::<f32>(cfg, &ckpt_path, &input_path),
        2 => run_typed::<f64>(cfg, &ckpt_path, &input_path),
        t => Err(CmdError::Usage(format!("unsupported checkpoint dtype tag {t}"))),
    }
}

fn run_typed<E: Elem>(cfg: &RunConfig, ckpt_path: &Path, input_path: &Path) -> CmdResult {
    let loaded = read_checkpoint::<E>(ckpt_path)?;
    if cfg.has_model_fields() {
        let requested = cfg.model_config()?;
        if &requested != loaded.model.config() {
            return Err(CmdError::Usage(format!(
                "checkpoint {} does not match the requested model configuration",
                ckpt_path.display()
            )));
        }
    }
    let img = read_image(input_path)?;
    let x = img.to_tensor::<E>();
    let y = loaded.model.forward(&x)?;
    let out_img = Image::from_tensor(&y)?;
    let name = cfg.get("output").unwrap_or("sr.ppm").to_string();
    let out_path = cfg.out_dir().join(name);
    write_image(&out_path, &out_img)?;
    println!(
        "wrote {} ({}x{} -> {}x{})",
        out_path.display(),
        img.w,
        img.h,
        out_img.w,
        out_img.h
    );
    Ok(())
}

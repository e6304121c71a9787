//! `rpt attnmap`: export the per-window attention mass on the dynamic tokens
//! as an 8-bit PGM, nearest-upsampled to the input extents and min-max
//! normalized (a constant map becomes mid-gray). With three checkpoints the
//! command writes one map per checkpoint plus a side-by-side montage.

use std::path::{Path, PathBuf};

use rpt_core::data::Image;
use rpt_core::elem::Elem;
use rpt_core::Tensor;

use crate::config::RunConfig;
use crate::io::{checkpoint_dtype, read_checkpoint, read_image, write_image};

use super::{CmdError, CmdResult};

pub fn run(cfg: &RunConfig) -> CmdResult {
    let ckpts = cfg.path_list("checkpoint");
    if ckpts.is_empty() {
        return Err(CmdError::Usage("attnmap needs checkpoint=PATH (or three comma-separated paths)".into()));
    }
    if ckpts.len() != 1 && ckpts.len() != 3 {
        return Err(CmdError::Usage(format!(
            "attnmap takes one checkpoint or three (triptych), got {}",
            ckpts.len()
        )));
    }
    let input_path = cfg
        .path("input")
        .ok_or_else(|| CmdError::Usage("attnmap needs input=IMAGE".into()))?;
    let img = read_image(&input_path)?;
    let out_dir = cfg.out_dir();

    let mut maps = Vec::new();
    for ckpt in &ckpts {
        let map = match checkpoint_dtype(ckpt)? {
            1 => probe::<f32>(cfg, ckpt, &img)?,
            2 => probe::<f64>(cfg, ckpt, &img)?,
            t => return Err(CmdError::Usage(format!("unsupported checkpoint dtype tag {t}"))),
        };
        maps.push(map);
    }

    if maps.len() == 1 {
        let path = out_dir.join(cfg.get("output").unwrap_or("attn.pgm"));
        write_image(&path, &maps[0])?;
        println!("wrote {}", path.display());
    } else {
        let mut paths: Vec<PathBuf> = Vec::new();
        for (i, map) in maps.iter().enumerate() {
            let path = out_dir.join(format!("attn_{i}.pgm"));
            write_image(&path, map)?;
            paths.push(path);
        }
        let montage = montage(&maps);
        let mpath = out_dir.join("attn_montage.pgm");
        write_image(&mpath, &montage)?;
        for p in &paths {
            println!("wrote {}", p.display());
        }
        println!("wrote {}", mpath.display());
    }
    Ok(())
}

fn probe<E: Elem>(cfg: &RunConfig, ckpt_path: &Path, img: &Image) -> Result<Image, CmdError> {
    let loaded = read_checkpoint::<E>(ckpt_path)?;
    let model = loaded.model;
    let mc = model.config().clone();
    let block_idx = cfg.usize_or("block_idx", mc.blocks - 1)?;
    let layer_idx = cfg.usize_or("layer_idx", mc.layers_per_block - 1)?;
    let map = model.attention_probe(&img.to_tensor::<E>(), block_idx, layer_idx)?;
    Ok(render(&map, mc.window_schedule[block_idx], img.h, img.w))
}

/// Nearest-upsample the (rows, cols) window-mass map to the input extents
/// and min-max normalize; constant maps render mid-gray.
fn render(map: &Tensor<f64>, window: usize, h: usize, w: usize) -> Image {
    let (rows, cols) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let flat = hi - lo < 1e-12;
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = (y / window).min(rows - 1);
            let c = (x / window).min(cols - 1);
            data[y * w + x] = if flat { 0.5 } else { (map.data()[r * cols + c] - lo) / (hi - lo) };
        }
    }
    Image::new(1, h, w, data).expect("map image shape")
}

/// Side-by-side montage with one white separator column between panels.
fn montage(maps: &[Image]) -> Image {
    let h = maps[0].h;
    let total_w: usize = maps.iter().map(|m| m.w).sum::<usize>() + maps.len() - 1;
    let mut data = vec![1.0; h * total_w];
    let mut x0 = 0;
    for m in maps {
        for y in 0..h {
            for x in 0..m.w {
                data[y * total_w + x0 + x] = m.get(0, y, x);
            }
        }
        x0 += m.w + 1;
    }
    Image::new(1, h, total_w, data).expect("montage shape")
}

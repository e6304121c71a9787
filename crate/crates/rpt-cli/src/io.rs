//! File IO around the core codecs: images, checkpoints, dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use rpt_core::data::{bicubic_resize, Image, PairedDataset};
use rpt_core::elem::Elem;
use rpt_core::{checkpoint, pnm};

#[derive(Debug)]
pub struct IoError(pub String);

impl std::fmt::Display for IoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for IoError {}

pub type IoResult<T> = Result<T, IoError>;

pub fn read_image(path: &Path) -> IoResult<Image> {
    let bytes = fs::read(path).map_err(|e| IoError(format!("cannot read {}: {e}", path.display())))?;
    pnm::decode(&bytes).map_err(|e| IoError(format!("{}: {e}", path.display())))
}

/// Write PGM when the target name ends in .pgm, PPM otherwise.
pub fn write_image(path: &Path, img: &Image) -> IoResult<()> {
    let bytes = if path.extension().map(|e| e == "pgm").unwrap_or(false) {
        pnm::encode_pgm(img)
    } else {
        pnm::encode_ppm(img)
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| IoError(format!("cannot write {}: {e}", path.display())))
}

pub fn read_checkpoint<E: Elem>(path: &Path) -> IoResult<checkpoint::Loaded<E>> {
    let bytes = fs::read(path).map_err(|e| IoError(format!("cannot read {}: {e}", path.display())))?;
    checkpoint::decode::<E>(&bytes).map_err(|e| IoError(format!("{}: {e}", path.display())))
}

/// Element dtype tag of a checkpoint file (byte 6).
pub fn checkpoint_dtype(path: &Path) -> IoResult<u8> {
    let bytes = fs::read(path).map_err(|e| IoError(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 7 || &bytes[..6] != checkpoint::MAGIC {
        return Err(IoError(format!("{}: not an RPTSR1 checkpoint", path.display())));
    }
    Ok(bytes[6])
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> IoResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError(format!("cannot create {}: {e}", parent.display())))?;
    }
    fs::write(path, bytes).map_err(|e| IoError(format!("cannot write {}: {e}", path.display())))
}

/// Sorted PNM files directly inside a directory.
fn pnm_files(dir: &Path) -> IoResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| IoError(format!("dataset not found: {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| e == "pgm" || e == "ppm")
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Load a paired dataset from the `hr/NNNN.pgm` (+ optional `lrxR/NNNN.pgm`)
/// directory layout. Missing LR images are generated by bicubic downsampling.
pub fn load_dir_dataset<E: Elem>(root: &Path, scale: usize) -> IoResult<PairedDataset<E>> {
    let hr_dir = root.join("hr");
    let hr_files = pnm_files(&hr_dir)?;
    if hr_files.is_empty() {
        return Err(IoError(format!("dataset not found: no PNM files in {}", hr_dir.display())));
    }
    let lr_dir = root.join(format!("lrx{scale}"));
    let mut pairs = Vec::with_capacity(hr_files.len());
    for hr_path in &hr_files {
        let hr = read_image(hr_path)?;
        if hr.h % scale != 0 || hr.w % scale != 0 {
            return Err(IoError(format!(
                "{}: extents {}x{} not divisible by scale {scale}",
                hr_path.display(),
                hr.h,
                hr.w
            )));
        }
        let lr_path = lr_dir.join(hr_path.file_name().unwrap());
        let lr = if lr_path.exists() {
            let img = read_image(&lr_path)?;
            if img.h * scale != hr.h || img.w * scale != hr.w {
                return Err(IoError(format!(
                    "{}: LR {}x{} does not pair with HR {}x{}",
                    lr_path.display(),
                    img.h,
                    img.w,
                    hr.h,
                    hr.w
                )));
            }
            img
        } else {
            bicubic_resize(&hr, hr.h / scale, hr.w / scale)
                .map_err(|e| IoError(format!("{}: {e}", hr_path.display())))?
        };
        pairs.push((lr.to_tensor::<E>(), hr.to_tensor::<E>()));
    }
    Ok(PairedDataset { pairs })
}

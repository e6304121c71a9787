//! Command implementations. Exit-code convention: 0 success, 1 verification
//! failure, 2 usage/input error.

pub mod attnmap;
pub mod bench;
pub mod eval;
pub mod gradcheck;
pub mod infer;
pub mod train;

use std::path::PathBuf;

use rpt_core::data::{Image, LayoutSpec, SynthDataset};
use rpt_core::elem::Elem;
use rpt_core::train::Dataset;

use crate::config::{ConfigError, RunConfig};
use crate::io::IoError;

/// Frame-seed bases keeping training and validation synth frames disjoint
/// while sharing the same layout.
pub const SYNTH_TRAIN_BASE: u64 = 1_000;
pub const SYNTH_VAL_BASE: u64 = 900_000;

#[derive(Debug)]
pub enum CmdError {
    /// Bad flags, malformed inputs, missing files: exit 2.
    Usage(String),
    /// A verification gate failed: exit 1.
    Verify(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 2,
            CmdError::Verify(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CmdError::Usage(m) | CmdError::Verify(m) => m,
        }
    }
}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Usage(e.0)
    }
}

impl From<IoError> for CmdError {
    fn from(e: IoError) -> Self {
        CmdError::Usage(e.0)
    }
}

impl From<rpt_core::Error> for CmdError {
    fn from(e: rpt_core::Error) -> Self {
        match e {
            rpt_core::Error::NanLoss { .. } => CmdError::Verify(e.to_string()),
            other => CmdError::Usage(other.to_string()),
        }
    }
}

pub type CmdResult = Result<(), CmdError>;

/// Synthetic layout shared by train/eval/acceptance runs of one seed.
pub fn synth_spec(cfg: &RunConfig) -> Result<LayoutSpec, CmdError> {
    Ok(LayoutSpec::three_band(cfg.u64_or("synth_seed", 7)?))
}

/// Training dataset: `data=synth` or a directory in the hr/ (+ lrxR/) layout.
pub fn build_train_dataset<E: Elem>(
    cfg: &RunConfig,
    scale: usize,
) -> Result<Box<dyn Dataset<E>>, CmdError> {
    match cfg.get("data").unwrap_or("synth") {
        "synth" => {
            let frames = cfg.usize_or("synth_frames", 64)?;
            let hr = cfg.usize_or("synth_hr", 32)?;
            let ds = SynthDataset::<E>::generate(&synth_spec(cfg)?, frames, hr, scale, SYNTH_TRAIN_BASE)?;
            Ok(Box::new(ds))
        }
        _ => {
            let root = cfg.path("data").expect("data key present");
            let patch = cfg.usize_or("patch", 0)?;
            if patch == 0 {
                Ok(Box::new(crate::io::load_dir_dataset::<E>(&root, scale)?))
            } else {
                Ok(Box::new(CropDataset::<E>::load(&root, patch, scale, cfg.seed()?)?))
            }
        }
    }
}

/// Directory dataset with seeded random aligned crops; index i deterministically
/// selects (source image, crop offsets), so runs are reproducible.
pub struct CropDataset<E: Elem> {
    sources: Vec<Image>,
    patch: usize,
    scale: usize,
    seed: u64,
    _marker: core::marker::PhantomData<E>,
}

impl<E: Elem> CropDataset<E> {
    pub fn load(root: &PathBuf, patch: usize, scale: usize, seed: u64) -> Result<Self, CmdError> {
        let hr_dir = root.join("hr");
        let mut files: Vec<PathBuf> = std::fs::read_dir(&hr_dir)
            .map_err(|e| CmdError::Usage(format!("dataset not found: {}: {e}", hr_dir.display())))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().and_then(|e| e.to_str()).map(|e| e == "pgm" || e == "ppm").unwrap_or(false))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(CmdError::Usage(format!("dataset not found: no PNM files in {}", hr_dir.display())));
        }
        if patch % scale != 0 {
            return Err(CmdError::Usage(format!("patch {patch} must be divisible by scale {scale}")));
        }
        let sources = files
            .iter()
            .map(|p| crate::io::read_image(p))
            .collect::<Result<Vec<_>, _>>()?;
        for (img, path) in sources.iter().zip(&files) {
            if img.h < patch || img.w < patch {
                return Err(CmdError::Usage(format!(
                    "{}: {}x{} smaller than patch {patch}",
                    path.display(),
                    img.h,
                    img.w
                )));
            }
        }
        Ok(CropDataset { sources, patch, scale, seed, _marker: core::marker::PhantomData })
    }
}

impl<E: Elem> Dataset<E> for CropDataset<E> {
    fn len(&self) -> usize {
        // Virtual length: many distinct seeded crops per source image.
        self.sources.len() * 64
    }

    fn pair(&self, index: usize) -> (rpt_core::Tensor<E>, rpt_core::Tensor<E>) {
        let img = &self.sources[index % self.sources.len()];
        let mut rng = rpt_core::rng::Rng::new(self.seed ^ 0x63726f70).fork(index as u64);
        let pair = rpt_core::data::sample_pair(img, self.patch, self.scale, &mut rng)
            .expect("sources validated against patch size at load");
        (pair.lr.to_tensor::<E>(), pair.hr.to_tensor::<E>())
    }
}

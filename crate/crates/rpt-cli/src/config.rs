//! Run configuration: flat `key = value` text files plus command-line
//! overrides, validated against a closed schema (unknown keys are errors).
//! Paths given in a config file resolve relative to that file; paths given
//! on the command line resolve relative to the working directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rpt_core::model::ModelConfig;
use rpt_core::ops::conv::PadMode;
use rpt_core::Variant;

/// Keys the schema accepts, with one-line meanings for `--help`.
pub const SCHEMA: &[(&str, &str)] = &[
    ("preset", "model preset: classical | light | tiny"),
    ("variant", "ablation variant: baseline | static | rpt"),
    ("channels", "embedding channels (overrides preset)"),
    ("blocks", "number of residual attention blocks"),
    ("layers_per_block", "transformer layers per block"),
    ("heads", "attention heads"),
    ("window_schedule", "comma list of per-block window edges, e.g. 8,16,16,32"),
    ("k", "dynamic tokens per window (perfect square)"),
    ("scale", "upsampling factor r"),
    ("pad_mode", "convolution padding: zero | circular"),
    ("precision", "f32 | f64 (training/bench element type)"),
    ("data", "dataset directory or 'synth'"),
    ("seed", "run seed"),
    ("iters", "training iterations"),
    ("batch", "batch size"),
    ("patch", "HR patch size for directory datasets (0 = full frame)"),
    ("ckpt_every", "periodic checkpoint interval (0 = final only)"),
    ("out", "output directory"),
    ("checkpoint", "checkpoint path (comma list of 3 for the attnmap triptych)"),
    ("input", "input image path (PGM/PPM)"),
    ("output", "output image file name, written under out/"),
    ("block_idx", "attention-probe block index (default: last)"),
    ("layer_idx", "attention-probe layer index (default: last)"),
    ("op", "gradcheck: run only checks containing this substring"),
    ("fault", "gradcheck: sign-flip analytic grads of matching checks (harness hook)"),
    ("gradcheck_seeds", "gradcheck: seeds per check (default 20)"),
    ("threads", "worker threads for batch evaluation (0 = auto)"),
    ("synth_frames", "synthetic dataset: number of HR frames"),
    ("synth_hr", "synthetic dataset: HR frame edge"),
    ("synth_seed", "synthetic dataset: layout seed"),
    ("val_frames", "evaluation frames for synth datasets"),
    ("bench_w", "bench: comma list of window edges for the k sweep"),
    ("bench_iters", "bench: timed forward repetitions (>= 10)"),
    ("bench_size", "bench: square LR input edge"),
    ("lr", "base learning rate (default 5e-4)"),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub command: String,
    values: BTreeMap<String, String>,
    /// Keys that came from a config file resolve paths against its parent.
    file_dir: Option<PathBuf>,
    from_file: std::collections::BTreeSet<String>,
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn known_key(key: &str) -> bool {
    SCHEMA.iter().any(|(k, _)| *k == key)
}

impl RunConfig {
    pub fn from_args(command: &str, args: &[String]) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig {
            command: command.to_string(),
            values: BTreeMap::new(),
            file_dir: None,
            from_file: Default::default(),
        };
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            let take_value = |i: &mut usize| -> Result<String, ConfigError> {
                *i += 1;
                args.get(*i).cloned().ok_or_else(|| ConfigError(format!("{arg} needs a value")))
            };
            if arg == "--config" {
                let path = take_value(&mut i)?;
                cfg.load_file(Path::new(&path))?;
            } else if let Some(rest) = arg.strip_prefix("--") {
                // --seed N, --out DIR, --op NAME map onto schema keys.
                let key = rest.to_string();
                if !known_key(&key) {
                    return Err(ConfigError(format!("unknown flag --{key}")));
                }
                let value = take_value(&mut i)?;
                cfg.set_cli(&key, &value)?;
            } else if let Some((k, v)) = arg.split_once('=') {
                cfg.set_cli(k.trim(), v.trim())?;
            } else {
                return Err(ConfigError(format!("unrecognized argument '{arg}' (expected key=value)")));
            }
            i += 1;
        }
        Ok(cfg)
    }

    fn set_cli(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !known_key(key) {
            return Err(ConfigError(format!("unknown config key '{key}'")));
        }
        self.from_file.remove(key);
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.file_dir = Some(path.parent().unwrap_or(Path::new(".")).to_path_buf());
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            let key = k.trim();
            if !known_key(key) {
                return Err(ConfigError(format!(
                    "{}:{}: unknown config key '{key}'",
                    path.display(),
                    lineno + 1
                )));
            }
            self.values.insert(key.to_string(), v.trim().to_string());
            self.from_file.insert(key.to_string());
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|s| s.as_str())
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    /// Resolve a path-valued key against its origin (config file or cwd).
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.get(key)?;
        let p = PathBuf::from(raw);
        if p.is_absolute() || !self.from_file.contains(key) {
            return Some(p);
        }
        Some(self.file_dir.clone().unwrap_or_default().join(p))
    }

    /// Comma-separated path list (attnmap triptych).
    pub fn path_list(&self, key: &str) -> Vec<PathBuf> {
        let Some(raw) = self.get(key) else { return Vec::new() };
        raw.split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| {
                let p = PathBuf::from(s);
                if p.is_absolute() || !self.from_file.contains(key) {
                    p
                } else {
                    self.file_dir.clone().unwrap_or_default().join(p)
                }
            })
            .collect()
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError(format!("{key} must be an integer, got '{v}'"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(self.u64_or(key, default as u64)? as usize)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| ConfigError(format!("{key} must be a number, got '{v}'"))),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.path("out").unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.u64_or("seed", 0)
    }

    pub fn precision(&self) -> Result<Precision, ConfigError> {
        match self.get("precision").unwrap_or("f32") {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(ConfigError(format!("precision must be f32 or f64, got '{other}'"))),
        }
    }

    /// Model description from preset plus field overrides.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let mut cfg = ModelConfig::preset(self.get("preset").unwrap_or("tiny"))
            .map_err(|e| ConfigError(e.to_string()))?;
        if let Some(v) = self.get("variant") {
            cfg.variant = parse_variant(v)?;
        }
        if self.has("channels") {
            cfg.channels = self.usize_or("channels", cfg.channels)?;
        }
        if self.has("blocks") {
            cfg.blocks = self.usize_or("blocks", cfg.blocks)?;
        }
        if self.has("layers_per_block") {
            cfg.layers_per_block = self.usize_or("layers_per_block", cfg.layers_per_block)?;
        }
        if self.has("heads") {
            cfg.heads = self.usize_or("heads", cfg.heads)?;
        }
        if self.has("k") {
            cfg.k = self.usize_or("k", cfg.k)?;
        }
        if self.has("scale") {
            cfg.scale = self.usize_or("scale", cfg.scale)?;
        }
        if let Some(v) = self.get("window_schedule") {
            cfg.window_schedule = v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| ConfigError(format!("bad window_schedule entry '{s}'")))
                })
                .collect::<Result<_, _>>()?;
            if !self.has("blocks") {
                cfg.blocks = cfg.window_schedule.len();
            }
        }
        if let Some(v) = self.get("pad_mode") {
            cfg.pad_mode = match v {
                "zero" => PadMode::Zero,
                "circular" => PadMode::Circular,
                other => return Err(ConfigError(format!("pad_mode must be zero or circular, got '{other}'"))),
            };
        }
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// True when any explicit model field is present (used to cross-check
    /// against a loaded checkpoint).
    pub fn has_model_fields(&self) -> bool {
        ["preset", "variant", "channels", "blocks", "layers_per_block", "heads", "window_schedule", "k", "scale"]
            .iter()
            .any(|k| self.has(k))
    }
}

pub fn parse_variant(v: &str) -> Result<Variant, ConfigError> {
    match v {
        "baseline" => Ok(Variant::Baseline),
        "static" => Ok(Variant::Static),
        "rpt" => Ok(Variant::Rpt),
        other => Err(ConfigError(format!("variant must be baseline, static, or rpt, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_args("train", &args(&["presett=tiny"])).unwrap_err();
        assert!(err.0.contains("presett"));
        let err = RunConfig::from_args("train", &args(&["--sed", "1"])).unwrap_err();
        assert!(err.0.contains("sed"));
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = std::env::temp_dir().join("rpt_cfg_test");
        std::fs::create_dir_all(&dir).unwrap();
        let file = dir.join("run.cfg");
        std::fs::write(&file, "# comment\nseed = 7\ndata = frames\n").unwrap();
        let cfg = RunConfig::from_args(
            "train",
            &args(&["--config", file.to_str().unwrap(), "seed=9"]),
        )
        .unwrap();
        assert_eq!(cfg.seed().unwrap(), 9);
        // data path from the file resolves relative to the file.
        assert_eq!(cfg.path("data").unwrap(), dir.join("frames"));
    }

    #[test]
    fn model_fields_override_preset() {
        let cfg = RunConfig::from_args(
            "train",
            &args(&["preset=tiny", "variant=baseline", "window_schedule=4,4,4"]),
        )
        .unwrap();
        let mc = cfg.model_config().unwrap();
        assert_eq!(mc.variant, Variant::Baseline);
        assert_eq!(mc.blocks, 3);
    }

    #[test]
    fn bad_values_are_errors() {
        let cfg = RunConfig::from_args("train", &args(&["seed=abc"])).unwrap();
        assert!(cfg.seed().is_err());
        let cfg = RunConfig::from_args("train", &args(&["precision=f16"])).unwrap();
        assert!(cfg.precision().is_err());
    }
}

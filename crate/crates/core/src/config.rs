//! INI run configuration. Every key is checked against a fixed schema;
//! unknown sections and keys are errors.
//!
//! ```ini
//! [train]
//! profile = desk        ; desk | full, applied before the other keys
//! batch_size = 16
//! max_steps = 2000
//! precision = f32       ; f32 | f64
//! [sgd]
//! base_lr = 0.01
//! [sampler]
//! mode = bright_dark
//! d_schedule = 3.5, 5, 10
//! [arch]
//! variant = contextual
//! block_channels = 16, 32, 64
//! [data]
//! folds = 3
//! holdout_fold = 0
//! [synth]
//! noise_std = 0.01
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::io::synth::SyntheticSceneSpec;
use crate::nets::parse_list;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }
}

/// Cross-validation split of a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplit {
    pub folds: usize,
    pub fold_seed: u64,
    /// Fold held out from training and used for evaluation; `None` uses everything for both.
    pub holdout_fold: Option<usize>,
}

impl Default for DataSplit {
    fn default() -> Self {
        DataSplit {
            folds: 3,
            fold_seed: 0,
            holdout_fold: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub precision: Precision,
    pub data: DataSplit,
    pub synth: SyntheticSceneSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            precision: Precision::F32,
            data: DataSplit::default(),
            synth: SyntheticSceneSpec::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse {v:?}")))
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_floats(section: &str, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| parse(section, key, t))
        .collect()
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(format!("INI syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        // The profile resets the training defaults, so it goes first.
        if let Some(p) = ini.section(Some("train")).and_then(|s| s.get("profile")) {
            cfg.train = match p.trim() {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::default(),
                other => return Err(Error::Config(format!("[train] profile must be desk or full, got {other:?}"))),
            };
        }
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key {k:?} outside any section")));
                }
                continue;
            };
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one key. Also used for command-line overrides.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match (section, key) {
            ("train", "profile") => {}
            ("train", "batch_size") => t.batch_size = parse(section, key, v)?,
            ("train", "max_steps") => t.max_steps = parse(section, key, v)?,
            ("train", "eval_every") => t.eval_every = parse(section, key, v)?,
            ("train", "seed") => t.seed = parse(section, key, v)?,
            ("train", "manifest") => t.manifest = Some(PathBuf::from(v.trim())),
            ("train", "precision") => self.precision = parse(section, key, v)?,
            ("sgd", "base_lr") => t.sgd.base_lr = parse(section, key, v)?,
            ("sgd", "momentum") => t.sgd.momentum = parse(section, key, v)?,
            ("sgd", "weight_decay") => t.sgd.weight_decay = parse(section, key, v)?,
            ("sgd", "lr_decay_factor") => t.sgd.lr_decay_factor = parse(section, key, v)?,
            ("sgd", "lr_decay_every") => t.sgd.lr_decay_every = parse(section, key, v)?,
            ("sampler", "patch_size") => {
                t.sampler.patch_size = parse(section, key, v)?;
                t.arch.input_size = t.sampler.patch_size;
            }
            ("sampler", "num_patches") => t.sampler.num_patches = parse(section, key, v)?,
            ("sampler", "d_schedule") => t.sampler.d_schedule = parse_floats(section, key, v)?,
            ("sampler", "max_attempts_per_d") => t.sampler.max_attempts_per_d = parse(section, key, v)?,
            ("sampler", "mode") => t.sampler.mode = parse(section, key, v)?,
            ("sampler", "seed") => t.sampler.seed = parse(section, key, v)?,
            ("arch", "variant") => t.arch.variant = v.trim().parse()?,
            ("arch", "block_channels") => t.arch.block_channels = parse_list(v)?,
            ("arch", "convs_per_block") => t.arch.convs_per_block = parse(section, key, v)?,
            ("arch", "head") => t.arch.head = parse_list(v)?,
            ("arch", "input_size") => {
                t.arch.input_size = parse(section, key, v)?;
                t.sampler.patch_size = t.arch.input_size;
            }
            ("data", "folds") => self.data.folds = parse(section, key, v)?,
            ("data", "fold_seed") => self.data.fold_seed = parse(section, key, v)?,
            ("data", "holdout_fold") => {
                self.data.holdout_fold = match v.trim() {
                    "" | "none" => None,
                    x => Some(parse(section, key, x)?),
                }
            }
            ("synth", "width") => s.width = parse(section, key, v)?,
            ("synth", "height") => s.height = parse(section, key, v)?,
            ("synth", "num_regions") => s.num_regions = parse(section, key, v)?,
            ("synth", "albedo_min") => s.albedo_range.0 = parse(section, key, v)?,
            ("synth", "albedo_max") => s.albedo_range.1 = parse(section, key, v)?,
            ("synth", "chroma") => s.chroma = parse(section, key, v)?,
            ("synth", "achromatic_fraction") => s.achromatic_fraction = parse(section, key, v)?,
            ("synth", "illuminant_min") => s.illuminant_range.0 = parse(section, key, v)?,
            ("synth", "illuminant_max") => s.illuminant_range.1 = parse(section, key, v)?,
            ("synth", "min_normalized_component") => s.min_normalized_component = parse(section, key, v)?,
            ("synth", "noise_std") => s.noise_std = parse(section, key, v)?,
            ("synth", "gray_world_balanced") => s.gray_world_balanced = parse_bool(section, key, v)?,
            ("synth", "mask_chart") => s.mask_chart = parse_bool(section, key, v)?,
            ("synth", "seed") => s.seed = parse(section, key, v)?,
            ("train" | "sgd" | "sampler" | "arch" | "data" | "synth", _) => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synth.validate()?;
        if self.data.folds < 2 {
            return Err(Error::Config("[data] folds must be >= 2".into()));
        }
        if let Some(h) = self.data.holdout_fold {
            if h >= self.data.folds {
                return Err(Error::Config(format!(
                    "[data] holdout_fold {h} must be < folds {}",
                    self.data.folds
                )));
            }
        }
        Ok(())
    }
}

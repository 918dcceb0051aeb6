//! Flat `key=value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::encoders::VitConfig;
use crate::error::{MktError, Result};
use crate::metrics::TaskMode;
use crate::objectives::TrainConfig;
use crate::synthworld::WorldConfig;

/// Hyper-parameter swept by the `sweep` command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    K,
}

impl FromStr for SweepAxis {
    type Err = MktError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "k" => Ok(SweepAxis::K),
            other => Err(MktError::Config(format!("sweep axis must be lambda|k, got {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::K => "k",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub train: TrainConfig,
    pub eval_ks: Vec<usize>,
    pub task_modes: Vec<TaskMode>,
    pub topn: usize,
    pub sweep_axis: SweepAxis,
    pub sweep_values: Vec<f64>,
    /// K of the F1 column in sweep output.
    pub sweep_f1_k: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            world: WorldConfig::default(),
            dim: 16,
            heads: 2,
            blocks: 2,
            mlp_hidden: 64,
            train: TrainConfig::default(),
            eval_ks: vec![1, 3],
            task_modes: vec![TaskMode::Zsl, TaskMode::Gzsl],
            topn: 3,
            sweep_axis: SweepAxis::Lambda,
            sweep_values: vec![0.0, 0.5, 1.0, 2.0],
            sweep_f1_k: 3,
            dataset: None,
            checkpoint: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| MktError::Config(format!("bad value {v:?} for {key}")))
}

fn list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse(key, s.trim())).collect()
}

fn existing(key: &str, v: &str) -> Result<PathBuf> {
    let p = Path::new(v);
    fs::canonicalize(p).map_err(|e| MktError::Config(format!("{key}: {v}: {e}")))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn vit_config(&self) -> VitConfig {
        VitConfig {
            channels: self.world.channels,
            image_size: self.world.image_size,
            patch: self.world.patch,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.world.set(key, value)? {
            return Ok(());
        }
        let t = &mut self.train;
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "mlp_hidden" => self.mlp_hidden = parse(key, value)?,
            "lambda" => t.lambda = parse(key, value)?,
            "k" => t.k = parse(key, value)?,
            "lr_stage1" => t.lr_stage1 = parse(key, value)?,
            "lr_stage2" => t.lr_stage2 = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "epochs_stage1" => t.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => t.epochs_stage2 = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "head_mode" => t.head_mode = value.parse()?,
            "eval_ks" => self.eval_ks = list(key, value)?,
            "task_modes" => self.task_modes = list(key, value)?,
            "topn" => self.topn = parse(key, value)?,
            "sweep_axis" => self.sweep_axis = value.parse()?,
            "sweep_values" => self.sweep_values = list(key, value)?,
            "sweep_f1_k" => self.sweep_f1_k = parse(key, value)?,
            "dataset" => self.dataset = Some(existing(key, value)?),
            "checkpoint" => self.checkpoint = Some(existing(key, value)?),
            other => return Err(MktError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MktError::Config(format!("line {}: expected key=value, got {raw:?}", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MktError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.vit_config().validate()?;
        self.train.validate()?;
        if self.train.k > self.world.num_patches() {
            return Err(MktError::KOutOfRange { k: self.train.k, n: self.world.num_patches() });
        }
        if self.eval_ks.is_empty() || self.eval_ks.iter().any(|&k| k == 0) {
            return Err(MktError::Config("eval_ks must list positive integers".into()));
        }
        if self.task_modes.is_empty() {
            return Err(MktError::Config("task_modes must not be empty".into()));
        }
        Ok(())
    }

    /// Every setting, one per line, in a fixed order. Parsing the result
    /// gives back an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let _ = writeln!(out, "seed={}", self.seed);
        for (k, v) in self.world.to_pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        let pairs = [
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("blocks", self.blocks.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("lambda", format!("{:?}", t.lambda)),
            ("k", t.k.to_string()),
            ("lr_stage1", format!("{:?}", t.lr_stage1)),
            ("lr_stage2", format!("{:?}", t.lr_stage2)),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("epochs_stage1", t.epochs_stage1.to_string()),
            ("epochs_stage2", t.epochs_stage2.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("head_mode", t.head_mode.as_str().to_string()),
            ("eval_ks", join(&self.eval_ks)),
            ("task_modes", self.task_modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(",")),
            ("topn", self.topn.to_string()),
            ("sweep_axis", self.sweep_axis.as_str().to_string()),
            ("sweep_values", self.sweep_values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")),
            ("sweep_f1_k", self.sweep_f1_k.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k}={v}");
        }
        if let Some(p) = &self.dataset {
            let _ = writeln!(out, "dataset={}", p.display());
        }
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint={}", p.display());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| MktError::io(path, e))
    }
}

//! Run configuration as line-oriented `key = value` text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::Difficulty;
use crate::error::{Error, Result};
use crate::kan::KanConfig;
use crate::model::ModelConfig;
use crate::objective::ObjectiveConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many steps in total; 0 means no limit.
    pub max_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
            batch_size: 8,
            epochs: 30,
            max_steps: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub ratio: f64,
    pub seed: u64,
    pub num_samples: usize,
    pub difficulty: Difficulty,
    /// Random horizontal flips of training images.
    pub flip: bool,
    pub prune_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            ratio: 0.1,
            seed: 0,
            num_samples: 250,
            difficulty: Difficulty::Hard,
            flip: true,
            prune_threshold: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "decoders",
    "channels",
    "embed_dim",
    "patch",
    "spline_order",
    "grid_intervals",
    "spline_domain",
    "kan_blocks",
    "token_block",
    "classes",
    "in_channels",
    "height",
    "width",
    "temperature",
    "alpha",
    "lambda_max",
    "ramp_fraction",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "batch_size",
    "epochs",
    "max_steps",
    "data_dir",
    "out_dir",
    "ratio",
    "seed",
    "num_samples",
    "difficulty",
    "flip",
    "prune_threshold",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{v}'"))),
    }
}

const DEFAULT_STRATEGIES: [&str; 3] = ["nearest", "bilinear", "transposed_conv"];

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "decoders" => {
                m.strategies = match v.parse::<usize>() {
                    Ok(b) if (1..=DEFAULT_STRATEGIES.len()).contains(&b) => DEFAULT_STRATEGIES[..b].iter().map(|s| s.to_string()).collect(),
                    Ok(b) => return Err(Error::Config(format!("decoders: count {b} outside 1..=3"))),
                    Err(_) => v.split(',').map(|s| s.trim().to_string()).collect(),
                }
            }
            "channels" => m.channels = parse_list(key, v)?,
            "embed_dim" => m.embed_dim = parse_num(key, v)?,
            "patch" => m.patch = parse_num(key, v)?,
            "spline_order" => m.kan.order = parse_num(key, v)?,
            "grid_intervals" => m.kan.intervals = parse_num(key, v)?,
            "spline_domain" => {
                let (a, b) = v
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("spline_domain: expected 'min,max', got '{v}'")))?;
                m.kan.domain = (parse_num(key, a.trim())?, parse_num(key, b.trim())?);
            }
            "kan_blocks" => m.kan_blocks = parse_num(key, v)?,
            "token_block" => m.token_block = v.to_string(),
            "classes" => m.num_classes = parse_num(key, v)?,
            "in_channels" => m.in_channels = parse_num(key, v)?,
            "height" => m.height = parse_num(key, v)?,
            "width" => m.width = parse_num(key, v)?,
            "temperature" => self.objective.temperature = parse_num(key, v)?,
            "alpha" => self.objective.alpha = parse_num(key, v)?,
            "lambda_max" => self.objective.lambda_max = parse_num(key, v)?,
            "ramp_fraction" => self.objective.ramp_fraction = parse_num(key, v)?,
            "lr" => self.optim.lr = parse_num(key, v)?,
            "beta1" => self.optim.beta1 = parse_num(key, v)?,
            "beta2" => self.optim.beta2 = parse_num(key, v)?,
            "adam_eps" => self.optim.eps = parse_num(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "batch_size" => self.optim.batch_size = parse_num(key, v)?,
            "epochs" => self.optim.epochs = parse_num(key, v)?,
            "max_steps" => self.optim.max_steps = parse_num(key, v)?,
            "data_dir" => self.data.data_dir = PathBuf::from(v),
            "out_dir" => self.data.out_dir = PathBuf::from(v),
            "ratio" => self.data.ratio = parse_num(key, v)?,
            "seed" => self.data.seed = parse_num(key, v)?,
            "num_samples" => self.data.num_samples = parse_num(key, v)?,
            "difficulty" => self.data.difficulty = v.parse()?,
            "flip" => self.data.flip = parse_bool(key, v)?,
            "prune_threshold" => self.data.prune_threshold = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let join = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        Ok(match key {
            "decoders" => m.strategies.join(","),
            "channels" => join(&m.channels),
            "embed_dim" => m.embed_dim.to_string(),
            "patch" => m.patch.to_string(),
            "spline_order" => m.kan.order.to_string(),
            "grid_intervals" => m.kan.intervals.to_string(),
            "spline_domain" => format!("{},{}", m.kan.domain.0, m.kan.domain.1),
            "kan_blocks" => m.kan_blocks.to_string(),
            "token_block" => m.token_block.clone(),
            "classes" => m.num_classes.to_string(),
            "in_channels" => m.in_channels.to_string(),
            "height" => m.height.to_string(),
            "width" => m.width.to_string(),
            "temperature" => self.objective.temperature.to_string(),
            "alpha" => self.objective.alpha.to_string(),
            "lambda_max" => self.objective.lambda_max.to_string(),
            "ramp_fraction" => self.objective.ramp_fraction.to_string(),
            "lr" => self.optim.lr.to_string(),
            "beta1" => self.optim.beta1.to_string(),
            "beta2" => self.optim.beta2.to_string(),
            "adam_eps" => self.optim.eps.to_string(),
            "weight_decay" => self.optim.weight_decay.to_string(),
            "batch_size" => self.optim.batch_size.to_string(),
            "epochs" => self.optim.epochs.to_string(),
            "max_steps" => self.optim.max_steps.to_string(),
            "data_dir" => self.data.data_dir.display().to_string(),
            "out_dir" => self.data.out_dir.display().to_string(),
            "ratio" => self.data.ratio.to_string(),
            "seed" => self.data.seed.to_string(),
            "num_samples" => self.data.num_samples.to_string(),
            "difficulty" => self.data.difficulty.to_string(),
            "flip" => self.data.flip.to_string(),
            "prune_threshold" => self.data.prune_threshold.to_string(),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{raw}'", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Every key with its value; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.objective.validate()?;
        let o = &self.optim;
        let positive = |v: f64| v > 0.0;
        if !positive(o.lr) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !positive(o.eps) || o.weight_decay < 0.0 {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0,1), eps > 0, weight_decay >= 0".into()));
        }
        if o.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be >= 2, got {}", o.batch_size)));
        }
        if !(self.data.ratio > 0.0 && self.data.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio must lie in (0, 1], got {}", self.data.ratio)));
        }
        if self.data.prune_threshold.is_nan() || self.data.prune_threshold < 0.0 {
            return Err(Error::Config("prune_threshold must be >= 0".into()));
        }
        Ok(())
    }

    pub fn kan(&self) -> &KanConfig {
        &self.model.kan
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("lr", "0.0003").unwrap();
        c.set("decoders", "2").unwrap();
        c.set("spline_domain", "-2, 1.5").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(back.model.strategies, ["nearest", "bilinear"]);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::parse("learning_rate = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("lr 1"), Err(Error::Config(_))));
    }
}

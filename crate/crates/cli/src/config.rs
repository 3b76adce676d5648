//! Plain-text `key = value` run configuration.
//!
//! One pair per line; `#` starts a comment. Unknown keys, repeated keys and
//! unparsable values are rejected with the offending line number.

use std::fmt;
use std::path::{Path, PathBuf};

use emanet::data::DataDims;
use emanet::network::TrainConfig;
use emanet::network::{ModelConfig, Variant, SCALES};
use emanet::tasks::{TaskKind, TaskSpec};
use emanet::tensor::{AdamConfig, CosineSchedule, WeightDecayMode};

/// A malformed config file, `--set` override or flag value. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // model
    pub tasks: Vec<TaskKind>,
    pub variant: Variant,
    pub channels: usize,
    pub encoder_width: usize,
    pub filter: usize,
    pub gamma: f64,
    pub scale: usize,
    pub fusion_bias: bool,
    pub deep_supervision: bool,
    /// Empty means 1 for every task.
    pub loss_weights: Vec<f64>,
    // optimizer
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
    pub schedule: Schedule,
    /// Steps per cosine cycle; 0 anneals once over the whole run.
    pub restart_period: usize,
    // data
    pub seed: u64,
    pub train_count: usize,
    pub eval_count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    // run
    pub epochs: usize,
    pub batch: usize,
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tasks: vec![TaskKind::Segmentation, TaskKind::Depth, TaskKind::Normals],
            variant: Variant::SingleScale,
            channels: 16,
            encoder_width: 8,
            filter: 3,
            gamma: 0.05,
            scale: 4,
            fusion_bias: true,
            deep_supervision: true,
            loss_weights: Vec::new(),
            lr: 1e-3,
            weight_decay: 1e-4,
            decay_mode: WeightDecayMode::Coupled,
            schedule: Schedule::Constant,
            restart_period: 0,
            seed: 0,
            train_count: 64,
            eval_count: 16,
            height: 64,
            width: 64,
            classes: 5,
            epochs: 2,
            batch: 8,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn parse_list<T>(value: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(item)
        .collect()
}

impl RunConfig {
    pub const KEYS: [&'static str; 25] = [
        "tasks",
        "variant",
        "channels",
        "encoder_width",
        "filter",
        "gamma",
        "scale",
        "fusion_bias",
        "deep_supervision",
        "loss_weights",
        "lr",
        "weight_decay",
        "decay_mode",
        "schedule",
        "restart_period",
        "seed",
        "train_count",
        "eval_count",
        "height",
        "width",
        "classes",
        "epochs",
        "batch",
        "out_dir",
        "checkpoint",
    ];

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let value = value.trim();
        match key {
            "tasks" => {
                self.tasks = parse_list(value, |s| TaskKind::parse(s).map_err(|e| e.to_string()))?;
                if self.tasks.is_empty() {
                    return Err("at least one task is required".into());
                }
            }
            "variant" => self.variant = Variant::parse(value).map_err(|e| e.to_string())?,
            "channels" => self.channels = parse_num(value)?,
            "encoder_width" => self.encoder_width = parse_num(value)?,
            "filter" => self.filter = parse_num(value)?,
            "gamma" => self.gamma = parse_num(value)?,
            "scale" => self.scale = parse_scale(value)?,
            "fusion_bias" => self.fusion_bias = parse_bool(value)?,
            "deep_supervision" => self.deep_supervision = parse_bool(value)?,
            "loss_weights" => self.loss_weights = parse_list(value, parse_num)?,
            "lr" => self.lr = parse_num(value)?,
            "weight_decay" => self.weight_decay = parse_num(value)?,
            "decay_mode" => {
                self.decay_mode = match value {
                    "coupled" => WeightDecayMode::Coupled,
                    "decoupled" => WeightDecayMode::Decoupled,
                    _ => return Err(format!("expected coupled or decoupled, got `{value}`")),
                }
            }
            "schedule" => {
                self.schedule = match value {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    _ => return Err(format!("expected constant or cosine, got `{value}`")),
                }
            }
            "restart_period" => self.restart_period = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "train_count" => self.train_count = parse_num(value)?,
            "eval_count" => self.eval_count = parse_num(value)?,
            "height" => self.height = parse_num(value)?,
            "width" => self.width = parse_num(value)?,
            "classes" => self.classes = parse_num(value)?,
            "epochs" => self.epochs = parse_num(value)?,
            "batch" => self.batch = parse_num(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies every assignment in `text`; `origin` prefixes diagnostics.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| ConfigError(format!("{origin}:{}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(at(format!("duplicate key `{key}`")));
            }
            seen.push(key);
            self.set(key, value).map_err(at)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies a `key=value` override given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set {assignment}: expected key=value")))?;
        self.set(key.trim(), value)
            .map_err(|e| ConfigError(format!("--set {assignment}: {e}")))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|k| match k {
                TaskKind::Segmentation => TaskSpec::segmentation(self.classes),
                TaskKind::Depth => TaskSpec::depth(),
                TaskKind::Normals => TaskSpec::normals(),
            })
            .collect()
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let tasks = self.task_specs();
        let n = tasks.len();
        let mut ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != n {
            return Err(ConfigError("tasks: each task may appear once".into()));
        }
        let cfg = ModelConfig {
            variant: self.variant,
            channels: self.channels,
            encoder_width: self.encoder_width,
            scale: self.scale,
            filter: self.filter,
            gamma: self.gamma,
            fusion_bias: self.fusion_bias,
            deep_supervision: self.deep_supervision,
            loss_weights: if self.loss_weights.is_empty() {
                vec![1.0; n]
            } else {
                self.loss_weights.clone()
            },
            ..ModelConfig::new(tasks, self.height, self.width)
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn data_dims(&self) -> DataDims {
        DataDims {
            height: self.height,
            width: self.width,
            classes: self.classes,
            label_stride: 4,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_count.div_ceil(self.batch.max(1))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            adam: AdamConfig {
                weight_decay: self.weight_decay,
                mode: self.decay_mode,
                ..AdamConfig::default()
            },
            schedule: (self.schedule == Schedule::Cosine).then(|| CosineSchedule {
                base_lr: self.lr,
                total_steps: self.epochs * self.steps_per_epoch(),
                restart_period: (self.restart_period > 0).then_some(self.restart_period),
            }),
        }
    }

    /// Checks that the run-level values are usable, beyond the model config.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model_config()?;
        let positive = [
            ("train_count", self.train_count),
            ("eval_count", self.eval_count),
            ("epochs", self.epochs),
            ("batch", self.batch),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError(format!("{k} must be positive")));
        }
        if self.classes < 2 {
            return Err(ConfigError("classes must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ConfigError(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(ConfigError(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// The resolved configuration in the file format, every key present.
    pub fn to_text(&self) -> String {
        let list = |v: &[String]| v.join(",");
        let decay = match self.decay_mode {
            WeightDecayMode::Coupled => "coupled",
            WeightDecayMode::Decoupled => "decoupled",
        };
        let schedule = match self.schedule {
            Schedule::Constant => "constant",
            Schedule::Cosine => "cosine",
        };
        let values: [String; 25] = [
            list(
                &self
                    .tasks
                    .iter()
                    .map(|t| t.name().to_string())
                    .collect::<Vec<_>>(),
            ),
            self.variant.name().into(),
            self.channels.to_string(),
            self.encoder_width.to_string(),
            self.filter.to_string(),
            self.gamma.to_string(),
            self.scale.to_string(),
            self.fusion_bias.to_string(),
            self.deep_supervision.to_string(),
            list(
                &self
                    .loss_weights
                    .iter()
                    .map(f64::to_string)
                    .collect::<Vec<_>>(),
            ),
            self.lr.to_string(),
            self.weight_decay.to_string(),
            decay.into(),
            schedule.into(),
            self.restart_period.to_string(),
            self.seed.to_string(),
            self.train_count.to_string(),
            self.eval_count.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.classes.to_string(),
            self.epochs.to_string(),
            self.batch.to_string(),
            self.out_dir.display().to_string(),
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

pub fn parse_scale(value: &str) -> Result<usize, String> {
    let s: usize = parse_num(value.trim())?;
    if SCALES.contains(&s) {
        Ok(s)
    } else {
        Err(format!("scale must be one of 4, 6, 8, got {s}"))
    }
}

//! Plain-text run configuration: one `key=value` per line, `#` starts a
//! comment, unknown keys are rejected, missing keys keep their defaults.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use super::synthetic::SyntheticSpec;
use crate::alignment::{AlignmentConfig, Direction};
use crate::encoders::ModelConfig;
use crate::error::{Error, Result};
use crate::objective::{AdamConfig, NegativeStrategy, TrainSchedule};
use crate::tensor::NORM_EPS;

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub(crate) fn format_list<T: Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse {key}={value:?} as a flag"
        ))),
    }
}

/// Everything a run needs: model shape, scorer, schedule, and corpus
/// generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub lambda: f64,
    pub direction: Direction,
    /// Image stage numbers of the enabled levels; `None` enables all.
    pub levels: Option<Vec<usize>>,
    pub per_level_mean: bool,
    pub eps: f64,
    pub schedule: TrainSchedule,
    pub batch_size: usize,
    pub negatives: NegativeStrategy,
    pub adam: AdamConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelConfig::default(),
            lambda: 9.0,
            direction: Direction::I2t,
            levels: None,
            per_level_mean: false,
            eps: NORM_EPS,
            schedule: TrainSchedule::default(),
            batch_size: 16,
            negatives: NegativeStrategy::Hardest,
            adam: AdamConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    /// Applies one setting. Keys shared with the model (`vocab_size`,
    /// `grid_side`, `in_dim`) also drive corpus generation.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            match key {
                "vocab_size" => self.synthetic.vocab_size = self.model.text.vocab_size,
                "grid_side" => self.synthetic.grid_side = self.model.image.grid_side,
                "in_dim" => self.synthetic.in_dim = self.model.image.in_dim,
                _ => {}
            }
            return Ok(());
        }
        match key {
            "seed" => {
                self.seed = parse_value(key, value)?;
                self.schedule.seed = self.seed;
                self.synthetic.seed = self.seed;
            }
            "lambda" => self.lambda = parse_value(key, value)?,
            "direction" => self.direction = value.trim().parse()?,
            "levels" => {
                let v = value.trim();
                self.levels = if v == "all" {
                    None
                } else {
                    Some(parse_list(key, v)?)
                };
            }
            "per_level_mean" => self.per_level_mean = parse_bool(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "margin" => self.schedule.margin = parse_value(key, value)?,
            "lr" => self.schedule.lr0 = parse_value(key, value)?,
            "decay_every" => self.schedule.decay_every = parse_value(key, value)?,
            "decay_factor" => self.schedule.decay_factor = parse_value(key, value)?,
            "freeze_epochs" => self.schedule.freeze_epochs = parse_value(key, value)?,
            "epochs" => self.schedule.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "negatives" => self.negatives = value.trim().parse()?,
            "adam_beta1" => self.adam.beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam.eps = parse_value(key, value)?,
            "pairs" => self.synthetic.num_pairs = parse_value(key, value)?,
            "val_pairs" => self.synthetic.val_pairs = parse_value(key, value)?,
            "captions_per_image" => self.synthetic.captions_per_image = parse_value(key, value)?,
            "concepts" => self.synthetic.concept_count = parse_value(key, value)?,
            "concepts_per_item" => self.synthetic.concepts_per_item = parse_value(key, value)?,
            "sentence_min_len" => self.synthetic.sentence_len.0 = parse_value(key, value)?,
            "sentence_max_len" => self.synthetic.sentence_len.1 = parse_value(key, value)?,
            "noise" => self.synthetic.noise_level = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.schedule;
        let g = &self.synthetic;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("direction".into(), self.direction.to_string()),
            (
                "levels".into(),
                self.levels.as_deref().map_or("all".into(), format_list),
            ),
            ("per_level_mean".into(), self.per_level_mean.to_string()),
            ("eps".into(), self.eps.to_string()),
            ("margin".into(), s.margin.to_string()),
            ("lr".into(), s.lr0.to_string()),
            ("decay_every".into(), s.decay_every.to_string()),
            ("decay_factor".into(), s.decay_factor.to_string()),
            ("freeze_epochs".into(), s.freeze_epochs.to_string()),
            ("epochs".into(), s.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("negatives".into(), self.negatives.to_string()),
            ("adam_beta1".into(), self.adam.beta1.to_string()),
            ("adam_beta2".into(), self.adam.beta2.to_string()),
            ("adam_eps".into(), self.adam.eps.to_string()),
            ("pairs".into(), g.num_pairs.to_string()),
            ("val_pairs".into(), g.val_pairs.to_string()),
            (
                "captions_per_image".into(),
                g.captions_per_image.to_string(),
            ),
            ("concepts".into(), g.concept_count.to_string()),
            ("concepts_per_item".into(), g.concepts_per_item.to_string()),
            ("sentence_min_len".into(), g.sentence_len.0.to_string()),
            ("sentence_max_len".into(), g.sentence_len.1.to_string()),
            ("noise".into(), g.noise_level.to_string()),
        ];
        out.extend(self.model.entries());
        out
    }

    pub fn to_kv_string(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Scorer settings, with enabled stage numbers mapped to level positions.
    pub fn alignment(&self) -> Result<AlignmentConfig> {
        let levels_enabled = match &self.levels {
            None => None,
            Some(stages) => Some(
                stages
                    .iter()
                    .map(|&stage| {
                        self.model
                            .image
                            .tap_stages
                            .iter()
                            .position(|&s| s == stage)
                            .ok_or_else(|| {
                                Error::Config(format!(
                                    "level {stage} is not a tapped stage ({})",
                                    format_list(&self.model.image.tap_stages)
                                ))
                            })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let cfg = AlignmentConfig {
            lambda: self.lambda,
            direction: self.direction,
            levels_enabled,
            per_level_mean: self.per_level_mean,
            eps: self.eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.alignment()?;
        self.schedule.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        Ok(())
    }

    /// Parses `key=value` text on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::ConfigLine {
                path: origin.to_path_buf(),
                line: n + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                err(match e {
                    Error::Config(msg) => msg,
                    other => other.to_string(),
                })
            })?;
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::default();
    cfg.apply_text(&text, path)?;
    Ok(cfg)
}

//! Run configuration shared by the command-line tools.
//!
//! A config file holds `key = value` lines; `#` starts a comment. Keys may
//! use `-` or `_`. Unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::forecaster::{ForecasterConfig, PriorKind, Schedule, TrainOptions, Variant};
use crate::inference::{EvalOptions, Resampling};
use crate::layers::SampleMode;
use crate::rnn::{RnnConfig, RnnSchedule, RnnTrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Sinusoid,
    Rings,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoid" => Ok(Task::Sinusoid),
            "rings" => Ok(Task::Rings),
            _ => Err(Error::invalid(format!("unknown task {s:?} (expected sinusoid or rings)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sinusoid => "sinusoid",
            Task::Rings => "rings",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub task: Task,
    pub model: String,
    pub prior: PriorKind,
    pub dropout: f64,
    pub lambda_kl: f64,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub window: usize,
    pub hidden: Option<usize>,
    pub encoder_hidden: usize,
    pub encoder_depth: usize,
    pub encoder_time: bool,
    pub detach_prior: bool,
    pub sigma2_fixed: f64,
    pub ensemble: usize,
    pub resampling: Resampling,
    pub seed: u64,
    pub clip_norm: f64,
    pub max_len: usize,
    pub max_rings: usize,
    pub sample_mode: SampleMode,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            task: Task::Sinusoid,
            model: "barnn".into(),
            prior: PriorKind::Tvamp,
            dropout: 0.2,
            lambda_kl: 1.0,
            epochs: None,
            lr: None,
            weight_decay: None,
            batch_size: None,
            window: 1,
            hidden: None,
            encoder_hidden: 64,
            encoder_depth: 2,
            encoder_time: true,
            detach_prior: false,
            sigma2_fixed: 0.0,
            ensemble: 100,
            resampling: Resampling::PerStep,
            seed: 0,
            clip_norm: 5.0,
            max_len: 60,
            max_rings: 8,
            sample_mode: SampleMode::Stochastic,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::invalid(format!("bad value {value:?} for {key} (expected true or false)"))),
    }
}

pub fn parse_sample_mode(s: &str) -> Result<SampleMode> {
    match s {
        "stochastic" => Ok(SampleMode::Stochastic),
        "map" => Ok(SampleMode::Map),
        "deterministic" => Ok(SampleMode::DeterministicAlpha1),
        _ => Err(Error::invalid(format!("unknown sample mode {s:?} (expected stochastic, map or deterministic)"))),
    }
}

pub fn parse_resampling(s: &str) -> Result<Resampling> {
    match s {
        "step" | "per-step" => Ok(Resampling::PerStep),
        "trajectory" | "per-trajectory" => Ok(Resampling::PerTrajectory),
        _ => Err(Error::invalid(format!("unknown resampling {s:?} (expected step or trajectory)"))),
    }
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl Config {
    pub const KEYS: &'static [&'static str] = &[
        "task",
        "model",
        "prior",
        "dropout",
        "lambda_kl",
        "epochs",
        "lr",
        "weight_decay",
        "batch_size",
        "window",
        "hidden",
        "encoder_hidden",
        "encoder_depth",
        "encoder_time",
        "detach_prior",
        "sigma2_fixed",
        "ensemble",
        "resampling",
        "seed",
        "clip_norm",
        "max_len",
        "max_rings",
        "sample_mode",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let k = key.as_str();
        match k {
            "task" => self.task = value.parse()?,
            "model" => self.model = value.to_string(),
            "prior" => self.prior = value.parse()?,
            "dropout" => self.dropout = parse(k, value)?,
            "lambda_kl" => self.lambda_kl = parse(k, value)?,
            "epochs" => self.epochs = Some(parse(k, value)?),
            "lr" => self.lr = Some(parse(k, value)?),
            "weight_decay" | "wd" => self.weight_decay = Some(parse(k, value)?),
            "batch_size" | "batch" => self.batch_size = Some(parse(k, value)?),
            "window" => self.window = parse(k, value)?,
            "hidden" => self.hidden = Some(parse(k, value)?),
            "encoder_hidden" => self.encoder_hidden = parse(k, value)?,
            "encoder_depth" => self.encoder_depth = parse(k, value)?,
            "encoder_time" => self.encoder_time = parse_bool(k, value)?,
            "detach_prior" => self.detach_prior = parse_bool(k, value)?,
            "sigma2_fixed" => self.sigma2_fixed = parse(k, value)?,
            "ensemble" => self.ensemble = parse(k, value)?,
            "resampling" => self.resampling = parse_resampling(value)?,
            "seed" => self.seed = parse(k, value)?,
            "clip_norm" => self.clip_norm = parse(k, value)?,
            "max_len" => self.max_len = parse(k, value)?,
            "max_rings" => self.max_rings = parse(k, value)?,
            "sample_mode" => self.sample_mode = parse_sample_mode(value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut c = Config::default();
        c.apply(&parse_kv(&text)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        if let Some(e) = self.epochs {
            positive("epochs", e as f64)?;
        }
        if let Some(lr) = self.lr {
            positive("lr", lr)?;
        }
        if let Some(wd) = self.weight_decay {
            non_negative("weight_decay", wd)?;
        }
        if let Some(b) = self.batch_size {
            positive("batch_size", b as f64)?;
        }
        if let Some(h) = self.hidden {
            positive("hidden", h as f64)?;
        }
        positive("window", self.window as f64)?;
        positive("encoder_hidden", self.encoder_hidden as f64)?;
        positive("ensemble", self.ensemble as f64)?;
        positive("clip_norm", self.clip_norm)?;
        positive("max_len", self.max_len as f64)?;
        non_negative("lambda_kl", self.lambda_kl)?;
        non_negative("sigma2_fixed", self.sigma2_fixed)?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        match self.task {
            Task::Sinusoid => {
                self.variant()?;
            }
            Task::Rings => {
                crate::rnn::RnnVariant::parse(&self.model)?;
            }
        }
        Ok(())
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.model, self.prior, self.dropout)
    }

    pub fn forecaster_config(&self) -> ForecasterConfig {
        ForecasterConfig {
            window: self.window,
            hidden: self.hidden.unwrap_or(64),
            encoder_hidden: self.encoder_hidden,
            encoder_depth: self.encoder_depth,
            encoder_time: self.encoder_time,
            ..ForecasterConfig::default()
        }
    }

    pub fn schedule(&self) -> Schedule {
        let d = Schedule::default();
        Schedule {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lambda_kl: self.lambda_kl,
            detach_prior: self.detach_prior,
            ..TrainOptions::default()
        }
    }

    pub fn eval_options(&self, map: bool) -> EvalOptions {
        EvalOptions {
            ensemble: self.ensemble,
            seed: self.seed,
            sigma2_fixed: self.sigma2_fixed,
            map,
            resampling: self.resampling,
            ..EvalOptions::default()
        }
    }

    pub fn rnn_config(&self) -> RnnConfig {
        RnnConfig {
            hidden: self.hidden.unwrap_or(128),
            encoder_hidden: self.encoder_hidden,
            encoder_depth: self.encoder_depth,
        }
    }

    pub fn rnn_schedule(&self) -> RnnSchedule {
        let d = RnnSchedule::default();
        RnnSchedule {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed,
        }
    }

    pub fn rnn_train_options(&self) -> RnnTrainOptions {
        RnnTrainOptions {
            lambda_kl: self.lambda_kl,
            detach_prior: self.detach_prior,
            clip_norm: self.clip_norm,
            ..RnnTrainOptions::default()
        }
    }
}

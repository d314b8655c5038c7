//! Flat `key = value` run configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known to the target config type; a key may appear once per file, and
//! command-line overrides are applied afterwards in order.

use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::synth::SynthSpec;
use crate::embedder::SpeakerBackendConfig;
use crate::error::{Error, Result};
use crate::objectives::{LossConfig, MarginSchedule};
use crate::pooling::AggregationMode;
use crate::train::optim::AdamConfig;
use crate::train::schedule::ScheduleConfig;

/// A configuration that can be read from and echoed as `key = value` text.
pub trait KeyValueConfig: Default {
    /// Assigns one key; unknown keys are a configuration error.
    fn set(&mut self, key: &str, value: &str) -> Result<()>;

    /// Every key with its current value, in a stable documented order.
    fn entries(&self) -> Vec<(&'static str, String)>;

    fn validate(&self) -> Result<()>;

    fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Defaults overlaid with the keys in `text`.
    fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: source.to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("key `{key}` given twice")));
            }
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// SHA-256 of the echoed text.
    fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn unknown(key: &str) -> Error {
    Error::Config(format!("unknown key `{key}`"))
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Training manifest, relative to the working directory.
    pub manifest: String,
    pub model: SpeakerBackendConfig,
    pub loss: LossConfig,
    pub margins: MarginSchedule,
    pub adam: AdamConfig,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Epochs of the main stage.
    pub epochs: usize,
    /// Extra epochs at the large margin, run at `lr_min`.
    pub large_margin_epochs: usize,
    pub large_margin_weight_decay: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: "train.tsv".into(),
            model: SpeakerBackendConfig::toy(),
            loss: LossConfig::default(),
            margins: MarginSchedule::default(),
            adam: AdamConfig::default(),
            lr_min: 1e-5,
            lr_max: 1e-3,
            warmup: 0.15,
            seed: 0,
            batch_size: 64,
            epochs: 100,
            large_margin_epochs: 0,
            large_margin_weight_decay: 1e-5,
        }
    }
}

impl RunConfig {
    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        ScheduleConfig {
            lr_min: self.lr_min,
            lr_max: self.lr_max,
            warmup: self.warmup,
            total_steps: self.epochs * steps_per_epoch,
        }
    }
}

impl KeyValueConfig for RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "manifest" => self.manifest = v.to_string(),
            "mode" => self.model.mode = v.parse::<AggregationMode>()?,
            "channels" => self.model.channels = parse(key, v)?,
            "layers" => self.model.layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "head_dim" => self.model.head_dim = parse(key, v)?,
            "lap_dim" => self.model.lap_dim = parse(key, v)?,
            "bottleneck" => self.model.bottleneck = parse(key, v)?,
            "emb_dim" => self.model.emb_dim = parse(key, v)?,
            "scale" => self.loss.scale = parse(key, v)?,
            "topk" => self.loss.topk = parse(key, v)?,
            "subcenters" => self.loss.subcenters = parse(key, v)?,
            "margin_ramp_epochs" => self.margins.ramp_epochs = parse(key, v)?,
            "margin_start" => self.margins.start = parse(key, v)?,
            "margin" => self.margins.final_margin = parse(key, v)?,
            "penalty" => self.margins.final_penalty = parse(key, v)?,
            "large_margin" => self.margins.large_margin = parse(key, v)?,
            "lr_min" => self.lr_min = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "warmup" => self.warmup = parse(key, v)?,
            "weight_decay" => self.adam.weight_decay = parse(key, v)?,
            "large_margin_weight_decay" => self.large_margin_weight_decay = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "large_margin_epochs" => self.large_margin_epochs = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("manifest", self.manifest.clone()),
            ("mode", m.mode.to_string()),
            ("channels", m.channels.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("head_dim", m.head_dim.to_string()),
            ("lap_dim", m.lap_dim.to_string()),
            ("bottleneck", m.bottleneck.to_string()),
            ("emb_dim", m.emb_dim.to_string()),
            ("scale", self.loss.scale.to_string()),
            ("topk", self.loss.topk.to_string()),
            ("subcenters", self.loss.subcenters.to_string()),
            ("margin_ramp_epochs", self.margins.ramp_epochs.to_string()),
            ("margin_start", self.margins.start.to_string()),
            ("margin", self.margins.final_margin.to_string()),
            ("penalty", self.margins.final_penalty.to_string()),
            ("large_margin", self.margins.large_margin.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("lr_max", self.lr_max.to_string()),
            ("warmup", self.warmup.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            (
                "large_margin_weight_decay",
                self.large_margin_weight_decay.to_string(),
            ),
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("large_margin_epochs", self.large_margin_epochs.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule(1).validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.margins.ramp_epochs < 2
            || !(self.margins.start > 0.0)
            || self.margins.final_margin < self.margins.start
        {
            return Err(Error::Config(
                "margin ramp needs at least 2 epochs and 0 < margin_start <= margin".into(),
            ));
        }
        if self.adam.weight_decay < 0.0 || self.large_margin_weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl KeyValueConfig for SynthSpec {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "speakers" => self.speakers = parse(key, v)?,
            "utts_per_speaker" => self.utts_per_speaker = parse(key, v)?,
            "channels" => self.channels = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "frames" => self.frames = parse(key, v)?,
            "amplitude" => self.amplitude = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "distractor" => self.distractor = parse(key, v)?,
            "segment_len" => self.segment_len = parse(key, v)?,
            "shared" => self.shared = parse(key, v)?,
            "holdout_per_speaker" => self.holdout_per_speaker = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("speakers", self.speakers.to_string()),
            ("utts_per_speaker", self.utts_per_speaker.to_string()),
            ("channels", self.channels.to_string()),
            ("layers", self.layers.to_string()),
            ("frames", self.frames.to_string()),
            ("amplitude", self.amplitude.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("distractor", self.distractor.to_string()),
            ("segment_len", self.segment_len.to_string()),
            ("shared", self.shared.to_string()),
            ("holdout_per_speaker", self.holdout_per_speaker.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        SynthSpec::validate(self)
    }
}

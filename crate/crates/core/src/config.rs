//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::centrality::{CentralityMode, Stream};
use crate::dataio::{AugmentConfig, LengthMode};
use crate::error::{Error, Result};
use crate::net::{ChannelPlan, ModelConfig};
use crate::training::StepSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    /// One model per stream, `Ã + M_s`; scores summed.
    #[default]
    FourStream,
    /// One model on `Ã` plus every selected centrality matrix.
    Single,
}

impl std::str::FromStr for StreamMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "four-stream" | "four_stream" => Ok(StreamMode::FourStream),
            "single" => Ok(StreamMode::Single),
            other => Err(Error::Config(format!("unknown stream mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub template: String,
    pub streams: Vec<Stream>,
    pub mode: StreamMode,
    pub plan: ChannelPlan,
    /// Overrides the plan's default kernel.
    pub temporal_kernel: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Step decay of the learning rate; off when absent.
    pub lr_schedule: Option<StepSchedule>,
    pub dropout: f64,
    pub seed: u64,
    pub centrality_mode: CentralityMode,
    pub target_frames: usize,
    pub length_mode: LengthMode,
    pub subjects: usize,
    pub augment: AugmentConfig,
    /// Write checkpoints every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop once eval-mode top-1 on the training set reaches this value.
    pub stop_at_train_top1: Option<f64>,
    /// How often, in epochs, the stopping rule is evaluated.
    pub stop_check_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            template: "ntu25".into(),
            streams: Stream::ALL.to_vec(),
            mode: StreamMode::FourStream,
            plan: ChannelPlan::Desk,
            temporal_kernel: None,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: None,
            dropout: 0.5,
            seed: 0,
            centrality_mode: CentralityMode::SequenceMean,
            target_frames: 32,
            length_mode: LengthMode::Repeat,
            subjects: 1,
            augment: AugmentConfig::default(),
            checkpoint_every: 0,
            stop_at_train_top1: None,
            stop_check_every: 5,
        }
    }
}

impl RunConfig {
    /// Preset names accepted in place of a file.
    pub fn preset(name: &str) -> Option<RunConfig> {
        match name {
            "desk" => Some(RunConfig::default()),
            "paper" => Some(RunConfig {
                plan: ChannelPlan::Paper,
                target_frames: 300,
                ..RunConfig::default()
            }),
            _ => None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(spec: &str) -> Result<Self> {
        if let Some(c) = RunConfig::preset(spec) {
            return Ok(c);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn temporal_kernel(&self) -> usize {
        self.temporal_kernel.unwrap_or_else(|| self.plan.temporal_kernel())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.streams.is_empty() {
            return bad("at least one stream is required".into());
        }
        let mut sorted = self.streams.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.streams.len() {
            return bad("streams must not repeat".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch size {} below 2", self.batch_size));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning rate {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight decay {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.target_frames == 0 {
            return bad("target_frames must be positive".into());
        }
        if !matches!(self.subjects, 1 | 2) {
            return bad(format!("subjects {} not in {{1, 2}}", self.subjects));
        }
        if self.temporal_kernel == Some(0) {
            return bad("temporal kernel must be positive".into());
        }
        let a = &self.augment;
        if !(a.max_translation >= 0.0 && a.max_rotation_deg >= 0.0 && a.joint_jitter >= 0.0) || a.vertical_axis > 2 {
            return bad("augmentation magnitudes must be nonnegative and vertical_axis in 0..=2".into());
        }
        if let Some(t) = self.stop_at_train_top1 {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("stop_at_train_top1 {t} outside [0, 1]"));
            }
        }
        if self.stop_check_every == 0 {
            return bad("stop_check_every must be positive".into());
        }
        Ok(())
    }

    pub fn model_config(&self, in_channels: usize, num_classes: usize) -> ModelConfig {
        let mut m = ModelConfig::new(self.plan, in_channels, num_classes);
        m.temporal_kernel = self.temporal_kernel();
        m.dropout = self.dropout;
        m.subjects = self.subjects;
        m
    }

    /// Stream lists of the models this configuration trains.
    pub fn model_streams(&self) -> Vec<Vec<Stream>> {
        let mut streams = self.streams.clone();
        streams.sort();
        match self.mode {
            StreamMode::FourStream => streams.into_iter().map(|s| vec![s]).collect(),
            StreamMode::Single => vec![streams],
        }
    }
}

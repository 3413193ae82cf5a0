use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::{AugmentPolicy, Modality};
use crate::error::{Error, Result};
use crate::memory::{BufferMode, EmaSchedule};
use crate::model::{BackboneKind, BackboneSpec};

/// How the semantic pseudo-label is calibrated with the aggregated instance
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticCalibration {
    /// `alpha * p + (1 - alpha) * q_agg`.
    Smoothing,
    /// `Normalize(p * q_agg)`.
    Scaling,
}

/// How the instance pseudo-label is calibrated with the unfolded semantic
/// distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceCalibration {
    /// `Normalize(q * p_unfold)`.
    Scaling,
    /// `alpha * q + (1 - alpha) * Normalize(p_unfold)`.
    Smoothing,
    /// Raw `q^w`: the instance target carries no label information.
    Off,
}

/// Objective used for the instance-consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceLoss {
    /// Cross entropy between the calibrated target and the strong view's
    /// similarity distribution over the labeled buffer.
    Matching,
    /// InfoNCE between strong-view and weak-view embeddings of the same
    /// unlabeled batch; the buffer is not used.
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Mlp,
    SmallCnn,
}

/// Every scalar of a run. Serialized flat, one `key = value` per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub lambda_u: f64,
    pub lambda_in: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub tau: f64,
    pub mu: usize,
    /// Buffer / teacher momentum `m`.
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub da_window: usize,
    pub distribution_alignment: bool,
    pub lr: f64,
    pub sgd_momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// `None` picks by buffer size.
    pub buffer_mode: Option<BufferMode>,
    /// Decay of the parameter average used for EMA evaluation.
    pub eval_ema: f64,
    pub p_calibration: SemanticCalibration,
    pub q_calibration: InstanceCalibration,
    pub instance_loss: InstanceLoss,

    pub backbone: Backbone,
    pub hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub projection_dim: usize,
    pub dropout: f64,

    pub weak_noise: f64,
    pub strong_noise: f64,
    pub mask_fraction: f64,
    pub crop_padding: usize,
    pub strong_ops: usize,
    pub magnitude: f64,
    /// Cutout side in pixels; 0 disables.
    pub cutout: usize,

    /// Evaluate every this many steps (0: only at the end).
    pub eval_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::cifar()
    }
}

impl TrainConfig {
    /// CIFAR hyperparameters with a desk-scale CNN.
    pub fn cifar() -> Self {
        Self {
            seed: 0,
            lambda_u: 1.0,
            lambda_in: 1.0,
            temperature: 0.1,
            alpha: 0.9,
            tau: 0.95,
            mu: 7,
            momentum: 0.7,
            batch_size: 64,
            steps: 1 << 20,
            da_window: 32,
            distribution_alignment: true,
            lr: 0.03,
            sgd_momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            warmup_steps: 0,
            buffer_mode: Some(BufferMode::TemporalEnsemble),
            eval_ema: 0.999,
            p_calibration: SemanticCalibration::Smoothing,
            q_calibration: InstanceCalibration::Scaling,
            instance_loss: InstanceLoss::Matching,
            backbone: Backbone::SmallCnn,
            hidden: vec![],
            conv_channels: vec![32, 64, 128],
            projection_dim: 64,
            dropout: 0.0,
            weak_noise: 0.0,
            strong_noise: 0.0,
            mask_fraction: 0.0,
            crop_padding: 4,
            strong_ops: 2,
            magnitude: 0.5,
            cutout: 16,
            eval_every: 1024,
            checkpoint_every: 0,
        }
    }

    /// Large-buffer hyperparameters: student-teacher buffer, heavier losses.
    pub fn imagenet() -> Self {
        Self {
            lambda_u: 10.0,
            lambda_in: 5.0,
            tau: 0.7,
            mu: 5,
            momentum: 0.999,
            da_window: 256,
            buffer_mode: Some(BufferMode::StudentTeacher),
            ..Self::cifar()
        }
    }

    /// Synthetic-blob benchmark: CIFAR pseudo-labeling hyperparameters, MLP
    /// backbone and vector augmentations.
    pub fn toy() -> Self {
        Self {
            batch_size: 16,
            steps: 3000,
            lr: 0.03,
            eval_ema: 0.99,
            backbone: Backbone::Mlp,
            hidden: vec![64, 64],
            conv_channels: vec![],
            projection_dim: 16,
            weak_noise: 0.05,
            strong_noise: 0.20,
            mask_fraction: 0.1,
            cutout: 0,
            eval_every: 500,
            ..Self::cifar()
        }
    }

    /// Supervised-only reduction of `self`.
    pub fn supervised_only(&self) -> Self {
        Self {
            lambda_u: 0.0,
            lambda_in: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(msg));
        if !(self.lambda_u >= 0.0 && self.lambda_in >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if self.mu == 0 || self.batch_size == 0 || self.steps == 0 || self.da_window == 0 {
            return bad("mu, batch_size, steps and da_window must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.eval_ema) {
            return bad("momenta must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.sgd_momentum) || !(self.weight_decay >= 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if self.warmup_steps >= self.steps && self.warmup_steps > 0 {
            return bad("warmup must be shorter than the run".into());
        }
        if self.backbone == Backbone::SmallCnn && self.conv_channels.len() != 3 {
            return bad("small_cnn needs exactly three conv_channels".into());
        }
        Ok(())
    }

    pub fn buffer_mode_for(&self, k: usize) -> BufferMode {
        self.buffer_mode.unwrap_or_else(|| BufferMode::for_buffer_size(k))
    }

    pub fn ema_schedule(&self, k: usize) -> Result<EmaSchedule> {
        EmaSchedule::new(self.momentum, self.buffer_mode_for(k))
    }

    pub fn backbone_spec(&self, modality: Modality, num_classes: usize) -> Result<BackboneSpec> {
        let kind = match (self.backbone, modality) {
            (Backbone::Mlp, m) => BackboneKind::Mlp {
                input_dim: m.input_len(),
                hidden: self.hidden.clone(),
            },
            (
                Backbone::SmallCnn,
                Modality::Image {
                    channels,
                    height,
                    width,
                },
            ) => BackboneKind::SmallCnn {
                channels,
                height,
                width,
                conv_channels: self
                    .conv_channels
                    .clone()
                    .try_into()
                    .map_err(|_| Error::config("small_cnn needs exactly three conv_channels"))?,
            },
            (Backbone::SmallCnn, Modality::Vector { .. }) => {
                return Err(Error::config("small_cnn needs image inputs"));
            }
        };
        BackboneSpec {
            kind,
            projection_dim: self.projection_dim,
            num_classes,
            dropout: self.dropout,
        }
        .validated()
    }

    pub fn augment_policy(&self, modality: Modality) -> Result<AugmentPolicy> {
        let policy = AugmentPolicy {
            modality,
            weak_noise: self.weak_noise,
            strong_noise: self.strong_noise,
            mask_fraction: self.mask_fraction,
            crop_padding: self.crop_padding,
            strong_ops: self.strong_ops,
            magnitude: self.magnitude,
            cutout: self.cutout,
        };
        policy.validate()?;
        Ok(policy)
    }

    /// Overrides one field from its textual form. Lists are comma-separated;
    /// `buffer_mode = auto` clears the override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut map = match serde_json::to_value(&*self)? {
            Value::Object(map) => map,
            _ => unreachable!("config serializes to an object"),
        };
        let current = map
            .get(key)
            .ok_or_else(|| Error::config(format!("unknown config key `{key}`")))?;
        let value = value.trim();
        let parsed = match current {
            _ if key == "buffer_mode" => match value {
                "auto" | "" => Value::Null,
                other => Value::String(other.to_string()),
            },
            Value::Array(_) => Value::Array(
                value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<u64>()
                            .map(Value::from)
                            .map_err(|e| Error::config(format!("`{key}`: {e}")))
                    })
                    .collect::<Result<_>>()?,
            ),
            Value::String(_) => Value::String(value.to_string()),
            _ => serde_json::from_str(value).map_err(|e| Error::config(format!("`{key}` = `{value}`: {e}")))?,
        };
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(Value::Object(map))
            .map_err(|e| Error::config(format!("`{key}` = `{value}`: {e}")))?;
        Ok(())
    }

    /// Parses `key = value` lines on top of `base`; `#` starts a comment.
    pub fn parse_kv(text: &str, base: TrainConfig) -> Result<Self> {
        let mut config = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            config.set(key.trim(), value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, base: TrainConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_kv(&text, base)
    }

    pub fn to_kv(&self) -> String {
        let map = match serde_json::to_value(self).expect("config serializes") {
            Value::Object(map) => map,
            _ => unreachable!(),
        };
        let mut out = String::new();
        for (key, value) in map {
            let text = match value {
                Value::Array(items) => items.iter().map(Value::to_string).collect::<Vec<_>>().join(","),
                Value::String(s) => s,
                Value::Null => "auto".into(),
                other => other.to_string(),
            };
            writeln!(out, "{key} = {text}").expect("write to string");
        }
        out
    }
}

//! Run configuration: model shape, loss weights, schedule and data
//! generation. JSON with a strict schema; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::data::SceneParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Vertices per contour.
    pub num_vertices: usize,
    /// Encoder layers per refinement stage.
    pub layers: usize,
    /// Feature and token width.
    pub channels: usize,
    pub heads: usize,
    /// Refinement stages; 0 keeps only the initial contours.
    pub stages: usize,
    /// Classification threshold for initial candidates.
    pub tau_a: f64,
    /// Re-score threshold for early stop and final filtering.
    pub tau_b: f64,
    pub dropout: f64,
    /// Hidden width of the encoder MLP block.
    pub mlp_hidden: usize,
    /// Width of the three enhancement convolutions in the init head.
    pub head_channels: usize,
    /// Upper bound on decoded candidates per scene (highest scores kept).
    pub max_detections: usize,
    /// Use the classification-token score for early stop and final
    /// filtering; when off, the init score is kept and every candidate runs
    /// every stage.
    pub rescore: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_vertices: 32,
            layers: 4,
            channels: 64,
            heads: 4,
            stages: 2,
            tau_a: 0.45,
            tau_b: 0.5,
            dropout: 0.1,
            mlp_hidden: 128,
            head_channels: 32,
            max_detections: 64,
            rescore: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("model.{field}: {msg}")));
        if self.num_vertices < 4 {
            return bad("num_vertices", format!("must be >= 4, got {}", self.num_vertices));
        }
        if self.layers == 0 {
            return bad("layers", "must be >= 1".into());
        }
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return bad(
                "channels",
                format!("{} is not divisible by heads={}", self.channels, self.heads),
            );
        }
        if !(self.tau_a > 0.0 && self.tau_a < 1.0) {
            return bad("tau_a", format!("must lie in (0, 1), got {}", self.tau_a));
        }
        if !(self.tau_b > 0.0 && self.tau_b < 1.0) {
            return bad("tau_b", format!("must lie in (0, 1), got {}", self.tau_b));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must lie in [0, 1), got {}", self.dropout));
        }
        if self.mlp_hidden == 0 || self.head_channels == 0 || self.max_detections == 0 {
            return bad("mlp_hidden", "widths and max_detections must be positive".into());
        }
        Ok(())
    }
}

/// Trade-off weights of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Box regression weight in the init loss.
    pub lambda1: f64,
    /// Offset regression weight in the init loss.
    pub lambda2: f64,
    /// Deformation weight in the refinement loss.
    pub lambda3: f64,
    /// Re-score weight in the refinement loss.
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 0.1,
            lambda4: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weights.{name}: must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Train refinement on decoded predictions as well as ground truth.
    pub adaptive: bool,
    /// Random flips/transposes of each training scene.
    pub augment: bool,
    /// Modulating exponent of the quality focal loss.
    pub qfl_beta: f64,
    /// Predicted-sourced refinement samples kept per scene and stage.
    pub max_pred_samples: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            lr_decay_step: 1500,
            lr_decay_factor: 0.1,
            batch_size: 4,
            adaptive: true,
            augment: true,
            qfl_beta: 2.0,
            max_pred_samples: 8,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("train.{field}: {msg}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor", format!("must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.qfl_beta < 0.0 {
            return bad("qfl_beta", format!("must be >= 0, got {}", self.qfl_beta));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.lr_decay_step {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub data: SceneParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            train: TrainConfig::default(),
            data: SceneParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.model.num_vertices, 32);
        assert_eq!(c.model.layers, 4);
        assert_eq!(c.model.stages, 2);
        assert_eq!((c.model.tau_a, c.model.tau_b), (0.45, 0.5));
        let w = c.weights;
        assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.lambda4), (1.0, 1.0, 0.1, 2.0));
        assert_eq!(c.model.dropout, 0.1);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"model": {"num_vertex": 16}}"#).unwrap_err();
        assert!(err.to_string().contains("num_vertex"), "{err}");
    }

    #[test]
    fn field_level_validation_message() {
        let err = RunConfig::from_json(r#"{"model": {"channels": 30, "heads": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("model.channels"), "{err}");
    }

    #[test]
    fn json_roundtrip() {
        let mut c = RunConfig::default();
        c.model.num_vertices = 24;
        c.train.adaptive = false;
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }
}

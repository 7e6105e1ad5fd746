//! Model, loss and training configuration. Every struct rejects unknown JSON keys.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub encoder_width: usize,
    pub projection_width: usize,
    pub depth: usize,
    pub heads: usize,
    /// `0` means "take the size of the dataset vocabulary".
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            encoder_width: 128,
            projection_width: 64,
            depth: 4,
            heads: 4,
            vocab_size: 0,
            max_text_len: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden width of the box-regression and fusion MLPs.
    pub head_hidden: usize,
    /// Output side of the RoI pooling grid.
    pub roi_pool: usize,
    /// Heads used by the decoder-side attention layers.
    pub head_heads: usize,
    /// Self-attention after the text interaction in the segmentation branch.
    pub seg_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head_hidden: 128,
            roi_pool: 7,
            head_heads: 4,
            seg_self_attention: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sigma_l1: f64,
    pub sigma_giou: f64,
    pub sigma_dice: f64,
    pub sigma_bce: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_rec: f64,
    pub lambda_bcc: f64,
    pub lambda_c: f64,
    pub t: f64,
    pub w_1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sigma_l1: 0.5,
            sigma_giou: 0.2,
            sigma_dice: 1.0,
            sigma_bce: 1.0,
            lambda_1: 1.0,
            lambda_2: 3.0,
            lambda_rec: 0.5,
            lambda_bcc: 0.1,
            lambda_c: 0.3,
            t: 0.5,
            w_1: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_l1,
            self.sigma_giou,
            self.sigma_dice,
            self.sigma_bce,
            self.lambda_1,
            self.lambda_2,
            self.lambda_rec,
            self.lambda_bcc,
            self.lambda_c,
            self.w_1,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.t > 0.0 && self.t < 1.0) {
            return Err(Error::Config(format!("threshold t={} must lie in (0, 1)", self.t)));
        }
        if !(self.w_1 > 0.0 && self.w_1 <= 1.0) {
            return Err(Error::Config(format!("w_1={} must lie in (0, 1]", self.w_1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub name: String,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    /// Use `lr_encoder` for the encoder group. When false the encoder trains at `lr_heads`,
    /// which suits a randomly initialized encoder.
    pub pretrained_style_lr: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: "adam".into(),
            lr_encoder: 5e-5,
            lr_heads: 5e-4,
            betas: [0.9, 0.999],
            weight_decay: 0.0,
            pretrained_style_lr: false,
        }
    }
}

impl OptimizerConfig {
    pub fn encoder_lr(&self) -> f64 {
        if self.pretrained_style_lr {
            self.lr_encoder
        } else {
            self.lr_heads
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub decay_epoch: usize,
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            decay_epoch: 25,
            decay_factor: 0.1,
        }
    }
}

impl ScheduleConfig {
    /// Learning-rate multiplier for a zero-based epoch index.
    pub fn factor(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch {
            self.decay_factor
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    /// Apply `w_1` outside the coarse box instead of inside it.
    pub invert_box_weight: bool,
    /// Also apply the consistency loss to the coarse stage.
    pub bcc_on_coarse: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub image_size: usize,
    pub seed: u64,
    pub flags: Flags,
    /// Mirror each training sample left-right with probability 1/2 (relation words swapped).
    pub augment_hflip: bool,
    /// Shift each training sample by up to this many pixels per axis, never cutting content.
    pub augment_shift: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 16,
            image_size: 320,
            seed: 0,
            flags: Flags::default(),
            augment_hflip: false,
            augment_shift: 0,
        }
    }
}

impl TrainConfig {
    /// Ablation-style preset: 224 px, 20 epochs, decay at epoch 15.
    pub fn ablation() -> Self {
        Self {
            image_size: 224,
            schedule: ScheduleConfig {
                epochs: 20,
                decay_epoch: 15,
                decay_factor: 0.1,
            },
            ..Self::default()
        }
    }

    /// Small synthetic-scene configuration that trains on one CPU core.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    max_text_len: 12,
                    ..EncoderConfig::default()
                },
                ..ModelConfig::default()
            },
            schedule: ScheduleConfig {
                epochs: 40,
                decay_epoch: 32,
                decay_factor: 0.1,
            },
            image_size: 64,
            augment_hflip: true,
            augment_shift: 8,
            ..Self::default()
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let e = &self.model.encoder;
        if self.optimizer.name.to_ascii_lowercase() != "adam" {
            return Err(Error::Config(format!(
                "unsupported optimizer {:?}",
                self.optimizer.name
            )));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if e.patch_size == 0 || self.image_size % e.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, e.patch_size
            )));
        }
        if (self.image_size / e.patch_size) % 2 != 0 || self.image_size / e.patch_size < 2 {
            return Err(Error::Config(
                "the patch grid must have an even side of at least 2".into(),
            ));
        }
        if e.heads == 0 || e.encoder_width % e.heads != 0 {
            return Err(Error::Config("encoder_width must be divisible by heads".into()));
        }
        let m = &self.model;
        if m.head_heads == 0 || e.projection_width % m.head_heads != 0 {
            return Err(Error::Config(
                "projection_width must be divisible by head_heads".into(),
            ));
        }
        if e.depth == 0 || e.max_text_len == 0 || m.roi_pool == 0 || m.head_hidden == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.batch_size == 0 || self.schedule.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        let o = &self.optimizer;
        let lrs_ok = [o.lr_encoder, o.lr_heads, o.weight_decay, self.schedule.decay_factor]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        let betas_ok = o.betas.iter().all(|b| (0.0..1.0).contains(b));
        if !lrs_ok || !betas_ok {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_setup() {
        let c = TrainConfig::default();
        assert_eq!(c.schedule.epochs, 30);
        assert_eq!(c.batch_size, 16);
        assert_eq!(c.schedule.decay_epoch, 25);
        assert_eq!(c.schedule.decay_factor, 0.1);
        assert_eq!(c.optimizer.lr_encoder, 5e-5);
        assert_eq!(c.optimizer.lr_heads, 5e-4);
        assert_eq!(c.model.encoder.max_text_len, 20);
        let w = c.weights;
        assert_eq!((w.sigma_l1, w.sigma_giou, w.sigma_dice, w.sigma_bce), (0.5, 0.2, 1.0, 1.0));
        assert_eq!((w.lambda_1, w.lambda_2), (1.0, 3.0));
        assert_eq!((w.lambda_rec, w.lambda_bcc, w.lambda_c), (0.5, 0.1, 0.3));
        assert_eq!((w.t, w.w_1), (0.5, 0.1));
        c.validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        TrainConfig::ablation().validate().unwrap();
    }

    #[test]
    fn encoder_lr_group() {
        let mut o = OptimizerConfig::default();
        assert_eq!(o.encoder_lr(), 5e-4);
        o.pretrained_style_lr = true;
        assert_eq!(o.encoder_lr(), 5e-5);
    }

    #[test]
    fn schedule_decays_exactly() {
        let s = ScheduleConfig::default();
        assert_eq!(s.factor(24), 1.0);
        assert_eq!(s.factor(25), 0.1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(TrainConfig::from_json_str(r#"{"batch_size": 4, "bogus": 1}"#).is_err());
        assert!(TrainConfig::from_json_str(r#"{"weights": {"lambda_x": 1}}"#).is_err());
        let c = TrainConfig::from_json_str(r#"{"batch_size": 4, "image_size": 64}"#).unwrap();
        assert_eq!(c.batch_size, 4);
    }

    #[test]
    fn json_round_trip() {
        let c = TrainConfig::toy();
        let s = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(TrainConfig::from_json_str(&s).unwrap(), c);
    }

    #[test]
    fn rejects_bad_sizes() {
        let mut c = TrainConfig::toy();
        c.image_size = 100;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::toy();
        c.weights.t = 1.0;
        assert!(c.validate().is_err());
    }
}

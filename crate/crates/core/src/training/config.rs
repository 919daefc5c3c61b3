use serde::{Deserialize, Serialize};

use crate::attention::PositionMode;
use crate::encoders::{EncoderConfig, TOKEN_CAP};
use crate::error::{Error, Result};
use crate::losses::StudentLossConfig;

/// The two backbone presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    B,
    L,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "b" | "B" => Ok(Variant::B),
            "l" | "L" => Ok(Variant::L),
            other => Err(Error::Config(format!("unknown variant `{other}`, expected b or l"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::B => "b",
            Variant::L => "l",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub batch_size: usize,
    pub clusters: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub position_mode: PositionMode,
    pub anchor_enabled: bool,
    pub anchor_weight: f64,
    pub use_cos_t: bool,
    pub use_cos_i: bool,
    /// Global gradient-norm cap; off by default.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(variant: Variant, seed: u64) -> Self {
        let base = TrainConfig {
            variant,
            teacher_epochs: 5,
            student_epochs: 2,
            teacher_lr: 1e-5,
            student_lr: 1e-6,
            batch_size: 32,
            clusters: 1,
            embed_dim: 512,
            num_heads: 8,
            position_mode: PositionMode::Absolute,
            anchor_enabled: false,
            anchor_weight: 1.0,
            use_cos_t: true,
            use_cos_i: true,
            clip_grad_norm: None,
            seed,
        };
        match variant {
            Variant::B => base,
            Variant::L => TrainConfig {
                teacher_epochs: 1,
                clusters: 3,
                embed_dim: 768,
                num_heads: 12,
                position_mode: PositionMode::Rotary,
                anchor_enabled: true,
                ..base
            },
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            num_heads: self.num_heads,
            token_cap: TOKEN_CAP,
            position_mode: self.position_mode,
            seed: self.seed,
        }
    }

    pub fn student_loss(&self) -> StudentLossConfig {
        StudentLossConfig {
            use_cos_t: self.use_cos_t,
            use_cos_i: self.use_cos_i,
            anchor: self.anchor_enabled.then_some(self.anchor_weight),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder_config().validate()?;
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(self.teacher_lr >= 0.0 && self.teacher_lr.is_finite() && self.student_lr >= 0.0 && self.student_lr.is_finite()) {
            return fail("learning rates must be finite and non-negative");
        }
        if self.clusters == 0 {
            return fail("clusters must be at least 1");
        }
        if !(self.anchor_weight >= 0.0 && self.anchor_weight.is_finite()) {
            return fail("anchor_weight must be finite and non-negative");
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail("clip_grad_norm must be positive");
            }
        }
        Ok(())
    }
}

//! Classifier families: causal transformer with a language-model or class
//! head, bag-of-words logistic regression, and a shallow averaged-embedding
//! model.

pub mod bow;
pub mod checkpoint;
pub mod linalg;
pub mod params;
pub mod shallow;
pub mod transformer;

pub use bow::{bow_featurize, bow_predict, bow_train, BowHyper, BowModel};
pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
pub use linalg::Scalar;
pub use params::ParamStore;
pub use shallow::{shallow_predict, shallow_train, ShallowHyper, ShallowModel};
pub use transformer::{build_transformer, DecodeState, GradScope, Transformer, TransformerModel};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NEOX_VOCAB_SIZE: usize = 50_432;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    SwiGlu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Positional {
    Rotary { base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum HeadMode {
    LmHead,
    ClassHead { n_classes: usize },
}

impl HeadMode {
    pub fn is_lm(&self) -> bool {
        matches!(self, HeadMode::LmHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    /// MLP width ratio as numerator/denominator (8/3 for SwiGLU).
    pub mlp_ratio: (usize, usize),
    /// MLP width is rounded up to a multiple of this.
    pub ffn_multiple_of: usize,
    pub activation: Activation,
    pub weight_tying: bool,
    pub n_classes: usize,
    pub positional: Positional,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl TransformerConfig {
    fn preset_base(hidden_dim: usize, n_heads: usize, n_layers: usize) -> Self {
        TransformerConfig {
            hidden_dim,
            n_heads,
            n_layers,
            context_length: 2048,
            vocab_size: NEOX_VOCAB_SIZE,
            mlp_ratio: (8, 3),
            ffn_multiple_of: 256,
            activation: Activation::SwiGlu,
            weight_tying: false,
            n_classes: 3,
            positional: Positional::Rotary { base: 10_000.0 },
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// Named presets: `25M`, `87M`, `160M`, `410M`, and the desk-scale `tiny`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "25M" => Self::preset_base(192, 12, 12),
            // 488 is not divisible by 12 heads; 4 heads keeps the width and an
            // even rotary head dim.
            "87M" => Self::preset_base(488, 4, 12),
            "160M" => Self::preset_base(768, 12, 12),
            "410M" => Self::preset_base(1024, 16, 24),
            "tiny" => TransformerConfig {
                context_length: 256,
                ffn_multiple_of: 16,
                ..Self::preset_base(128, 4, 4)
            },
            _ => return Err(Error::Config(format!("unknown model preset {name:?}"))),
        })
    }

    pub const PRESETS: [&'static str; 5] = ["25M", "87M", "160M", "410M", "tiny"];

    pub fn ffn_dim(&self) -> usize {
        let (num, den) = self.mlp_ratio;
        let raw = self.hidden_dim * num / den;
        let m = self.ffn_multiple_of.max(1);
        raw.div_ceil(m) * m
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("hidden_dim, n_heads and n_layers must be positive".into());
        }
        if self.hidden_dim % self.n_heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("rotary embeddings need an even head dim, got {}", self.head_dim()));
        }
        if self.context_length == 0 || self.vocab_size == 0 {
            return bad("context_length and vocab_size must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.weight_tying {
            return bad("weight tying is not supported".into());
        }
        if self.mlp_ratio.1 == 0 || self.mlp_ratio.0 == 0 {
            return bad("invalid mlp ratio".into());
        }
        if !(self.init_std > 0.0 && self.norm_eps > 0.0) {
            return bad("init_std and norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count for the given head.
    pub fn param_count(&self, head: HeadMode) -> usize {
        let d = self.hidden_dim;
        let f = self.ffn_dim();
        let per_layer = 2 * d + 4 * d * d + 3 * d * f;
        let out = match head {
            HeadMode::LmHead => self.vocab_size,
            HeadMode::ClassHead { n_classes } => n_classes,
        };
        self.vocab_size * d + self.n_layers * per_layer + d + d * out
    }
}

//! Object encoder, multimodal prompt encoder and the decoder-only policy.

pub mod checkpoint;
pub mod encoder;
mod layers;
pub mod policy;
pub mod stream;
pub mod vocab;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ActionPrim, SimConfig, ACTION_DIMS};
use crate::tensor::TensorError;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use encoder::PromptEncoding;
pub use policy::{BatchStats, DecodeStrategy, EpisodeContext, LossOptions, Policy};
pub use stream::{Slot, StreamLayout};
pub use vocab::{tokenize_prompt, PromptToken, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("stream of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("prompt of length {len} exceeds max_prompt_len {max}")]
    PromptTooLong { len: usize, max: usize },
    #[error("episode has {steps} steps, more than max_steps {max}")]
    TooManySteps { steps: usize, max: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Each dimension conditioned on the previously decoded ones.
    #[default]
    Autoregressive,
    /// All dimensions read from the first action slot.
    Independent,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMode {
    LmOnly,
    /// LM output plus the input visual token at visual positions.
    #[default]
    LmPlusRc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionMode {
    #[default]
    Causal,
    /// Observations see all observations; action slots see all observations
    /// and decoded action slots; nothing sees the prompt.
    MaskedPretrain,
}

macro_rules! parse_enum {
    ($t:ty, $($name:literal => $v:expr),+) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err(format!("unknown {} `{s}`", stringify!($t))),
                }
            }
        }
        impl $t {
            pub fn name(self) -> &'static str {
                $(if self == $v { return $name; })+
                unreachable!()
            }
        }
    };
}

parse_enum!(DecodeMode, "autoregressive" => DecodeMode::Autoregressive, "independent" => DecodeMode::Independent);
parse_enum!(PromptMode, "lm_only" => PromptMode::LmOnly, "lm_plus_rc" => PromptMode::LmPlusRc);
parse_enum!(AttentionMode, "causal" => AttentionMode::Causal, "masked_pretrain" => AttentionMode::MaskedPretrain);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub sim: SimConfig,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub ff_mult: usize,
    pub patch_hidden: usize,
    pub bbox_hidden: usize,
    /// Active action dimensions, taken from the front of the token order.
    pub n_a: usize,
    pub max_len: usize,
    pub max_prompt_len: usize,
    pub max_steps: usize,
    pub dropout: f64,
    pub decode_mode: DecodeMode,
    pub prompt_mode: PromptMode,
    pub freeze_lm: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            d: 128,
            layers: 4,
            heads: 4,
            enc_layers: 2,
            ff_mult: 4,
            patch_hidden: 128,
            bbox_hidden: 32,
            n_a: ACTION_DIMS,
            max_len: 256,
            max_prompt_len: 96,
            max_steps: 16,
            dropout: 0.1,
            decode_mode: DecodeMode::Autoregressive,
            prompt_mode: PromptMode::LmPlusRc,
            freeze_lm: false,
        }
    }
}

impl PolicyConfig {
    pub fn bins(&self) -> Vec<usize> {
        ActionPrim::bins(&self.sim)[..self.n_a].to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail("d must be a positive multiple of heads");
        }
        if self.n_a == 0 || self.n_a > ACTION_DIMS {
            return fail("n_a must be in 1..=6");
        }
        if self.layers == 0 || self.ff_mult == 0 || self.patch_hidden == 0 || self.bbox_hidden == 0 {
            return fail("layer sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if self.max_len == 0 || self.max_prompt_len == 0 || self.max_steps == 0 {
            return fail("length limits must be positive");
        }
        Ok(())
    }
}

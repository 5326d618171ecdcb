//! Toy text- and depth-conditioned noise predictor.
//!
//! The network is a U-shaped stack of sixteen attention-bearing blocks
//! (six encoder, one bottleneck, nine decoder), each made of a residual
//! unit, a single-head self-attention and a text cross-attention. Images
//! are patchified before the first block so every self-attention sees a
//! small token grid.

mod model;
pub(crate) mod train;
pub(crate) mod weights;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseLevels;

pub use model::{Denoiser, DenoiseOutput, PromptEmbedding};
pub use train::{train_toy, TrainConfig, TrainReport};
pub use weights::{load_weights, save_weights, WEIGHTS_FORMAT, WEIGHTS_FORMAT_VERSION};

pub const NUM_BLOCKS: usize = 16;
pub const ENCODER_BLOCKS: RangeInclusive<usize> = 1..=6;
pub const BOTTLENECK_BLOCK: usize = 7;
pub const DECODER_BLOCKS: RangeInclusive<usize> = 8..=16;

/// Resolution level (0 = finest) of each block, indexed by `block - 1`.
pub(crate) const BLOCK_LEVELS: [usize; NUM_BLOCKS] = [0, 0, 1, 1, 2, 2, 2, 2, 2, 2, 1, 1, 1, 0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockRole {
    Encoder,
    Bottleneck,
    Decoder,
}

pub fn block_role(block: usize) -> Option<BlockRole> {
    match block {
        b if ENCODER_BLOCKS.contains(&b) => Some(BlockRole::Encoder),
        BOTTLENECK_BLOCK => Some(BlockRole::Bottleneck),
        b if DECODER_BLOCKS.contains(&b) => Some(BlockRole::Decoder),
        _ => None,
    }
}

pub fn decoder_layers() -> BTreeSet<usize> {
    DECODER_BLOCKS.collect()
}

pub fn all_layers() -> BTreeSet<usize> {
    (1..=NUM_BLOCKS).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub image_channels: usize,
    pub depth_channels: usize,
    /// Side length of the square pixel patches turned into tokens.
    pub patch_size: usize,
    pub base_channels: usize,
    /// Halve the token grid after blocks 2 and 4 and restore it after
    /// blocks 10 and 13. When false every block runs on the patch grid and
    /// self-attention is the only token mixing.
    pub multiscale: bool,
    /// Channel multiplier per resolution level (multiscale only).
    pub channel_mult: [usize; 3],
    /// Hidden width of the residual units relative to their channels.
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub max_prompt_len: usize,
    /// Multiply self-attention logits by `1/sqrt(C)`. When false the logits
    /// are the raw `Q K^T`.
    pub scaled_self_attention: bool,
    /// Hidden width of the 3x3 pixel-space refinement head (0 disables it).
    pub refine_channels: usize,
    pub prediction: Prediction,
    /// Noise levels the velocity target is defined on.
    pub noise: NoiseLevels,
}

/// What the output head regresses. Either way the model returns noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Prediction {
    Epsilon,
    /// `v = sqrt(abar) eps - sqrt(1 - abar) x0`.
    #[default]
    Velocity,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            image_channels: 3,
            depth_channels: 1,
            patch_size: 4,
            base_channels: 48,
            multiscale: true,
            channel_mult: [1, 2, 2],
            mlp_ratio: 2,
            text_dim: 32,
            max_prompt_len: 8,
            scaled_self_attention: true,
            refine_channels: 16,
            prediction: Prediction::Velocity,
            noise: NoiseLevels::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth_channels != 1 {
            return Err(Error::Config("depth conditioning expects exactly one channel".into()));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.multiscale && (self.grid() % 4 != 0 || self.grid() < 4) {
            return Err(Error::Config(format!(
                "token grid {} must be a positive multiple of 4 (two 2x downsamples)",
                self.grid()
            )));
        }
        if self.base_channels == 0 || self.text_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.channel_mult.contains(&0) {
            return Err(Error::Config("channel multipliers must be positive".into()));
        }
        if self.max_prompt_len == 0 {
            return Err(Error::Config("max_prompt_len must be positive".into()));
        }
        self.noise
            .alpha_bar()
            .map_err(|e| Error::Config(format!("noise levels: {e}")))?;
        Ok(())
    }

    /// Token grid side at the finest level.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mult[level]
    }

    pub fn level_grid(&self, level: usize) -> usize {
        self.grid() >> level
    }

    /// Resolution level of `block` (1-based); always 0 without multiscale.
    pub fn block_level(&self, block: usize) -> usize {
        if self.multiscale {
            BLOCK_LEVELS[block - 1]
        } else {
            0
        }
    }

    /// `(tokens, channels)` of the self-attention input at `block` (1-based).
    pub fn block_feature_shape(&self, block: usize) -> Result<(usize, usize)> {
        check_block(block)?;
        let level = self.block_level(block);
        let g = self.level_grid(level);
        Ok((g * g, self.level_channels(level)))
    }
}

pub(crate) fn check_block(block: usize) -> Result<()> {
    if (1..=NUM_BLOCKS).contains(&block) {
        Ok(())
    } else {
        Err(Error::param(format!("layer index {block} outside 1..={NUM_BLOCKS}")))
    }
}

/// Per-frame conditioning for one denoising call.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `(L, text_dim)` token embeddings, `L <= max_prompt_len`.
    pub prompt_tokens: Tensor,
    /// `(1, 1, H, W)` depth in `[0, 1]`.
    pub depth: Tensor,
    /// Classifier-free guidance weight, `>= 1`. At exactly 1 only the
    /// conditional branch is evaluated.
    pub guidance_scale: f64,
}

impl ConditioningBundle {
    /// Number of batch rows the denoiser evaluates for this conditioning.
    pub fn branches(&self) -> usize {
        if self.guidance_scale == 1.0 {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Vanilla,
    Capture,
    Inject,
}

/// Per-call self-attention hooks: which layers to record, and which layers
/// take their keys/values from externally supplied features.
///
/// Captured and injected features are self-attention inputs of shape
/// `(branches, tokens, channels)`.
#[derive(Debug, Clone, Default)]
pub struct AttentionControl {
    capture_layers: BTreeSet<usize>,
    injected: BTreeMap<usize, Vec<Tensor>>,
}

impl AttentionControl {
    pub fn vanilla() -> Self {
        Self::default()
    }

    pub fn capture(layers: impl IntoIterator<Item = usize>) -> Self {
        Self {
            capture_layers: layers.into_iter().collect(),
            injected: BTreeMap::new(),
        }
    }

    pub fn inject(features: BTreeMap<usize, Vec<Tensor>>) -> Self {
        Self {
            capture_layers: BTreeSet::new(),
            injected: features,
        }
    }

    /// Also record the current frame's own features at `layers`.
    pub fn with_capture(mut self, layers: impl IntoIterator<Item = usize>) -> Self {
        self.capture_layers.extend(layers);
        self
    }

    pub fn mode(&self) -> ControlMode {
        if !self.injected.is_empty() {
            ControlMode::Inject
        } else if !self.capture_layers.is_empty() {
            ControlMode::Capture
        } else {
            ControlMode::Vanilla
        }
    }

    pub fn capture_layers(&self) -> &BTreeSet<usize> {
        &self.capture_layers
    }

    pub fn inject_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.injected.keys().copied()
    }

    pub fn injected_features(&self, layer: usize) -> Option<&[Tensor]> {
        self.injected.get(&layer).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        for &l in &self.capture_layers {
            check_block(l)?;
        }
        for (&l, feats) in &self.injected {
            check_block(l)?;
            if feats.is_empty() {
                return Err(Error::param(format!(
                    "inject mode lists layer {l} with no features"
                )));
            }
        }
        Ok(())
    }
}

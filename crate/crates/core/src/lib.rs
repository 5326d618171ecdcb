//! Training-free, temporally coherent video editing on a toy pixel-space
//! diffusion model.
//!
//! Every frame is DDIM-inverted under its source caption, then re-generated
//! under an edit prompt. While frame `i` is generated its self-attention
//! layers also attend to cached features of an anchor frame and of frame
//! `i - 1`, and during the noisiest steps its latent is nudged so its
//! clean-image prediction agrees with frame `i - 1`'s.

pub mod attention;
pub mod clip;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
mod ops;
pub mod pipeline;
pub mod schedule;
pub mod synth;
pub mod vocab;

pub use candle_core::{Device, Tensor};
pub use attention::{FeatureCache, InjectionMode, InjectionPolicy};
pub use clip::VideoClip;
pub use denoiser::{AttentionControl, ConditioningBundle, Denoiser, DenoiserConfig, Prediction};
pub use error::{Error, Result};
pub use guidance::{GradMethod, GuidanceConfig, LossReduction};
pub use image::Image;
pub use metrics::{FlowField, MetricsRow};
pub use pipeline::{EditConfig, EditOutput, EditSession, Editor, GuidanceEvent, Variant};
pub use schedule::{DiffusionSchedule, LatentFrame, NoiseLevels, ScheduleConfig};

//! Clip editing: per-frame DDIM inversion, then sequential re-generation
//! under the edit prompt with cross-frame feature injection and a guided
//! latent update toward the previous frame's clean-image predictions.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{build_control, choose_random_prev, FeatureCache, InjectionMode, InjectionPolicy};
use crate::clip::VideoClip;
use crate::denoiser::{all_layers, AttentionControl, ConditioningBundle, Denoiser, DenoiseOutput};
use crate::error::{Error, Result};
use crate::guidance::{compute_grad, guided_update, GuidanceConfig};
use crate::image::Image;
use crate::metrics::{
    estimate_flow_masked, frame_similarity, pixel_mse, AttributeClassifier, EmbeddingBackend, FlowField, MetricsRow,
};
use crate::schedule::{DiffusionSchedule, LatentFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub policy: InjectionPolicy,
    pub guidance: GuidanceConfig,
    /// Classifier-free guidance scale while editing.
    pub edit_cfg_scale: f64,
    /// Classifier-free guidance scale while inverting.
    pub invert_cfg_scale: f64,
    /// Extra fixed-point passes per inversion step (0 = plain DDIM inversion).
    pub invert_refine_iters: usize,
    /// Seeds the random-previous injection draw.
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            policy: InjectionPolicy::default(),
            guidance: GuidanceConfig::default(),
            edit_cfg_scale: 7.5,
            invert_cfg_scale: 1.0,
            invert_refine_iters: 0,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        self.policy.validate()?;
        self.guidance.validate(sched.num_inference_steps())?;
        for (name, s) in [("edit", self.edit_cfg_scale), ("invert", self.invert_cfg_scale)] {
            if !(s >= 1.0 && s.is_finite()) {
                return Err(Error::param(format!("{name} cfg scale must be >= 1, got {s}")));
            }
        }
        Ok(())
    }

    /// Processing order (0-based frame indices): anchor first, then the
    /// remaining frames ascending.
    pub fn processing_order(&self, n: usize) -> Result<Vec<usize>> {
        let a = self.policy.anchor_index;
        if a == 0 || a > n {
            return Err(Error::param(format!("anchor_index {a} outside 1..={n}")));
        }
        let mut order = vec![a - 1];
        order.extend((0..n).filter(|&i| i != a - 1));
        Ok(order)
    }
}

/// One application of the guided update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEvent {
    /// 1-based frame index.
    pub frame: usize,
    /// Loop iteration (0 = noisiest step).
    pub position: usize,
    pub timestep: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Optional policy for replacing the anchor cache mid-clip. Called after
/// each frame; returning `true` promotes that frame's cache to the anchor.
pub trait AnchorRefresh {
    fn refresh(&mut self, frame: usize, session: &EditSession) -> bool;
}

/// Mutable state of a clip edit.
#[derive(Debug, Clone)]
pub struct EditSession {
    pub inverted: Vec<LatentFrame>,
    pub anchor_features: Option<FeatureCache>,
    pub prev_features: Option<FeatureCache>,
    /// The previous frame's x0 prediction at every inference step.
    pub prev_x0: Vec<Tensor>,
    pub edit_prompt: String,
    pub config: EditConfig,
    /// Caches of every processed frame; kept only for random-previous mode.
    history: BTreeMap<usize, FeatureCache>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    processed: usize,
    edited: BTreeMap<usize, Image>,
    events: Vec<GuidanceEvent>,
}

impl EditSession {
    pub fn new(inverted: Vec<LatentFrame>, edit_prompt: &str, config: &EditConfig) -> Result<Self> {
        if inverted.is_empty() {
            return Err(Error::param("nothing to edit"));
        }
        let order = config.processing_order(inverted.len())?;
        Ok(Self {
            inverted,
            anchor_features: None,
            prev_features: None,
            prev_x0: Vec::new(),
            edit_prompt: edit_prompt.to_string(),
            config: config.clone(),
            history: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order,
            processed: 0,
            edited: BTreeMap::new(),
            events: Vec::new(),
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn processed(&self) -> usize {
        self.processed
    }

    pub fn events(&self) -> &[GuidanceEvent] {
        &self.events
    }

    /// Next 0-based frame to edit, if any.
    pub fn next_frame(&self) -> Option<usize> {
        self.order.get(self.processed).copied()
    }

    pub fn edited_frames(&self) -> Result<Vec<Image>> {
        (0..self.inverted.len())
            .map(|i| {
                self.edited
                    .get(&i)
                    .cloned()
                    .ok_or_else(|| Error::state(format!("frame {} was not edited", i + 1)))
            })
            .collect()
    }
}

/// Result of a full sampling trajectory.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub output: LatentFrame,
    /// x0 predictions, one per inference step.
    pub x0: Vec<Tensor>,
    pub features: FeatureCache,
}

#[derive(Debug, Clone)]
pub struct EditOutput {
    pub clip: VideoClip,
    pub events: Vec<GuidanceEvent>,
}

pub struct Editor<'a> {
    model: &'a Denoiser,
    sched: &'a DiffusionSchedule,
}

impl<'a> Editor<'a> {
    pub fn new(model: &'a Denoiser, sched: &'a DiffusionSchedule) -> Self {
        Self { model, sched }
    }

    pub fn model(&self) -> &Denoiser {
        self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        self.sched
    }

    pub fn condition(&self, prompt: &str, depth: &Image, scale: f64) -> Result<ConditioningBundle> {
        let cfg = self.model.config();
        if depth.channels() != cfg.depth_channels || depth.height() != cfg.image_size || depth.width() != cfg.image_size
        {
            return Err(Error::shape(format!(
                "depth map {}x{}x{}, model expects {}x{}x{}",
                depth.channels(),
                depth.height(),
                depth.width(),
                cfg.depth_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(ConditioningBundle {
            prompt_tokens: self.model.embed_prompt(prompt)?.tokens,
            depth: depth.to_unit_tensor(self.model.device())?,
            guidance_scale: scale,
        })
    }

    fn check_frame(&self, image: &Image) -> Result<()> {
        let cfg = self.model.config();
        if image.channels() != cfg.image_channels || image.height() != cfg.image_size || image.width() != cfg.image_size
        {
            return Err(Error::shape(format!(
                "frame {}x{}x{}, model expects {}x{}x{}",
                image.channels(),
                image.height(),
                image.width(),
                cfg.image_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        Ok(())
    }

    /// Deterministic DDIM inversion from the clean image up to the noisiest
    /// inference step. Each step evaluates the noise at the current latent
    /// with the target step's label; `refine_iters` re-evaluates it at the
    /// latest estimate of the target latent.
    pub fn invert_frame(
        &self,
        image: &Image,
        cond: &ConditioningBundle,
        frame_index: usize,
        refine_iters: usize,
    ) -> Result<LatentFrame> {
        self.check_frame(image)?;
        if self.sched.eta() != 0.0 {
            return Err(Error::Unsupported("inversion requires eta = 0".into()));
        }
        let x0 = image.to_model_tensor(self.model.device())?.to_dtype(self.model.dtype())?;
        let mut x = LatentFrame::new(x0, frame_index, None);
        let control = AttentionControl::vanilla();
        for &t in self.sched.timesteps().iter().rev() {
            let eps = self.model.denoise(&x.data, t, cond, &control)?.eps;
            let mut next = self.sched.ddim_invert_step(&x, &eps, t)?;
            for _ in 0..refine_iters {
                let eps = self.model.denoise(&next.data, t, cond, &control)?.eps;
                next = self.sched.ddim_invert_step(&x, &eps, t)?;
            }
            x = next;
        }
        Ok(x)
    }

    pub fn invert_clip(&self, clip: &VideoClip, config: &EditConfig) -> Result<Vec<LatentFrame>> {
        clip.validate()?;
        clip.frames
            .iter()
            .zip(&clip.depths)
            .enumerate()
            .map(|(i, (f, d))| {
                let cond = self.condition(&clip.source_prompt, d, config.invert_cfg_scale)?;
                self.invert_frame(f, &cond, i, config.invert_refine_iters)
            })
            .collect()
    }

    /// Runs the sampler from `x_T` with per-step attention controls, capturing
    /// the features the controls ask for.
    pub fn sample_with(
        &self,
        x_t: &LatentFrame,
        cond: &ConditioningBundle,
        mut control_for: impl FnMut(usize, usize) -> Result<AttentionControl>,
    ) -> Result<Trajectory> {
        let mut x = x_t.clone();
        let mut x0s = Vec::with_capacity(self.sched.num_inference_steps());
        let mut features = FeatureCache::new(x_t.frame_index);
        for (k, &t) in self.sched.timesteps().iter().enumerate() {
            let control = control_for(k, t)?;
            let out = self.model.denoise(&x.data, t, cond, &control)?;
            for (l, f) in out.captured {
                features.record(t, l, f)?;
            }
            let (next, x0) = self.sched.ddim_step(&x, &out.eps, t, None)?;
            x0s.push(x0);
            x = next;
        }
        Ok(Trajectory {
            output: x,
            x0: x0s,
            features,
        })
    }

    /// Plain conditional sampling (no injection) decoded to an image.
    pub fn sample(&self, x_t: &LatentFrame, cond: &ConditioningBundle) -> Result<Image> {
        let traj = self.sample_with(x_t, cond, |_, _| Ok(AttentionControl::vanilla()))?;
        Ok(Image::from_model_tensor(&traj.output.data)?.clamped())
    }

    /// Reconstructs each inverted frame under its source prompt.
    pub fn reconstruct_clip(
        &self,
        clip: &VideoClip,
        inverted: &[LatentFrame],
        config: &EditConfig,
    ) -> Result<Vec<Image>> {
        inverted
            .iter()
            .zip(&clip.depths)
            .map(|(x, d)| self.sample(x, &self.condition(&clip.source_prompt, d, config.invert_cfg_scale)?))
            .collect()
    }

    /// Edits the next frame in the session's processing order.
    pub fn edit_frame(&self, session: &mut EditSession, depth: &Image) -> Result<Image> {
        let pos = session.processed;
        let frame = session
            .next_frame()
            .ok_or_else(|| Error::state("every frame has already been edited"))?;
        let number = frame + 1;
        let cfg = session.config.clone();
        let policy = &cfg.policy;
        let guidance = &cfg.guidance;
        let n_steps = self.sched.num_inference_steps();
        if pos > 0 {
            if policy.mode.uses_anchor() && session.anchor_features.is_none() {
                return Err(Error::state(format!("frame {number} needs the anchor cache")));
            }
            if (policy.mode.uses_prev() && session.prev_features.is_none())
                || (guidance.active_steps > 0 && session.prev_x0.len() != n_steps)
            {
                return Err(Error::state(format!("frame {number} needs the previous frame's trajectory")));
            }
        }
        let cond = self.condition(&session.edit_prompt, depth, cfg.edit_cfg_scale)?;

        let prev_cache = if policy.mode == InjectionMode::AnchorPlusRandomPrev && pos > 0 {
            let candidates: Vec<usize> = session.history.keys().copied().collect();
            let pick = choose_random_prev(&mut session.rng, &candidates)?;
            session.history.get(&pick).cloned()
        } else {
            session.prev_features.clone()
        };
        let anchor_cache = session.anchor_features.clone();
        let is_anchor = pos == 0;

        let mut x = session.inverted[frame].clone();
        let mut features = FeatureCache::new(frame);
        let mut x0s = Vec::with_capacity(n_steps);
        for (k, &t) in self.sched.timesteps().iter().enumerate() {
            let control = if is_anchor {
                if policy.mode == InjectionMode::None {
                    AttentionControl::vanilla()
                } else {
                    AttentionControl::capture(policy.layers.iter().copied())
                }
            } else {
                build_control(policy, number, anchor_cache.as_ref(), prev_cache.as_ref(), t)?
            };
            let active = guidance.is_active(pos, k);
            let (out, grad): (DenoiseOutput, Option<(Tensor, f64)>) = if active {
                let g = compute_grad(
                    self.model,
                    self.sched,
                    &x,
                    t,
                    &cond,
                    &control,
                    &session.prev_x0[k],
                    guidance.grad_method,
                    guidance.reduction,
                )?;
                (g.denoised, Some((g.grad, g.loss)))
            } else {
                (self.model.denoise(&x.data, t, &cond, &control)?, None)
            };
            for (l, f) in out.captured {
                features.record(t, l, f)?;
            }
            let (mut next, x0) = self.sched.ddim_step(&x, &out.eps, t, None)?;
            if let Some((grad, loss)) = grad {
                let grad_norm = grad
                    .to_dtype(candle_core::DType::F64)?
                    .sqr()?
                    .sum_all()?
                    .to_scalar::<f64>()?
                    .sqrt();
                next = guided_update(&next, &grad, guidance.delta)?;
                tracing::debug!(frame = number, position = k, t, loss, grad_norm, "guided_update");
                session.events.push(GuidanceEvent {
                    frame: number,
                    position: k,
                    timestep: t,
                    loss,
                    grad_norm,
                });
            }
            x0s.push(x0);
            x = next;
        }
        let image = Image::from_model_tensor(&x.data)?.clamped();

        if is_anchor {
            session.anchor_features = Some(features.clone());
        }
        if policy.mode == InjectionMode::AnchorPlusRandomPrev {
            session.history.insert(frame, features.clone());
        }
        session.prev_features = Some(features);
        session.prev_x0 = x0s;
        session.edited.insert(frame, image.clone());
        session.processed += 1;
        Ok(image)
    }

    /// Edits every frame of `clip` in processing order.
    pub fn edit_clip(
        &self,
        clip: &VideoClip,
        inverted: &[LatentFrame],
        edit_prompt: &str,
        config: &EditConfig,
        mut refresh: Option<&mut dyn AnchorRefresh>,
    ) -> Result<EditOutput> {
        clip.validate()?;
        config.validate(self.sched)?;
        if inverted.len() != clip.len() {
            return Err(Error::param(format!(
                "{} inverted latents for {} frames",
                inverted.len(),
                clip.len()
            )));
        }
        let mut session = EditSession::new(inverted.to_vec(), edit_prompt, config)?;
        while let Some(frame) = session.next_frame() {
            self.edit_frame(&mut session, &clip.depths[frame])?;
            if let Some(hook) = refresh.as_deref_mut() {
                if hook.refresh(frame + 1, &session) {
                    session.anchor_features = session.prev_features.clone();
                }
            }
        }
        Ok(EditOutput {
            clip: clip.with_frames(session.edited_frames()?),
            events: session.events,
        })
    }

    /// Edits the clip once per variant and scores each result.
    pub fn run_ablation(
        &self,
        clip: &VideoClip,
        inverted: &[LatentFrame],
        edit_prompt: &str,
        base: &EditConfig,
        variants: &[Variant],
        eval: &Evaluation<'_>,
        clip_id: &str,
    ) -> Result<Vec<(MetricsRow, EditOutput)>> {
        if variants.is_empty() {
            return Err(Error::param("no ablation variants given"));
        }
        variants
            .iter()
            .map(|v| {
                let cfg = v.apply(base);
                let out = self.edit_clip(clip, inverted, edit_prompt, &cfg, None)?;
                let row = eval.score(clip, &out.clip.frames, edit_prompt, clip_id, &v.name)?;
                Ok((row, out))
            })
            .collect()
    }
}

/// A named override of the injection policy and guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub mode: Option<InjectionMode>,
    pub layers: Option<BTreeSet<usize>>,
    pub guidance: Option<GuidanceConfig>,
}

impl Variant {
    /// Known variant names: `ours`, `ours-w/o-update`, `per-frame`, any
    /// injection mode name, `all-layers` and `decoder`.
    pub fn named(name: &str) -> Result<Self> {
        let mut v = Variant {
            name: name.to_string(),
            mode: None,
            layers: None,
            guidance: None,
        };
        match name {
            "ours" | "decoder" => {}
            "ours-w/o-update" | "no-update" => v.guidance = Some(GuidanceConfig::disabled()),
            "per-frame" => {
                v.mode = Some(InjectionMode::None);
                v.guidance = Some(GuidanceConfig::disabled());
            }
            "all-layers" => v.layers = Some(all_layers()),
            other => v.mode = Some(other.parse()?),
        }
        Ok(v)
    }

    pub fn apply(&self, base: &EditConfig) -> EditConfig {
        let mut cfg = base.clone();
        if let Some(m) = self.mode {
            cfg.policy.mode = m;
        }
        if let Some(l) = &self.layers {
            cfg.policy.layers = l.clone();
        }
        if let Some(g) = &self.guidance {
            cfg.guidance = g.clone();
        }
        cfg
    }
}

/// Which flow field Pixel-MSE warps with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Flow of the input clip (its ground truth, else estimated from it).
    #[default]
    Input,
    /// Flow estimated from the edited frames.
    Edited,
}

/// Evaluation settings shared by ablation rows.
pub struct Evaluation<'e> {
    pub embedder: &'e dyn EmbeddingBackend,
    pub classifier: Option<&'e AttributeClassifier>,
    pub flow_source: FlowSource,
}

impl Evaluation<'_> {
    fn flows(&self, input: &VideoClip, edited: &[Image]) -> Result<Vec<FlowField>> {
        match (self.flow_source, &input.flows) {
            (FlowSource::Input, Some(f)) => Ok(f.clone()),
            (FlowSource::Input, None) => estimate_all(&input.frames),
            (FlowSource::Edited, _) => estimate_all(edited),
        }
    }

    pub fn score(
        &self,
        input: &VideoClip,
        edited: &[Image],
        prompt: &str,
        clip_id: &str,
        variant: &str,
    ) -> Result<MetricsRow> {
        let (_, h, w) = input.resolution().ok_or_else(|| Error::param("empty clip"))?;
        let (mse, sim) = if edited.len() >= 2 {
            (
                Some(pixel_mse(edited, &self.flows(input, edited)?)?),
                Some(frame_similarity(edited, self.embedder)?),
            )
        } else {
            (None, None)
        };
        let fidelity = match self.classifier {
            Some(clf) => Some(clf.prompt_fidelity(edited, prompt)?),
            None => None,
        };
        Ok(MetricsRow {
            clip_id: clip_id.to_string(),
            variant: variant.to_string(),
            pixel_mse: mse,
            frame_similarity: sim,
            prompt_fidelity: fidelity,
            n_frames: edited.len(),
            resolution: [w, h],
        })
    }
}

fn estimate_all(frames: &[Image]) -> Result<Vec<FlowField>> {
    frames
        .windows(2)
        .map(|p| estimate_flow_masked(&p[0], &p[1], 4, 4))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn processing_order_starts_at_anchor() {
        let mut cfg = EditConfig::default();
        assert_eq!(cfg.processing_order(4).unwrap(), vec![0, 1, 2, 3]);
        cfg.policy.anchor_index = 3;
        assert_eq!(cfg.processing_order(4).unwrap(), vec![2, 0, 1, 3]);
        cfg.policy.anchor_index = 5;
        assert!(cfg.processing_order(4).is_err());
    }

    #[test]
    fn variant_names() {
        let base = EditConfig::default();
        let per_frame = Variant::named("per-frame").unwrap().apply(&base);
        assert_eq!(per_frame.policy.mode, InjectionMode::None);
        assert_eq!(per_frame.guidance.active_steps, 0);
        let no_update = Variant::named("ours-w/o-update").unwrap().apply(&base);
        assert_eq!(no_update.policy, base.policy);
        assert_eq!(no_update.guidance.delta, 0.0);
        assert_eq!(Variant::named("ours").unwrap().apply(&base), base);
        assert_eq!(Variant::named("all-layers").unwrap().apply(&base).policy.layers.len(), 16);
        assert_eq!(
            Variant::named("prev_only").unwrap().apply(&base).policy.mode,
            InjectionMode::PrevOnly
        );
        assert!(Variant::named("bogus").is_err());
    }

    #[test]
    fn default_config_encodes_method_constants() {
        let cfg = EditConfig::default();
        assert_eq!(cfg.guidance.delta, 100.0);
        assert_eq!(cfg.guidance.active_steps, 25);
        assert_eq!(cfg.policy.anchor_index, 1);
        assert_eq!(cfg.policy.layers, crate::denoiser::decoder_layers());
        assert_eq!(cfg.edit_cfg_scale, 7.5);
        assert_eq!(cfg.invert_cfg_scale, 1.0);
    }
}

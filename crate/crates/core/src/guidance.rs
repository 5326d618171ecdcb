//! Temporal guidance: an L2 energy between the clean-image predictions of
//! consecutive frames, differentiated with respect to the current latent and
//! applied to the latent produced by the sampler step.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionControl, ConditioningBundle, Denoiser, DenoiseOutput};
use crate::error::{Error, Result};
use crate::schedule::{DiffusionSchedule, LatentFrame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMethod {
    /// Reverse-mode gradient through the denoiser and the x0 formula.
    Autodiff,
    /// Treats the noise prediction as constant.
    FrozenEps,
    /// Central differences over every latent element; for tests only.
    FiniteDiff,
}

impl GradMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradMethod::Autodiff => "autodiff",
            GradMethod::FrozenEps => "frozen_eps",
            GradMethod::FiniteDiff => "finite_diff",
        }
    }
}

impl fmt::Display for GradMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GradMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(GradMethod::Autodiff),
            "frozen_eps" | "frozen-eps" => Ok(GradMethod::FrozenEps),
            "finite_diff" | "finite-diff" => Ok(GradMethod::FiniteDiff),
            other => Err(Error::param(format!("unknown gradient method {other:?}"))),
        }
    }
}

/// Reduction of the squared differences in the guidance energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// `||a - b||^2`.
    Sum,
    /// `||a - b||^2 / N`.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Step size of the latent update.
    pub delta: f64,
    /// Number of leading (highest-noise) sampler iterations with guidance on.
    pub active_steps: usize,
    pub grad_method: GradMethod,
    pub reduction: LossReduction,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            delta: 100.0,
            active_steps: 25,
            grad_method: GradMethod::Autodiff,
            reduction: LossReduction::Sum,
        }
    }
}

impl GuidanceConfig {
    pub fn disabled() -> Self {
        Self {
            delta: 0.0,
            active_steps: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_inference_steps: usize) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::param(format!("delta must be finite and >= 0, got {}", self.delta)));
        }
        if self.active_steps > num_inference_steps {
            return Err(Error::param(format!(
                "active_steps {} exceeds {num_inference_steps} inference steps",
                self.active_steps
            )));
        }
        if self.grad_method == GradMethod::FiniteDiff {
            return Err(Error::Unsupported(
                "finite_diff gradients are for tests only and cannot drive an edit".into(),
            ));
        }
        Ok(())
    }

    /// Whether the update runs at loop iteration `position` (0 = noisiest)
    /// of frame `frame` (0-based processing order; the anchor is never guided).
    pub fn is_active(&self, frame: usize, position: usize) -> bool {
        frame > 0 && position < self.active_steps && self.delta > 0.0
    }
}

fn reduce(diff_sq_sum: Tensor, n: usize, reduction: LossReduction) -> Result<Tensor> {
    Ok(match reduction {
        LossReduction::Sum => diff_sq_sum,
        LossReduction::Mean => (diff_sq_sum / n as f64)?,
    })
}

fn check_shapes(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `||x0_cur - x0_prev||^2`, accumulated in f64.
pub fn guidance_loss(x0_cur: &Tensor, x0_prev: &Tensor) -> Result<f64> {
    guidance_loss_with(x0_cur, x0_prev, LossReduction::Sum)
}

pub fn guidance_loss_with(x0_cur: &Tensor, x0_prev: &Tensor, reduction: LossReduction) -> Result<f64> {
    check_shapes(x0_cur, x0_prev)?;
    let d = (x0_cur.to_dtype(DType::F64)? - x0_prev.to_dtype(DType::F64)?)?;
    let s = reduce(d.sqr()?.sum_all()?, d.elem_count(), reduction)?;
    Ok(s.to_scalar::<f64>()?)
}

/// Gradient of the guidance energy with respect to `x_t`, plus the denoiser
/// output at `x_t` (detached) so callers can reuse it for the sampler step.
pub struct GradOutput {
    pub grad: Tensor,
    pub denoised: DenoiseOutput,
    /// Energy at `x_t`.
    pub loss: f64,
}

/// `d g / d x_t` where `g = ||x0(x_t) - x0_prev||^2` (or its mean).
#[allow(clippy::too_many_arguments)]
pub fn compute_grad(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    x_t: &LatentFrame,
    t: usize,
    cond: &ConditioningBundle,
    control: &AttentionControl,
    x0_prev: &Tensor,
    method: GradMethod,
    reduction: LossReduction,
) -> Result<GradOutput> {
    check_shapes(&x_t.data, x0_prev)?;
    let ab = sched.alpha_bar(t)?;
    let n = x_t.data.elem_count();
    match method {
        GradMethod::Autodiff => {
            let var = Var::from_tensor(&x_t.data.detach())?;
            let out = model.denoise(var.as_tensor(), t, cond, control)?;
            let x0 = sched.predict_x0(var.as_tensor(), &out.eps, t)?;
            let diff = (&x0 - x0_prev.to_dtype(x0.dtype())?)?;
            let loss = reduce(diff.sqr()?.sum_all()?, n, reduction)?;
            let grads = loss.backward()?;
            let grad = grads
                .get(var.as_tensor())
                .cloned()
                .ok_or_else(|| Error::state("latent received no gradient"))?;
            Ok(GradOutput {
                grad,
                loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                denoised: detach_output(out),
            })
        }
        GradMethod::FrozenEps => {
            let out = model.denoise(&x_t.data, t, cond, control)?;
            let x0 = sched.predict_x0(&x_t.data, &out.eps, t)?;
            let diff = (&x0 - x0_prev.to_dtype(x0.dtype())?)?;
            let norm = match reduction {
                LossReduction::Sum => 1.0,
                LossReduction::Mean => 1.0 / n as f64,
            };
            let grad = (&diff * (2.0 * norm / ab.sqrt()))?;
            let loss = reduce(diff.sqr()?.sum_all()?, n, reduction)?;
            Ok(GradOutput {
                grad,
                loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                denoised: out,
            })
        }
        GradMethod::FiniteDiff => {
            let coords: Vec<usize> = (0..n).collect();
            let g = finite_difference_grad(model, sched, x_t, t, cond, control, x0_prev, reduction, &coords, 1e-3)?;
            let grad = Tensor::from_vec(g, x_t.data.dims(), x_t.data.device())?.to_dtype(x_t.data.dtype())?;
            let out = model.denoise(&x_t.data, t, cond, control)?;
            let x0 = sched.predict_x0(&x_t.data, &out.eps, t)?;
            let loss = guidance_loss_with(&x0, x0_prev, reduction)?;
            Ok(GradOutput {
                grad,
                loss,
                denoised: out,
            })
        }
    }
}

fn detach_output(out: DenoiseOutput) -> DenoiseOutput {
    DenoiseOutput {
        eps: out.eps.detach(),
        captured: out.captured.into_iter().map(|(k, v)| (k, v.detach())).collect(),
    }
}

/// Central-difference estimates of the energy gradient at flat indices
/// `coords`, evaluated in the model's dtype.
#[allow(clippy::too_many_arguments)]
pub fn finite_difference_grad(
    model: &Denoiser,
    sched: &DiffusionSchedule,
    x_t: &LatentFrame,
    t: usize,
    cond: &ConditioningBundle,
    control: &AttentionControl,
    x0_prev: &Tensor,
    reduction: LossReduction,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let dims = x_t.data.dims().to_vec();
    let base: Vec<f64> = x_t.data.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let energy = |v: &[f64]| -> Result<f64> {
        let x = Tensor::from_vec(v.to_vec(), dims.as_slice(), x_t.data.device())?.to_dtype(model.dtype())?;
        let out = model.denoise(&x, t, cond, control)?;
        let x0 = sched.predict_x0(&x, &out.eps, t)?;
        guidance_loss_with(&x0, x0_prev, reduction)
    };
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= base.len() {
            return Err(Error::param(format!("coordinate {i} out of range")));
        }
        let mut v = base.clone();
        v[i] = base[i] + h;
        let plus = energy(&v)?;
        v[i] = base[i] - h;
        let minus = energy(&v)?;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `x - delta * grad`.
pub fn guided_update(x: &LatentFrame, grad: &Tensor, delta: f64) -> Result<LatentFrame> {
    check_shapes(&x.data, grad)?;
    if !(delta >= 0.0) {
        return Err(Error::param(format!("delta must be >= 0, got {delta}")));
    }
    let data = if delta == 0.0 {
        x.data.clone()
    } else {
        (&x.data - (grad.to_dtype(x.data.dtype())? * delta)?)?
    };
    Ok(LatentFrame {
        data,
        frame_index: x.frame_index,
        timestep: x.timestep,
    })
}

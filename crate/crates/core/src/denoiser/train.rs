use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttentionControl, Denoiser, DenoiserConfig, Prediction};
use crate::error::{Error, Result};
use crate::schedule::DiffusionSchedule;
use crate::synth::Sample;
use crate::vocab::NULL_TOKEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Probability of replacing the caption with the null prompt.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            learning_rate: 1.5e-3,
            weight_decay: 1e-4,
            warmup_steps: 100,
            cond_dropout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    fn window_mean(v: &[f32]) -> f32 {
        if v.is_empty() {
            return f32::NAN;
        }
        v.iter().sum::<f32>() / v.len() as f32
    }

    /// Mean over the first `min(50, n/5)` steps.
    pub fn initial_loss(&self) -> f32 {
        let w = (self.losses.len() / 5).clamp(1, 50);
        Self::window_mean(&self.losses[..w.min(self.losses.len())])
    }

    /// Mean over the last `min(50, n/5)` steps.
    pub fn final_loss(&self) -> f32 {
        let w = (self.losses.len() / 5).clamp(1, 50);
        Self::window_mean(&self.losses[self.losses.len().saturating_sub(w)..])
    }
}

/// Seeded initialization keyed on parameter names; iteration is sorted so the
/// result does not depend on hash-map order.
pub(crate) fn init_params(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap
        .data()
        .lock()
        .map_err(|_| Error::state("variable map lock poisoned"))?;
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let dims = var.dims().to_vec();
        let n: usize = dims.iter().product();
        let normal = |rng: &mut ChaCha8Rng, std: f64| -> Vec<f32> {
            (0..n)
                .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
                .collect()
        };
        let values: Vec<f32> = if name.ends_with("norm.weight") {
            vec![1.0; n]
        } else if name.ends_with(".bias") || name.starts_with("final.") {
            vec![0.0; n]
        } else if name == "pos_emb" {
            normal(&mut rng, 0.02)
        } else if name.starts_with("text_emb") {
            normal(&mut rng, 1.0)
        } else {
            let fan_in = dims.iter().skip(1).product::<usize>().max(1) as f64;
            normal(&mut rng, 1.0 / fan_in.sqrt())
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

pub(crate) fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?)
}

/// Trains the noise predictor with the standard epsilon objective at
/// uniformly sampled train steps. Returns an inference copy of the model.
pub fn train_toy(
    dataset: &[Sample],
    config: &DenoiserConfig,
    train: &TrainConfig,
    sched: &DiffusionSchedule,
    mut progress: impl FnMut(usize, f32),
) -> Result<(Denoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::param("training dataset is empty"));
    }
    if train.batch_size == 0 {
        return Err(Error::param("batch_size must be positive"));
    }
    config.validate()?;
    if config.noise.alpha_bar()? != sched.alpha_bar_table() {
        return Err(Error::Config(
            "training schedule differs from the denoiser's noise levels".into(),
        ));
    }
    let device = Device::Cpu;
    let s = config.image_size;
    for (i, sample) in dataset.iter().enumerate() {
        if sample.image.height() != s
            || sample.image.width() != s
            || sample.image.channels() != config.image_channels
        {
            return Err(Error::shape(format!(
                "sample {i} is {}x{}x{}, model expects {}x{s}x{s}",
                sample.image.channels(),
                sample.image.height(),
                sample.image.width(),
                config.image_channels
            )));
        }
        if sample.depth.height() != s || sample.depth.width() != s || sample.depth.channels() != 1 {
            return Err(Error::shape(format!("sample {i} depth does not match image resolution")));
        }
    }

    let varmap = VarMap::new();
    let model = Denoiser::from_varmap(config.clone(), &varmap, DType::F32, &device)?;
    init_params(&varmap, train.seed)?;

    let images = Tensor::cat(
        &dataset
            .iter()
            .map(|d| d.image.to_model_tensor(&device))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let depths = Tensor::cat(
        &dataset
            .iter()
            .map(|d| d.depth.to_unit_tensor(&device))
            .collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let ids: Vec<Vec<u32>> = dataset
        .iter()
        .map(|d| model.padded_ids(&model.vocab().tokenize(&d.caption, config.max_prompt_len)?))
        .collect::<Result<_>>()?;
    let null_ids = model.padded_ids(&[NULL_TOKEN])?;

    let vars: Vec<Var> = varmap.all_vars();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: train.learning_rate,
            weight_decay: train.weight_decay,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let alpha_bar = sched.alpha_bar_table();
    let b = train.batch_size;
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let lr = if step < train.warmup_steps {
            train.learning_rate * (step + 1) as f64 / train.warmup_steps as f64
        } else {
            let p = (step - train.warmup_steps) as f64 / (train.steps - train.warmup_steps).max(1) as f64;
            train.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
        };
        opt.set_learning_rate(lr);

        let idx: Vec<u32> = (0..b).map(|_| rng.random_range(0..dataset.len()) as u32).collect();
        let idx_t = Tensor::new(idx.as_slice(), &device)?;
        let x0 = images.index_select(&idx_t, 0)?;
        let d = depths.index_select(&idx_t, 0)?;
        let mut batch_ids = Vec::with_capacity(b * config.max_prompt_len);
        for &i in &idx {
            if rng.random_bool(train.cond_dropout) {
                batch_ids.extend_from_slice(&null_ids);
            } else {
                batch_ids.extend_from_slice(&ids[i as usize]);
            }
        }
        let text_ids = Tensor::from_vec(batch_ids, (b, config.max_prompt_len), &device)?;
        let text = model.embed_id_batch(&text_ids)?;

        let ts: Vec<usize> = (0..b).map(|_| rng.random_range(0..alpha_bar.len())).collect();
        let c0: Vec<f32> = ts.iter().map(|&t| alpha_bar[t].sqrt() as f32).collect();
        let c1: Vec<f32> = ts.iter().map(|&t| (1.0 - alpha_bar[t]).sqrt() as f32).collect();
        let c0 = Tensor::from_vec(c0, (b, 1, 1, 1), &device)?;
        let c1 = Tensor::from_vec(c1, (b, 1, 1, 1), &device)?;
        let noise = normal_tensor(&mut rng, x0.dims(), &device)?;
        let x_t = (x0.broadcast_mul(&c0)? + noise.broadcast_mul(&c1)?)?;
        let t_tensor = Tensor::from_vec(ts.iter().map(|&t| t as f32).collect::<Vec<_>>(), b, &device)?;

        let (raw, _) = model.forward_head(&x_t, &d, &t_tensor, &text, &AttentionControl::vanilla())?;
        let target = match config.prediction {
            Prediction::Epsilon => noise,
            Prediction::Velocity => (noise.broadcast_mul(&c0)? - x0.broadcast_mul(&c1)?)?,
        };
        let loss = (raw - &target)?.sqr()?.mean_all()?;
        opt.backward_step(&loss)?;
        let l = loss.to_scalar::<f32>()?;
        if !l.is_finite() {
            return Err(Error::state(format!("training diverged at step {step} (loss {l})")));
        }
        losses.push(l);
        progress(step, l);
    }
    Ok((model.detached()?, TrainReport { losses }))
}

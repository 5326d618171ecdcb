#![allow(dead_code)]

use std::collections::BTreeMap;

use cohedit_core::denoiser::Denoiser;
use cohedit_core::schedule::ScheduleConfig;
use cohedit_core::{Device, DenoiserConfig, DiffusionSchedule, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        patch_size: 8,
        base_channels: 16,
        ..DenoiserConfig::default()
    }
}

/// Seeded untrained model whose zero-initialized output head is replaced by
/// random weights, so predictions depend on every input.
pub fn random_model(config: DenoiserConfig, seed: u64) -> Denoiser {
    let dev = Device::Cpu;
    let base = Denoiser::initialized(config.clone(), seed, &dev).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let tensors: BTreeMap<String, Tensor> = base
        .params()
        .iter()
        .map(|(k, v)| {
            if k.starts_with("final.") && !k.ends_with(".bias") {
                let n = v.elem_count();
                let vals: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * 0.05).collect();
                (k.clone(), Tensor::from_vec(vals, v.dims(), &dev).unwrap())
            } else {
                (k.clone(), v.clone())
            }
        })
        .collect();
    Denoiser::from_tensors(config, tensors, &dev).unwrap()
}

pub fn schedule(steps: usize) -> DiffusionSchedule {
    ScheduleConfig {
        num_inference_steps: steps,
        ..ScheduleConfig::default()
    }
    .build()
    .unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(candle_core::DType::F64).unwrap() - b.to_dtype(candle_core::DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .max_all()
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

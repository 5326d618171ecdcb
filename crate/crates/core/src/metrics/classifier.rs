//! Prompt-fidelity scoring with a small (color, shape) attribute classifier.
//!
//! Images are area-downsampled and fed to a two-layer MLP with one softmax
//! head per attribute. Soft accuracy (the probability assigned to the
//! prompt's class) is used so an uninformative input scores at chance.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::train::init_params;
use crate::denoiser::weights::{expect_format, read_archive, write_archive};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::synth::Sample;
use crate::vocab::{self, SHAPE_COLORS, SHAPE_KINDS};

pub const CLASSIFIER_FORMAT: &str = "cohedit-attribute-classifier";
pub const CLASSIFIER_FORMAT_VERSION: &str = "1";

/// Vocabulary words naming colors or shapes the classifier has no head for.
const UNSCORED_ATTRIBUTES: [&str; 7] = ["pink", "cyan", "white", "black", "brown", "star", "heart"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    /// Side of the downsampled input.
    pub input_size: usize,
    pub hidden: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_size: 16,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-sample Gaussian pixel noise std is drawn from `[0, max_noise]`.
    pub max_noise: f32,
    /// Fraction of each batch replaced by pure noise with uniform targets.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 64,
            learning_rate: 2e-3,
            max_noise: 0.12,
            noise_fraction: 0.1,
            seed: 0,
        }
    }
}

/// Target classes named by a prompt; at least one is present.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptAttributes {
    pub color: Option<usize>,
    pub shape: Option<usize>,
}

/// Extracts the (color, shape) attributes of a prompt.
pub fn prompt_attributes(prompt: &str) -> Result<PromptAttributes> {
    let mut attrs = PromptAttributes { color: None, shape: None };
    for word in prompt.split_whitespace() {
        let word = word.to_lowercase();
        if UNSCORED_ATTRIBUTES.contains(&word.as_str()) {
            return Err(Error::param(format!("attribute {word:?} is not in the classifier vocabulary")));
        }
        if let Some(c) = vocab::color_index(&word) {
            attrs.color.get_or_insert(c);
        } else if let Some(s) = vocab::shape_index(&word) {
            attrs.shape.get_or_insert(s);
        }
    }
    if attrs.color.is_none() && attrs.shape.is_none() {
        return Err(Error::param(format!("prompt {prompt:?} names no known color or shape")));
    }
    Ok(attrs)
}

#[derive(Debug, Clone)]
pub struct AttributeClassifier {
    config: ClassifierConfig,
    params: BTreeMap<String, Tensor>,
    device: Device,
}

/// Per-frame class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeProbs {
    pub color: Vec<f32>,
    pub shape: Vec<f32>,
}

fn linear(x: &Tensor, p: &BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    let w = p
        .get(&format!("{name}.weight"))
        .ok_or_else(|| Error::state(format!("missing parameter {name}.weight")))?;
    let b = p
        .get(&format!("{name}.bias"))
        .ok_or_else(|| Error::state(format!("missing parameter {name}.bias")))?;
    Ok(x.matmul(&w.t()?)?.broadcast_add(b)?)
}

impl AttributeClassifier {
    fn input_dim(config: &ClassifierConfig) -> usize {
        3 * config.input_size * config.input_size
    }

    fn declare(config: &ClassifierConfig, varmap: &VarMap, device: &Device) -> Result<()> {
        let vb = VarBuilder::from_varmap(varmap, DType::F32, device);
        let d = Self::input_dim(config);
        candle_nn::linear(d, config.hidden, vb.pp("fc1"))?;
        candle_nn::linear(config.hidden, config.hidden, vb.pp("fc2"))?;
        candle_nn::linear(config.hidden, SHAPE_COLORS.len(), vb.pp("color"))?;
        candle_nn::linear(config.hidden, SHAPE_KINDS.len(), vb.pp("shape"))?;
        Ok(())
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// `(N, 3 * s * s)` features in `[-1, 1]`.
    fn features(&self, images: &[&Image]) -> Result<Tensor> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * Self::input_dim(&self.config));
        for img in images {
            if img.channels() != 3 {
                return Err(Error::shape(format!("classifier expects RGB, got {} channels", img.channels())));
            }
            let small = img.clamped().downsample(s, s)?;
            data.extend(small.data().iter().map(|v| v * 2.0 - 1.0));
        }
        Ok(Tensor::from_vec(data, (images.len(), Self::input_dim(&self.config)), &self.device)?)
    }

    /// Logits for both heads.
    fn logits(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = candle_nn::ops::silu(&linear(x, &self.params, "fc1")?)?;
        let h = candle_nn::ops::silu(&linear(&h, &self.params, "fc2")?)?;
        Ok((linear(&h, &self.params, "color")?, linear(&h, &self.params, "shape")?))
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<AttributeProbs>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let (lc, ls) = self.logits(&self.features(images)?)?;
        let pc = candle_nn::ops::softmax(&lc, 1)?.to_vec2::<f32>()?;
        let ps = candle_nn::ops::softmax(&ls, 1)?.to_vec2::<f32>()?;
        Ok(pc
            .into_iter()
            .zip(ps)
            .map(|(color, shape)| AttributeProbs { color, shape })
            .collect())
    }

    /// Trains on `(image, caption)` pairs whose captions start with
    /// `"<color> <shape>"`.
    pub fn train(samples: &[Sample], config: &ClassifierConfig, train: &ClassifierTrainConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::param("classifier training set is empty"));
        }
        let device = Device::Cpu;
        let varmap = VarMap::new();
        Self::declare(config, &varmap, &device)?;
        init_params(&varmap, train.seed)?;
        let params: BTreeMap<String, Tensor> = varmap
            .data()
            .lock()
            .map_err(|_| Error::state("variable map lock poisoned"))?
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        let mut model = Self {
            config: config.clone(),
            params,
            device: device.clone(),
        };

        let mut labels = Vec::with_capacity(samples.len());
        for s in samples {
            let a = prompt_attributes(&s.caption)?;
            match (a.color, a.shape) {
                (Some(c), Some(k)) => labels.push((c, k)),
                _ => return Err(Error::param(format!("caption {:?} lacks a color or shape", s.caption))),
            }
        }
        let feats = model.features(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let dim = Self::input_dim(config);
        let (nc, ns) = (SHAPE_COLORS.len(), SHAPE_KINDS.len());

        let vars: Vec<Var> = varmap.all_vars();
        let mut opt = AdamW::new(
            vars,
            ParamsAdamW {
                lr: train.learning_rate,
                weight_decay: 1e-4,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xc1a55);
        let b = train.batch_size.max(1);
        for step in 0..train.steps {
            let p = step as f64 / train.steps.max(1) as f64;
            opt.set_learning_rate(train.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())));
            let idx: Vec<u32> = (0..b).map(|_| rng.random_range(0..samples.len()) as u32).collect();
            let x = feats.index_select(&Tensor::new(idx.as_slice(), &device)?, 0)?;
            let mut noise = Vec::with_capacity(b * dim);
            let mut keep = Vec::with_capacity(b);
            let mut tc = vec![0f32; b * nc];
            let mut ts = vec![0f32; b * ns];
            for (r, &i) in idx.iter().enumerate() {
                let pure = rng.random_bool(train.noise_fraction);
                let std = if pure { 1.0 } else { rng.random_range(0.0..=train.max_noise) * 2.0 };
                noise.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal) * std));
                keep.push(if pure { 0f32 } else { 1.0 });
                let (c, k) = labels[i as usize];
                if pure {
                    tc[r * nc..(r + 1) * nc].fill(1.0 / nc as f32);
                    ts[r * ns..(r + 1) * ns].fill(1.0 / ns as f32);
                } else {
                    tc[r * nc + c] = 1.0;
                    ts[r * ns + k] = 1.0;
                }
            }
            let keep = Tensor::from_vec(keep, (b, 1), &device)?;
            let noise = Tensor::from_vec(noise, (b, dim), &device)?;
            let x = (x.broadcast_mul(&keep)? + noise)?;
            let (lc, ls) = model.logits(&x)?;
            let tc = Tensor::from_vec(tc, (b, nc), &device)?;
            let ts = Tensor::from_vec(ts, (b, ns), &device)?;
            let loss_c = (candle_nn::ops::log_softmax(&lc, 1)? * tc)?.sum_all()?.neg()?;
            let loss_s = (candle_nn::ops::log_softmax(&ls, 1)? * ts)?.sum_all()?.neg()?;
            let loss = ((loss_c + loss_s)? / b as f64)?;
            opt.backward_step(&loss)?;
        }
        model.params = model
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.detach()))
            .collect();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = HashMap::from([
            ("format".to_string(), CLASSIFIER_FORMAT.to_string()),
            ("format_version".to_string(), CLASSIFIER_FORMAT_VERSION.to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
        ]);
        write_archive(path.as_ref(), &self.params, meta)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let device = Device::Cpu;
        let (params, meta) = read_archive(path, &device)?;
        expect_format(path, &meta, CLASSIFIER_FORMAT, CLASSIFIER_FORMAT_VERSION)?;
        let config: ClassifierConfig = serde_json::from_str(
            meta.get("config")
                .ok_or_else(|| Error::format(path, "missing config metadata"))?,
        )?;
        let expected = VarMap::new();
        Self::declare(&config, &expected, &device)?;
        for (name, var) in expected.data().lock().map_err(|_| Error::state("variable map lock poisoned"))?.iter() {
            match params.get(name) {
                Some(t) if t.dims() == var.dims() => {}
                _ => return Err(Error::format(path, format!("missing or misshapen tensor {name}"))),
            }
        }
        Ok(Self { config, params, device })
    }

    /// Mean per-frame soft accuracy for the prompt's attributes.
    pub fn prompt_fidelity(&self, frames: &[Image], prompt: &str) -> Result<f64> {
        let attrs = prompt_attributes(prompt)?;
        if frames.is_empty() {
            return Err(Error::param("no frames to score"));
        }
        let probs = self.predict(&frames.iter().collect::<Vec<_>>())?;
        let mut total = 0.0;
        for p in &probs {
            let mut parts = Vec::new();
            if let Some(c) = attrs.color {
                parts.push(p.color[c] as f64);
            }
            if let Some(s) = attrs.shape {
                parts.push(p.shape[s] as f64);
            }
            total += parts.iter().sum::<f64>() / parts.len() as f64;
        }
        Ok(total / probs.len() as f64)
    }

    /// Mean probability of the named color across frames.
    pub fn color_score(&self, frames: &[Image], color: &str) -> Result<f64> {
        let c = vocab::color_index(color).ok_or_else(|| Error::param(format!("unknown color {color:?}")))?;
        if frames.is_empty() {
            return Err(Error::param("no frames to score"));
        }
        let probs = self.predict(&frames.iter().collect::<Vec<_>>())?;
        Ok(probs.iter().map(|p| p.color[c] as f64).sum::<f64>() / probs.len() as f64)
    }
}

/// Free-function form of [`AttributeClassifier::prompt_fidelity`].
pub fn prompt_fidelity(frames: &[Image], prompt: &str, classifier: &AttributeClassifier) -> Result<f64> {
    classifier.prompt_fidelity(frames, prompt)
}

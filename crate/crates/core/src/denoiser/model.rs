use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Embedding, Linear, VarBuilder, VarMap};
use sha2::{Digest, Sha256};

use super::{check_block, AttentionControl, ConditioningBundle, DenoiserConfig, Prediction, NUM_BLOCKS};
use crate::attention::{cross_frame_attention, AttentionWeights};
use crate::error::{Error, Result};
use crate::vocab::{Vocab, NULL_TOKEN, PAD_TOKEN};

/// Layer norm over the last dimension built from differentiable primitives
/// (the fused kernel in `candle-nn` has no backward pass).
#[derive(Debug, Clone)]
struct Norm {
    weight: Tensor,
    bias: Tensor,
}

impl Norm {
    const EPS: f64 = 1e-5;

    fn new(dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            weight: vb.get(dim, "weight")?,
            bias: vb.get(dim, "bias")?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + Self::EPS)?.sqrt()?)?;
        y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
struct ResUnit {
    norm: Norm,
    fc1: Linear,
    temb: Linear,
    fc2: Linear,
    skip: Option<Linear>,
}

impl ResUnit {
    fn new(c_in: usize, c_out: usize, hidden: usize, temb_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let skip = if c_in != c_out {
            Some(candle_nn::linear_no_bias(c_in, c_out, vb.pp("skip"))?)
        } else {
            None
        };
        Ok(Self {
            norm: Norm::new(c_in, vb.pp("norm"))?,
            fc1: candle_nn::linear(c_in, hidden, vb.pp("fc1"))?,
            temb: candle_nn::linear(temb_dim, hidden, vb.pp("temb"))?,
            fc2: candle_nn::linear(hidden, c_out, vb.pp("fc2"))?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.fc1.forward(&self.norm.forward(x)?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(1)?;
        let h = self.fc2.forward(&h.broadcast_add(&t)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

#[derive(Debug, Clone)]
struct SelfAttention {
    norm: Norm,
    weights: AttentionWeights,
    out: Linear,
}

impl SelfAttention {
    fn new(c: usize, scaled: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = |name: &str| vb.pp(name).get((c, c), "weight");
        Ok(Self {
            norm: Norm::new(c, vb.pp("norm"))?,
            weights: AttentionWeights {
                w_q: w("q")?,
                w_k: w("k")?,
                w_v: w("v")?,
                scale: if scaled { 1.0 / (c as f64).sqrt() } else { 1.0 },
            },
            out: candle_nn::linear(c, c, vb.pp("out"))?,
        })
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    scale: f64,
}

impl CrossAttention {
    fn new(c: usize, text_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: Norm::new(c, vb.pp("norm"))?,
            q: candle_nn::linear_no_bias(c, c, vb.pp("q"))?,
            k: candle_nn::linear_no_bias(text_dim, c, vb.pp("k"))?,
            v: candle_nn::linear_no_bias(text_dim, c, vb.pp("v"))?,
            out: candle_nn::linear(c, c, vb.pp("out"))?,
            scale: 1.0 / (c as f64).sqrt(),
        })
    }

    fn forward(&self, x: &Tensor, text: &Tensor) -> candle_core::Result<Tensor> {
        let q = self.q.forward(&self.norm.forward(x)?)?;
        let k = self.k.forward(text)?;
        let v = self.v.forward(text)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * self.scale)?;
        let att = crate::ops::softmax_last_dim(&scores)?;
        self.out.forward(&att.matmul(&v)?)
    }
}

/// Two 3x3 convolutions over `[x_t, depth, head output]` at full
/// resolution, added to the head output. Unlike the patch head it is
/// translation equivariant at pixel level.
#[derive(Debug, Clone)]
struct Refine {
    conv1: Conv2d,
    temb: Linear,
    conv2: Conv2d,
}

impl Refine {
    fn new(c_in: usize, hidden: usize, c_out: usize, temb_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv1: candle_nn::conv2d(c_in, hidden, 3, cfg, vb.pp("refine.conv1"))?,
            temb: candle_nn::linear(temb_dim, hidden, vb.pp("refine.temb"))?,
            conv2: candle_nn::conv2d(hidden, c_out, 3, cfg, vb.pp("final.refine"))?,
        })
    }

    fn forward(&self, inp: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let b = inp.dim(0)?;
        let t = self.temb.forward(&temb.silu()?)?;
        let hidden = t.dim(1)?;
        let h = self.conv1.forward(inp)?.broadcast_add(&t.reshape((b, hidden, 1, 1))?)?;
        self.conv2.forward(&h.silu()?)
    }
}

#[derive(Debug, Clone)]
struct Block {
    res: ResUnit,
    attn: SelfAttention,
    cross: CrossAttention,
}

/// Output of one denoiser call.
#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    /// Guided noise prediction, same shape as the input latent.
    pub eps: Tensor,
    /// Self-attention inputs recorded at the control's capture layers.
    pub captured: BTreeMap<usize, Tensor>,
}

/// Token ids of a prompt and their `(L, text_dim)` embeddings.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub ids: Vec<u32>,
    pub tokens: Tensor,
}

/// Token-grid down/up projections of the multiscale layout.
#[derive(Debug, Clone)]
struct Resample {
    down: [Linear; 2],
    up: [Linear; 2],
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    vocab: Vocab,
    device: Device,
    dtype: DType,
    params: BTreeMap<String, Tensor>,
    stem: Linear,
    pos_emb: Tensor,
    time_fc1: Linear,
    time_fc2: Linear,
    text_emb: Embedding,
    blocks: Vec<Block>,
    resample: Option<Resample>,
    final_norm: Norm,
    final_proj: Linear,
    /// Per-channel, time-dependent gain on `x_t` added to the output.
    final_skip: Linear,
    refine: Option<Refine>,
    alpha_bar: Vec<f64>,
}

fn patchify(x: &Tensor, p: usize) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (gh, gw) = (h / p, w / p);
    x.reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((b, gh * gw, c * p * p))
}

fn unpatchify(x: &Tensor, c: usize, p: usize, g: usize) -> candle_core::Result<Tensor> {
    let b = x.dim(0)?;
    x.reshape((b, g, g, c, p, p))?
        .permute((0, 3, 1, 4, 2, 5))?
        .reshape((b, c, g * p, g * p))
}

/// 2x2 token merge: `(B, g*g, C)` to `(B, (g/2)^2, 4C)`.
fn merge_tokens(x: &Tensor, g: usize) -> candle_core::Result<Tensor> {
    let (b, _, c) = x.dims3()?;
    x.reshape((b, g / 2, 2, g / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, g * g / 4, 4 * c))
}

/// Inverse layout of [`merge_tokens`]: `(B, g*g, 4C)` to `(B, (2g)^2, C)`.
fn split_tokens(x: &Tensor, g: usize) -> candle_core::Result<Tensor> {
    let (b, _, c4) = x.dims3()?;
    let c = c4 / 4;
    x.reshape((b, g, g, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 4 * g * g, c))
}

fn timestep_embedding(t: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::new(freqs, t.device())?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs.unsqueeze(0)?)?;
    Tensor::cat(&[args.cos()?, args.sin()?], 1)
}

impl Denoiser {
    pub(crate) fn temb_dim(config: &DenoiserConfig) -> usize {
        4 * config.base_channels
    }

    fn build(config: DenoiserConfig, vb: VarBuilder, params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::default();
        let c = |l: usize| config.level_channels(l);
        let hidden = |ch: usize| ch * config.mlp_ratio;
        let temb_dim = Self::temb_dim(&config);
        let p = config.patch_size;
        let in_ch = config.image_channels + config.depth_channels;
        let g0 = config.grid();

        // skip channels in push order: stem, b1, b2, down1, b3, b4, down2, b5, b6
        let skip_ch = if config.multiscale {
            [c(0), c(0), c(0), c(1), c(1), c(1), c(2), c(2), c(2)]
        } else {
            [c(0); 9]
        };
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for i in 1..=NUM_BLOCKS {
            let level = config.block_level(i);
            let ch = c(level);
            let c_in = if i >= 8 { ch + skip_ch[16 - i] } else { ch };
            let bvb = vb.pp(format!("blocks.{i}"));
            blocks.push(Block {
                res: ResUnit::new(c_in, ch, hidden(ch), temb_dim, bvb.pp("res"))?,
                attn: SelfAttention::new(ch, config.scaled_self_attention, bvb.pp("attn"))?,
                cross: CrossAttention::new(ch, config.text_dim, bvb.pp("cross"))?,
            });
        }
        let device = vb.device().clone();
        let dtype = vb.dtype();
        Ok(Self {
            stem: candle_nn::linear(in_ch * p * p, c(0), vb.pp("stem"))?,
            pos_emb: vb.get((g0 * g0, c(0)), "pos_emb")?,
            time_fc1: candle_nn::linear(c(0), temb_dim, vb.pp("time.fc1"))?,
            time_fc2: candle_nn::linear(temb_dim, temb_dim, vb.pp("time.fc2"))?,
            text_emb: candle_nn::embedding(vocab.size(), config.text_dim, vb.pp("text_emb"))?,
            blocks,
            resample: if config.multiscale {
                Some(Resample {
                    down: [
                        candle_nn::linear(4 * c(0), c(1), vb.pp("down1"))?,
                        candle_nn::linear(4 * c(1), c(2), vb.pp("down2"))?,
                    ],
                    up: [
                        candle_nn::linear(c(2), 4 * c(1), vb.pp("up1"))?,
                        candle_nn::linear(c(1), 4 * c(0), vb.pp("up2"))?,
                    ],
                })
            } else {
                None
            },
            final_norm: Norm::new(c(0), vb.pp("final_norm"))?,
            final_proj: candle_nn::linear(c(0), config.image_channels * p * p, vb.pp("final"))?,
            final_skip: candle_nn::linear(temb_dim, config.image_channels, vb.pp("final.skip"))?,
            refine: match config.refine_channels {
                0 => None,
                hidden => Some(Refine::new(
                    2 * config.image_channels + config.depth_channels,
                    hidden,
                    config.image_channels,
                    temb_dim,
                    vb.clone(),
                )?),
            },
            alpha_bar: config.noise.alpha_bar()?,
            config,
            vocab,
            device,
            dtype,
            params,
        })
    }

    /// Builds a model whose parameters are the variables of `varmap`,
    /// creating any that are missing. Used for training.
    pub fn from_varmap(config: DenoiserConfig, varmap: &VarMap, dtype: DType, device: &Device) -> Result<Self> {
        let vb = VarBuilder::from_varmap(varmap, dtype, device);
        let mut model = Self::build(config, vb, BTreeMap::new())?;
        model.params = varmap
            .data()
            .lock()
            .map_err(|_| Error::state("variable map lock poisoned"))?
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        Ok(model)
    }

    /// An untrained model with seeded parameters. The output head starts at
    /// zero, so an epsilon-predicting model returns `eps = 0` everywhere.
    pub fn initialized(config: DenoiserConfig, seed: u64, device: &Device) -> Result<Self> {
        let varmap = VarMap::new();
        let model = Self::from_varmap(config, &varmap, DType::F32, device)?;
        super::train::init_params(&varmap, seed)?;
        model.detached()
    }

    /// Builds an inference model from named parameter tensors.
    pub fn from_tensors(config: DenoiserConfig, tensors: BTreeMap<String, Tensor>, device: &Device) -> Result<Self> {
        let dtype = tensors
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::param("no parameter tensors supplied"))?;
        let map: HashMap<String, Tensor> = tensors.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let vb = VarBuilder::from_tensors(map, dtype, device);
        Self::build(config, vb, tensors)
    }

    /// A detached copy of the parameters, converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let tensors = self
            .params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.detach().to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_tensors(self.config.clone(), tensors, &self.device)
    }

    /// A copy whose parameters are plain tensors (no gradient tracking).
    pub fn detached(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// SHA-256 over parameter names, shapes and little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for d in t.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn embed_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let ids = Tensor::new(ids, &self.device)?;
        Ok(self.text_emb.forward(&ids)?)
    }

    /// `(B, L)` id tensor to `(B, L, text_dim)` embeddings.
    pub(crate) fn embed_id_batch(&self, ids: &Tensor) -> Result<Tensor> {
        Ok(self.text_emb.forward(ids)?)
    }

    /// Tokenizes over the toy vocabulary and looks up the learned embeddings.
    /// The empty prompt maps to the single null token.
    pub fn embed_prompt(&self, text: &str) -> Result<PromptEmbedding> {
        let ids = self.vocab.tokenize(text, self.config.max_prompt_len)?;
        let tokens = self.embed_ids(&ids)?;
        Ok(PromptEmbedding { ids, tokens })
    }

    pub fn null_prompt(&self) -> Result<PromptEmbedding> {
        let ids = vec![NULL_TOKEN];
        let tokens = self.embed_ids(&ids)?;
        Ok(PromptEmbedding { ids, tokens })
    }

    /// Pads id sequences to `max_prompt_len` with the pad token.
    pub(crate) fn padded_ids(&self, ids: &[u32]) -> Result<Vec<u32>> {
        let max = self.config.max_prompt_len;
        if ids.is_empty() || ids.len() > max {
            return Err(Error::param(format!("prompt length {} outside 1..={max}", ids.len())));
        }
        let mut out = ids.to_vec();
        out.resize(max, PAD_TOKEN);
        Ok(out)
    }

    /// Stacks `(L_i, D)` prompt embeddings into a padded `(B, max, D)` batch.
    fn text_batch(&self, prompts: &[&Tensor]) -> Result<Tensor> {
        let max = self.config.max_prompt_len;
        let pad = self.embed_ids(&[PAD_TOKEN])?;
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            let (l, d) = p.dims2()?;
            if d != self.config.text_dim || l == 0 || l > max {
                return Err(Error::shape(format!(
                    "prompt embedding {:?}, expected (1..={max}, {})",
                    p.dims(),
                    self.config.text_dim
                )));
            }
            let p = p.to_dtype(self.dtype)?;
            let row = if l < max {
                Tensor::cat(&[p, pad.repeat((max - l, 1))?], 0)?
            } else {
                p
            };
            rows.push(row);
        }
        Ok(Tensor::stack(&rows, 0)?)
    }

    /// Raw batched forward pass. `x`: `(B, C, H, W)` in `[-1, 1]`, `depth`:
    /// `(B, 1, H, W)`, `timesteps`: `(B,)`, `text`: `(B, L, text_dim)`.
    pub fn forward_batch(
        &self,
        x: &Tensor,
        depth: &Tensor,
        timesteps: &Tensor,
        text: &Tensor,
        control: &AttentionControl,
    ) -> Result<DenoiseOutput> {
        let (raw, captured) = self.forward_head(x, depth, timesteps, text, control)?;
        let eps = match self.config.prediction {
            Prediction::Epsilon => raw,
            Prediction::Velocity => {
                let (c_x, c_v) = self.velocity_coefficients(timesteps)?;
                (x.to_dtype(self.dtype)?.broadcast_mul(&c_x)? + raw.broadcast_mul(&c_v)?)?
            }
        };
        Ok(DenoiseOutput { eps, captured })
    }

    /// Per-sample `(sqrt(1 - abar), sqrt(abar))` as `(B, 1, 1, 1)` tensors, so
    /// that `eps = c_x * x_t + c_v * v`.
    pub(crate) fn velocity_coefficients(&self, timesteps: &Tensor) -> Result<(Tensor, Tensor)> {
        let ts = timesteps.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let mut c_x = Vec::with_capacity(ts.len());
        let mut c_v = Vec::with_capacity(ts.len());
        for t in ts {
            let ab = *self
                .alpha_bar
                .get(t.round() as usize)
                .filter(|_| t >= 0.0)
                .ok_or_else(|| Error::param(format!("timestep {t} outside the model's noise levels")))?;
            c_x.push((1.0 - ab).sqrt());
            c_v.push(ab.sqrt());
        }
        let b = c_x.len();
        let shape = (b, 1, 1, 1);
        Ok((
            Tensor::from_vec(c_x, shape, &self.device)?.to_dtype(self.dtype)?,
            Tensor::from_vec(c_v, shape, &self.device)?.to_dtype(self.dtype)?,
        ))
    }

    /// The output head's raw regression target (noise or velocity).
    pub(crate) fn forward_head(
        &self,
        x: &Tensor,
        depth: &Tensor,
        timesteps: &Tensor,
        text: &Tensor,
        control: &AttentionControl,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        control.validate()?;
        let cfg = &self.config;
        let (b, c, h, w) = x.dims4()?;
        if c != cfg.image_channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::shape(format!(
                "latent {:?}, model expects (B, {}, {}, {})",
                x.dims(),
                cfg.image_channels,
                cfg.image_size,
                cfg.image_size
            )));
        }
        if depth.dims() != [b, cfg.depth_channels, h, w] {
            return Err(Error::shape(format!(
                "depth {:?} does not match latent {:?}",
                depth.dims(),
                x.dims()
            )));
        }
        let x = x.to_dtype(self.dtype)?;
        let depth = depth.to_dtype(self.dtype)?;
        let p = cfg.patch_size;
        let g0 = cfg.grid();

        let temb = timestep_embedding(&timesteps.to_dtype(self.dtype)?, cfg.base_channels)?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&temb)?.silu()?)?;
        let text = text.to_dtype(self.dtype)?;

        let inp = patchify(&Tensor::cat(&[&x, &depth], 1)?, p)?;
        let mut hdn = self.stem.forward(&inp)?.broadcast_add(&self.pos_emb)?;
        let mut captured = BTreeMap::new();
        let mut skips = vec![hdn.clone()];

        for i in 1..=NUM_BLOCKS {
            if i >= 8 {
                let skip = skips
                    .pop()
                    .ok_or_else(|| Error::state("skip stack underflow"))?;
                hdn = Tensor::cat(&[&hdn, &skip], D::Minus1)?;
            }
            hdn = self.block_forward(i, &hdn, &temb, &text, control, &mut captured)?;
            match i {
                1..=6 => skips.push(hdn.clone()),
                _ => {}
            }
            let rs = self.resample.as_ref();
            match (i, rs) {
                (2, Some(r)) => hdn = r.down[0].forward(&merge_tokens(&hdn, g0)?)?,
                (4, Some(r)) => hdn = r.down[1].forward(&merge_tokens(&hdn, g0 / 2)?)?,
                (10, Some(r)) => hdn = split_tokens(&r.up[0].forward(&hdn)?, g0 / 4)?,
                (13, Some(r)) => hdn = split_tokens(&r.up[1].forward(&hdn)?, g0 / 2)?,
                _ => {}
            }
            if i == 2 || i == 4 {
                skips.push(hdn.clone());
            }
        }
        let out = self.final_proj.forward(&self.final_norm.forward(&hdn)?)?;
        let gain = self.final_skip.forward(&temb)?.reshape((b, c, 1, 1))?;
        let mut raw = (unpatchify(&out, cfg.image_channels, p, g0)? + x.broadcast_mul(&gain)?)?;
        if let Some(refine) = &self.refine {
            raw = (&raw + refine.forward(&Tensor::cat(&[&x, &depth, &raw], 1)?, &temb)?)?;
        }
        Ok((raw, captured))
    }

    fn block_forward(
        &self,
        index: usize,
        x: &Tensor,
        temb: &Tensor,
        text: &Tensor,
        control: &AttentionControl,
        captured: &mut BTreeMap<usize, Tensor>,
    ) -> Result<Tensor> {
        let block = &self.blocks[index - 1];
        let h = block.res.forward(x, temb)?;
        let f = block.attn.norm.forward(&h)?;
        if control.capture_layers().contains(&index) {
            captured.insert(index, f.clone());
        }
        let attended = match control.injected_features(index) {
            Some(sources) => cross_frame_attention(&f, sources, &block.attn.weights)?,
            None => cross_frame_attention(&f, std::slice::from_ref(&f), &block.attn.weights)?,
        };
        let h = (h + block.attn.out.forward(&attended)?)?;
        let h = (&h + block.cross.forward(&h, text)?)?;
        Ok(h)
    }

    /// Noise prediction for a single latent `(1, C, H, W)` at train step `t`,
    /// with classifier-free guidance when `cond.guidance_scale > 1`.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: &ConditioningBundle,
        control: &AttentionControl,
    ) -> Result<DenoiseOutput> {
        for l in control.capture_layers().iter().copied().chain(control.inject_layers()) {
            check_block(l)?;
        }
        if x_t.dim(0)? != 1 {
            return Err(Error::shape(format!("denoise takes one latent, got batch {}", x_t.dim(0)?)));
        }
        let scale = cond.guidance_scale;
        if !(scale >= 1.0 && scale.is_finite()) {
            return Err(Error::param(format!("guidance scale must be >= 1, got {scale}")));
        }
        let branches = cond.branches();
        let (x, depth, text) = if branches == 1 {
            (x_t.clone(), cond.depth.clone(), self.text_batch(&[&cond.prompt_tokens])?)
        } else {
            let null = self.null_prompt()?;
            (
                Tensor::cat(&[x_t, x_t], 0)?,
                Tensor::cat(&[&cond.depth, &cond.depth], 0)?,
                self.text_batch(&[&null.tokens, &cond.prompt_tokens])?,
            )
        };
        let ts = Tensor::full(t as f32, branches, &self.device)?;
        let out = self.forward_batch(&x, &depth, &ts, &text, control)?;
        let eps = if branches == 1 {
            out.eps
        } else {
            let e_null = out.eps.narrow(0, 0, 1)?;
            let e_cond = out.eps.narrow(0, 1, 1)?;
            (&e_null + ((e_cond - &e_null)? * scale)?)?
        };
        Ok(DenoiseOutput {
            eps: eps.to_dtype(x_t.dtype())?,
            captured: out.captured,
        })
    }
}

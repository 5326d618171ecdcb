//! Cross-frame self-attention and the per-trajectory feature caches that
//! feed it.
//!
//! Queries always come from the frame being denoised. Keys and values are
//! computed with the same layer's projections from a concatenation of
//! source features, typically `[anchor, previous]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{decoder_layers, AttentionControl};
use crate::error::{Error, Result};

/// Projection matrices of one self-attention layer, stored `(out, in)`.
/// `scale` multiplies the logits before the softmax.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub scale: f64,
}

fn project(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    // one flat GEMM; the batched broadcast form is several times slower on CPU
    let (b, n, c) = x.dims3()?;
    x.contiguous()?.reshape((b * n, c))?.matmul(&w.t()?)?.reshape((b, n, ()))
}

/// `softmax(Q K^T) V` with `Q = W_Q f_cur` and `K, V` projected from the
/// token-wise concatenation of `kv_sources`. All inputs are `(B, N, C)`;
/// sources may differ in token count but must match batch and channels.
pub fn cross_frame_attention(f_cur: &Tensor, kv_sources: &[Tensor], weights: &AttentionWeights) -> Result<Tensor> {
    Ok(cross_frame_attention_with_probs(f_cur, kv_sources, weights)?.0)
}

/// Like [`cross_frame_attention`] but also returns the `(B, N, sum N_i)`
/// attention matrix.
pub fn cross_frame_attention_with_probs(
    f_cur: &Tensor,
    kv_sources: &[Tensor],
    weights: &AttentionWeights,
) -> Result<(Tensor, Tensor)> {
    if kv_sources.is_empty() {
        return Err(Error::param("cross-frame attention needs at least one key/value source"));
    }
    let (b, _, c) = f_cur.dims3()?;
    for (i, s) in kv_sources.iter().enumerate() {
        let (sb, _, sc) = s.dims3()?;
        if sb != b || sc != c {
            return Err(Error::shape(format!(
                "key/value source {i} is {:?}, current features are {:?}",
                s.dims(),
                f_cur.dims()
            )));
        }
    }
    let kv = if kv_sources.len() == 1 {
        kv_sources[0].clone()
    } else {
        Tensor::cat(kv_sources, 1)?
    };
    let kv = kv.to_dtype(f_cur.dtype())?;
    let q = project(f_cur, &weights.w_q)?;
    let k = project(&kv, &weights.w_k)?;
    let v = project(&kv, &weights.w_v)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * weights.scale)?;
    let probs = crate::ops::softmax_last_dim(&scores)?;
    let out = probs.matmul(&v)?;
    Ok((out, probs))
}

/// Self-attention inputs recorded along one frame's denoising trajectory,
/// keyed by `(timestep, layer)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    frame_index: usize,
    entries: BTreeMap<(usize, usize), Tensor>,
    layer_dims: BTreeMap<usize, Vec<usize>>,
}

impl FeatureCache {
    pub fn new(frame_index: usize) -> Self {
        Self {
            frame_index,
            ..Default::default()
        }
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    /// Stores `features` for `(t, layer)`. A repeated key is a state error.
    pub fn record(&mut self, t: usize, layer: usize, features: Tensor) -> Result<()> {
        if self.entries.contains_key(&(t, layer)) {
            return Err(Error::state(format!(
                "frame {} already has features for timestep {t}, layer {layer}",
                self.frame_index
            )));
        }
        match self.layer_dims.get(&layer) {
            Some(dims) if dims.as_slice() != features.dims() => {
                return Err(Error::shape(format!(
                    "layer {layer} features {:?} differ from earlier {:?}",
                    features.dims(),
                    dims
                )));
            }
            Some(_) => {}
            None => {
                self.layer_dims.insert(layer, features.dims().to_vec());
            }
        }
        self.entries.insert((t, layer), features);
        Ok(())
    }

    pub fn get(&self, t: usize, layer: usize) -> Option<&Tensor> {
        self.entries.get(&(t, layer))
    }

    fn require(&self, t: usize, layer: usize) -> Result<&Tensor> {
        self.get(t, layer).ok_or_else(|| {
            Error::state(format!(
                "frame {} has no cached features for timestep {t}, layer {layer}",
                self.frame_index
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.layer_dims.keys().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    None,
    AnchorOnly,
    PrevOnly,
    AnchorPlusPrev,
    AnchorPlusRandomPrev,
}

impl InjectionMode {
    pub const ALL: [InjectionMode; 5] = [
        InjectionMode::None,
        InjectionMode::AnchorOnly,
        InjectionMode::PrevOnly,
        InjectionMode::AnchorPlusPrev,
        InjectionMode::AnchorPlusRandomPrev,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            InjectionMode::None => "none",
            InjectionMode::AnchorOnly => "anchor_only",
            InjectionMode::PrevOnly => "prev_only",
            InjectionMode::AnchorPlusPrev => "anchor_plus_prev",
            InjectionMode::AnchorPlusRandomPrev => "anchor_plus_random_prev",
        }
    }

    pub fn uses_anchor(&self) -> bool {
        matches!(
            self,
            InjectionMode::AnchorOnly | InjectionMode::AnchorPlusPrev | InjectionMode::AnchorPlusRandomPrev
        )
    }

    pub fn uses_prev(&self) -> bool {
        matches!(
            self,
            InjectionMode::PrevOnly | InjectionMode::AnchorPlusPrev | InjectionMode::AnchorPlusRandomPrev
        )
    }
}

impl fmt::Display for InjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown injection mode {s:?}")))
    }
}

/// Which earlier frames feed each frame's self-attention, and at which layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPolicy {
    pub mode: InjectionMode,
    /// 1-based frame index of the anchor.
    pub anchor_index: usize,
    pub layers: BTreeSet<usize>,
}

impl Default for InjectionPolicy {
    fn default() -> Self {
        Self {
            mode: InjectionMode::AnchorPlusPrev,
            anchor_index: 1,
            layers: decoder_layers(),
        }
    }
}

impl InjectionPolicy {
    pub fn none() -> Self {
        Self {
            mode: InjectionMode::None,
            ..Self::default()
        }
    }

    pub fn with_mode(mode: InjectionMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_index == 0 {
            return Err(Error::param("anchor_index is 1-based and must be >= 1"));
        }
        if self.mode != InjectionMode::None {
            if self.layers.is_empty() {
                return Err(Error::param("injection policy lists no layers"));
            }
            for &l in &self.layers {
                crate::denoiser::check_block(l)?;
            }
        }
        Ok(())
    }

    /// Layers whose features must be cached for this policy.
    pub fn cached_layers(&self) -> BTreeSet<usize> {
        if self.mode == InjectionMode::None {
            BTreeSet::new()
        } else {
            self.layers.clone()
        }
    }
}

/// Builds the attention control for one denoising step of `frame`.
///
/// The anchor frame (and every frame under mode `none`) gets a plain
/// control that captures the policy layers. Other frames inject
/// `[anchor, prev]` features (or the single source their mode uses) and
/// also capture their own features so they can serve as the next frame's
/// `prev`.
pub fn build_control(
    policy: &InjectionPolicy,
    frame: usize,
    anchor: Option<&FeatureCache>,
    prev: Option<&FeatureCache>,
    t: usize,
) -> Result<AttentionControl> {
    if policy.mode == InjectionMode::None {
        return Ok(AttentionControl::vanilla());
    }
    if frame == policy.anchor_index {
        return Ok(AttentionControl::capture(policy.layers.iter().copied()));
    }
    let anchor = if policy.mode.uses_anchor() {
        Some(anchor.ok_or_else(|| Error::state(format!("frame {frame} needs the anchor cache")))?)
    } else {
        None
    };
    let prev = if policy.mode.uses_prev() {
        Some(prev.ok_or_else(|| Error::state(format!("frame {frame} needs a previous-frame cache")))?)
    } else {
        None
    };
    let mut injected = BTreeMap::new();
    for &l in &policy.layers {
        let mut sources = Vec::with_capacity(2);
        if let Some(a) = anchor {
            sources.push(a.require(t, l)?.clone());
        }
        if let Some(p) = prev {
            sources.push(p.require(t, l)?.clone());
        }
        injected.insert(l, sources);
    }
    Ok(AttentionControl::inject(injected).with_capture(policy.layers.iter().copied()))
}

/// Uniformly draws one of the `candidates` (already-edited frame indices).
pub fn choose_random_prev<R: Rng + ?Sized>(rng: &mut R, candidates: &[usize]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::state("no earlier frame to draw a random previous cache from"));
    }
    Ok(candidates[rng.random_range(0..candidates.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2;
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn weights(rng: &mut ChaCha8Rng, c: usize) -> AttentionWeights {
        let m = |rng: &mut ChaCha8Rng| randn(rng, (1, c, c)).squeeze(0).unwrap();
        AttentionWeights {
            w_q: m(rng),
            w_k: m(rng),
            w_v: m(rng),
            scale: 1.0 / (c as f64).sqrt(),
        }
    }

    fn to3(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_vec3::<f64>().unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Plain nested-loop attention, independent of the tensor implementation.
    fn scalar_attention(f: &[Vec<f64>], kv: &[Vec<f64>], w: &AttentionWeights) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let m = |t: &Tensor| t.to_vec2::<f64>().unwrap();
        let (wq, wk, wv) = (m(&w.w_q), m(&w.w_k), m(&w.w_v));
        let proj = |w: &Vec<Vec<f64>>, x: &Vec<f64>| -> Vec<f64> {
            w.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        };
        let mut outs = Vec::new();
        let mut probs = Vec::new();
        for x in f {
            let q = proj(&wq, x);
            let logits: Vec<f64> = kv
                .iter()
                .map(|s| q.iter().zip(proj(&wk, s)).map(|(a, b)| a * b).sum::<f64>() * w.scale)
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            let p: Vec<f64> = ex.iter().map(|e| e / z).collect();
            let mut o = vec![0.0; q.len()];
            for (pj, s) in p.iter().zip(kv) {
                for (oi, vi) in o.iter_mut().zip(proj(&wv, s)) {
                    *oi += pj * vi;
                }
            }
            outs.push(o);
            probs.push(p);
        }
        (outs, probs)
    }

    #[test]
    fn single_self_source_is_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = weights(&mut rng, 6);
        let f = randn(&mut rng, (1, 5, 6));
        let out = cross_frame_attention(&f, &[f.clone()], &w).unwrap();
        let (oracle, _) = scalar_attention(&to3(&f)[0], &to3(&f)[0], &w);
        for (r, o) in to3(&out)[0].iter().zip(&oracle) {
            for (a, b) in r.iter().zip(o) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn duplicated_source_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = weights(&mut rng, 4);
        let f = randn(&mut rng, (2, 6, 4));
        let one = cross_frame_attention(&f, &[f.clone()], &w).unwrap();
        let two = cross_frame_attention(&f, &[f.clone(), f.clone()], &w).unwrap();
        assert!(max_diff(&one, &two) < 1e-6);
    }

    #[test]
    fn two_sources_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = weights(&mut rng, 3);
        let f = randn(&mut rng, (1, 4, 3));
        let a = randn(&mut rng, (1, 4, 3));
        let b = randn(&mut rng, (1, 2, 3));
        let (out, probs) = cross_frame_attention_with_probs(&f, &[a.clone(), b.clone()], &w).unwrap();
        assert_eq!(probs.dims(), &[1, 4, 6]);
        let kv: Vec<Vec<f64>> = to3(&a)[0].iter().chain(to3(&b)[0].iter()).cloned().collect();
        let (oracle_out, oracle_p) = scalar_attention(&to3(&f)[0], &kv, &w);
        for (r, o) in to3(&out)[0].iter().zip(&oracle_out) {
            for (x, y) in r.iter().zip(o) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        for (r, o) in to3(&probs)[0].iter().zip(&oracle_p) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (x, y) in r.iter().zip(o) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn source_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(&mut rng, 5);
        let f = randn(&mut rng, (1, 7, 5));
        let a = randn(&mut rng, (1, 7, 5));
        let b = randn(&mut rng, (1, 3, 5));
        let ab = cross_frame_attention(&f, &[a.clone(), b.clone()], &w).unwrap();
        let ba = cross_frame_attention(&f, &[b, a], &w).unwrap();
        assert!(max_diff(&ab, &ba) < 1e-12);
    }

    #[test]
    fn attention_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = weights(&mut rng, 4);
        let f = randn(&mut rng, (1, 3, 4));
        assert!(matches!(cross_frame_attention(&f, &[], &w), Err(Error::Parameter(_))));
        let bad = Tensor::zeros((1, 3, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cross_frame_attention(&f, &[bad], &w), Err(Error::Shape(_))));
        let bad_batch = Tensor::zeros((2, 3, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(cross_frame_attention(&f, &[bad_batch], &w), Err(Error::Shape(_))));
    }

    fn feat() -> Tensor {
        Tensor::zeros((1, 4, 2), DType::F32, &Device::Cpu).unwrap()
    }

    #[test]
    fn cache_record_and_duplicates() {
        let mut c = FeatureCache::new(1);
        c.record(10, 8, feat()).unwrap();
        assert_eq!(c.len(), 1);
        assert!(matches!(c.record(10, 8, feat()), Err(Error::State(_))));
        let other = Tensor::zeros((1, 5, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(c.record(20, 8, other), Err(Error::Shape(_))));
    }

    fn full_cache(frame: usize, steps: &[usize], layers: &BTreeSet<usize>) -> FeatureCache {
        let mut c = FeatureCache::new(frame);
        for &t in steps {
            for &l in layers {
                c.record(t, l, feat()).unwrap();
            }
        }
        c
    }

    #[test]
    fn control_per_mode() {
        let layers = decoder_layers();
        let anchor = full_cache(1, &[10], &layers);
        let prev = full_cache(2, &[10], &layers);

        let none = build_control(&InjectionPolicy::none(), 3, None, None, 10).unwrap();
        assert_eq!(none.mode(), crate::denoiser::ControlMode::Vanilla);

        let p = InjectionPolicy::default();
        let first = build_control(&p, 1, None, None, 10).unwrap();
        assert_eq!(first.mode(), crate::denoiser::ControlMode::Capture);
        assert_eq!(first.capture_layers(), &layers);

        let both = build_control(&p, 3, Some(&anchor), Some(&prev), 10).unwrap();
        assert_eq!(both.mode(), crate::denoiser::ControlMode::Inject);
        for l in &layers {
            assert_eq!(both.injected_features(*l).unwrap().len(), 2);
        }
        assert_eq!(both.capture_layers(), &layers);

        for mode in [InjectionMode::AnchorOnly, InjectionMode::PrevOnly] {
            let c = build_control(&InjectionPolicy::with_mode(mode), 3, Some(&anchor), Some(&prev), 10).unwrap();
            assert!(layers.iter().all(|l| c.injected_features(*l).unwrap().len() == 1));
        }

        assert!(matches!(build_control(&p, 3, Some(&anchor), None, 10), Err(Error::State(_))));
        assert!(matches!(build_control(&p, 3, Some(&anchor), Some(&prev), 30), Err(Error::State(_))));
    }

    #[test]
    fn random_previous_census() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let candidates = [1, 2, 3, 4];
        let mut counts = [0usize; 5];
        for _ in 0..1000 {
            counts[choose_random_prev(&mut rng, &candidates).unwrap()] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            assert!((200..=300).contains(c), "{counts:?}");
        }
        assert!(choose_random_prev(&mut rng, &[]).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in InjectionMode::ALL {
            assert_eq!(m.as_str().parse::<InjectionMode>().unwrap(), m);
        }
        assert!("sideways".parse::<InjectionMode>().is_err());
    }
}

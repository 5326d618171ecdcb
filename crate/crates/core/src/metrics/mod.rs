//! Temporal-coherency and faithfulness metrics for edited clips.
//!
//! * Pixel-MSE: flow-warp each frame onto its successor and average the
//!   masked squared error (0-255 pixel scale).
//! * Frame similarity: mean cosine similarity of consecutive frame
//!   embeddings under a pluggable [`EmbeddingBackend`].
//! * Prompt fidelity: per-frame attribute accuracy of a small classifier
//!   (see [`classifier`]).

pub mod classifier;
mod flow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use classifier::{prompt_attributes, prompt_fidelity, AttributeClassifier, PromptAttributes};
pub use flow::{block_matching_flow, consistency_mask, estimate_flow_masked};

/// Per-pixel displacement onto the grid of the *target* frame: the content
/// at target pixel `q` came from `q - flow(q)` in the source frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// `(dx, dy)` pairs, row-major.
    vectors: Vec<[f32; 2]>,
    mask: Option<Vec<bool>>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            vectors: vec![[0.0; 2]; height * width],
            mask: None,
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f32, dy: f32) -> Self {
        Self {
            height,
            width,
            vectors: vec![[dx, dy]; height * width],
            mask: None,
        }
    }

    pub fn new(height: usize, width: usize, vectors: Vec<[f32; 2]>, mask: Option<Vec<bool>>) -> Result<Self> {
        if vectors.len() != height * width || mask.as_ref().is_some_and(|m| m.len() != height * width) {
            return Err(Error::shape(format!("flow buffers do not match {height}x{width}")));
        }
        Ok(Self {
            height,
            width,
            vectors,
            mask,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[y * self.width + x])
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.height * self.width {
            return Err(Error::shape("flow mask size mismatch"));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

/// A warped image and the pixels whose samples fell inside the source.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: Image,
    pub valid: Vec<bool>,
}

/// Backward warp with bilinear sampling: `out(q) = frame(q - flow(q))`.
/// Pixels sampling outside the frame, or masked out by the flow, are invalid.
pub fn warp(frame: &Image, flow: &FlowField) -> Result<Warped> {
    let (h, w, c) = (frame.height(), frame.width(), frame.channels());
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(format!(
            "flow {}x{} vs frame {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let mut out = Image::filled(c, h, w, 0.0);
    let mut valid = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let [dx, dy] = flow.at(y, x);
            let sx = x as f32 - dx;
            let sy = y as f32 - dy;
            if !flow.is_valid(y, x) || sx < 0.0 || sy < 0.0 || sx > (w - 1) as f32 || sy > (h - 1) as f32 {
                continue;
            }
            valid[y * w + x] = true;
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            for ch in 0..c {
                // exact at integer offsets: zero-weight taps are skipped
                let mut v = frame.get(ch, y0, x0) * (1.0 - fx) * (1.0 - fy);
                if fx > 0.0 {
                    v += frame.get(ch, y0, x1) * fx * (1.0 - fy);
                }
                if fy > 0.0 {
                    v += frame.get(ch, y1, x0) * (1.0 - fx) * fy;
                    if fx > 0.0 {
                        v += frame.get(ch, y1, x1) * fx * fy;
                    }
                }
                out.set(ch, y, x, v);
            }
        }
    }
    Ok(Warped { image: out, valid })
}

/// Mean squared error over the valid pixels, in the scale of the inputs.
pub fn masked_mse(a: &Image, b: &Image, valid: &[bool]) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.height() * a.width();
    if valid.len() != n {
        return Err(Error::shape("mask size mismatch"));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        for i in 0..n {
            if valid[i] {
                let d = pa[i] as f64 - pb[i] as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Flow-warped temporal error on the 0-255 pixel scale, averaged over the
/// `n - 1` consecutive pairs. `flows[i]` maps frame `i` onto frame `i + 1`.
pub fn pixel_mse(frames: &[Image], flows: &[FlowField]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::param("pixel_mse needs at least two frames"));
    }
    if flows.len() + 1 != frames.len() {
        return Err(Error::param(format!(
            "{} frames need {} flows, got {}",
            frames.len(),
            frames.len() - 1,
            flows.len()
        )));
    }
    let mut total = 0.0;
    for (i, flow) in flows.iter().enumerate() {
        let warped = warp(&frames[i], flow)?;
        total += masked_mse(&warped.image, &frames[i + 1], &warped.valid)? * 255.0 * 255.0;
    }
    Ok(total / flows.len() as f64)
}

/// Image (and optionally text) embedder producing unit vectors.
pub trait EmbeddingBackend {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &Image) -> Result<Vec<f32>>;
    fn embed_text(&self, _text: &str) -> Option<Result<Vec<f32>>> {
        None
    }
}

/// Grayscale, area-downsampled to `size x size`, mean-removed and
/// L2-normalized. A flat image embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyEmbedder {
    pub size: usize,
}

impl Default for ToyEmbedder {
    fn default() -> Self {
        Self { size: 8 }
    }
}

impl EmbeddingBackend for ToyEmbedder {
    fn name(&self) -> &str {
        "toy-downsample"
    }

    fn embed_image(&self, image: &Image) -> Result<Vec<f32>> {
        let g = image.grayscale().downsample(self.size, self.size)?;
        let v: Vec<f64> = g.data().iter().map(|&x| x as f64).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let centered: Vec<f64> = v.iter().map(|x| x - mean).collect();
        let norm = centered.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            return Ok(vec![0.0; v.len()]);
        }
        Ok(centered.iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Cosine similarity; two zero vectors count as identical.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    match (na < 1e-12, nb < 1e-12) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => (dot / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Mean cosine similarity between consecutive frame embeddings.
pub fn frame_similarity(frames: &[Image], backend: &dyn EmbeddingBackend) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::param("frame_similarity needs at least two frames"));
    }
    let emb = frames
        .iter()
        .map(|f| backend.embed_image(f))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = emb.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
    Ok(total / (emb.len() - 1) as f64)
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub clip_id: String,
    pub variant: String,
    /// Absent for single-frame clips.
    pub pixel_mse: Option<f64>,
    pub frame_similarity: Option<f64>,
    /// Absent when no attribute classifier was supplied.
    pub prompt_fidelity: Option<f64>,
    pub n_frames: usize,
    /// `[width, height]`.
    pub resolution: [usize; 2],
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn shift(img: &Image, dx: isize, dy: isize) -> Image {
        let mut out = Image::filled(img.channels(), img.height(), img.width(), 0.0);
        for c in 0..img.channels() {
            for y in 0..img.height() as isize {
                for x in 0..img.width() as isize {
                    let (sx, sy) = (x - dx, y - dy);
                    if sx >= 0 && sy >= 0 && sx < img.width() as isize && sy < img.height() as isize {
                        out.set(c, y as usize, x as usize, img.get(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = random_image(1, 3, 9, 11);
        let w = warp(&img, &FlowField::zeros(9, 11)).unwrap();
        assert_eq!(w.image, img);
        assert!(w.valid.iter().all(|v| *v));
    }

    #[test]
    fn integer_translation_is_exact() {
        let img = random_image(2, 3, 10, 12);
        let target = shift(&img, 2, 0);
        let w = warp(&img, &FlowField::uniform(10, 12, 2.0, 0.0)).unwrap();
        for y in 0..10 {
            for x in 0..12 {
                assert_eq!(w.valid[y * 12 + x], x >= 2);
                if x >= 2 {
                    for c in 0..3 {
                        assert_eq!(w.image.get(c, y, x), target.get(c, y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn fractional_warp_interpolates() {
        let img = Image::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let w = warp(&img, &FlowField::uniform(1, 3, 0.5, 0.0)).unwrap();
        assert!((w.image.get(0, 0, 1) - 0.5).abs() < 1e-6);
        assert!(!w.valid[0]);
    }

    #[test]
    fn warp_shape_mismatch() {
        let img = random_image(3, 3, 4, 4);
        assert!(matches!(warp(&img, &FlowField::zeros(4, 5)), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_mse_cases() {
        let img = random_image(4, 3, 8, 8);
        let flows = vec![FlowField::zeros(8, 8); 2];
        assert_eq!(pixel_mse(&[img.clone(), img.clone(), img.clone()], &flows).unwrap(), 0.0);

        let base = Image::filled(3, 8, 8, 100.0 / 255.0);
        let plus_one = Image::filled(3, 8, 8, 101.0 / 255.0);
        let v = pixel_mse(&[base, plus_one], &flows[..1]).unwrap();
        assert!((v - 1.0).abs() < 1e-6, "{v}");

        assert!(matches!(pixel_mse(&[img.clone(), img.clone()], &flows), Err(Error::Parameter(_))));
    }

    #[test]
    fn similarity_cases() {
        let e = ToyEmbedder::default();
        let img = random_image(5, 3, 16, 16);
        assert!((frame_similarity(&[img.clone(), img.clone()], &e).unwrap() - 1.0).abs() < 1e-9);
        let neg = img.map(|v| 1.0 - v);
        assert!((frame_similarity(&[img.clone(), neg], &e).unwrap() + 1.0).abs() < 1e-6);
        assert!(frame_similarity(&[img], &e).is_err());
    }

    #[test]
    fn toy_embedding_is_unit_norm_and_affine_invariant() {
        let e = ToyEmbedder::default();
        let img = random_image(6, 3, 16, 16);
        let a = e.embed_image(&img).unwrap();
        let norm: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let scaled = img.map(|v| 0.5 * v + 0.2);
        let b = e.embed_image(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn flat_frames_are_similar() {
        let e = ToyEmbedder::default();
        let flat = Image::filled(3, 16, 16, 0.4);
        assert_eq!(frame_similarity(&[flat.clone(), flat], &e).unwrap(), 1.0);
    }
}

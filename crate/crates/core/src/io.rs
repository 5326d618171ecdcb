//! On-disk formats: binary float arrays, clip directories, persisted
//! inverted latents and the TOML run configuration.
//!
//! Binary array layout (all integers little-endian):
//!
//! ```text
//! bytes 0..8     magic  b"CEARRAY1"
//! bytes 8..16    u64    header length N
//! bytes 16..16+N UTF-8 JSON {"shape": [d0, d1, ...], "dtype": "f32"}
//! rest           f32 values, row-major, exactly prod(shape) of them
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clip::VideoClip;
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::FlowField;
use crate::pipeline::EditConfig;
use crate::schedule::{DiffusionSchedule, LatentFrame, ScheduleConfig};

pub const ARRAY_MAGIC: &[u8; 8] = b"CEARRAY1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    shape: Vec<usize>,
    dtype: String,
}

/// A row-major f32 array with its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} holds {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&ArrayHeader {
            shape: self.shape.clone(),
            dtype: "f32".into(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(ARRAY_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != ARRAY_MAGIC {
            return Err(bad("missing array magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().map_err(|_| bad("truncated header length"))?) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&b| b <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: ArrayHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::format(path, e.to_string()))?;
        if header.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {:?}", header.dtype)));
        }
        let n: usize = header.shape.iter().product();
        let raw = &bytes[body..];
        if raw.len() != 4 * n {
            return Err(bad(&format!("expected {} data bytes, found {}", 4 * n, raw.len())));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            shape: header.shape,
            data,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(fs::write(path, self.to_bytes()?)?)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(
            t.dims().to_vec(),
            t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        )
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipMeta {
    /// `[width, height]`.
    pub resolution: [usize; 2],
    pub n_frames: usize,
    pub source_prompt: String,
    pub fps: f32,
    pub seed: Option<u64>,
}

fn numbered(dir: &Path, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{i:05}.{ext}"))
}

pub fn write_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    if image.channels() != 3 {
        return Err(Error::shape("png frames must be RGB"));
    }
    let (h, w) = (image.height(), image.width());
    let mut buf = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::shape("frame buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::filled(3, h, w, 0.0);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
        }
    }
    Ok(out)
}

/// The frames/depth/flow/meta.json layout.
pub struct ClipDirectory;

impl ClipDirectory {
    pub fn write(dir: impl AsRef<Path>, clip: &VideoClip, seed: Option<u64>) -> Result<()> {
        clip.validate()?;
        let dir = dir.as_ref();
        let (_, h, w) = clip.resolution().ok_or_else(|| Error::param("empty clip"))?;
        let frames = dir.join("frames");
        let depth = dir.join("depth");
        fs::create_dir_all(&frames)?;
        fs::create_dir_all(&depth)?;
        for (i, (f, d)) in clip.frames.iter().zip(&clip.depths).enumerate() {
            write_png(f, numbered(&frames, i, "png"))?;
            Array::new(vec![h, w], d.data().to_vec())?.write(numbered(&depth, i, "bin"))?;
        }
        if let Some(flows) = &clip.flows {
            let flow_dir = dir.join("flow");
            fs::create_dir_all(&flow_dir)?;
            for (i, fl) in flows.iter().enumerate() {
                let v: Vec<f32> = fl.vectors().iter().flat_map(|p| *p).collect();
                Array::new(vec![h, w, 2], v)?.write(numbered(&flow_dir, i, "bin"))?;
                if let Some(m) = fl.mask() {
                    let m: Vec<f32> = m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                    Array::new(vec![h, w], m)?.write(flow_dir.join(format!("{i:05}_mask.bin")))?;
                }
            }
        }
        let meta = ClipMeta {
            resolution: [w, h],
            n_frames: clip.len(),
            source_prompt: clip.source_prompt.clone(),
            fps: clip.fps,
            seed,
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    pub fn read_meta(dir: impl AsRef<Path>) -> Result<ClipMeta> {
        let path = dir.as_ref().join("meta.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    /// Reads a clip; a missing depth map is a configuration error.
    pub fn read(dir: impl AsRef<Path>) -> Result<VideoClip> {
        let dir = dir.as_ref();
        let meta = Self::read_meta(dir)?;
        let [w, h] = meta.resolution;
        let mut frames = Vec::with_capacity(meta.n_frames);
        let mut depths = Vec::with_capacity(meta.n_frames);
        for i in 0..meta.n_frames {
            let fp = numbered(&dir.join("frames"), i, "png");
            let f = read_png(&fp)?;
            if f.width() != w || f.height() != h {
                return Err(Error::format(&fp, format!("frame is {}x{}, meta says {w}x{h}", f.width(), f.height())));
            }
            frames.push(f);
            let dp = numbered(&dir.join("depth"), i, "bin");
            if !dp.exists() {
                return Err(Error::Config(format!(
                    "depth map {} is missing; the denoiser is depth-conditioned",
                    dp.display()
                )));
            }
            let a = Array::read(&dp)?;
            if a.shape != [h, w] {
                return Err(Error::format(&dp, format!("depth shape {:?}, expected [{h}, {w}]", a.shape)));
            }
            depths.push(Image::new(1, h, w, a.data)?);
        }
        let flow_dir = dir.join("flow");
        let flows = if flow_dir.is_dir() && meta.n_frames > 1 {
            let mut flows = Vec::with_capacity(meta.n_frames - 1);
            for i in 0..meta.n_frames - 1 {
                let fp = numbered(&flow_dir, i, "bin");
                let a = Array::read(&fp)?;
                if a.shape != [h, w, 2] {
                    return Err(Error::format(&fp, format!("flow shape {:?}, expected [{h}, {w}, 2]", a.shape)));
                }
                let vectors = a.data.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
                let mp = flow_dir.join(format!("{i:05}_mask.bin"));
                let mask = if mp.exists() {
                    let m = Array::read(&mp)?;
                    if m.shape != [h, w] {
                        return Err(Error::format(&mp, "mask shape mismatch"));
                    }
                    Some(m.data.iter().map(|v| *v > 0.5).collect())
                } else {
                    None
                };
                flows.push(FlowField::new(h, w, vectors, mask)?);
            }
            Some(flows)
        } else {
            None
        };
        let clip = VideoClip {
            frames,
            depths,
            flows,
            source_prompt: meta.source_prompt,
            fps: meta.fps,
        };
        clip.validate()?;
        Ok(clip)
    }
}

fn sha_hex(parts: impl IntoIterator<Item = Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(h.finalize())
}

/// Hash of frames, depth maps and source prompt.
pub fn clip_hash(clip: &VideoClip) -> String {
    let floats = |d: &[f32]| d.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<u8>>();
    let mut parts = vec![clip.source_prompt.as_bytes().to_vec()];
    for (f, d) in clip.frames.iter().zip(&clip.depths) {
        parts.push(floats(f.data()));
        parts.push(floats(d.data()));
    }
    sha_hex(parts)
}

/// Hash of the schedule and every inversion setting.
pub fn inversion_hash(sched: &DiffusionSchedule, edit: &EditConfig) -> Result<String> {
    let table: Vec<u8> = sched.alpha_bar_table().iter().flat_map(|v| v.to_le_bytes()).collect();
    let steps: Vec<u8> = sched.timesteps().iter().flat_map(|t| (*t as u64).to_le_bytes()).collect();
    Ok(sha_hex([
        table,
        steps,
        edit.invert_cfg_scale.to_le_bytes().to_vec(),
        (edit.invert_refine_iters as u64).to_le_bytes().to_vec(),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentKey {
    pub clip: String,
    pub weights: String,
    pub schedule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LatentSidecar {
    key: LatentKey,
    n_frames: usize,
    shape: Vec<usize>,
    schedule: Option<ScheduleConfig>,
    timestep: Option<usize>,
}

/// Inverted latents as `NNNNN.bin` arrays plus a `latents.json` sidecar.
pub struct LatentStore;

impl LatentStore {
    pub fn write(dir: impl AsRef<Path>, latents: &[LatentFrame], key: &LatentKey, sched: &DiffusionSchedule) -> Result<()> {
        let dir = dir.as_ref();
        let first = latents.first().ok_or_else(|| Error::param("no latents to store"))?;
        fs::create_dir_all(dir)?;
        for (i, l) in latents.iter().enumerate() {
            Array::from_tensor(&l.data)?.write(numbered(dir, i, "bin"))?;
        }
        let side = LatentSidecar {
            key: key.clone(),
            n_frames: latents.len(),
            shape: first.data.dims().to_vec(),
            schedule: sched.config().cloned(),
            timestep: first.timestep,
        };
        fs::write(dir.join("latents.json"), serde_json::to_string_pretty(&side)? + "\n")?;
        Ok(())
    }

    pub fn read_key(dir: impl AsRef<Path>) -> Result<LatentKey> {
        let path = dir.as_ref().join("latents.json");
        let side: LatentSidecar = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        Ok(side.key)
    }

    /// Loads latents; with `expect`, a key mismatch is a configuration error.
    pub fn read(dir: impl AsRef<Path>, expect: Option<&LatentKey>, device: &Device) -> Result<Vec<LatentFrame>> {
        let dir = dir.as_ref();
        let path = dir.join("latents.json");
        let side: LatentSidecar = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(|e| Error::format(&path, e.to_string()))?;
        if let Some(k) = expect {
            if k != &side.key {
                return Err(Error::Config(format!(
                    "latents in {} were computed for a different clip, weights or schedule",
                    dir.display()
                )));
            }
        }
        (0..side.n_frames)
            .map(|i| {
                let p = numbered(dir, i, "bin");
                let a = Array::read(&p)?;
                if a.shape != side.shape {
                    return Err(Error::format(&p, "latent shape differs from sidecar"));
                }
                Ok(LatentFrame::new(a.to_tensor(device)?, i, side.timestep))
            })
            .collect()
    }

    /// Returns cached latents if the key matches, otherwise computes and stores them.
    pub fn load_or_compute(
        dir: impl AsRef<Path>,
        key: &LatentKey,
        sched: &DiffusionSchedule,
        device: &Device,
        compute: impl FnOnce() -> Result<Vec<LatentFrame>>,
    ) -> Result<(Vec<LatentFrame>, bool)> {
        let dir = dir.as_ref();
        if dir.join("latents.json").exists() && Self::read_key(dir).ok().as_ref() == Some(key) {
            return Ok((Self::read(dir, Some(key), device)?, true));
        }
        let latents = compute()?;
        Self::write(dir, &latents, key, sched)?;
        Ok((latents, false))
    }
}

/// Everything a run needs, in one TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub edit: EditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: None,
            output_dir: None,
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            edit: EditConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every section; returns the built schedule.
    pub fn validate(&self) -> Result<DiffusionSchedule> {
        let sched = self.schedule.build().map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.denoiser.validate().map_err(|e| Error::Config(format!("denoiser: {e}")))?;
        if self.denoiser.noise != self.schedule.noise_levels() {
            return Err(Error::Config(
                "denoiser noise levels differ from the schedule's train steps and betas".into(),
            ));
        }
        self.edit
            .validate(&sched)
            .map_err(|e| Error::Config(format!("edit: {e}")))?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        Ok(sched)
    }
}

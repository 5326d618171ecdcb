//! Procedural toy clips: flat-colored shapes moving over a static textured
//! background, with exact depth, flow and captions.
//!
//! Shape centers are rounded to whole pixels every frame and edges are hard,
//! so backward-warping with the ground-truth flow reproduces the next frame
//! exactly on the valid mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::FlowField;
use crate::vocab::{self, BACKGROUNDS, SHAPE_COLORS, SHAPE_KINDS};

const BACKGROUND_ID: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Trajectory {
    /// `center(f) = start + f * velocity`.
    Linear { start: [f32; 2], velocity: [f32; 2] },
    /// `center(f) = center + radius * (cos, sin)(phase + f * angular_velocity)`.
    Circular {
        center: [f32; 2],
        radius: f32,
        phase: f32,
        angular_velocity: f32,
    },
}

impl Trajectory {
    pub fn stationary(at: [f32; 2]) -> Self {
        Trajectory::Linear {
            start: at,
            velocity: [0.0, 0.0],
        }
    }

    /// Continuous center `(x, y)` at frame `f`.
    pub fn position(&self, f: usize) -> [f32; 2] {
        let f = f as f32;
        match *self {
            Trajectory::Linear { start, velocity } => [start[0] + f * velocity[0], start[1] + f * velocity[1]],
            Trajectory::Circular {
                center,
                radius,
                phase,
                angular_velocity,
            } => {
                let a = phase + f * angular_velocity;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    /// Rendered (pixel-rounded) center at frame `f`.
    pub fn pixel_center(&self, f: usize) -> [i64; 2] {
        let p = self.position(f);
        [p[0].round() as i64, p[1].round() as i64]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: String,
    pub color: String,
    /// Radius (half extent) in pixels.
    pub size: f32,
    pub trajectory: Trajectory,
    /// Depth value of the shape, `[0, 1]`; smaller is nearer.
    pub depth: f32,
}

impl ShapeSpec {
    /// Whether the pixel at offset `(dx, dy)` from the center is covered.
    fn covers(&self, dx: i64, dy: i64) -> bool {
        let r = self.size;
        let (fx, fy) = (dx as f32, dy as f32);
        match self.kind.as_str() {
            "circle" => fx * fx + fy * fy <= r * r,
            "square" => {
                let h = (0.85 * r).round();
                fx.abs() <= h && fy.abs() <= h
            }
            // upward-pointing isosceles triangle
            _ => fy.abs() <= r && fx.abs() <= 0.5 * (fy + r) + 0.5,
        }
    }

    /// Integer half extent of the covered region.
    fn extent(&self) -> i64 {
        self.size.ceil() as i64 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    /// Background name from the toy vocabulary; selects the base color.
    pub name: String,
    /// Seed of the low-frequency texture.
    pub texture_seed: u64,
    /// Peak texture amplitude on the `[0, 1]` scale.
    pub amplitude: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_frames: usize,
    pub background: Background,
    /// Drawn far to near (by depth), ties in list order.
    pub shapes: Vec<ShapeSpec>,
    pub fps: f32,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::Spec(format!("resolution {}x{} too small", self.width, self.height)));
        }
        if self.n_frames == 0 {
            return Err(Error::Spec("n_frames must be positive".into()));
        }
        if vocab::background_color(&self.background.name).is_none() {
            return Err(Error::Spec(format!("unknown background {:?}", self.background.name)));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if vocab::color_index(&s.color).is_none() {
                return Err(Error::Spec(format!("shape {i}: unknown color {:?}", s.color)));
            }
            if vocab::shape_index(&s.kind).is_none() {
                return Err(Error::Spec(format!("shape {i}: unknown kind {:?}", s.kind)));
            }
            if !(s.size >= 1.0) {
                return Err(Error::Spec(format!("shape {i}: size must be at least 1 px")));
            }
            if !(0.0..=1.0).contains(&s.depth) {
                return Err(Error::Spec(format!("shape {i}: depth outside [0, 1]")));
            }
            let e = s.size.ceil() as i64;
            for f in 0..self.n_frames {
                let [cx, cy] = s.trajectory.pixel_center(f);
                if cx - e < 1 || cy - e < 1 || cx + e > self.width as i64 - 2 || cy + e > self.height as i64 - 2 {
                    return Err(Error::Spec(format!(
                        "shape {i} leaves the frame at frame {f} (center {cx},{cy})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `"<color> <shape> on <background>"` for the first shape.
    pub fn caption(&self) -> String {
        match self.shapes.first() {
            Some(s) => vocab::caption(&s.color, &s.kind, &self.background.name),
            None => self.background.name.clone(),
        }
    }

    fn draw_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.shapes.len()).collect();
        order.sort_by(|&a, &b| self.shapes[b].depth.total_cmp(&self.shapes[a].depth).then(a.cmp(&b)));
        order
    }
}

fn background_layers(spec: &SceneSpec) -> Result<(Image, Image)> {
    let (w, h) = (spec.width, spec.height);
    let base = vocab::background_color(&spec.background.name)
        .ok_or_else(|| Error::Spec(format!("unknown background {:?}", spec.background.name)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.background.texture_seed);
    // a few long-wavelength plane waves per channel
    let waves: Vec<[f32; 4]> = (0..4)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f32::consts::TAU);
            let freq = rng.random_range(1.0f32..3.0) * std::f32::consts::TAU / w.max(h) as f32;
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let gain = rng.random_range(0.6f32..1.0);
            [freq * angle.cos(), freq * angle.sin(), phase, gain]
        })
        .collect();
    let tint: [f32; 3] = [rng.random_range(0.7..1.0), rng.random_range(0.7..1.0), rng.random_range(0.7..1.0)];
    let amp = spec.background.amplitude / waves.len() as f32;
    let mut img = Image::filled(3, h, w, 0.0);
    let mut depth = Image::filled(1, h, w, 0.0);
    for y in 0..h {
        // ground plane: far at the top, nearer toward the bottom
        let d = 1.0 - 0.25 * y as f32 / (h - 1) as f32;
        for x in 0..w {
            let t: f32 = waves
                .iter()
                .map(|[kx, ky, p, g]| g * (kx * x as f32 + ky * y as f32 + p).sin())
                .sum::<f32>()
                * amp;
            for c in 0..3 {
                img.set(c, y, x, (base[c] + t * tint[c]).clamp(0.0, 1.0));
            }
            depth.set(0, y, x, d);
        }
    }
    Ok((img, depth))
}

struct Rendered {
    frame: Image,
    depth: Image,
    ids: Vec<usize>,
}

fn render(spec: &SceneSpec, bg: &(Image, Image), f: usize) -> Result<Rendered> {
    let (w, h) = (spec.width, spec.height);
    let mut frame = bg.0.clone();
    let mut depth = bg.1.clone();
    let mut ids = vec![BACKGROUND_ID; w * h];
    for i in spec.draw_order() {
        let s = &spec.shapes[i];
        let color = vocab::SHAPE_COLORS[vocab::color_index(&s.color)
            .ok_or_else(|| Error::Spec(format!("unknown color {:?}", s.color)))?]
        .1;
        let [cx, cy] = s.trajectory.pixel_center(f);
        let e = s.extent();
        for dy in -e..=e {
            for dx in -e..=e {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !s.covers(dx, dy) {
                    continue;
                }
                let (x, y) = (x as usize, y as usize);
                for (c, v) in color.iter().enumerate() {
                    frame.set(c, y, x, *v);
                }
                depth.set(0, y, x, s.depth);
                ids[y * w + x] = i;
            }
        }
    }
    Ok(Rendered { frame, depth, ids })
}

/// Ground-truth flow from `a` (frame `f`) to `b` (frame `f + 1`) on `b`'s
/// grid. Pixels whose source is covered by a different layer are masked.
fn exact_flow(spec: &SceneSpec, a: &Rendered, b: &Rendered, f: usize) -> Result<FlowField> {
    let (w, h) = (spec.width, spec.height);
    let disp: Vec<[i64; 2]> = spec
        .shapes
        .iter()
        .map(|s| {
            let (p, q) = (s.trajectory.pixel_center(f), s.trajectory.pixel_center(f + 1));
            [q[0] - p[0], q[1] - p[1]]
        })
        .collect();
    let mut vectors = vec![[0.0f32; 2]; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let id = b.ids[y * w + x];
            let d = if id == BACKGROUND_ID { [0, 0] } else { disp[id] };
            let (sx, sy) = (x as i64 - d[0], y as i64 - d[1]);
            vectors[y * w + x] = [d[0] as f32, d[1] as f32];
            if sx >= 0 && sy >= 0 && sx < w as i64 && sy < h as i64 {
                mask[y * w + x] = a.ids[sy as usize * w + sx as usize] == id;
            }
        }
    }
    FlowField::new(h, w, vectors, Some(mask))
}

/// Renders a clip with frames, depth, exact flow and its caption.
pub fn generate_clip(spec: &SceneSpec) -> Result<VideoClip> {
    spec.validate()?;
    let bg = background_layers(spec)?;
    let rendered = (0..spec.n_frames)
        .map(|f| render(spec, &bg, f))
        .collect::<Result<Vec<_>>>()?;
    let flows = (0..spec.n_frames.saturating_sub(1))
        .map(|f| exact_flow(spec, &rendered[f], &rendered[f + 1], f))
        .collect::<Result<Vec<_>>>()?;
    let (frames, depths) = rendered.into_iter().map(|r| (r.frame, r.depth)).unzip();
    Ok(VideoClip {
        frames,
        depths,
        flows: Some(flows),
        source_prompt: spec.caption(),
        fps: spec.fps,
    })
}

/// One training triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub caption: String,
    pub depth: Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub resolution: usize,
    pub frames_per_clip: usize,
    /// Shape radius range in pixels.
    pub min_size: f32,
    pub max_size: f32,
    pub max_speed: f32,
    /// Fraction of clips that follow a circular path.
    pub circular_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            frames_per_clip: 2,
            min_size: 7.0,
            max_size: 13.0,
            max_speed: 4.0,
            circular_fraction: 0.3,
        }
    }
}

/// A random single-shape scene with fixed color, kind and background.
pub fn random_scene(
    rng: &mut impl Rng,
    config: &CorpusConfig,
    color: &str,
    kind: &str,
    background: &str,
    seed: u64,
) -> Result<SceneSpec> {
    let res = config.resolution as f32;
    let n = config.frames_per_clip;
    for _ in 0..1000 {
        let size = rng.random_range(config.min_size..=config.max_size);
        let margin = size + 2.0;
        let trajectory = if rng.random_bool(config.circular_fraction) {
            let radius = rng.random_range(3.0..res / 2.0 - margin).max(3.0);
            Trajectory::Circular {
                center: [res / 2.0, res / 2.0],
                radius,
                phase: rng.random_range(0.0..std::f32::consts::TAU),
                angular_velocity: rng.random_range(-0.45f32..0.45),
            }
        } else {
            let speed = config.max_speed;
            Trajectory::Linear {
                start: [rng.random_range(margin..res - margin), rng.random_range(margin..res - margin)],
                velocity: [rng.random_range(-speed..=speed), rng.random_range(-speed..=speed)],
            }
        };
        let spec = SceneSpec {
            width: config.resolution,
            height: config.resolution,
            n_frames: n,
            background: Background {
                name: background.to_string(),
                texture_seed: rng.random(),
                amplitude: rng.random_range(0.04..0.12),
            },
            shapes: vec![ShapeSpec {
                kind: kind.to_string(),
                color: color.to_string(),
                size,
                trajectory,
                depth: rng.random_range(0.2..0.45),
            }],
            fps: 8.0,
            seed,
        };
        if spec.validate().is_ok() {
            return Ok(spec);
        }
    }
    Err(Error::Spec("could not place a shape inside the frame".into()))
}

/// Clips over the vocabulary grid. Colors and kinds cycle through a seeded
/// permutation so every (color, kind) pair appears equally often up to one.
pub fn generate_corpus_clips(n_clips: usize, seed: u64, config: &CorpusConfig) -> Result<Vec<VideoClip>> {
    if n_clips == 0 {
        return Err(Error::param("n_clips must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = SHAPE_COLORS.len() * SHAPE_KINDS.len();
    let mut order: Vec<usize> = Vec::new();
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        if i % pairs == 0 {
            order = (0..pairs).collect();
            for k in (1..pairs).rev() {
                order.swap(k, rng.random_range(0..=k));
            }
        }
        let p = order[i % pairs];
        let color = SHAPE_COLORS[p % SHAPE_COLORS.len()].0;
        let kind = SHAPE_KINDS[p / SHAPE_COLORS.len()];
        let background = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())].0;
        let spec = random_scene(&mut rng, config, color, kind, background, seed.wrapping_add(i as u64))?;
        clips.push(generate_clip(&spec)?);
    }
    Ok(clips)
}

/// Flattens clips into `(image, caption, depth)` triples.
pub fn clips_to_samples(clips: &[VideoClip]) -> Vec<Sample> {
    clips
        .iter()
        .flat_map(|c| {
            c.frames.iter().zip(&c.depths).map(|(f, d)| Sample {
                image: f.clone(),
                caption: c.source_prompt.clone(),
                depth: d.clone(),
            })
        })
        .collect()
}

pub fn generate_corpus(n_clips: usize, seed: u64) -> Result<Vec<Sample>> {
    Ok(clips_to_samples(&generate_corpus_clips(n_clips, seed, &CorpusConfig::default())?))
}

/// A red circle drifting right and slightly down over a gray background.
/// The seed picks the texture and jitters the start by up to two pixels.
pub fn standard_fixture(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-2i32..=2) as f32;
    SceneSpec {
        width: 64,
        height: 64,
        n_frames: 8,
        background: Background {
            name: "gray".into(),
            texture_seed: rng.random(),
            amplitude: 0.08,
        },
        shapes: vec![ShapeSpec {
            kind: "circle".into(),
            color: "red".into(),
            size: 10.0,
            trajectory: Trajectory::Linear {
                start: [18.0 + jitter(&mut rng), 26.0 + jitter(&mut rng)],
                velocity: [3.0, 1.0],
            },
            depth: 0.3,
        }],
        fps: 8.0,
        seed,
    }
}

/// A square orbiting the frame center; rotation-heavy motion.
pub fn rotational_fixture(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SceneSpec {
        width: 64,
        height: 64,
        n_frames: 8,
        background: Background {
            name: "sand".into(),
            texture_seed: rng.random(),
            amplitude: 0.08,
        },
        shapes: vec![ShapeSpec {
            kind: "square".into(),
            color: SHAPE_COLORS[rng.random_range(0..SHAPE_COLORS.len())].0.into(),
            size: 9.0,
            trajectory: Trajectory::Circular {
                center: [32.0, 32.0],
                radius: 14.0,
                phase: rng.random_range(0.0..std::f32::consts::TAU),
                angular_velocity: 0.35,
            },
            depth: 0.3,
        }],
        fps: 8.0,
        seed,
    }
}

/// Pixels covered by any shape at frame `f` (used by tests and metrics).
pub fn shape_mask(spec: &SceneSpec, f: usize) -> Result<Vec<bool>> {
    spec.validate()?;
    let bg = background_layers(spec)?;
    Ok(render(spec, &bg, f)?.ids.into_iter().map(|id| id != BACKGROUND_ID).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{masked_mse, warp};

    fn single(traj: Trajectory, n: usize) -> SceneSpec {
        let mut s = standard_fixture(0);
        s.n_frames = n;
        s.shapes[0].trajectory = traj;
        s
    }

    #[test]
    fn static_circle_is_constant() {
        let clip = generate_clip(&single(Trajectory::stationary([32.0, 32.0]), 4)).unwrap();
        assert_eq!(clip.len(), 4);
        for f in &clip.frames[1..] {
            assert_eq!(f, &clip.frames[0]);
        }
        for fl in clip.flows.as_ref().unwrap() {
            assert!(fl.vectors().iter().all(|v| *v == [0.0, 0.0]));
        }
    }

    #[test]
    fn linear_motion_flow_matches_velocity() {
        let spec = single(
            Trajectory::Linear {
                start: [20.0, 30.0],
                velocity: [2.0, 0.0],
            },
            3,
        );
        let clip = generate_clip(&spec).unwrap();
        let flow = &clip.flows.as_ref().unwrap()[0];
        let mask_b = shape_mask(&spec, 1).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if mask_b[y * 64 + x] { [2.0, 0.0] } else { [0.0, 0.0] };
                assert_eq!(flow.at(y, x), expect, "({x},{y})");
            }
        }
    }

    #[test]
    fn warp_with_exact_flow_reproduces_next_frame() {
        for spec in [standard_fixture(3), rotational_fixture(4)] {
            let clip = generate_clip(&spec).unwrap();
            for (i, fl) in clip.flows.as_ref().unwrap().iter().enumerate() {
                let w = warp(&clip.frames[i], fl).unwrap();
                let mse = masked_mse(&w.image, &clip.frames[i + 1], &w.valid).unwrap();
                assert!(mse < 1e-3, "pair {i}: {mse}");
                assert!(w.valid.iter().filter(|v| **v).count() > 64 * 64 / 2);
            }
        }
    }

    #[test]
    fn depth_orders_shape_over_background() {
        let spec = standard_fixture(1);
        let clip = generate_clip(&spec).unwrap();
        let mask = shape_mask(&spec, 0).unwrap();
        let d = clip.depths[0].data();
        let shape_max = d.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| *v).fold(0.0, f32::max);
        let bg_min = d.iter().zip(&mask).filter(|(_, m)| !**m).map(|(v, _)| *v).fold(1.0, f32::min);
        assert!(shape_max < bg_min);
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn depth_changes_only_where_masks_change() {
        let spec = rotational_fixture(2);
        let clip = generate_clip(&spec).unwrap();
        for f in 0..spec.n_frames - 1 {
            let (m0, m1) = (shape_mask(&spec, f).unwrap(), shape_mask(&spec, f + 1).unwrap());
            for i in 0..64 * 64 {
                if clip.depths[f].data()[i] != clip.depths[f + 1].data()[i] {
                    assert_ne!(m0[i], m1[i]);
                }
            }
        }
    }

    #[test]
    fn leaving_bounds_is_spec_error() {
        let spec = single(
            Trajectory::Linear {
                start: [40.0, 32.0],
                velocity: [6.0, 0.0],
            },
            8,
        );
        assert!(matches!(generate_clip(&spec), Err(Error::Spec(_))));
        let mut bad = standard_fixture(0);
        bad.shapes[0].color = "teal".into();
        assert!(matches!(generate_clip(&bad), Err(Error::Spec(_))));
    }

    #[test]
    fn caption_format() {
        assert_eq!(standard_fixture(0).caption(), "red circle on gray");
        assert_eq!(generate_clip(&standard_fixture(0)).unwrap().source_prompt, "red circle on gray");
    }

    #[test]
    fn corpus_basics() {
        assert!(!generate_corpus(1, 0).unwrap().is_empty());
        let a = generate_corpus(5, 9).unwrap();
        let b = generate_corpus(5, 9).unwrap();
        assert_eq!(a, b);
        assert!(matches!(generate_corpus(0, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn corpus_is_balanced() {
        let cfg = CorpusConfig {
            resolution: 32,
            min_size: 3.0,
            max_size: 6.0,
            max_speed: 2.0,
            ..CorpusConfig::default()
        };
        let clips = generate_corpus_clips(500, 11, &cfg).unwrap();
        let mut colors = [0usize; 6];
        let mut pairs = [[0usize; 3]; 6];
        for c in &clips {
            let words: Vec<&str> = c.source_prompt.split(' ').collect();
            let ci = vocab::color_index(words[0]).unwrap();
            let si = vocab::shape_index(words[1]).unwrap();
            colors[ci] += 1;
            pairs[ci][si] += 1;
        }
        let uniform = 500.0 / 6.0;
        for c in colors {
            assert!((c as f64 - uniform).abs() <= 0.2 * uniform, "{colors:?}");
        }
        let up = 500.0 / 18.0;
        for row in pairs {
            for c in row {
                assert!((c as f64 - up).abs() <= 0.2 * up, "{pairs:?}");
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_clip(&rotational_fixture(7)).unwrap();
        let b = generate_clip(&rotational_fixture(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.frames[0], generate_clip(&rotational_fixture(8)).unwrap().frames[0]);
    }
}

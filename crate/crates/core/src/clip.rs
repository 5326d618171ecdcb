use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::FlowField;

/// An ordered sequence of frames with per-frame depth and optional flow.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Image>,
    /// Single-channel depth maps in `[0, 1]`, one per frame.
    pub depths: Vec<Image>,
    /// `flows[i]` maps frame `i` onto frame `i + 1`; `n - 1` entries.
    pub flows: Option<Vec<FlowField>>,
    pub source_prompt: String,
    pub fps: f32,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(channels, height, width)` of the frames.
    pub fn resolution(&self) -> Option<(usize, usize, usize)> {
        self.frames.first().map(|f| (f.channels(), f.height(), f.width()))
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::param("clip has no frames"))?;
        if self.depths.len() != self.frames.len() {
            return Err(Error::param(format!(
                "clip has {} frames but {} depth maps",
                self.frames.len(),
                self.depths.len()
            )));
        }
        for (i, (f, d)) in self.frames.iter().zip(&self.depths).enumerate() {
            first.ensure_same_shape(f)?;
            if d.channels() != 1 || d.height() != f.height() || d.width() != f.width() {
                return Err(Error::shape(format!("depth map {i} does not match its frame")));
            }
        }
        if let Some(flows) = &self.flows {
            if flows.len() + 1 != self.frames.len() {
                return Err(Error::param(format!(
                    "clip has {} frames but {} flow fields",
                    self.frames.len(),
                    flows.len()
                )));
            }
            for fl in flows {
                if fl.height() != first.height() || fl.width() != first.width() {
                    return Err(Error::shape("flow field resolution differs from frames"));
                }
            }
        }
        Ok(())
    }

    /// A copy with different frames but the same depth, flow and metadata.
    pub fn with_frames(&self, frames: Vec<Image>) -> VideoClip {
        VideoClip {
            frames,
            ..self.clone()
        }
    }
}

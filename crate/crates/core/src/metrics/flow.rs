//! Exhaustive block-matching flow for clips without ground-truth flow.

use crate::error::{Error, Result};
use crate::image::Image;

use super::FlowField;

/// Per-block integer displacement from `f1` to `f2`, on `f2`'s grid: for each
/// `block x block` tile of `f2` the offset `d` with `|d|_inf <= radius`
/// minimizing the SSD between `f2(q)` and `f1(q - d)` over the tile. Edge
/// tiles are truncated; candidates whose source leaves the frame are
/// skipped. Ties go to the smallest `|d|`, then raster order.
pub fn block_matching_flow(f1: &Image, f2: &Image, block: usize, radius: i64) -> Result<FlowField> {
    f1.ensure_same_shape(f2)?;
    if radius <= 0 {
        return Err(Error::param(format!("radius must be positive, got {radius}")));
    }
    if block == 0 {
        return Err(Error::param("block size must be positive"));
    }
    let (c, h, w) = (f1.channels(), f1.height(), f1.width());
    let mut vectors = vec![[0.0f32; 2]; h * w];
    let mut candidates: Vec<(i64, i64)> = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            candidates.push((dx, dy));
        }
    }
    candidates.sort_by_key(|&(dx, dy)| dx * dx + dy * dy);

    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let mut best: Option<(f64, (i64, i64))> = None;
            for &(dx, dy) in &candidates {
                let (sx0, sy0) = (bx as i64 - dx, by as i64 - dy);
                let (sx1, sy1) = (ex as i64 - 1 - dx, ey as i64 - 1 - dy);
                if sx0 < 0 || sy0 < 0 || sx1 >= w as i64 || sy1 >= h as i64 {
                    continue;
                }
                let mut ssd = 0.0f64;
                'acc: for ch in 0..c {
                    for y in by..ey {
                        let sy = (y as i64 - dy) as usize;
                        for x in bx..ex {
                            let sx = (x as i64 - dx) as usize;
                            let d = (f2.get(ch, y, x) - f1.get(ch, sy, sx)) as f64;
                            ssd += d * d;
                        }
                        if best.is_some_and(|(b, _)| ssd > b) {
                            break 'acc;
                        }
                    }
                }
                if best.is_none_or(|(b, _)| ssd < b) {
                    best = Some((ssd, (dx, dy)));
                }
            }
            let (dx, dy) = best.map(|(_, d)| d).unwrap_or((0, 0));
            for y in by..ey {
                for x in bx..ex {
                    vectors[y * w + x] = [dx as f32, dy as f32];
                }
            }
        }
    }
    FlowField::new(h, w, vectors, None)
}

/// Forward-backward check. `forward` maps frame `i` onto `i + 1` (on the grid
/// of `i + 1`), `backward` maps `i + 1` onto `i` (on the grid of `i`). A pixel
/// `q` is kept when `forward(q) + backward(round(q - forward(q)))` has
/// length at most `tol`.
pub fn consistency_mask(forward: &FlowField, backward: &FlowField, tol: f32) -> Result<Vec<bool>> {
    if forward.height() != backward.height() || forward.width() != backward.width() {
        return Err(Error::shape("forward and backward flows differ in size"));
    }
    let (h, w) = (forward.height(), forward.width());
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let [fx, fy] = forward.at(y, x);
            let (sx, sy) = ((x as f32 - fx).round(), (y as f32 - fy).round());
            if sx < 0.0 || sy < 0.0 || sx >= w as f32 || sy >= h as f32 {
                continue;
            }
            let [bx, by] = backward.at(sy as usize, sx as usize);
            mask[y * w + x] = ((fx + bx).powi(2) + (fy + by).powi(2)).sqrt() <= tol;
        }
    }
    Ok(mask)
}

/// Block-matching flow from `f1` to `f2` with a forward-backward
/// consistency mask attached.
pub fn estimate_flow_masked(f1: &Image, f2: &Image, block: usize, radius: i64) -> Result<FlowField> {
    let fwd = block_matching_flow(f1, f2, block, radius)?;
    let bwd = block_matching_flow(f2, f1, block, radius)?;
    let mask = consistency_mask(&fwd, &bwd, 0.5)?;
    fwd.with_mask(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, standard_fixture};

    fn textured(h: usize, w: usize) -> Image {
        let mut img = Image::filled(3, h, w, 0.0);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.25 * ((x as f32 * 0.37 + c as f32).sin() + (y as f32 * 0.29 + x as f32 * 0.11).cos());
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    fn shift(img: &Image, dx: i64, dy: i64) -> Image {
        let mut out = img.clone();
        for c in 0..img.channels() {
            for y in 0..img.height() as i64 {
                for x in 0..img.width() as i64 {
                    let (sx, sy) = ((x - dx).clamp(0, img.width() as i64 - 1), (y - dy).clamp(0, img.height() as i64 - 1));
                    out.set(c, y as usize, x as usize, img.get(c, sy as usize, sx as usize));
                }
            }
        }
        out
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let img = textured(32, 32);
        let f = block_matching_flow(&img, &img, 8, 4).unwrap();
        assert!(f.vectors().iter().all(|v| *v == [0.0, 0.0]));
    }

    #[test]
    fn recovers_integer_shift_on_interior() {
        let img = textured(48, 48);
        let moved = shift(&img, 3, 0);
        let f = block_matching_flow(&img, &moved, 8, 4).unwrap();
        for y in 8..40 {
            for x in 8..40 {
                assert_eq!(f.at(y, x), [3.0, 0.0], "({x},{y})");
            }
        }
    }

    #[test]
    fn radius_must_be_positive() {
        let img = textured(16, 16);
        assert!(matches!(block_matching_flow(&img, &img, 4, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn synthetic_texture_shift_endpoint_error() {
        let clip = generate_clip(&standard_fixture(5)).unwrap();
        let moved = shift(&clip.frames[0], 2, -1);
        let est = block_matching_flow(&clip.frames[0], &moved, 4, 4).unwrap();
        let (mut good, mut total) = (0, 0);
        for y in 8..56 {
            for x in 8..56 {
                total += 1;
                let b = est.at(y, x);
                if ((b[0] - 2.0).powi(2) + (b[1] + 1.0).powi(2)).sqrt() < 1.0 {
                    good += 1;
                }
            }
        }
        assert!(good as f64 >= 0.9 * total as f64, "{good}/{total}");
    }

    #[test]
    fn consistent_shift_is_unmasked() {
        let img = textured(32, 32);
        let moved = shift(&img, 2, 1);
        let f = estimate_flow_masked(&img, &moved, 8, 3).unwrap();
        let mask = f.mask().unwrap();
        assert!(mask[16 * 32 + 16]);
    }
}

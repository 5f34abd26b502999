//! Deterministic synthetic video: bright squares moving over a static
//! textured background, with optional global background translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::frames::FrameSequence;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SQUARE_INTENSITY: f32 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    pub squares: usize,
    pub square_size: usize,
    /// Per-square displacement in pixels per frame; signs are drawn per
    /// square from the seed.
    pub velocity: (i32, i32),
    /// Background values lie in `0.5 +- amplitude`; must stay below 0.5 so
    /// squares always differ from the background.
    pub background_amplitude: f32,
    /// Horizontal background translation in pixels per frame.
    pub camera_motion: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            channels: 1,
            frames: 8,
            squares: 1,
            square_size: 4,
            velocity: (1, 0),
            background_amplitude: 0.2,
            camera_motion: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub frames: FrameSequence,
    /// Per frame, pixels differing from the previous frame in any channel.
    /// Frame 0 has no predecessor and is all false.
    pub change_masks: Vec<Vec<bool>>,
    /// Per frame, a `1 x h x w` Gaussian heatmap on each square's centre.
    pub heatmaps: Vec<Tensor>,
}

impl SyntheticVideo {
    pub fn changed_pixels(&self, frame: usize) -> usize {
        self.change_masks[frame].iter().filter(|&&c| c).count()
    }

    /// Largest per-frame fraction of changed pixels.
    pub fn max_change_fraction(&self) -> f64 {
        let n = (self.frames.shape().1 * self.frames.shape().2) as f64;
        (0..self.change_masks.len())
            .map(|t| self.changed_pixels(t) as f64 / n)
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug)]
struct Square {
    x: i32,
    y: i32,
    vx: i32,
    vy: i32,
}

fn advance(pos: i32, vel: &mut i32, max: i32) -> i32 {
    let mut next = pos + *vel;
    if next < 0 || next > max {
        *vel = -*vel;
        next = (pos + *vel).clamp(0, max);
    }
    next
}

pub fn gen_synthetic(spec: &SceneSpec, seed: u64) -> Result<SyntheticVideo> {
    let SceneSpec {
        width: w,
        height: h,
        channels,
        frames,
        square_size: size,
        ..
    } = *spec;
    if w == 0 || h == 0 || channels == 0 || frames == 0 {
        return Err(Error::Invalid(format!(
            "zero-size scene {channels}x{h}x{w}, {frames} frames"
        )));
    }
    if spec.squares > 0 && (size == 0 || size > w || size > h) {
        return Err(Error::Invalid(format!("square size {size} does not fit a {w}x{h} scene")));
    }
    if !(0.0..0.5).contains(&spec.background_amplitude) {
        return Err(Error::Invalid("background amplitude must be in [0, 0.5)".into()));
    }
    if !spec.camera_motion.is_finite() {
        return Err(Error::Invalid("camera motion must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = spec.background_amplitude;
    // the texture wraps horizontally so camera translation never runs out
    let texture: Vec<f32> = (0..channels * h * w)
        .map(|_| 0.5 + amp * rng.gen_range(-1.0f32..=1.0))
        .collect();
    let (max_x, max_y) = ((w - size.min(w)) as i32, (h - size.min(h)) as i32);
    let mut squares: Vec<Square> = (0..spec.squares)
        .map(|_| {
            let sx = if rng.gen_bool(0.5) { 1 } else { -1 };
            let sy = if rng.gen_bool(0.5) { 1 } else { -1 };
            Square {
                x: rng.gen_range(0..=max_x),
                y: rng.gen_range(0..=max_y),
                vx: spec.velocity.0 * sx,
                vy: spec.velocity.1 * sy,
            }
        })
        .collect();

    let sigma = (size as f32 / 2.0).max(1.0);
    let mut out_frames = Vec::with_capacity(frames);
    let mut heatmaps = Vec::with_capacity(frames);
    for t in 0..frames {
        let shift = (t as f32 * spec.camera_motion).round() as i64;
        let mut f = Tensor::from_fn(channels, h, w, |c, y, x| {
            let sx = (x as i64 + shift).rem_euclid(w as i64) as usize;
            texture[(c * h + y) * w + sx]
        });
        let mut heat = Tensor::zeros(1, h, w);
        for s in &squares {
            for c in 0..channels {
                for y in s.y as usize..s.y as usize + size {
                    for x in s.x as usize..s.x as usize + size {
                        f.set(c, y, x, SQUARE_INTENSITY);
                    }
                }
            }
            let cx = s.x as f32 + size as f32 / 2.0 - 0.5;
            let cy = s.y as f32 + size as f32 / 2.0 - 0.5;
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    if v > heat.get(0, y, x) {
                        heat.set(0, y, x, v);
                    }
                }
            }
        }
        out_frames.push(f);
        heatmaps.push(heat);
        for s in squares.iter_mut() {
            s.x = advance(s.x, &mut s.vx, max_x);
            s.y = advance(s.y, &mut s.vy, max_y);
        }
    }

    let plane = h * w;
    let change_masks = (0..frames)
        .map(|t| {
            if t == 0 {
                return vec![false; plane];
            }
            let (a, b) = (&out_frames[t - 1], &out_frames[t]);
            (0..plane)
                .map(|p| (0..channels).any(|c| a.plane(c)[p] != b.plane(c)[p]))
                .collect()
        })
        .collect();

    Ok(SyntheticVideo {
        frames: FrameSequence::new(out_frames)?,
        change_masks,
        heatmaps,
    })
}

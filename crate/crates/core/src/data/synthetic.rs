//! Procedural sprite videos standing in for fashion clips: a figure with a
//! head, a torso and a garment (optionally striped) that sways and turns
//! while its appearance stays fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    pub background: Rgb,
    pub body: Rgb,
    pub garment: Rgb,
    pub stripe: Option<Rgb>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Motion {
    /// Horizontal sinusoidal sway plus a turn that narrows the silhouette.
    Sway { amplitude: f32, cycles: f32, phase: f32, turn_phase: f32, turn_rate: f32 },
    /// Constant-velocity horizontal translation, no turning. Positions are
    /// fractions of the frame width.
    Linear { start: f32, velocity: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideoSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub palette: Palette,
    pub motion: Motion,
}

/// One video `(f, 3, h, w)` and its conditioning image `(3, h, w)`, which is
/// frame 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video: Tensor,
    pub cond: Tensor,
}

/// Colours are drawn from a coarse grid so distinct parts stay distinct.
fn color(rng: &mut ChaCha8Rng) -> Rgb {
    std::array::from_fn(|_| rng.random_range(0..9) as f32 * 0.2 - 0.8)
}

fn distinct(rng: &mut ChaCha8Rng, taken: &[Rgb]) -> Rgb {
    loop {
        let c = color(rng);
        let far = taken.iter().all(|t| t.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f32>() >= 0.6);
        if far {
            return c;
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn palette(rng: &mut ChaCha8Rng) -> Palette {
    let background = distinct(rng, &[]);
    let body = distinct(rng, &[background]);
    let garment = distinct(rng, &[background, body]);
    let stripe = rng.random_bool(0.5).then(|| distinct(rng, &[background, body, garment]));
    Palette { background, body, garment, stripe }
}

impl SyntheticVideoSpec {
    /// The training distribution: sway and turn, seeded by `(seed, index)`.
    pub fn random(frames: usize, size: usize, seed: u64, index: u64) -> Self {
        let mut rng = rng_for(seed, index);
        let palette = palette(&mut rng);
        let motion = Motion::Sway {
            amplitude: rng.random_range(0.04..0.14),
            cycles: rng.random_range(0.3..1.0),
            phase: rng.random_range(0.0..std::f32::consts::TAU),
            turn_phase: rng.random_range(0.0..std::f32::consts::TAU),
            turn_rate: rng.random_range(0.2..0.8),
        };
        Self { frames, height: size, width: size, palette, motion }
    }

    /// Held-out variant with linear horizontal motion.
    pub fn random_linear(frames: usize, size: usize, seed: u64, index: u64) -> Self {
        let mut rng = rng_for(seed, (1 << 40) + index);
        let palette = palette(&mut rng);
        let span = rng.random_range(0.1..0.3) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let start = 0.5 - span / 2.0;
        let velocity = span / (frames.max(2) - 1) as f32;
        Self { frames, height: size, width: size, palette, motion: Motion::Linear { start, velocity } }
    }

    /// Horizontal centre (fraction of width) and silhouette width factor.
    fn pose(&self, k: usize) -> (f32, f32) {
        let t = k as f32 / self.frames.max(1) as f32;
        match self.motion {
            Motion::Sway { amplitude, cycles, phase, turn_phase, turn_rate } => {
                let x = 0.5 + amplitude * (std::f32::consts::TAU * cycles * t + phase).sin();
                let turn = 0.65 + 0.35 * (turn_phase + std::f32::consts::TAU * turn_rate * t).cos().abs();
                (x, turn)
            }
            Motion::Linear { start, velocity } => (start + velocity * k as f32, 1.0),
        }
    }

    fn render_frame(&self, k: usize, out: &mut [f32]) {
        let (h, w) = (self.height, self.width);
        let (hf, wf) = (h as f32, w as f32);
        let (cx, turn) = self.pose(k);
        let cx = cx * wf;
        let cy = 0.6 * hf;
        let (rx, ry) = (0.2 * wf * turn, 0.28 * hf);
        let head_r = 0.1 * hf;
        let head_cy = cy - ry - 0.6 * head_r;
        let (gx, gy0, gy1) = (0.8 * rx, cy - 0.45 * ry, cy + 0.55 * ry);
        let stripe_half = (0.06 * hf).max(1.0);
        let p = &self.palette;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let dx = px - cx;
                let mut c = p.background;
                if (dx / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0
                    || dx.powi(2) + (py - head_cy).powi(2) <= head_r.powi(2)
                {
                    c = p.body;
                }
                if dx.abs() <= gx && py >= gy0 && py <= gy1 {
                    c = p.garment;
                    if let Some(s) = p.stripe {
                        if (py - cy).abs() <= stripe_half {
                            c = s;
                        }
                    }
                }
                for ch in 0..3 {
                    out[(ch * h + y) * w + x] = c[ch];
                }
            }
        }
    }

    pub fn render(&self) -> Tensor {
        let plane = 3 * self.height * self.width;
        let mut data = vec![0.0f32; self.frames * plane];
        for (k, frame) in data.chunks_mut(plane).enumerate() {
            self.render_frame(k, frame);
        }
        Tensor::from_parts_unchecked(vec![self.frames, 3, self.height, self.width], data)
    }

    pub fn sample(&self) -> VideoSample {
        let video = self.render();
        let plane = 3 * self.height * self.width;
        let cond = Tensor::from_parts_unchecked(vec![3, self.height, self.width], video.data()[..plane].to_vec());
        VideoSample { video, cond }
    }
}

/// Videos `start..start+count` of the sway distribution.
pub fn generate(count: usize, frames: usize, size: usize, seed: u64, start: u64) -> Vec<VideoSample> {
    (0..count)
        .into_par_iter()
        .map(|i| SyntheticVideoSpec::random(frames, size, seed, start + i as u64).sample())
        .collect()
}

/// Held-out linear-motion videos.
pub fn generate_linear(count: usize, frames: usize, size: usize, seed: u64) -> Vec<VideoSample> {
    (0..count)
        .into_par_iter()
        .map(|i| SyntheticVideoSpec::random_linear(frames, size, seed, i as u64).sample())
        .collect()
}

/// Train and test videos under the 80/20 split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
}

/// `count` videos, the last fifth held out for testing. Video `i` depends
/// only on `(seed, i)`.
pub fn generate_dataset(count: usize, frames: usize, size: usize, seed: u64) -> Dataset {
    let n_test = count / 5;
    let n_train = count - n_test;
    Dataset {
        train: generate(n_train, frames, size, seed, 0),
        test: generate(n_test, frames, size, seed, n_train as u64),
    }
}

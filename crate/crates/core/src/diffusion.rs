//! Noise schedule, forward corruption, reverse sampling, the noise-free
//! conditioning frame and the frame-interpolation mask.
//!
//! Timesteps are 0-based: index `t` of a schedule of length `T` is the
//! `t+1`-th noising step, so `alpha_bar[0]` is already slightly below one.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};
use crate::unet::UNet;

/// Offset of the cosine schedule.
pub const COSINE_S: f64 = 0.008;
/// Upper clip on every β.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, `ᾱ = f(t)/f(0)`,
    /// `β = min(1 - ᾱ_t/ᾱ_{t-1}, 0.999)`, with `ᾱ` recomputed from the
    /// clipped β.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(contract_err!("a noise schedule needs T >= 2, got {steps}"));
        }
        let f = |t: f64| {
            let a = ((t / steps as f64 + COSINE_S) / (1.0 + COSINE_S)) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let f0 = f(0.0);
        let betas = (1..=steps)
            .map(|t| {
                let ratio = (f(t as f64) / f0) / (f((t - 1) as f64) / f0);
                (1.0 - ratio).min(MAX_BETA)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|&b| !(b > 0.0 && b <= MAX_BETA)) {
            return Err(contract_err!("every beta must lie in (0, {MAX_BETA}]"));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// A shorter chain over evenly spaced timesteps (always including
    /// `0` and `T-1`). The sub-chain keeps the original `ᾱ` at each kept
    /// timestep; the returned schedule is indexed by position in the
    /// returned timestep list.
    pub fn respace(&self, steps: usize) -> Result<(Vec<usize>, NoiseSchedule)> {
        let t = self.len();
        if steps == 0 || steps > t {
            return Err(contract_err!("cannot run {steps} sampling steps on a {t}-step schedule"));
        }
        if steps == t {
            return Ok(((0..t).collect(), self.clone()));
        }
        let mut kept: Vec<usize> = if steps == 1 {
            vec![t - 1]
        } else {
            (0..steps).map(|i| ((i * (t - 1)) as f64 / (steps - 1) as f64).round() as usize).collect()
        };
        kept.dedup();
        let mut prev = 1.0;
        let mut betas = Vec::with_capacity(kept.len());
        for &k in &kept {
            let ab = self.alpha_bar[k];
            betas.push((1.0 - ab / prev).clamp(f64::MIN_POSITIVE, MAX_BETA));
            prev = ab;
        }
        // Keep ᾱ exact at the kept steps rather than re-deriving it from the
        // clipped betas.
        let mut sub = Self::from_betas(betas)?;
        for (dst, &k) in sub.alpha_bar.iter_mut().zip(&kept) {
            *dst = self.alpha_bar[k];
        }
        Ok((kept, sub))
    }
}

/// A latent video `(b, c, f, h, w)`; with `cond_frame`, frame 0 holds the
/// encoded conditioning image and is never noised or denoised.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoLatent {
    pub data: Tensor,
    pub cond_frame: bool,
}

impl VideoLatent {
    pub fn new(data: Tensor, cond_frame: bool) -> Result<Self> {
        if data.rank() != 5 || data.dim(2) == 0 {
            return Err(shape_err!("video latent must be (b, c, f, h, w), got {:?}", data.shape()));
        }
        Ok(Self { data, cond_frame })
    }

    /// Copy of frame `i` as `(b, c, h, w)`.
    pub fn frame(&self, i: usize) -> Tensor {
        let [b, c, f, h, w] = dims5(&self.data);
        let hw = h * w;
        let mut out = Vec::with_capacity(b * c * hw);
        for bc in 0..b * c {
            out.extend_from_slice(&self.data.data()[(bc * f + i) * hw..][..hw]);
        }
        Tensor::from_parts_unchecked(vec![b, c, h, w], out)
    }
}

fn dims5<S: crate::Scalar>(t: &Tensor<S>) -> [usize; 5] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}

/// Mutable slices of frame `i` for every `(b, c)` pair.
fn frame_slices(data: &mut [f32], dims: [usize; 5], i: usize) -> impl Iterator<Item = &mut [f32]> {
    let [_, _, f, h, w] = dims;
    let hw = h * w;
    data.chunks_mut(f * hw).map(move |plane| &mut plane[i * hw..(i + 1) * hw])
}

/// Overwrite frame `i` of `dst` with frame `i` of `src`.
fn copy_frame(dst: &mut Tensor, src: &Tensor, i: usize) {
    let dims = dims5(dst);
    let hw = dims[3] * dims[4];
    let f = dims[2];
    for (k, d) in frame_slices(dst.data_mut(), dims, i).enumerate() {
        d.copy_from_slice(&src.data()[(k * f + i) * hw..][..hw]);
    }
}

/// `x_t = √ᾱ_t·x_0 + √(1-ᾱ_t)·ε` with one timestep per batch element;
/// frame 0 is left untouched when the latent carries a conditioning frame.
pub fn forward_diffuse_batch(
    x0: &VideoLatent,
    ts: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<VideoLatent> {
    x0.data.expect_same_shape(eps, "noise")?;
    let [b, _, _, _, _] = dims5(&x0.data);
    if ts.len() != b {
        return Err(shape_err!("{} timesteps for a batch of {b}", ts.len()));
    }
    if let Some(&t) = ts.iter().find(|&&t| t >= sched.len()) {
        return Err(contract_err!("timestep {t} outside [0, {})", sched.len()));
    }
    let per_item = x0.data.len() / b;
    let mut out = x0.data.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, s) = (sched.alpha_bar[t].sqrt(), (1.0 - sched.alpha_bar[t]).sqrt());
        let range = i * per_item..(i + 1) * per_item;
        for ((o, &x), &e) in out.data_mut()[range.clone()]
            .iter_mut()
            .zip(&x0.data.data()[range.clone()])
            .zip(&eps.data()[range])
        {
            *o = (a * x as f64 + s * e as f64) as f32;
        }
    }
    if x0.cond_frame {
        copy_frame(&mut out, &x0.data, 0);
    }
    Ok(VideoLatent { data: out, cond_frame: x0.cond_frame })
}

/// [`forward_diffuse_batch`] with the same `t` for every element.
pub fn forward_diffuse(x0: &VideoLatent, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<VideoLatent> {
    let b = x0.data.dim(0);
    forward_diffuse_batch(x0, &vec![t; b], eps, sched)
}

/// The posterior mean `μ = (x_t - β_t/√(1-ᾱ_t)·ε̂)/√α_t` plus `√β_t·z`.
/// `z = None` means no noise (the last step). Frame 0 is copied through
/// when the latent carries a conditioning frame.
pub fn reverse_update(
    x_t: &VideoLatent,
    eps_hat: &Tensor,
    beta: f64,
    alpha_bar: f64,
    z: Option<&Tensor>,
) -> Result<VideoLatent> {
    x_t.data.expect_same_shape(eps_hat, "predicted noise")?;
    if let Some(z) = z {
        x_t.data.expect_same_shape(z, "sampling noise")?;
    }
    let alpha = 1.0 - beta;
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / alpha.sqrt();
    let sigma = beta.sqrt();
    let mut out = x_t.data.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let x = x_t.data.data()[i] as f64;
        let mut v = inv_sqrt_alpha * (x - coef * eps_hat.data()[i] as f64);
        if let Some(z) = z {
            v += sigma * z.data()[i] as f64;
        }
        *o = v as f32;
    }
    if x_t.cond_frame {
        copy_frame(&mut out, &x_t.data, 0);
    }
    Ok(VideoLatent { data: out, cond_frame: x_t.cond_frame })
}

/// Which conditioning paths a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Cross-attention on the adapter tokens only.
    Global,
    /// Noise-free first frame only.
    Local,
    Both,
}

impl Mode {
    pub fn uses_tokens(self) -> bool {
        matches!(self, Mode::Global | Mode::Both)
    }

    pub fn uses_cond_frame(self) -> bool {
        matches!(self, Mode::Local | Mode::Both)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Global => "global",
            Mode::Local => "local",
            Mode::Both => "both",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Mode::Global),
            "local" => Ok(Mode::Local),
            "both" => Ok(Mode::Both),
            _ => Err(Error::Config(format!("mode must be global, local or both, got '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPattern {
    /// Odd frames masked.
    Alternate,
    /// `⌊f/2⌋` frames drawn at random from frames `1..f`.
    Random(u64),
}

/// Which frames the model sees during interpolation. Frame 0 is always
/// visible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterpolationMask {
    pub visible: Vec<bool>,
}

impl InterpolationMask {
    pub fn new(frames: usize, pattern: MaskPattern) -> Result<Self> {
        if frames < 2 {
            return Err(contract_err!("interpolation needs at least 2 frames, got {frames}"));
        }
        let visible = match pattern {
            MaskPattern::Alternate => (0..frames).map(|i| i % 2 == 0).collect(),
            MaskPattern::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut v = vec![true; frames];
                for i in sample_indices(&mut rng, frames - 1, frames / 2) {
                    v[i + 1] = false;
                }
                v
            }
        };
        Ok(Self { visible })
    }

    pub fn frames(&self) -> usize {
        self.visible.len()
    }

    pub fn masked(&self) -> impl Iterator<Item = usize> + '_ {
        self.visible.iter().enumerate().filter(|(_, v)| !**v).map(|(i, _)| i)
    }

    /// Auxiliary channels `(b, 4, f, h, w)` from a latent-resolution RGB
    /// video `(b, 3, f, h, w)`: the RGB channels zeroed on masked frames,
    /// then a binary visibility channel.
    pub fn aux(&self, rgb: &Tensor) -> Result<Tensor> {
        if rgb.rank() != 5 || rgb.dim(1) != 3 || rgb.dim(2) != self.frames() {
            return Err(shape_err!(
                "aux needs an RGB video (b, 3, {}, h, w), got {:?}",
                self.frames(),
                rgb.shape()
            ));
        }
        let [b, _, f, h, w] = dims5(rgb);
        let hw = h * w;
        let mut out = Vec::with_capacity(b * 4 * f * hw);
        for bi in 0..b {
            for c in 0..3 {
                for (fi, &vis) in self.visible.iter().enumerate() {
                    let src = &rgb.data()[((bi * 3 + c) * f + fi) * hw..][..hw];
                    if vis {
                        out.extend_from_slice(src);
                    } else {
                        out.extend(std::iter::repeat_n(0.0, hw));
                    }
                }
            }
            for &vis in &self.visible {
                out.extend(std::iter::repeat_n(if vis { 1.0 } else { 0.0 }, hw));
            }
        }
        Tensor::from_vec(vec![b, 4, f, h, w], out)
    }
}

/// Auxiliary channels for plain generation: nothing visible, all zero.
pub fn empty_aux(b: usize, f: usize, h: usize, w: usize) -> Tensor {
    Tensor::zeros(vec![b, 4, f, h, w])
}

/// `(b, c, f, H, W) -> (b, c, f, H/k, W/k)` by block averaging.
pub fn downsample_video(video: &Tensor, k: usize) -> Result<Tensor> {
    if video.rank() != 5 || k == 0 || video.dim(3) % k != 0 || video.dim(4) % k != 0 {
        return Err(shape_err!("cannot block-average {:?} by {k}", video.shape()));
    }
    let [b, c, f, hh, ww] = dims5(video);
    let (h, w) = (hh / k, ww / k);
    let norm = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; b * c * f * h * w];
    for (p, plane) in video.data().chunks(hh * ww).enumerate() {
        let dst = &mut out[p * h * w..][..h * w];
        for y in 0..hh {
            for x in 0..ww {
                dst[(y / k) * w + x / k] += plane[y * ww + x] * norm;
            }
        }
    }
    Tensor::from_vec(vec![b, c, f, h, w], out)
}

/// Concatenate latents `(b, 4, f, h, w)` with aux `(b, 4, f, h, w)` along
/// channels.
pub fn with_aux(latent: &Tensor, aux: &Tensor) -> Result<Tensor> {
    let [b, c, f, h, w] = dims5(latent);
    if aux.rank() != 5 || aux.dim(0) != b || aux.dim(2) != f || aux.dim(3) != h || aux.dim(4) != w {
        return Err(shape_err!("aux {:?} does not fit latent {:?}", aux.shape(), latent.shape()));
    }
    let ca = aux.dim(1);
    let per = f * h * w;
    let mut out = Vec::with_capacity(b * (c + ca) * per);
    for bi in 0..b {
        out.extend_from_slice(&latent.data()[bi * c * per..][..c * per]);
        out.extend_from_slice(&aux.data()[bi * ca * per..][..ca * per]);
    }
    Tensor::from_vec(vec![b, c + ca, f, h, w], out)
}

/// Bound on the clean latent implied by each reverse step when a pipeline
/// asks for clipping. Scaled latents have unit spread; four of those
/// covers every latent the autoencoder produces on the synthetic data.
pub const X0_CLIP: f64 = 4.0;

/// [`reverse_update`] with the implied clean latent
/// `x̂₀ = (x_t - √(1-ᾱ_t)·ε̂)/√ᾱ_t` clamped to `[-clip, clip]` and the mean
/// taken from the posterior `q(x_{t-1} | x_t, x̂₀)`. Without clamping the
/// two means are the same number; with it, a denoiser that under-predicts
/// the noise can no longer blow the chain up through the `1/√α_t` factors.
pub fn reverse_update_clipped(
    x_t: &VideoLatent,
    eps_hat: &Tensor,
    beta: f64,
    alpha_bar: f64,
    clip: f64,
    z: Option<&Tensor>,
) -> Result<VideoLatent> {
    x_t.data.expect_same_shape(eps_hat, "predicted noise")?;
    if let Some(z) = z {
        x_t.data.expect_same_shape(z, "sampling noise")?;
    }
    let alpha = 1.0 - beta;
    let prev = alpha_bar / alpha;
    let c0 = prev.sqrt() * beta / (1.0 - alpha_bar);
    let ct = alpha.sqrt() * (1.0 - prev) / (1.0 - alpha_bar);
    let (sa, sn) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let sigma = beta.sqrt();
    let mut out = x_t.data.clone();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let x = x_t.data.data()[i] as f64;
        let x0 = ((x - sn * eps_hat.data()[i] as f64) / sa).clamp(-clip, clip);
        let mut v = c0 * x0 + ct * x;
        if let Some(z) = z {
            v += sigma * z.data()[i] as f64;
        }
        *o = v as f32;
    }
    if x_t.cond_frame {
        copy_frame(&mut out, &x_t.data, 0);
    }
    Ok(VideoLatent { data: out, cond_frame: x_t.cond_frame })
}

/// Everything a sampling run needs besides the network.
#[derive(Debug, Clone)]
pub struct SampleSpec<'a> {
    pub frames: usize,
    /// Reverse steps; fewer than `T` runs a respaced chain.
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    /// Scaled VAE latents of the conditioning images `(b, 4, h, w)`.
    pub i_vae: &'a Tensor,
    /// Adapter tokens `(b, n, c)`; required by the global modes.
    pub tokens: Option<&'a Tensor>,
    /// Auxiliary channels `(b, 4, f, h, w)`; zeros when absent.
    pub aux: Option<&'a Tensor>,
    /// Known latents and which frames of them to keep: after every step,
    /// visible frames are replaced by the known latents noised to the
    /// current level.
    pub known: Option<(&'a Tensor, &'a InterpolationMask)>,
    /// Clamp the implied clean latent to this bound at every step (see
    /// [`reverse_update_clipped`]); `None` runs the plain update.
    pub clip_x0: Option<f64>,
    /// Start from a guess instead of pure noise: the latents are noised to
    /// the level a `strength` fraction into the chain and only the
    /// remaining steps run. `strength = 1` is the full chain.
    pub init: Option<(&'a Tensor, f64)>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Run the reverse chain from pure noise down to a clean latent video.
///
/// The result depends only on the network, the spec and the seed; every
/// step draws its noise from its own stream of the seed.
pub fn sample(net: &UNet, ps: &ParamStore, sched: &NoiseSchedule, spec: &SampleSpec<'_>) -> Result<VideoLatent> {
    if spec.i_vae.rank() != 4 {
        return Err(shape_err!("conditioning latents must be (b, c, h, w), got {:?}", spec.i_vae.shape()));
    }
    let (b, c, h, w) = (spec.i_vae.dim(0), spec.i_vae.dim(1), spec.i_vae.dim(2), spec.i_vae.dim(3));
    let f = spec.frames;
    if f == 0 {
        return Err(contract_err!("cannot sample a video with zero frames"));
    }
    let tokens = match (spec.mode.uses_tokens(), spec.tokens) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(contract_err!("mode {} needs conditioning tokens", spec.mode)),
        (false, _) => None,
    };
    let aux = match spec.aux {
        Some(a) => a.clone(),
        None => empty_aux(b, f, h, w),
    };
    if let Some((known, mask)) = spec.known {
        if known.shape() != [b, c, f, h, w] || mask.frames() != f {
            return Err(shape_err!("known latents {:?} do not fit the sample", known.shape()));
        }
    }
    let (timesteps, sub) = sched.respace(spec.steps)?;
    let mut start = timesteps.len();
    let mut x = Tensor::randn(vec![b, c, f, h, w], &mut stream_rng(spec.seed, 0));
    if let Some((guess, strength)) = spec.init {
        if guess.shape() != [b, c, f, h, w] {
            return Err(shape_err!("initial latents {:?} do not fit the sample", guess.shape()));
        }
        if !(strength > 0.0 && strength <= 1.0) {
            return Err(contract_err!("start strength must lie in (0, 1], got {strength}"));
        }
        start = ((strength * timesteps.len() as f64).ceil() as usize).clamp(1, timesteps.len());
        let ab = sub.alpha_bar[start - 1];
        x = guess.zip_map(&x, |g, e| (ab.sqrt() * g as f64 + (1.0 - ab).sqrt() * e as f64) as f32)?;
    }
    let cond_frame = spec.mode.uses_cond_frame();
    if cond_frame {
        for (k, d) in frame_slices(x.data_mut(), [b, c, f, h, w], 0).enumerate() {
            d.copy_from_slice(&spec.i_vae.data()[k * h * w..][..h * w]);
        }
    }
    let mut v = VideoLatent::new(x, cond_frame)?;
    for i in (0..start).rev() {
        let t = timesteps[i];
        let eps_hat = {
            let tape = Tape::no_grad();
            let input = tape.constant(with_aux(&v.data, &aux)?);
            let tok = tokens.map(|t| tape.constant(t.clone()));
            net.predict_noise(&tape, ps, &input, &vec![t; b], tok.as_ref())?.to_tensor()
        };
        let mut rng = stream_rng(spec.seed, 1 + i as u64);
        let z = (i > 0).then(|| Tensor::randn(vec![b, c, f, h, w], &mut rng));
        v = match spec.clip_x0 {
            Some(c) => reverse_update_clipped(&v, &eps_hat, sub.beta[i], sub.alpha_bar[i], c, z.as_ref())?,
            None => reverse_update(&v, &eps_hat, sub.beta[i], sub.alpha_bar[i], z.as_ref())?,
        };
        if let Some((known, mask)) = spec.known {
            let level = if i > 0 { Some(sub.alpha_bar[i - 1]) } else { None };
            let noise = Tensor::randn(vec![b, c, f, h, w], &mut rng);
            for (fi, _) in mask.visible.iter().enumerate().filter(|(fi, &vis)| vis && !(cond_frame && *fi == 0)) {
                let src = match level {
                    Some(ab) => known.zip_map(&noise, |x, e| (ab.sqrt() * x as f64 + (1.0 - ab).sqrt() * e as f64) as f32)?,
                    None => known.clone(),
                };
                copy_frame(&mut v.data, &src, fi);
            }
        }
        if !v.data.all_finite() {
            return Err(Error::Numeric(format!("non-finite latent at sampling step {i} (t = {t})")));
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternate_mask_pattern() {
        let m = InterpolationMask::new(8, MaskPattern::Alternate).unwrap();
        let v: Vec<u8> = m.visible.iter().map(|&b| b as u8).collect();
        assert_eq!(v, [1, 0, 1, 0, 1, 0, 1, 0]);
        assert!(InterpolationMask::new(1, MaskPattern::Alternate).is_err());
        let a = InterpolationMask::new(9, MaskPattern::Random(3)).unwrap();
        assert_eq!(a, InterpolationMask::new(9, MaskPattern::Random(3)).unwrap());
        assert!(a.visible[0]);
        assert_eq!(a.masked().count(), 4);
    }

    #[test]
    fn respace_keeps_endpoints_and_alpha_bar() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let (ts, sub) = s.respace(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (0, 999));
        for (i, &t) in ts.iter().enumerate() {
            assert_eq!(sub.alpha_bar[i], s.alpha_bar[t]);
        }
        let (ts1, _) = s.respace(1).unwrap();
        assert_eq!(ts1, [999]);
        assert_eq!(s.respace(1000).unwrap().1, s);
    }

    #[test]
    fn downsample_averages_blocks() {
        let v = Tensor::from_vec(vec![1, 1, 1, 2, 4], vec![1., 3., 0., 0., 5., 7., 4., 8.]).unwrap();
        assert_eq!(downsample_video(&v, 2).unwrap().data(), &[4.0, 3.0]);
    }
}

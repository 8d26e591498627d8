use crate::data::{first_frame, stack_images, stack_videos, unstack_videos};
use crate::diffusion::{downsample_video, sample, InterpolationMask, Mode, SampleSpec, X0_CLIP};
use crate::conditioning::VAE_FACTOR;
use crate::error::{contract_err, shape_err, Result};
use crate::tensor::{Tape, Tensor};

use super::TrainState;

impl TrainState {
    /// Adapter tokens for scaled latents `(b, 4, h, w)` and embeddings.
    fn tokens(&self, i_vae: &Tensor, i_clip: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let t = self.model.adapter.forward(&tape, &self.store, &tape.constant(i_vae.clone()), &tape.constant(i_clip.clone()))?;
        Ok(t.to_tensor())
    }

    /// Generate one `(frames, 3, H, W)` video per `(3, H, W)` conditioning
    /// image, sampled together as one batch.
    pub fn generate(&self, images: &[Tensor], frames: usize, steps: usize, seed: u64, mode: Mode) -> Result<Vec<Tensor>> {
        if images.is_empty() {
            return Err(contract_err!("no conditioning images given"));
        }
        let batch = stack_images(&images.iter().collect::<Vec<_>>())?;
        let i_vae = self.vae.encode(&batch)?;
        let i_clip = self.embedder.embed(&batch)?;
        let tokens = self.tokens(&i_vae, &i_clip)?;
        let spec = SampleSpec {
            frames,
            steps,
            seed,
            mode,
            i_vae: &i_vae,
            tokens: Some(&tokens),
            aux: None,
            known: None,
            clip_x0: Some(X0_CLIP),
            init: None,
        };
        let latent = sample(&self.model.unet, &self.store, &self.schedule, &spec)?;
        unstack_videos(&self.vae.decode_frames(&latent.data)?)
    }

    /// Fill the frames `mask` hides in each `(f, 3, H, W)` video. Visible
    /// frames come back as their VAE round trip.
    pub fn interpolate(&self, videos: &[Tensor], mask: &InterpolationMask, steps: usize, seed: u64) -> Result<Vec<Tensor>> {
        self.interpolate_with(videos, mask, steps, seed, INTERP_STRENGTH)
    }

    /// [`Self::interpolate`] with an explicit start strength: the chain
    /// starts from the nearest-visible-frame latents noised `strength` of
    /// the way to pure noise (`1` starts from pure noise).
    pub fn interpolate_with(
        &self,
        videos: &[Tensor],
        mask: &InterpolationMask,
        steps: usize,
        seed: u64,
        strength: f64,
    ) -> Result<Vec<Tensor>> {
        if videos.is_empty() {
            return Err(contract_err!("no videos given"));
        }
        let batch = stack_videos(&videos.iter().collect::<Vec<_>>())?;
        let f = batch.dim(2);
        if mask.frames() != f {
            return Err(shape_err!("mask covers {} frames, videos have {f}", mask.frames()));
        }
        let latents = self.vae.encode_frames(&batch)?;
        let aux = mask.aux(&downsample_video(&batch, VAE_FACTOR)?)?;
        let firsts: Vec<Tensor> = videos.iter().map(first_frame).collect();
        let cond = stack_images(&firsts.iter().collect::<Vec<_>>())?;
        let i_vae = self.vae.encode(&cond)?;
        let i_clip = self.embedder.embed(&cond)?;
        let tokens = self.tokens(&i_vae, &i_clip)?;
        let spec = SampleSpec {
            frames: f,
            steps,
            seed,
            mode: self.config.mode,
            i_vae: &i_vae,
            tokens: Some(&tokens),
            aux: Some(&aux),
            known: Some((&latents, mask)),
            clip_x0: Some(X0_CLIP),
            init: Some((&nearest_visible(&latents, mask), strength)),
        };
        let latent = sample(&self.model.unet, &self.store, &self.schedule, &spec)?;
        unstack_videos(&self.vae.decode_frames(&latent.data)?)
    }
}

/// Default start strength for [`TrainState::interpolate`].
pub const INTERP_STRENGTH: f64 = 0.5;

fn nearest(mask: &InterpolationMask, m: usize) -> usize {
    (0..mask.frames())
        .filter(|&i| mask.visible[i])
        .min_by_key(|&i| (i.abs_diff(m), i))
        .expect("frame 0 is visible")
}

/// `(b, c, f, h, w)` latents with every masked frame replaced by its
/// nearest visible frame.
fn nearest_visible(latents: &Tensor, mask: &InterpolationMask) -> Tensor {
    let (f, hw) = (latents.dim(2), latents.dim(3) * latents.dim(4));
    let mut out = latents.clone();
    for plane in out.data_mut().chunks_mut(f * hw) {
        for m in mask.masked() {
            let src = nearest(mask, m);
            plane.copy_within(src * hw..(src + 1) * hw, m * hw);
        }
    }
    out
}

/// Fill every masked frame with the nearest visible one (the earlier one
/// on ties).
pub fn copy_baseline(videos: &[Tensor], mask: &InterpolationMask) -> Result<Vec<Tensor>> {
    videos
        .iter()
        .map(|v| {
            if v.dim(0) != mask.frames() {
                return Err(shape_err!("mask covers {} frames, video has {}", mask.frames(), v.dim(0)));
            }
            let per = v.len() / v.dim(0);
            let mut out = v.clone();
            for m in mask.masked() {
                let src = nearest(mask, m);
                out.data_mut()[m * per..(m + 1) * per].copy_from_slice(&v.data()[src * per..(src + 1) * per]);
            }
            Ok(out)
        })
        .collect()
}

/// Mean squared pixel error over the masked frames of `(f, 3, H, W)` videos.
pub fn masked_frame_mse(pred: &[Tensor], truth: &[Tensor], mask: &InterpolationMask) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        p.expect_same_shape(t, "reconstruction")?;
        let per = t.len() / t.dim(0);
        for m in mask.masked() {
            for (a, b) in p.data()[m * per..(m + 1) * per].iter().zip(&t.data()[m * per..(m + 1) * per]) {
                total += ((a - b) as f64).powi(2);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(contract_err!("nothing masked to score"));
    }
    Ok(total / count as f64)
}

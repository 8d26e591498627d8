use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditioning::{Adapter, Embedder, ToyVae, VAE_FACTOR};
use crate::data::{first_frame, stack_images, stack_videos, VideoSample};
use crate::diffusion::{
    downsample_video, empty_aux, forward_diffuse_batch, with_aux, InterpolationMask, MaskPattern, Mode,
    NoiseSchedule, VideoLatent,
};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::params::{Initializer, ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::unet::{UNet, UNetConfig};

use super::{AdamW, TrainConfig};

/// The trainable part of the system: the denoiser and the adapter that
/// feeds it conditioning tokens, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    pub unet: UNet,
    pub adapter: Adapter,
}

impl DiffusionModel {
    pub fn declare(config: &UNetConfig, scope: &mut Scope<'_>) -> Result<Self> {
        let unet = UNet::declare(config, &mut scope.sub("unet"))?;
        let adapter = Adapter::new(&mut scope.sub("adapter"), config.context_dim);
        Ok(Self { unet, adapter })
    }

    pub fn build(config: &UNetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, seed);
        let model = Self::declare(config, &mut Scope::new(&mut init))?;
        Ok((model, store))
    }

    /// Predicted noise for `input` (latents with aux channels); tokens are
    /// built from the conditioning when `mode` uses them.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        input: &Var<'t, S>,
        ts: &[usize],
        mode: Mode,
        i_vae: &Var<'t, S>,
        i_clip: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let tokens = if mode.uses_tokens() { Some(self.adapter.forward(tape, ps, i_vae, i_clip)?) } else { None };
        self.unet.predict_noise(tape, ps, input, ts, tokens.as_ref())
    }
}

/// Videos encoded once by the frozen VAE and embedder.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// Scaled latents `(4, f, h, w)`.
    pub latents: Vec<Tensor>,
    /// Pixels block-averaged to latent resolution `(3, f, h, w)`.
    pub rgb: Vec<Tensor>,
    /// Embeddings of the conditioning images `(EMBED_DIM)`.
    pub i_clip: Vec<Tensor>,
}

impl TrainingSet {
    pub fn prepare(vae: &ToyVae, embedder: &Embedder, samples: &[VideoSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(contract_err!("training needs at least one video"));
        }
        let mut set = Self { latents: Vec::new(), rgb: Vec::new(), i_clip: Vec::new() };
        for s in samples {
            let video = stack_videos(&[&s.video])?;
            let z = vae.encode_frames(&video)?;
            set.latents.push(z.reshape(z.shape()[1..].to_vec())?);
            let rgb = downsample_video(&video, VAE_FACTOR)?;
            set.rgb.push(rgb.reshape(rgb.shape()[1..].to_vec())?);
            let e = embedder.embed(&stack_images(&[&s.cond])?)?;
            set.i_clip.push(e.reshape(e.shape()[1..].to_vec())?);
        }
        let shape = set.latents[0].shape().to_vec();
        if set.latents.iter().any(|l| l.shape() != shape) {
            return Err(shape_err!("all training videos must share one shape"));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }

    /// The conditioning latent of video `i`: its first latent frame.
    pub fn i_vae(&self, i: usize) -> Tensor {
        first_frame(&self.latents[i].rearrange("c f h w -> f c h w", &[]).expect("rank 4"))
    }
}

/// A batch ready for the network: noised inputs with aux channels, the
/// target noise and which entries count towards the loss.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// Dataset indices, ascending.
    pub indices: Vec<usize>,
    pub ts: Vec<usize>,
    /// `(b, 8, f, h, w)`.
    pub input: Tensor,
    /// `(b, 4, f, h, w)`.
    pub eps: Tensor,
    /// 1 where the loss applies, 0 on an exempt conditioning frame.
    pub weights: Tensor,
    pub i_vae: Tensor,
    pub i_clip: Tensor,
    pub mode: Mode,
    pub masked: bool,
}

fn step_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

/// Dataset indices drawn for `step`, without replacement, ascending.
pub fn batch_indices(cfg: &TrainConfig, n: usize, step: u64) -> Vec<usize> {
    let mut rng = step_rng(cfg.seed, 0xba7c_4e5e_1ec7_0000, step);
    let mut idx = sample_indices(&mut rng, n, cfg.batch.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// Assemble the batch for `indices` at `step`. Timestep, noise and mask
/// of each item depend only on `(seed, step, index)`, never on the other
/// items, so the loss does not depend on the order of `indices`.
pub fn prepare_batch(
    cfg: &TrainConfig,
    set: &TrainingSet,
    sched: &NoiseSchedule,
    indices: &[usize],
    step: u64,
) -> Result<PreparedBatch> {
    let mut indices = indices.to_vec();
    indices.sort_unstable();
    if let Some(&i) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(contract_err!("batch index {i} outside a set of {}", set.len()));
    }
    let masked = cfg.interpolation && step % 2 == 1;
    let mut ts = Vec::new();
    let mut eps = Vec::new();
    let mut aux = Vec::new();
    for &i in &indices {
        let mut rng = step_rng(cfg.seed, 0x0015_e5ee_d000_0000, (step << 24) | i as u64);
        ts.push(rng.random_range(0..sched.len()));
        let shape = set.latents[i].shape().to_vec();
        eps.push(Tensor::randn(shape.clone(), &mut rng));
        let [f, h, w] = [shape[1], shape[2], shape[3]];
        aux.push(if masked {
            let mask = InterpolationMask::new(f, MaskPattern::Random(rng.random()))?;
            let rgb = set.rgb[i].reshape([vec![1], set.rgb[i].shape().to_vec()].concat())?;
            mask.aux(&rgb)?
        } else {
            empty_aux(1, f, h, w)
        });
    }
    let x0 = stack_images(&indices.iter().map(|&i| &set.latents[i]).collect::<Vec<_>>())?;
    let eps = stack_images(&eps.iter().collect::<Vec<_>>())?;
    let aux = Tensor::from_vec(
        [vec![indices.len()], aux[0].shape()[1..].to_vec()].concat(),
        aux.into_iter().flat_map(Tensor::into_data).collect(),
    )?;
    let cond = cfg.mode.uses_cond_frame();
    let x_t = forward_diffuse_batch(&VideoLatent::new(x0, cond)?, &ts, &eps, sched)?;
    let mut weights = Tensor::ones(eps.shape().to_vec());
    if cond {
        let [b, c, f, h, w] = [eps.dim(0), eps.dim(1), eps.dim(2), eps.dim(3), eps.dim(4)];
        for bc in 0..b * c {
            weights.data_mut()[bc * f * h * w..][..h * w].fill(0.0);
        }
    }
    let firsts: Vec<Tensor> = indices.iter().map(|&i| set.i_vae(i)).collect();
    let i_vae = stack_images(&firsts.iter().collect::<Vec<_>>())?;
    let i_clip = {
        let d = set.i_clip[0].len();
        Tensor::from_vec(vec![indices.len(), d], indices.iter().flat_map(|&i| set.i_clip[i].data().to_vec()).collect())?
    };
    Ok(PreparedBatch {
        input: with_aux(&x_t.data, &aux)?,
        indices,
        ts,
        eps,
        weights,
        i_vae,
        i_clip,
        mode: cfg.mode,
        masked,
    })
}

/// Mean squared error between predicted and true noise over the weighted
/// entries, on any tape precision.
pub fn batch_loss<'t, S: Scalar>(
    model: &DiffusionModel,
    tape: &'t Tape<S>,
    ps: &ParamStore<S>,
    batch: &PreparedBatch,
) -> Result<(Var<'t, S>, Var<'t, S>)> {
    let input = tape.constant(batch.input.cast());
    let i_vae = tape.constant(batch.i_vae.cast());
    let i_clip = tape.constant(batch.i_clip.cast());
    let eps_hat = model.predict(tape, ps, &input, &batch.ts, batch.mode, &i_vae, &i_clip)?;
    let count = batch.weights.data().iter().filter(|&&w| w != 0.0).count();
    let diff = eps_hat.sub(&tape.constant(batch.eps.cast()))?.mul(&tape.constant(batch.weights.cast()))?;
    Ok((diff.square().sum().scale(1.0 / count.max(1) as f64), eps_hat))
}

/// One optimisation step on `indices`; returns the loss before the update.
pub fn train_step(
    model: &DiffusionModel,
    ps: &mut ParamStore,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    set: &TrainingSet,
    sched: &NoiseSchedule,
    indices: &[usize],
    step: u64,
) -> Result<f64> {
    let batch = prepare_batch(cfg, set, sched, indices, step)?;
    ps.zero_grad();
    let tape = Tape::new();
    let (loss, eps_hat) = batch_loss(model, &tape, ps, &batch)?;
    let value = loss.value().item() as f64;
    if !value.is_finite() {
        let per = eps_hat.value().len() / batch.indices.len();
        let k = (0..batch.indices.len())
            .find(|&k| !eps_hat.value().data()[k * per..(k + 1) * per].iter().all(|v| v.is_finite()))
            .unwrap_or(0);
        return Err(Error::Numeric(format!(
            "loss is {value} at step {step}: batch item {k} (dataset index {}, t = {})",
            batch.indices[k], batch.ts[k]
        )));
    }
    tape.backward_into(&loss, ps)?;
    opt.step(ps)?;
    Ok(value)
}

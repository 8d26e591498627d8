//! Image conditioning: a small autoencoder whose latents carry the
//! conditioning frame, a fixed embedder standing in for a pretrained image
//! encoder, and the learned adapter that fuses both into cross-attention
//! tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Checkpoint;
use crate::error::{contract_err, shape_err, Result};
use crate::nn::{Conv2d, Linear};
use crate::params::{Initializer, ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::training::{AdamW, AdamWConfig};

/// Spatial reduction between images and latents.
pub const VAE_FACTOR: usize = 4;
pub const LATENT_CHANNELS: usize = 4;
/// Width of the embedder output.
pub const EMBED_DIM: usize = 64;

fn image_dims(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [b, 3, h, w] if h % VAE_FACTOR == 0 && w % VAE_FACTOR == 0 && h > 0 && w > 0 => Ok([b, 3, h, w]),
        _ => Err(shape_err!(
            "{what} expects (b, 3, h, w) images with h and w multiples of {VAE_FACTOR}, got {shape:?}"
        )),
    }
}

/// Image to latent: two stride-free conv stages, each followed by 2×2
/// average pooling, then a projection to the latent channels.
#[derive(Debug, Clone)]
pub struct VaeEncoder {
    conv_in: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    conv_out: Conv2d,
}

impl VaeEncoder {
    pub fn new(scope: &mut Scope<'_>, hidden: [usize; 2]) -> Self {
        let [c1, c2] = hidden;
        Self {
            conv_in: Conv2d::same(&mut scope.sub("conv_in"), 3, c1),
            down1: Conv2d::same(&mut scope.sub("down1"), c1, c1),
            down2: Conv2d::same(&mut scope.sub("down2"), c1, c2),
            conv_out: Conv2d::same(&mut scope.sub("conv_out"), c2, LATENT_CHANNELS),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, ps: &ParamStore<S>, x: &Var<'t, S>) -> Result<Var<'t, S>> {
        image_dims(x.shape(), "vae encoder")?;
        let h = self.conv_in.forward(tape, ps, x)?.silu();
        let h = self.down1.forward(tape, ps, &h)?.silu().avg_pool2()?;
        let h = self.down2.forward(tape, ps, &h)?.silu().avg_pool2()?;
        self.conv_out.forward(tape, ps, &h)
    }
}

/// Latent to image: nearest-neighbour upsampling followed by convolution,
/// mirroring the encoder, with a tanh output in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct VaeDecoder {
    conv_in: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

impl VaeDecoder {
    pub fn new(scope: &mut Scope<'_>, hidden: [usize; 2]) -> Self {
        let [c1, c2] = hidden;
        Self {
            conv_in: Conv2d::same(&mut scope.sub("conv_in"), LATENT_CHANNELS, c2),
            up1: Conv2d::same(&mut scope.sub("up1"), c2, c1),
            up2: Conv2d::same(&mut scope.sub("up2"), c1, c1),
            conv_out: Conv2d::same(&mut scope.sub("conv_out"), c1, 3),
        }
    }

    pub fn forward<'t, S: Scalar>(&self, tape: &'t Tape<S>, ps: &ParamStore<S>, z: &Var<'t, S>) -> Result<Var<'t, S>> {
        match *z.shape() {
            [_, LATENT_CHANNELS, _, _] => {}
            ref s => return Err(shape_err!("vae decoder expects (b, {LATENT_CHANNELS}, h, w), got {s:?}")),
        }
        let h = self.conv_in.forward(tape, ps, z)?.silu();
        let h = self.up1.forward(tape, ps, &h.upsample2()?)?.silu();
        let h = self.up2.forward(tape, ps, &h.upsample2()?)?.silu();
        Ok(self.conv_out.forward(tape, ps, &h)?.tanh())
    }
}

#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate, decayed to zero along a half cosine.
    pub lr: f64,
    /// Side of the square random crops trained on; `None` uses whole images.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, lr: 6e-3, crop: Some(32), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct VaeReport {
    pub losses: Vec<f64>,
    pub latent_scale: f32,
}

/// The autoencoder for images in `[-1, 1]`.
///
/// Encoding is deterministic. Latents handed out by [`ToyVae::encode`] are
/// multiplied by `latent_scale` (the reciprocal standard deviation over the
/// training images) so the diffusion model sees unit-scale data;
/// [`ToyVae::decode`] undoes the scaling.
#[derive(Debug, Clone)]
pub struct ToyVae {
    pub encoder: VaeEncoder,
    pub decoder: VaeDecoder,
    pub store: ParamStore,
    pub hidden: [usize; 2],
    latent_scale: f32,
    trained: bool,
}

impl ToyVae {
    pub const DEFAULT_HIDDEN: [usize; 2] = [16, 64];

    pub fn new(hidden: [usize; 2], seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, seed);
        let mut root = Scope::new(&mut init);
        let encoder = VaeEncoder::new(&mut root.sub("encoder"), hidden);
        let decoder = VaeDecoder::new(&mut root.sub("decoder"), hidden);
        Self { encoder, decoder, store, hidden, latent_scale: 1.0, trained: false }
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn latent_scale(&self) -> f32 {
        self.latent_scale
    }

    /// `(b, 3, H, W)` images to scaled `(b, 4, H/4, W/4)` latents.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let z = self.encoder.forward(&tape, &self.store, &tape.constant(images.clone()))?;
        Ok(z.value().scale(self.latent_scale))
    }

    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        if !self.trained {
            return Err(contract_err!("the VAE decoder needs trained weights"));
        }
        let tape = Tape::no_grad();
        let z = tape.constant(latents.scale(1.0 / self.latent_scale));
        let x = self.decoder.forward(&tape, &self.store, &z)?;
        Ok(x.value().map(|v| v.clamp(-1.0, 1.0)))
    }

    /// `(b, 3, f, H, W)` video to `(b, 4, f, H/4, W/4)` latents, frame by frame.
    pub fn encode_frames(&self, video: &Tensor) -> Result<Tensor> {
        let [b, _, f, _, _] = five(video.shape())?;
        let images = video.rearrange("b c f h w -> (b f) c h w", &[])?;
        self.encode(&images)?.rearrange("(b f) c h w -> b c f h w", &[("b", b), ("f", f)])
    }

    /// `(b, 4, f, h, w)` latents to `(b, 3, f, 4h, 4w)` pixels, frame by frame.
    pub fn decode_frames(&self, latents: &Tensor) -> Result<Tensor> {
        let [b, _, f, _, _] = five(latents.shape())?;
        let z = latents.rearrange("b c f h w -> (b f) c h w", &[])?;
        self.decode(&z)?.rearrange("(b f) c h w -> b c f h w", &[("b", b), ("f", f)])
    }

    /// Mean squared reconstruction error over `(n, 3, H, W)` images.
    pub fn reconstruction_mse(&self, images: &Tensor) -> Result<f64> {
        let n = images.dim(0);
        let mut total = 0.0;
        for start in (0..n).step_by(32) {
            let chunk = slice_batch(images, start, (start + 32).min(n));
            let rec = self.decode(&self.encode(&chunk)?)?;
            total += rec.sub(&chunk)?.data().iter().map(|&d| (d as f64).powi(2)).sum::<f64>();
        }
        Ok(total / images.len() as f64)
    }

    /// Fit on `(n, 3, H, W)` images with a pixel MSE objective, then set the
    /// latent scale and freeze.
    pub fn train(&mut self, images: &Tensor, cfg: &VaeTrainConfig) -> Result<VaeReport> {
        let [n, _, h, w] = image_dims(images.shape(), "vae training")?;
        if let Some(c) = cfg.crop {
            if c == 0 || c % VAE_FACTOR != 0 || c > h || c > w {
                return Err(contract_err!("crop {c} must be a positive multiple of {VAE_FACTOR} within {h}x{w}"));
            }
        }
        if n == 0 || cfg.batch == 0 {
            return Err(contract_err!("vae training needs images and a nonzero batch"));
        }
        let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, beta1: 0.9, weight_decay: 0.0, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let progress = step as f64 / cfg.steps as f64;
            opt.config.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let idx: Vec<usize> = (0..cfg.batch.min(n)).map(|_| rng.random_range(0..n)).collect();
            let mut batch = gather(images, &idx);
            if let Some(c) = cfg.crop {
                let y = VAE_FACTOR * rng.random_range(0..=(h - c) / VAE_FACTOR);
                let x = VAE_FACTOR * rng.random_range(0..=(w - c) / VAE_FACTOR);
                batch = crop(&batch, y, x, c);
            }
            self.store.zero_grad();
            let tape = Tape::new();
            let x = tape.constant(batch);
            let z = self.encoder.forward(&tape, &self.store, &x)?;
            let rec = self.decoder.forward(&tape, &self.store, &z)?;
            let loss = rec.sub(&x)?.square().mean();
            let l = loss.value().item() as f64;
            if !l.is_finite() {
                return Err(crate::Error::Numeric(format!("vae loss became {l} at step {step}")));
            }
            losses.push(l);
            tape.backward_into(&loss, &mut self.store)?;
            opt.step(&mut self.store)?;
        }
        self.store.zero_grad();
        self.latent_scale = 1.0;
        let z = self.encode(images)?;
        let mean = z.mean() as f64;
        let var = z.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / z.len() as f64;
        self.latent_scale = (1.0 / var.sqrt().max(1e-6)) as f32;
        self.store.freeze();
        self.trained = true;
        Ok(VaeReport { losses, latent_scale: self.latent_scale })
    }

    pub fn save(&self, ck: &mut Checkpoint) {
        ck.set("vae.hidden", format!("{},{}", self.hidden[0], self.hidden[1]));
        ck.set("vae.latent_scale", self.latent_scale.to_bits());
        ck.set("vae.trained", self.trained);
        ck.push_store("vae", &self.store);
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        let hidden = ck.get("vae.hidden")?;
        let parsed: Vec<usize> = hidden.split(',').filter_map(|s| s.parse().ok()).collect();
        let [c1, c2] = parsed[..] else {
            return Err(crate::Error::Format { offset: 0, msg: format!("bad vae.hidden '{hidden}'") });
        };
        let mut vae = Self::new([c1, c2], 0);
        ck.load_store("vae", &mut vae.store)?;
        vae.latent_scale = f32::from_bits(ck.parse("vae.latent_scale")?);
        vae.trained = ck.parse("vae.trained")?;
        if vae.trained {
            vae.store.freeze();
        }
        Ok(vae)
    }
}

fn five(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [b, c, f, h, w] => Ok([b, c, f, h, w]),
        _ => Err(shape_err!("expected a (b, c, f, h, w) video, got {shape:?}")),
    }
}

fn slice_batch(t: &Tensor, start: usize, end: usize) -> Tensor {
    let per = t.len() / t.dim(0).max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::from_parts_unchecked(shape, t.data()[start * per..end * per].to_vec())
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.len() / t.dim(0).max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::from_parts_unchecked(shape, data)
}

fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    let (planes, h, w) = (t.dim(0) * t.dim(1), t.dim(2), t.dim(3));
    let mut data = Vec::with_capacity(planes * size * size);
    for p in 0..planes {
        for y in y0..y0 + size {
            data.extend_from_slice(&t.data()[(p * h + y) * w + x0..][..size]);
        }
    }
    Tensor::from_parts_unchecked(vec![t.dim(0), t.dim(1), size, size], data)
}

/// A fixed, randomly initialised convolutional image descriptor with
/// unit-norm output of width [`EMBED_DIM`].
///
/// Two stride-2 convolutions with tanh, then average pooling of each
/// channel over the four image quadrants.
#[derive(Debug, Clone)]
pub struct Embedder {
    conv1: Conv2d,
    conv2: Conv2d,
    store: ParamStore,
    pub seed: u64,
}

impl Embedder {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, seed);
        let mut root = Scope::new(&mut init);
        let conv1 = Conv2d::new(&mut root.sub("conv1"), 3, 8, 3, 2, 1);
        let conv2 = Conv2d::new(&mut root.sub("conv2"), 8, EMBED_DIM / 4, 3, 2, 1);
        drop(init);
        store.freeze();
        Self { conv1, conv2, store, seed }
    }

    /// `(b, 3, H, W)` images to `(b, EMBED_DIM)` unit vectors.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let [b, _, _, _] = image_dims(images.shape(), "embedder")?;
        let tape = Tape::no_grad();
        let x = tape.constant(images.clone());
        let h = self.conv1.forward(&tape, &self.store, &x)?.tanh();
        let h = self.conv2.forward(&tape, &self.store, &h)?.tanh();
        let h = h.value();
        let (c, hh, ww) = (h.dim(1), h.dim(2), h.dim(3));
        let mut out = Vec::with_capacity(b * EMBED_DIM);
        for bi in 0..b {
            let start = out.len();
            for ci in 0..c {
                let plane = &h.data()[(bi * c + ci) * hh * ww..][..hh * ww];
                for (qy, qx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let ys = quadrant(hh, qy);
                    let xs = quadrant(ww, qx);
                    let mut s = 0.0f64;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            s += plane[y * ww + x] as f64;
                        }
                    }
                    out.push(s / (ys.len() * xs.len()) as f64);
                }
            }
            let norm = out[start..].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut out[start..] {
                *v /= norm;
            }
        }
        Tensor::from_vec(vec![b, EMBED_DIM], out.into_iter().map(|v| v as f32).collect())
    }
}

/// Half of `0..n`, with a one-pixel image using the same row twice.
fn quadrant(n: usize, half: usize) -> std::ops::Range<usize> {
    let mid = n.div_ceil(2);
    if half == 0 {
        0..mid
    } else {
        (n - mid)..n
    }
}

/// Learned linear fusion of the latent and the embedding into tokens: each
/// latent position becomes one token and the embedding one more.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub latent_proj: Linear,
    pub embed_proj: Linear,
    pub width: usize,
}

impl Adapter {
    pub fn new(scope: &mut Scope<'_>, width: usize) -> Self {
        Self {
            latent_proj: Linear::new(&mut scope.sub("latent_proj"), LATENT_CHANNELS, width, true),
            embed_proj: Linear::new(&mut scope.sub("embed_proj"), EMBED_DIM, width, true),
            width,
        }
    }

    /// `(b, 4, h, w)` latents and `(b, EMBED_DIM)` embeddings to
    /// `(b, h·w + 1, width)` tokens.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        i_vae: &Var<'t, S>,
        i_clip: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let (b, hw) = match *i_vae.shape() {
            [b, LATENT_CHANNELS, h, w] => (b, h * w),
            ref s => return Err(shape_err!("adapter expects (b, {LATENT_CHANNELS}, h, w) latents, got {s:?}")),
        };
        if i_clip.shape() != [b, EMBED_DIM] {
            return Err(shape_err!("adapter expects ({b}, {EMBED_DIM}) embeddings, got {:?}", i_clip.shape()));
        }
        let pos = i_vae.rearrange("b c h w -> b (h w) c", &[])?;
        let pos = self.latent_proj.forward(tape, ps, &pos)?;
        let glob = self.embed_proj.forward(tape, ps, &i_clip.reshape(&[b, 1, EMBED_DIM])?)?;
        let tokens = Var::concat(&[&pos, &glob], 1)?;
        debug_assert_eq!(tokens.shape()[1], hw + 1);
        Ok(tokens)
    }
}

/// Everything derived from one conditioning image.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    /// Scaled latent `(4, h, w)`.
    pub i_vae: Tensor,
    /// Unit embedding `(EMBED_DIM)`.
    pub i_clip: Tensor,
    /// Adapter output `(h·w + 1, width)`.
    pub tokens: Tensor,
}

/// Encode one `(3, H, W)` image into its bundle.
pub fn encode_condition(
    vae: &ToyVae,
    embedder: &Embedder,
    adapter: &Adapter,
    ps: &ParamStore,
    image: &Tensor,
) -> Result<ConditioningBundle> {
    let [c, h, w] = match *image.shape() {
        [c, h, w] => [c, h, w],
        ref s => return Err(shape_err!("conditioning image must be (3, h, w), got {s:?}")),
    };
    if c != 3 {
        return Err(shape_err!("conditioning image must have 3 channels, got {c}"));
    }
    let batch = image.reshape(vec![1, c, h, w])?;
    let i_vae = vae.encode(&batch)?;
    let i_clip = embedder.embed(&batch)?;
    let tape = Tape::no_grad();
    let tokens = adapter.forward(&tape, ps, &tape.constant(i_vae.clone()), &tape.constant(i_clip.clone()))?;
    let squeeze = |t: &Tensor| t.reshape(t.shape()[1..].to_vec());
    Ok(ConditioningBundle { i_vae: squeeze(&i_vae)?, i_clip: squeeze(&i_clip)?, tokens: squeeze(tokens.value())? })
}

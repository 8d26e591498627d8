//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward function; it never reads
//! gradients produced by the tape, so it stays an independent check of
//! every backward rule.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// Relative error of the whole probed gradient, inputs and parameters
    /// concatenated into one vector.
    pub rel_error: f64,
    /// `(label, relative error, coordinates checked)` per tensor, for
    /// diagnosis. A tensor whose true gradient is zero (a key bias under
    /// softmax, say) shows rounding noise here.
    pub per_tensor: Vec<(String, f64, usize)>,
}

/// Which coordinates of each tensor get perturbed.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub step: f64,
    /// Use the fourth-order five-point central stencil instead of the
    /// plain `(f(x+h) - f(x-h)) / 2h`. Its smaller truncation error allows
    /// a larger step, which keeps 32-bit rounding noise down.
    pub five_point: bool,
    /// Cap on coordinates per tensor; `None` checks every entry.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Probe {
    pub fn new(step: f64) -> Self {
        Self { step, five_point: false, max_coords: None, seed: 0 }
    }

    pub fn five_point(step: f64) -> Self {
        Self { five_point: true, ..Self::new(step) }
    }

    pub fn sampled(self, max_coords: usize, seed: u64) -> Self {
        Self { max_coords: Some(max_coords), seed, ..self }
    }
}

/// Relative error between two gradient vectors, measured in the 2-norm:
/// `|a - n| / max(|a|, |n|)`. Two vanishing gradients count as agreeing.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        return diff;
    }
    diff / scale
}

/// Compare tape gradients of a scalar `loss` against central differences,
/// with respect to every input tensor and the parameters `params`.
pub fn check<S, F>(
    store: &ParamStore<S>,
    params: &[ParamId],
    inputs: &[Tensor<S>],
    probe: Probe,
    loss: F,
) -> Result<GradCheck>
where
    S: Scalar,
    F: for<'t> Fn(&'t Tape<S>, &ParamStore<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>,
{
    // Analytic side.
    let tape = Tape::new();
    let vars: Vec<Var<S>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let watched: Vec<Var<S>> = params.iter().map(|&id| tape.param(store, id)).collect();
    let out = loss(&tape, store, &vars)?;
    let grads = tape.backward(&out)?;
    let zeros = |t: &Tensor<S>| Tensor::<S>::zeros(t.shape().to_vec());
    let analytic_inputs: Vec<Tensor<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(v).cloned().unwrap_or_else(|| zeros(t)))
        .collect();
    let analytic_params: Vec<Tensor<S>> = watched
        .iter()
        .zip(params)
        .map(|(v, &id)| grads.get(v).cloned().unwrap_or_else(|| zeros(store.value(id))))
        .collect();
    drop(grads);
    drop(vars);
    drop(watched);
    drop(out);
    drop(tape);

    let eval = |store: &ParamStore<S>, inputs: &[Tensor<S>]| -> Result<f64> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<S>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(loss(&tape, store, &vars)?.value().item().as_f64())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let pick = |len: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        match probe.max_coords {
            Some(k) if k < len => {
                let mut v = sample(rng, len, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        }
    };

    let mut report = GradCheck { rel_error: 0.0, per_tensor: Vec::new() };
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut push = |label: String, a: Vec<f64>, n: Vec<f64>| {
        let e = relative_error(&a, &n);
        all_a.extend_from_slice(&a);
        all_n.extend_from_slice(&n);
        report.per_tensor.push((label, e, a.len()));
    };

    // Difference quotient at one coordinate, given a way to evaluate the
    // loss with that coordinate set to a value.
    let derivative = |orig: S, eval_at: &mut dyn FnMut(S) -> Result<f64>| -> Result<f64> {
        let h = S::of(probe.step);
        // Divide by the steps actually taken in this precision.
        let (xp, xm) = (orig + h, orig - h);
        let d1 = (eval_at(xp)? - eval_at(xm)?) / (xp - xm).as_f64();
        if !probe.five_point {
            return Ok(d1);
        }
        let (xp2, xm2) = (orig + h + h, orig - h - h);
        let d2 = (eval_at(xp2)? - eval_at(xm2)?) / (xp2 - xm2).as_f64();
        Ok((4.0 * d1 - d2) / 3.0)
    };

    let mut work_inputs = inputs.to_vec();
    for (i, analytic) in analytic_inputs.iter().enumerate() {
        let coords = pick(inputs[i].len(), &mut rng);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &c in &coords {
            let orig = work_inputs[i].data()[c];
            let d = derivative(orig, &mut |x| {
                work_inputs[i].data_mut()[c] = x;
                eval(store, &work_inputs)
            })?;
            work_inputs[i].data_mut()[c] = orig;
            n.push(d);
            a.push(analytic.data()[c].as_f64());
        }
        push(format!("input{i}"), a, n);
    }

    let mut work_store = store.clone();
    for (j, &id) in params.iter().enumerate() {
        let coords = pick(store.value(id).len(), &mut rng);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &c in &coords {
            let orig = store.value(id).data()[c];
            let d = derivative(orig, &mut |x| {
                work_store.value_mut(id).data_mut()[c] = x;
                eval(&work_store, inputs)
            })?;
            work_store.value_mut(id).data_mut()[c] = orig;
            n.push(d);
            a.push(analytic_params[j].data()[c].as_f64());
        }
        push(store.get(id).name.clone(), a, n);
    }
    report.rel_error = relative_error(&all_a, &all_n);
    Ok(report)
}

/// Reduce an output to a scalar with fixed random weights, so that every
/// output element contributes an O(1) gradient.
pub fn random_projection<'t, S: Scalar>(out: &Var<'t, S>, seed: u64) -> Result<Var<'t, S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = out.value().len();
    let data = (0..n).map(|_| S::of(rng.random_range(-1.0..1.0))).collect();
    let w = out.tape().constant(Tensor::from_vec(out.shape().to_vec(), data)?);
    Ok(out.mul(&w)?.sum())
}

/// The layer types covered by [`check_layer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv2d,
    Conv1d,
    GroupNorm,
    Pseudo3dConv,
    SpatialAttention,
    TemporalAttention,
    CrossAttention,
    TimestepEmbedding,
    VaeEncoder,
    VaeDecoder,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Linear,
        LayerKind::Conv2d,
        LayerKind::Conv1d,
        LayerKind::GroupNorm,
        LayerKind::Pseudo3dConv,
        LayerKind::SpatialAttention,
        LayerKind::TemporalAttention,
        LayerKind::CrossAttention,
        LayerKind::TimestepEmbedding,
        LayerKind::VaeEncoder,
        LayerKind::VaeDecoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Conv1d => "conv1d",
            LayerKind::GroupNorm => "group-norm",
            LayerKind::Pseudo3dConv => "pseudo3d-conv",
            LayerKind::SpatialAttention => "spatial-attention",
            LayerKind::TemporalAttention => "temporal-attention",
            LayerKind::CrossAttention => "cross-attention",
            LayerKind::TimestepEmbedding => "timestep-embedding",
            LayerKind::VaeEncoder => "vae-encoder",
            LayerKind::VaeDecoder => "vae-decoder",
        }
    }
}

type LayerFn<S> =
    Box<dyn for<'t> Fn(&'t Tape<S>, &ParamStore<S>, &[Var<'t, S>]) -> Result<Var<'t, S>>>;

/// One randomized gradient check of a layer: random small shapes, random
/// parameters (not the structured initial values) and a random projection
/// of the output as the loss. Every input and every parameter is probed.
pub fn check_layer<S: Scalar>(kind: LayerKind, seed: u64, probe: Probe) -> Result<GradCheck> {
    use crate::nn::*;
    use crate::params::{Initializer, Scope};

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dim = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let groups = dim(1, 2);
    let c = groups * dim(1, 2);
    let c_out = groups * dim(1, 2);
    // A norm group of two or three values sits at a point of extreme
    // curvature where no finite step is accurate; keep groups at eight
    // values or more for the bare norm layer.
    let lo = if kind == LayerKind::GroupNorm { 2 } else { 1 };
    let (b, f, h, w) = (dim(1, 2), dim(lo, 3), dim(lo, 3), dim(lo, 3));
    let heads = if c % 2 == 0 { dim(1, 2) } else { 1 };
    let ctx = dim(1, 3);
    let n_tok = dim(1, 3);

    let mut store32 = ParamStore::<f32>::new();
    let mut init = Initializer::new(&mut store32, seed);
    let sc = &mut Scope::new(&mut init);
    let video = vec![b, c, f, h, w];
    let (shapes, forward): (Vec<Vec<usize>>, LayerFn<S>) = match kind {
        LayerKind::Linear => {
            let l = Linear::new(sc, c, c_out, true);
            (vec![vec![b, f, c]], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::Conv2d => {
            let l = Conv2d::same(sc, c, c_out);
            (vec![vec![b, c, h, w]], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::Conv1d => {
            let l = Conv1d::new(sc, c, c_out, 3, 1, Init::fan_in(3 * c));
            (vec![vec![b, c, f + 1]], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::GroupNorm => {
            let l = GroupNorm::new(sc, groups, c)?;
            (vec![video], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::Pseudo3dConv => {
            let l = Pseudo3dConv::new(sc, c, c_out);
            (vec![video], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::SpatialAttention => {
            let l = SpatialAttention::new(sc, c, groups, heads)?;
            (vec![video], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::TemporalAttention => {
            let l = TemporalAttention::new(sc, c, groups, heads)?;
            (vec![video], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::CrossAttention => {
            let l = CrossAttention::new(sc, c, ctx, groups, heads)?;
            (
                vec![video, vec![b, n_tok, ctx]],
                Box::new(move |t, p, v| l.forward(t, p, &v[0], &v[1])),
            )
        }
        LayerKind::TimestepEmbedding => {
            let l = TimestepEmbedding::new(sc, 2 * ctx, c);
            let ts: Vec<usize> = (0..b).map(|i| (seed as usize * 31 + i * 17) % 1000).collect();
            (vec![], Box::new(move |t, p, _| l.forward(t, p, &ts)))
        }
        LayerKind::VaeEncoder => {
            let l = crate::conditioning::VaeEncoder::new(sc, [c, c_out]);
            (vec![vec![b, 3, 4 * h, 4 * w]], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
        LayerKind::VaeDecoder => {
            let l = crate::conditioning::VaeDecoder::new(sc, [c, c_out]);
            (vec![vec![b, 4, h, w]], Box::new(move |t, p, v| l.forward(t, p, &v[0])))
        }
    };
    drop(init);

    let mut store: ParamStore<S> = store32.cast();
    let ids: Vec<ParamId> = store.ids().collect();
    for &id in &ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, Tensor::<f64>::randn(shape, &mut rng).scale(0.6).cast())?;
    }
    let inputs: Vec<Tensor<S>> =
        shapes.into_iter().map(|s| Tensor::<f64>::randn(s, &mut rng).cast()).collect();
    let proj_seed = rng.random();
    check(&store, &ids, &inputs, probe, |t, p, v| random_projection(&forward(t, p, v)?, proj_seed))
}


#[cfg(test)]
mod layer_tests {
    use super::*;

    #[test]
    fn every_layer_passes_in_f64() {
        for kind in LayerKind::ALL {
            for seed in 0..50 {
                let r = check_layer::<f64>(kind, seed, Probe::five_point(1e-4)).unwrap();
                assert!(r.rel_error < 1e-6, "{}: {r:?}", kind.name());
            }
        }
    }

    #[test]
    fn every_layer_passes_in_f32() {
        for kind in LayerKind::ALL {
            for seed in 0..50 {
                let r = check_layer::<f32>(kind, seed, Probe::five_point(1e-2)).unwrap();
                assert!(r.rel_error < 1e-3, "{}: {r:?}", kind.name());
            }
        }
    }
}

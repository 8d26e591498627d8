use super::video_dims;
use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Var};

/// 2D convolution over `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let init = Init::fan_in(in_channels * kernel * kernel);
        Self {
            weight: scope.param("weight", &[out_channels, in_channels, kernel, kernel], init),
            bias: scope.param("bias", &[out_channels], init),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// The U-Net setting: kernel 3, stride 1, padding 1.
    pub fn same(scope: &mut Scope<'_>, in_channels: usize, out_channels: usize) -> Self {
        Self::new(scope, in_channels, out_channels, 3, 1, 1)
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        x.conv2d(&w, Some(&b), self.stride, self.padding)
    }
}

/// 1D convolution over `(N, C, L)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        scope: &mut Scope<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        init: Init,
    ) -> Self {
        let bias_init = match init {
            Init::Identity => Init::Const(0.0),
            other => other,
        };
        Self {
            weight: scope.param("weight", &[out_channels, in_channels, kernel], init),
            bias: scope.param("bias", &[out_channels], bias_init),
            in_channels,
            out_channels,
            kernel,
            padding,
        }
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let w = tape.param(ps, self.weight);
        let b = tape.param(ps, self.bias);
        x.conv1d(&w, Some(&b), 1, self.padding)
    }
}

/// A 2D spatial convolution followed by a 1D temporal convolution.
///
/// The temporal kernel starts as the identity, so a freshly built layer
/// acts exactly like a per-frame 2D convolution.
#[derive(Debug, Clone)]
pub struct Pseudo3dConv {
    pub spatial: Conv2d,
    pub temporal: Conv1d,
}

impl Pseudo3dConv {
    pub fn new(scope: &mut Scope<'_>, in_channels: usize, out_channels: usize) -> Self {
        let spatial = Conv2d::same(&mut scope.sub("spatial"), in_channels, out_channels);
        let temporal =
            Conv1d::new(&mut scope.sub("temporal"), out_channels, out_channels, 3, 1, Init::Identity);
        Self { spatial, temporal }
    }

    pub fn in_channels(&self) -> usize {
        self.spatial.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.spatial.out_channels
    }

    /// `b c f h w -> (b f) c h w`, 2D conv, `-> (b h w) c f`, 1D conv,
    /// `-> b c f h w`.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let [b, c, _f, h, _w] = video_dims(v)?;
        if c != self.in_channels() {
            return Err(shape_err!(
                "pseudo-3D conv expects {} channels, got {c}",
                self.in_channels()
            ));
        }
        let frames = v.rearrange("b c f h w -> (b f) c h w", &[])?;
        let spatial = self.spatial.forward(tape, ps, &frames)?;
        let columns = spatial.rearrange("(b f) c h w -> (b h w) c f", &[("b", b)])?;
        let temporal = self.temporal.forward(tape, ps, &columns)?;
        temporal.rearrange("(b h w) c f -> b c f h w", &[("b", b), ("h", h)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Initializer, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(cin: usize, cout: usize, seed: u64) -> (Pseudo3dConv, ParamStore<f32>) {
        let mut ps = ParamStore::new();
        let mut init = Initializer::new(&mut ps, seed);
        let l = Pseudo3dConv::new(&mut Scope::new(&mut init), cin, cout);
        (l, ps)
    }

    #[test]
    fn preserves_frames_and_space() {
        let (l, ps) = layer(3, 5, 1);
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = tape.constant(Tensor::randn(vec![2, 3, 4, 6, 5], &mut rng));
        assert_eq!(l.forward(&tape, &ps, &v).unwrap().shape(), &[2, 5, 4, 6, 5]);
        let bad = tape.constant(Tensor::zeros(vec![2, 4, 4, 6, 5]));
        assert!(matches!(l.forward(&tape, &ps, &bad), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn box_temporal_kernel_sums_neighbouring_frames() {
        let (l, mut ps) = layer(1, 1, 2);
        // Spatial identity, temporal [1, 1, 1].
        let mut sw = Tensor::zeros(vec![1, 1, 3, 3]);
        sw.data_mut()[4] = 1.0;
        ps.set_value(l.spatial.weight, sw).unwrap();
        ps.set_value(l.spatial.bias, Tensor::zeros(vec![1])).unwrap();
        ps.set_value(l.temporal.weight, Tensor::ones(vec![1, 1, 3])).unwrap();
        ps.set_value(l.temporal.bias, Tensor::zeros(vec![1])).unwrap();
        let frames = 5;
        let pattern: Vec<f32> = (0..6).map(|i| i as f32 - 2.5).collect();
        let data = (0..frames).flat_map(|_| pattern.clone()).collect();
        let tape = Tape::no_grad();
        let v = tape.constant(Tensor::from_vec(vec![1, 1, frames, 2, 3], data).unwrap());
        let out = l.forward(&tape, &ps, &v).unwrap();
        for f in 0..frames {
            let factor = if f == 0 || f == frames - 1 { 2.0 } else { 3.0 };
            for (i, &p) in pattern.iter().enumerate() {
                assert!((out.value().data()[f * 6 + i] - factor * p).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (l, mut ps) = layer(2, 3, 3);
        for id in [l.spatial.weight, l.spatial.bias, l.temporal.weight, l.temporal.bias] {
            let shape = ps.value(id).shape().to_vec();
            ps.set_value(id, Tensor::zeros(shape)).unwrap();
        }
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = tape.constant(Tensor::randn(vec![1, 2, 3, 4, 4], &mut rng));
        let out = l.forward(&tape, &ps, &v).unwrap();
        assert!(out.value().data().iter().all(|&x| x == 0.0));
    }
}

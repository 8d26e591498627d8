use super::{video_dims, GroupNorm, Linear};
use crate::error::{shape_err, Result};
use crate::params::{ParamStore, Scope};
use crate::tensor::{Scalar, Tape, Var};

/// Scaled dot-product attention, `softmax(QKᵀ/√d_k)·V`, with learned
/// query/key/value/output projections.
///
/// No positional encoding is added anywhere, so self-attention is exactly
/// equivariant under token permutation.
#[derive(Debug, Clone)]
pub struct Attention {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
    pub dim: usize,
    pub context_dim: usize,
}

impl Attention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, context_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err!("{heads} attention heads do not divide width {dim}"));
        }
        Ok(Self {
            to_q: Linear::new(&mut scope.sub("to_q"), dim, dim, true),
            to_k: Linear::new(&mut scope.sub("to_k"), context_dim, dim, true),
            to_v: Linear::new(&mut scope.sub("to_v"), context_dim, dim, true),
            to_out: Linear::new(&mut scope.sub("to_out"), dim, dim, true),
            heads,
            dim,
            context_dim,
        })
    }

    /// Key dimensionality per head.
    pub fn d_k(&self) -> usize {
        self.dim / self.heads
    }

    /// Attend from `x (B, N, dim)` to `context (B, M, context_dim)`.
    pub fn attend<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
        context: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        Ok(self.attend_with_weights(tape, ps, x, context)?.0)
    }

    /// Like [`attend`](Self::attend), also returning the post-softmax
    /// weights `(B·heads, N, M)`.
    pub fn attend_with_weights<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
        context: &Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        if x.shape().len() != 3 || x.shape()[2] != self.dim {
            return Err(shape_err!("attention queries must be (B, N, {}), got {:?}", self.dim, x.shape()));
        }
        let cs = context.shape();
        if cs.len() != 3 || cs[2] != self.context_dim || cs[0] != x.shape()[0] {
            return Err(shape_err!(
                "attention context must be ({}, M, {}), got {:?}",
                x.shape()[0],
                self.context_dim,
                cs
            ));
        }
        let g = self.heads;
        let split = |t: Var<'t, S>| -> Result<Var<'t, S>> {
            if g == 1 {
                Ok(t)
            } else {
                t.rearrange("b n (g d) -> (b g) n d", &[("g", g)])
            }
        };
        let q = split(self.to_q.forward(tape, ps, x)?)?;
        let k = split(self.to_k.forward(tape, ps, context)?)?;
        let v = split(self.to_v.forward(tape, ps, context)?)?;
        let kt = k.rearrange("b m d -> b d m", &[])?;
        let scores = q.matmul(&kt)?.scale(1.0 / (self.d_k() as f64).sqrt());
        let weights = scores.softmax(2)?;
        let mut out = weights.matmul(&v)?;
        if g > 1 {
            out = out.rearrange("(b g) n d -> b n (g d)", &[("g", g)])?;
        }
        Ok((self.to_out.forward(tape, ps, &out)?, weights))
    }
}

/// Self-attention across the `h·w` positions of each frame.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: GroupNorm,
    pub attn: Attention,
}

impl SpatialAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize, groups: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut scope.sub("norm"), groups, channels)?,
            attn: Attention::new(&mut scope.sub("attn"), channels, channels, heads)?,
        })
    }

    /// `b c f h w -> (b f) (h w) c`, self-attention, and back.
    pub fn attend<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let [b, _, _, h, _] = video_dims(v)?;
        let tokens = v.rearrange("b c f h w -> (b f) (h w) c", &[])?;
        let out = self.attn.attend(tape, ps, &tokens, &tokens)?;
        out.rearrange("(b f) (h w) c -> b c f h w", &[("b", b), ("h", h)])
    }

    /// Residual block: `v + attend(norm(v))`.
    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let n = self.norm.forward(tape, ps, v)?;
        v.add(&self.attend(tape, ps, &n)?)
    }
}

/// Self-attention across the frames at each spatial position.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub attn: Attention,
}

impl TemporalAttention {
    pub fn new(scope: &mut Scope<'_>, channels: usize, groups: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut scope.sub("norm"), groups, channels)?,
            attn: Attention::new(&mut scope.sub("attn"), channels, channels, heads)?,
        })
    }

    /// `b c f h w -> (b h w) f c`, self-attention, and back.
    pub fn attend<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let [b, _, _, h, _] = video_dims(v)?;
        let tokens = v.rearrange("b c f h w -> (b h w) f c", &[])?;
        let out = self.attn.attend(tape, ps, &tokens, &tokens)?;
        out.rearrange("(b h w) f c -> b c f h w", &[("b", b), ("h", h)])
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let n = self.norm.forward(tape, ps, v)?;
        v.add(&self.attend(tape, ps, &n)?)
    }
}

/// Attention from every latent position of the video to the conditioning
/// tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new(
        scope: &mut Scope<'_>,
        channels: usize,
        context_dim: usize,
        groups: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut scope.sub("norm"), groups, channels)?,
            attn: Attention::new(&mut scope.sub("attn"), channels, context_dim, heads)?,
        })
    }

    /// `b c f h w -> b (h w f) c`, queries from the video, keys and values
    /// from `tokens (b, n_tok, context_dim)`, and back.
    pub fn attend<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
        tokens: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let [_, _, _, h, w] = video_dims(v)?;
        if tokens.shape().last() != Some(&self.attn.context_dim) {
            return Err(shape_err!(
                "conditioning tokens have width {:?}, layer expects {}",
                tokens.shape().last(),
                self.attn.context_dim
            ));
        }
        let seq = v.rearrange("b c f h w -> b (h w f) c", &[])?;
        let out = self.attn.attend(tape, ps, &seq, tokens)?;
        out.rearrange("b (h w f) c -> b c f h w", &[("h", h), ("w", w)])
    }

    pub fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v: &Var<'t, S>,
        tokens: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let n = self.norm.forward(tape, ps, v)?;
        v.add(&self.attend(tape, ps, &n, tokens)?)
    }
}

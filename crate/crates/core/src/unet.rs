//! The denoising U-Net: four encoder blocks, a middle block with
//! spatiotemporal attention, four decoder blocks with skip connections,
//! and cross-attention to the conditioning tokens after every block.
//!
//! Every block is a stack of residual units, each unit being
//! `GroupNorm → SiLU → Pseudo3dConv` twice. The timestep enters as a
//! per-block channel bias added right after the first convolution of the
//! block. Space is halved by 2×2 average pooling after each of the first
//! three encoder blocks and doubled by nearest-neighbour upsampling in the
//! decoder; frames are never resampled.

use std::fmt;
use std::str::FromStr;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::nn::{
    Conv2d, CrossAttention, GroupNorm, Linear, Pseudo3dConv, SpatialAttention, TemporalAttention,
    TimestepEmbedding,
};
use crate::params::{Initializer, ParamSink, ParamStore, Scope, ShapeCounter};
use crate::tensor::{Scalar, Tape, Var};

/// Number of encoder (and decoder) blocks.
pub const DEPTH: usize = 4;

/// A positive rational channel multiplier such as `1/8`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WidthScale {
    pub num: usize,
    pub den: usize,
}

impl WidthScale {
    pub const ONE: WidthScale = WidthScale { num: 1, den: 1 };

    pub fn apply(self, width: usize) -> Result<usize> {
        let scaled = width * self.num;
        if self.den == 0 || scaled % self.den != 0 || scaled == 0 {
            return Err(Error::Config(format!("width {width} scaled by {self} is not a positive integer")));
        }
        Ok(scaled / self.den)
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("width scale '{s}' is not of the form n or n/d"));
        let (num, den) = match s.split_once('/') {
            Some((n, d)) => (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(Self { num, den })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub base_widths: [usize; DEPTH],
    pub width_scale: WidthScale,
    /// Pseudo-3D convolutions per encoder/decoder block (even).
    pub layers_per_block: usize,
    /// Pseudo-3D convolutions in the middle block (even, at least 2).
    pub mid_layers: usize,
    pub latent_channels: usize,
    pub aux_channels: usize,
    pub attention_heads: usize,
    pub norm_groups: usize,
    /// Width of the conditioning tokens fed to cross-attention.
    pub context_dim: usize,
    /// Diffusion steps `T`; timesteps must lie in `[0, T)`.
    pub timesteps: usize,
}

impl UNetConfig {
    /// The full-size layout: widths 64/128/256/512, six pseudo-3D layers
    /// per block, four in the middle.
    pub fn full() -> Self {
        Self {
            base_widths: [64, 128, 256, 512],
            width_scale: WidthScale::ONE,
            layers_per_block: 6,
            mid_layers: 4,
            latent_channels: 4,
            aux_channels: 4,
            attention_heads: 1,
            norm_groups: 32,
            context_dim: 768,
            timesteps: 1000,
        }
    }

    /// The full layout at 1/8 width, sized for a CPU.
    pub fn desk() -> Self {
        Self {
            width_scale: WidthScale { num: 1, den: 8 },
            norm_groups: 4,
            context_dim: 32,
            ..Self::full()
        }
    }

    pub fn in_channels(&self) -> usize {
        self.latent_channels + self.aux_channels
    }

    /// Channel widths after scaling.
    pub fn widths(&self) -> Result<[usize; DEPTH]> {
        let mut out = [0; DEPTH];
        for (o, &w) in out.iter_mut().zip(&self.base_widths) {
            *o = self.width_scale.apply(w)?;
        }
        Ok(out)
    }

    pub fn time_dim(&self) -> Result<usize> {
        Ok(4 * self.widths()?[0])
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.widths()?;
        if w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config(format!("widths {w:?} must increase strictly down the encoder")));
        }
        let g = self.norm_groups;
        if g == 0 || w.iter().any(|c| c % g != 0) {
            return Err(Error::Config(format!("group count {g} must divide every width {w:?}")));
        }
        if w[0] % 2 != 0 {
            return Err(Error::Config(format!("first width {} must be even for the timestep table", w[0])));
        }
        let h = self.attention_heads;
        if h == 0 || w.iter().any(|c| c % h != 0) {
            return Err(Error::Config(format!("{h} attention heads must divide every width {w:?}")));
        }
        if self.layers_per_block < 2 || self.layers_per_block % 2 != 0 {
            return Err(Error::Config(format!("layers_per_block {} must be even and >= 2", self.layers_per_block)));
        }
        if self.mid_layers < 2 || self.mid_layers % 2 != 0 {
            return Err(Error::Config(format!("mid_layers {} must be even and >= 2", self.mid_layers)));
        }
        if self.latent_channels == 0 || self.context_dim == 0 || self.timesteps < 2 {
            return Err(Error::Config("latent channels, context width and T must be positive".into()));
        }
        Ok(())
    }

    /// Spatial sizes must survive `DEPTH - 1` halvings.
    pub fn spatial_multiple() -> usize {
        1 << (DEPTH - 1)
    }
}

/// `GN → SiLU → P3D → (+ time bias) → GN → SiLU → P3D`, plus the input
/// (through a 1×1 projection when the width changes).
#[derive(Debug, Clone)]
pub struct ResUnit {
    pub norm1: GroupNorm,
    pub conv1: Pseudo3dConv,
    pub time: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Pseudo3dConv,
    pub skip: Option<Conv2d>,
}

impl ResUnit {
    fn new(
        scope: &mut Scope<'_>,
        cin: usize,
        cout: usize,
        groups: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut scope.sub("norm1"), groups, cin)?,
            conv1: Pseudo3dConv::new(&mut scope.sub("conv1"), cin, cout),
            time: time_dim.map(|d| Linear::new(&mut scope.sub("time"), d, cout, true)),
            norm2: GroupNorm::new(&mut scope.sub("norm2"), groups, cout)?,
            conv2: Pseudo3dConv::new(&mut scope.sub("conv2"), cout, cout),
            skip: (cin != cout).then(|| Conv2d::new(&mut scope.sub("skip"), cin, cout, 1, 1, 0)),
        })
    }

    fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
        temb: &Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let h = self.norm1.forward(tape, ps, x)?.silu();
        let mut h = self.conv1.forward(tape, ps, &h)?;
        if let Some(time) = &self.time {
            h = h.add_channel_bias(&time.forward(tape, ps, temb)?)?;
        }
        let h = self.norm2.forward(tape, ps, &h)?.silu();
        let h = self.conv2.forward(tape, ps, &h)?;
        let residual = match &self.skip {
            None => x.clone(),
            Some(proj) => {
                let [b, _, _, hh, _] = *x.shape() else { unreachable!() };
                let frames = x.rearrange("b c f h w -> (b f) c h w", &[])?;
                proj.forward(tape, ps, &frames)?.rearrange("(b f) c h w -> b c f h w", &[("b", b), ("h", hh)])?
            }
        };
        h.add(&residual)
    }
}

/// Residual units followed by cross-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub units: Vec<ResUnit>,
    pub cross: CrossAttention,
}

impl Block {
    fn new(scope: &mut Scope<'_>, cin: usize, cout: usize, cfg: &UNetConfig) -> Result<Self> {
        let time_dim = cfg.time_dim()?;
        let mut units = Vec::new();
        for i in 0..cfg.layers_per_block / 2 {
            let (ci, td) = if i == 0 { (cin, Some(time_dim)) } else { (cout, None) };
            units.push(ResUnit::new(&mut scope.sub(format!("unit{i}")), ci, cout, cfg.norm_groups, td)?);
        }
        let cross = CrossAttention::new(
            &mut scope.sub("cross"),
            cout,
            cfg.context_dim,
            cfg.norm_groups,
            cfg.attention_heads,
        )?;
        Ok(Self { units, cross })
    }

    fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
        temb: &Var<'t, S>,
        tokens: Option<&Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let mut h = x.clone();
        for u in &self.units {
            h = u.forward(tape, ps, &h, temb)?;
        }
        match tokens {
            Some(t) => self.cross.forward(tape, ps, &h, t),
            None => Ok(h),
        }
    }
}

/// A unit, spatial then temporal self-attention, the remaining units,
/// then cross-attention.
#[derive(Debug, Clone)]
pub struct MidBlock {
    pub first: ResUnit,
    pub spatial: SpatialAttention,
    pub temporal: TemporalAttention,
    pub rest: Vec<ResUnit>,
    pub cross: CrossAttention,
}

impl MidBlock {
    fn new(scope: &mut Scope<'_>, c: usize, cfg: &UNetConfig) -> Result<Self> {
        let (g, heads) = (cfg.norm_groups, cfg.attention_heads);
        let first = ResUnit::new(&mut scope.sub("unit0"), c, c, g, Some(cfg.time_dim()?))?;
        let spatial = SpatialAttention::new(&mut scope.sub("spatial"), c, g, heads)?;
        let temporal = TemporalAttention::new(&mut scope.sub("temporal"), c, g, heads)?;
        let mut rest = Vec::new();
        for i in 1..cfg.mid_layers / 2 {
            rest.push(ResUnit::new(&mut scope.sub(format!("unit{i}")), c, c, g, None)?);
        }
        let cross = CrossAttention::new(&mut scope.sub("cross"), c, cfg.context_dim, g, heads)?;
        Ok(Self { first, spatial, temporal, rest, cross })
    }

    fn forward<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        x: &Var<'t, S>,
        temb: &Var<'t, S>,
        tokens: Option<&Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let mut h = self.first.forward(tape, ps, x, temb)?;
        h = self.spatial.forward(tape, ps, &h)?;
        h = self.temporal.forward(tape, ps, &h)?;
        for u in &self.rest {
            h = u.forward(tape, ps, &h, temb)?;
        }
        match tokens {
            Some(t) => self.cross.forward(tape, ps, &h, t),
            None => Ok(h),
        }
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub time_embed: TimestepEmbedding,
    pub conv_in: Pseudo3dConv,
    pub down: Vec<Block>,
    pub mid: MidBlock,
    /// Decoder blocks, innermost first.
    pub up: Vec<Block>,
    pub norm_out: GroupNorm,
    pub conv_out: Pseudo3dConv,
}

impl UNet {
    /// Declare every parameter of the network into `scope`.
    pub fn declare(config: &UNetConfig, scope: &mut Scope<'_>) -> Result<Self> {
        config.validate()?;
        let w = config.widths()?;
        let time_embed = TimestepEmbedding::new(&mut scope.sub("time_embed"), w[0], config.time_dim()?);
        let conv_in = Pseudo3dConv::new(&mut scope.sub("conv_in"), config.in_channels(), w[0]);
        let mut down = Vec::new();
        let mut cin = w[0];
        for (i, &c) in w.iter().enumerate() {
            down.push(Block::new(&mut scope.sub(format!("down{i}")), cin, c, config)?);
            cin = c;
        }
        let mid = MidBlock::new(&mut scope.sub("mid"), w[DEPTH - 1], config)?;
        let mut up = Vec::new();
        let mut cur = w[DEPTH - 1];
        for i in (0..DEPTH).rev() {
            // Skip concatenation: current features plus the encoder output
            // at the same resolution.
            up.push(Block::new(&mut scope.sub(format!("up{i}")), cur + w[i], w[i], config)?);
            cur = w[i];
        }
        let norm_out = GroupNorm::new(&mut scope.sub("norm_out"), config.norm_groups, w[0])?;
        let conv_out = Pseudo3dConv::new(&mut scope.sub("conv_out"), w[0], config.latent_channels);
        Ok(Self { config: config.clone(), time_embed, conv_in, down, mid, up, norm_out, conv_out })
    }

    /// Build the network with parameters seeded from `seed`.
    pub fn build(config: &UNetConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(&mut store, seed);
        let net = Self::declare(config, &mut Scope::new(&mut init))?;
        Ok((net, store))
    }

    /// Parameter count without allocating any weights.
    pub fn parameter_count(config: &UNetConfig) -> Result<usize> {
        let mut counter = ShapeCounter::default();
        Self::declare(config, &mut Scope::new(&mut counter as &mut dyn ParamSink))?;
        Ok(counter.elements)
    }

    /// ε-prediction for `v_in (b, latent + aux, f, h, w)` at timesteps `t`
    /// (one per batch element). Without `tokens` every cross-attention
    /// layer is skipped.
    pub fn predict_noise<'t, S: Scalar>(
        &self,
        tape: &'t Tape<S>,
        ps: &ParamStore<S>,
        v_in: &Var<'t, S>,
        t: &[usize],
        tokens: Option<&Var<'t, S>>,
    ) -> Result<Var<'t, S>> {
        let cfg = &self.config;
        let s = v_in.shape();
        let m = UNetConfig::spatial_multiple();
        match *s {
            [b, c, _, h, w] if c == cfg.in_channels() && h % m == 0 && w % m == 0 && h > 0 && w > 0 => {
                if t.len() != b {
                    return Err(shape_err!("{} timesteps given for a batch of {b}", t.len()));
                }
            }
            _ => {
                return Err(shape_err!(
                    "U-Net input must be (b, {}, f, h, w) with h and w multiples of {m}, got {:?}",
                    cfg.in_channels(),
                    s
                ))
            }
        }
        if let Some(&bad) = t.iter().find(|&&x| x >= cfg.timesteps) {
            return Err(contract_err!("timestep {bad} outside [0, {})", cfg.timesteps));
        }
        if let Some(tok) = tokens {
            if tok.shape().len() != 3 || tok.shape()[0] != s[0] {
                return Err(shape_err!("conditioning tokens must be ({}, n, c), got {:?}", s[0], tok.shape()));
            }
        }

        let temb = self.time_embed.forward(tape, ps, t)?.silu();
        let mut h = self.conv_in.forward(tape, ps, v_in)?;
        let mut skips = Vec::with_capacity(DEPTH);
        for (i, block) in self.down.iter().enumerate() {
            h = block.forward(tape, ps, &h, &temb, tokens)?;
            skips.push(h.clone());
            if i + 1 < DEPTH {
                h = h.avg_pool2()?;
            }
        }
        h = self.mid.forward(tape, ps, &h, &temb, tokens)?;
        for (j, block) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per encoder block");
            h = Var::concat(&[&h, &skip], 1)?;
            h = block.forward(tape, ps, &h, &temb, tokens)?;
            if j + 1 < DEPTH {
                h = h.upsample2()?;
            }
        }
        let h = self.norm_out.forward(tape, ps, &h)?.silu();
        self.conv_out.forward(tape, ps, &h)
    }
}

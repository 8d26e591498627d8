//! Numeric kernels shared by the tape ops: batched matmul, im2col
//! convolution, group normalization and softmax, each with its backward.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Offsets of each broadcast batch in a batched matmul.
pub(crate) struct MatmulPlan {
    pub lead: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err!("matmul needs rank >= 2, got {:?} and {:?}", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err!("matmul inner dimensions differ: {:?} x {:?}", a, b));
    }
    let la = &a[..a.len() - 2];
    let lb = &b[..b.len() - 2];
    let rank = la.len().max(lb.len());
    let pad = |l: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - l.len()];
        v.extend_from_slice(l);
        v
    };
    let (pa, pb) = (pad(la), pad(lb));
    let mut lead = Vec::with_capacity(rank);
    for (i, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
        lead.push(match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => {
                return Err(shape_err!(
                    "matmul leading axis {i} does not broadcast: {:?} x {:?}",
                    a,
                    b
                ))
            }
        });
    }
    let batches: usize = lead.iter().product();
    let strides = |p: &[usize], mat: usize| -> Vec<usize> {
        let mut s = vec![0; rank];
        let mut acc = mat;
        for i in (0..rank).rev() {
            s[i] = if p[i] == 1 { 0 } else { acc };
            acc *= p[i];
        }
        s
    };
    let (sa, sb) = (strides(&pa, m * k), strides(&pb, k * n));
    let mut a_off = Vec::with_capacity(batches);
    let mut b_off = Vec::with_capacity(batches);
    for idx in 0..batches {
        let mut rem = idx;
        let (mut oa, mut ob) = (0, 0);
        for i in (0..rank).rev() {
            let d = rem % lead[i];
            rem /= lead[i];
            oa += d * sa[i];
            ob += d * sb[i];
        }
        a_off.push(oa);
        b_off.push(ob);
    }
    Ok(MatmulPlan { lead, m, k, n, a_off, b_off })
}

pub(crate) fn matmul_forward<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let p = matmul_plan(a.shape(), b.shape())?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![S::zero(); p.a_off.len() * m * n];
    for (i, c) in out.chunks_mut(m * n).enumerate() {
        S::gemm(
            m,
            k,
            n,
            S::one(),
            &a.data()[p.a_off[i]..],
            k as isize,
            1,
            &b.data()[p.b_off[i]..],
            n as isize,
            1,
            S::zero(),
            c,
            n as isize,
            1,
        );
    }
    let mut shape = p.lead.clone();
    shape.extend([m, n]);
    Ok(Tensor::from_parts_unchecked(shape, out))
}

pub(crate) fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let p = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let mut ga = vec![S::zero(); a.len()];
    let mut gb = vec![S::zero(); b.len()];
    for (i, gc) in g.data().chunks(m * n).enumerate() {
        // dA += dC · Bᵀ
        S::gemm(
            m,
            n,
            k,
            S::one(),
            gc,
            n as isize,
            1,
            &b.data()[p.b_off[i]..],
            1,
            n as isize,
            S::one(),
            &mut ga[p.a_off[i]..],
            k as isize,
            1,
        );
        // dB += Aᵀ · dC
        S::gemm(
            k,
            m,
            n,
            S::one(),
            &a.data()[p.a_off[i]..],
            1,
            k as isize,
            gc,
            n as isize,
            1,
            S::one(),
            &mut gb[p.b_off[i]..],
            n as isize,
            1,
        );
    }
    (
        Tensor::from_parts_unchecked(a.shape().to_vec(), ga),
        Tensor::from_parts_unchecked(b.shape().to_vec(), gb),
    )
}

/// Geometry of a 2D convolution over an `(N, C, H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        x: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        let [n, c, h, w] = *x else {
            return Err(shape_err!("conv input must be (N, C, H, W), got {:?}", x));
        };
        let [o, wc, kh, kw] = *weight else {
            return Err(shape_err!("conv weight must be (O, C, kh, kw), got {:?}", weight));
        };
        if wc != c {
            return Err(shape_err!("conv expects {wc} input channels, got {c}"));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err!("conv stride must be positive"));
        }
        if h + 2 * pad.0 < kh || w + 2 * pad.1 < kw {
            return Err(shape_err!("conv kernel {kh}x{kw} larger than padded input {h}x{w}"));
        }
        let oh = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let ow = (w + 2 * pad.1 - kw) / stride.1 + 1;
        Ok(Self { n, c, h, w, o, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Input coordinate read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.sh + ky).checked_sub(self.ph)?;
        let x = (ox * self.sw + kx).checked_sub(self.pw)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.cols();
    let mut col = vec![S::zero(); g.rows() * cols];
    let plane = g.oh * g.ow;
    col.par_chunks_mut(cols).enumerate().for_each(|(r, row)| {
        let c = r / (g.kh * g.kw);
        let ky = (r / g.kw) % g.kh;
        let kx = r % g.kw;
        for ni in 0..g.n {
            let src = &x[(ni * g.c + c) * g.h * g.w..][..g.h * g.w];
            let dst = &mut row[ni * plane..][..plane];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        dst[oy * g.ow + ox] = src[y * g.w + xx];
                    }
                }
            }
        }
    });
    col
}

fn col2im<S: Scalar>(col: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.cols();
    let plane = g.oh * g.ow;
    let mut dx = vec![S::zero(); g.n * g.c * g.h * g.w];
    dx.par_chunks_mut(g.h * g.w).enumerate().for_each(|(nc, dst)| {
        let (ni, c) = (nc / g.c, nc % g.c);
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let src = &col[r * cols + ni * plane..][..plane];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            dst[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Saved state of a convolution forward pass.
pub(crate) struct ConvSaved<S> {
    pub geom: ConvGeom,
    col: Vec<S>,
}

pub(crate) fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<S>, ConvSaved<S>)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(shape_err!("conv bias must be ({}), got {:?}", g.o, b.shape()));
        }
    }
    let col = im2col(x.data(), &g);
    let (rows, cols, plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let mut tmp = vec![S::zero(); g.o * cols];
    S::gemm(
        g.o,
        rows,
        cols,
        S::one(),
        weight.data(),
        rows as isize,
        1,
        &col,
        cols as isize,
        1,
        S::zero(),
        &mut tmp,
        cols as isize,
        1,
    );
    // (O, N·L) -> (N, O, L) plus bias.
    let mut out = vec![S::zero(); g.n * g.o * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(no, dst)| {
        let (ni, o) = (no / g.o, no % g.o);
        let b = bias.map_or(S::zero(), |b| b.data()[o]);
        for (d, &s) in dst.iter_mut().zip(&tmp[o * cols + ni * plane..][..plane]) {
            *d = s + b;
        }
    });
    Ok((
        Tensor::from_parts_unchecked(vec![g.n, g.o, g.oh, g.ow], out),
        ConvSaved { geom: g, col },
    ))
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward<S: Scalar>(
    saved: &ConvSaved<S>,
    weight: &Tensor<S>,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let g = &saved.geom;
    let (rows, cols, plane) = (g.rows(), g.cols(), g.oh * g.ow);
    let mut g2 = vec![S::zero(); g.o * cols];
    g2.par_chunks_mut(cols).enumerate().for_each(|(o, dst)| {
        for ni in 0..g.n {
            dst[ni * plane..][..plane]
                .copy_from_slice(&grad.data()[(ni * g.o + o) * plane..][..plane]);
        }
    });
    let dbias: Vec<S> = g2.chunks(cols).map(|r| r.iter().copied().sum()).collect();
    let mut dw = vec![S::zero(); g.o * rows];
    S::gemm(
        g.o,
        cols,
        rows,
        S::one(),
        &g2,
        cols as isize,
        1,
        &saved.col,
        1,
        cols as isize,
        S::zero(),
        &mut dw,
        rows as isize,
        1,
    );
    let mut dcol = vec![S::zero(); rows * cols];
    S::gemm(
        rows,
        g.o,
        cols,
        S::one(),
        weight.data(),
        1,
        rows as isize,
        &g2,
        cols as isize,
        1,
        S::zero(),
        &mut dcol,
        cols as isize,
        1,
    );
    let dx = col2im(&dcol, g);
    (
        Tensor::from_parts_unchecked(vec![g.n, g.c, g.h, g.w], dx),
        Tensor::from_parts_unchecked(weight.shape().to_vec(), dw),
        Tensor::from_parts_unchecked(vec![g.o], dbias),
    )
}

/// 1D convolution over `(N, C, L)` expressed as a 2D convolution with unit height.
pub(crate) fn conv1d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<S>, ConvSaved<S>)> {
    let [n, c, l] = *x.shape() else {
        return Err(shape_err!("conv1d input must be (N, C, L), got {:?}", x.shape()));
    };
    let [o, wc, k] = *weight.shape() else {
        return Err(shape_err!("conv1d weight must be (O, C, k), got {:?}", weight.shape()));
    };
    let x4 = Tensor::from_parts_unchecked(vec![n, c, 1, l], x.data().to_vec());
    let w4 = Tensor::from_parts_unchecked(vec![o, wc, 1, k], weight.data().to_vec());
    let (y, saved) = conv2d_forward(&x4, &w4, bias, (1, stride), (0, pad))?;
    let ow = saved.geom.ow;
    Ok((Tensor::from_parts_unchecked(vec![n, o, ow], y.into_data()), saved))
}

pub(crate) fn conv1d_backward<S: Scalar>(
    saved: &ConvSaved<S>,
    weight: &Tensor<S>,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let g = &saved.geom;
    let w4 = Tensor::from_parts_unchecked(vec![g.o, g.c, 1, g.kw], weight.data().to_vec());
    let g4 = Tensor::from_parts_unchecked(vec![g.n, g.o, 1, g.ow], grad.data().to_vec());
    let (dx, dw, db) = conv2d_backward(saved, &w4, &g4);
    (
        Tensor::from_parts_unchecked(vec![g.n, g.c, g.w], dx.into_data()),
        Tensor::from_parts_unchecked(weight.shape().to_vec(), dw.into_data()),
        db,
    )
}

/// Per-(sample, group) statistics saved by group normalization.
pub(crate) struct NormSaved<S> {
    groups: usize,
    mean: Vec<S>,
    rstd: Vec<S>,
}

pub(crate) fn group_norm_forward<S: Scalar>(
    x: &Tensor<S>,
    groups: usize,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, NormSaved<S>)> {
    if x.rank() < 2 {
        return Err(shape_err!("group_norm needs (N, C, ...), got {:?}", x.shape()));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    if groups == 0 || c % groups != 0 {
        return Err(shape_err!("group count {groups} does not divide {c} channels"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!("group_norm affine parameters must be ({c})"));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let cpg = c / groups;
    let glen = cpg * inner;
    let count = S::of(glen as f64);
    let eps = S::of(eps);
    let mut mean = vec![S::zero(); n * groups];
    let mut rstd = vec![S::zero(); n * groups];
    for (gi, chunk) in x.data().chunks(glen).enumerate() {
        let mu = chunk.iter().copied().sum::<S>() / count;
        let var = chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / count;
        mean[gi] = mu;
        rstd[gi] = S::one() / (var + eps).sqrt();
    }
    let mut out = vec![S::zero(); x.len()];
    out.par_chunks_mut(inner).enumerate().for_each(|(nc, dst)| {
        let ch = nc % c;
        let gi = nc / cpg;
        let (mu, rs) = (mean[gi], rstd[gi]);
        let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
        for (d, &v) in dst.iter_mut().zip(&x.data()[nc * inner..][..inner]) {
            *d = (v - mu) * rs * ga + be;
        }
    });
    Ok((
        Tensor::from_parts_unchecked(x.shape().to_vec(), out),
        NormSaved { groups, mean, rstd },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    saved: &NormSaved<S>,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let c = x.dim(1);
    let inner: usize = x.shape()[2..].iter().product();
    let cpg = c / saved.groups;
    let count = S::of((cpg * inner) as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    let mut dx = vec![S::zero(); x.len()];
    let (xd, gd) = (x.data(), grad.data());
    for (gi, (&mu, &rs)) in saved.mean.iter().zip(&saved.rstd).enumerate() {
        let first = (gi % saved.groups) * cpg;
        let base = gi * cpg * inner;
        // Sums of dxhat and dxhat·xhat over the group.
        let (mut s1, mut s2) = (S::zero(), S::zero());
        for cc in 0..cpg {
            let ch = first + cc;
            let ga = gamma.data()[ch];
            let at = base + cc * inner;
            let (mut dg, mut db) = (S::zero(), S::zero());
            for (&xv, &gy) in xd[at..at + inner].iter().zip(&gd[at..at + inner]) {
                let xhat = (xv - mu) * rs;
                s1 += gy * ga;
                s2 += gy * ga * xhat;
                dg += gy * xhat;
                db += gy;
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        let (m1, m2) = (s1 / count, s2 / count);
        for cc in 0..cpg {
            let ga = gamma.data()[first + cc];
            let at = base + cc * inner;
            for j in at..at + inner {
                let xhat = (xd[j] - mu) * rs;
                dx[j] = rs * (gd[j] * ga - m1 - xhat * m2);
            }
        }
    }
    (
        Tensor::from_parts_unchecked(x.shape().to_vec(), dx),
        Tensor::from_parts_unchecked(vec![c], dgamma),
        Tensor::from_parts_unchecked(vec![c], dbeta),
    )
}

/// `(outer, len, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!("axis {axis} out of range for shape {:?}", shape));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn softmax_forward<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, len, inner) = axis_split(x.shape(), axis)?;
    let mut out = vec![S::zero(); x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| src[at(j)]).fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for j in 0..len {
                let e = (src[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(x.shape().to_vec(), out))
}

pub(crate) fn softmax_backward<S: Scalar>(y: &Tensor<S>, g: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (outer, len, inner) = axis_split(y.shape(), axis).expect("validated in forward");
    let mut dx = vec![S::zero(); y.len()];
    let (yd, gd) = (y.data(), g.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let dot: S = (0..len).map(|j| yd[at(j)] * gd[at(j)]).sum();
            for j in 0..len {
                dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
            }
        }
    }
    Tensor::from_parts_unchecked(y.shape().to_vec(), dx)
}

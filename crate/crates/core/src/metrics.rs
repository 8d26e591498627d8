//! Evaluation metrics: Fréchet distance between Gaussian fits of video
//! features (FVD / VFID) and the Inception Score, with fixed seeded
//! stand-ins for the pretrained feature extractor and classifier.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Frames read by FVD.
pub const FVD_WINDOW: usize = 16;
/// Most frames read by VFID.
pub const VFID_WINDOW: usize = 60;
/// Eigenvalues more negative than this (relative to the spectrum's scale)
/// mean the input was not a covariance.
const EIGEN_TOLERANCE: f64 = 1e-6;

/// Mean and covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

impl MetricStats {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>, n: usize) -> Result<Self> {
        let d = mu.len();
        if sigma.shape() != (d, d) {
            return Err(shape_err!("covariance {:?} does not match mean of length {d}", sigma.shape()));
        }
        if n < 2 {
            return Err(contract_err!("statistics need at least two samples, got {n}"));
        }
        let scale = sigma.amax().max(1.0);
        if (&sigma - sigma.transpose()).amax() > 1e-8 * scale {
            return Err(contract_err!("covariance is not symmetric"));
        }
        Ok(Self { mu, sigma, n })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
///
/// Uses Welford's single-pass update in row order, then mirrors the upper
/// triangle so the result is exactly symmetric.
pub fn fit_gaussian(features: &DMatrix<f64>) -> Result<MetricStats> {
    let (n, d) = features.shape();
    if n < 2 {
        return Err(contract_err!("fit_gaussian needs at least two rows, got {n}"));
    }
    let mut mean = DVector::<f64>::zeros(d);
    let mut comoment = DMatrix::<f64>::zeros(d, d);
    for (k, row) in features.row_iter().enumerate() {
        let x = row.transpose();
        let before = &x - &mean;
        mean += &before / (k + 1) as f64;
        let after = &x - &mean;
        for j in 0..d {
            for i in 0..=j {
                comoment[(i, j)] += before[i] * after[j];
            }
        }
    }
    let mut sigma = comoment / (n - 1) as f64;
    for j in 0..d {
        for i in 0..j {
            sigma[(j, i)] = sigma[(i, j)];
        }
    }
    MetricStats::new(mean, sigma, n)
}

/// Eigenvalues of a symmetric matrix with tiny negatives clamped to zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if !v.is_finite() || *v < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numeric(format!("{what} has eigenvalue {v}; not positive semi-definite")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m.clone(), what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `|μ_R − μ_G|² + Tr(Σ_R + Σ_G − 2 (Σ_R Σ_G)^{1/2})`.
///
/// The trace of the product's square root is taken as the trace of the
/// square root of the symmetric `√Σ_R Σ_G √Σ_R`, which has the same
/// eigenvalues.
pub fn frechet_distance(r: &MetricStats, g: &MetricStats) -> Result<f64> {
    if r.dim() != g.dim() {
        return Err(shape_err!("feature widths differ: {} vs {}", r.dim(), g.dim()));
    }
    let root_r = sqrt_psd(&r.sigma, "real covariance")?;
    let inner = &root_r * &g.sigma * &root_r;
    let tr_sqrt: f64 = psd_eigen(inner, "covariance product")?.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let mean_term = (&r.mu - &g.mu).norm_squared();
    let d = mean_term + r.sigma.trace() + g.sigma.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// `exp(E_x[KL(P(y|x) ‖ P(y))])` over the rows of `probs`, one split.
pub fn inception_score(probs: &DMatrix<f64>) -> Result<f64> {
    let (n, k) = probs.shape();
    if n == 0 || k == 0 {
        return Err(contract_err!("inception score needs a nonempty probability matrix"));
    }
    for (i, row) in probs.row_iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(contract_err!("row {i} is not a probability vector (sum {s})"));
        }
    }
    let marginal: Vec<f64> = (0..k).map(|j| probs.column(j).iter().sum::<f64>() / n as f64).collect();
    let mut total = 0.0;
    for row in probs.row_iter() {
        for (p, q) in row.iter().zip(&marginal) {
            if *p > 0.0 {
                total += p * (p / q).ln();
            }
        }
    }
    Ok((total / n as f64).exp())
}

/// Read a `(f, 3, h, w)` video's frame count and size.
fn video_dims(v: &Tensor) -> Result<[usize; 4]> {
    match *v.shape() {
        [f, 3, h, w] if f > 0 && h > 0 && w > 0 => Ok([f, 3, h, w]),
        ref s => Err(shape_err!("expected a (f, 3, h, w) video, got {s:?}")),
    }
}

/// Average `(f, 3, h, w)` pixels onto a `(3, f, g, g)` grid.
fn pool_grid(v: &Tensor, frames: usize, grid: usize) -> Result<Vec<f64>> {
    let [_, c, h, w] = video_dims(v)?;
    let mut out = vec![0.0; c * frames * grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..h {
        for x in 0..w {
            counts[(y * grid / h) * grid + x * grid / w] += 1;
        }
    }
    for t in 0..frames {
        for ch in 0..c {
            let plane = &v.data()[(t * c + ch) * h * w..][..h * w];
            let dst = &mut out[(ch * frames + t) * grid * grid..][..grid * grid];
            for y in 0..h {
                for x in 0..w {
                    dst[(y * grid / h) * grid + x * grid / w] += plane[y * w + x] as f64;
                }
            }
            for (d, &n) in dst.iter_mut().zip(&counts) {
                *d /= n.max(1) as f64;
            }
        }
    }
    Ok(out)
}

/// One 3D convolution, temporal kernel 3 unpadded, spatial kernel 3 with
/// zero padding, followed by tanh. Input and output are `(c, f, g, g)`.
fn conv3d_tanh(x: &[f64], cin: usize, frames: usize, g: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let cout = b.len();
    let fo = frames - 2;
    let mut out = vec![0.0; cout * fo * g * g];
    for o in 0..cout {
        for t in 0..fo {
            for y in 0..g {
                for xx in 0..g {
                    let mut s = b[o];
                    for i in 0..cin {
                        for dt in 0..3 {
                            for dy in 0..3 {
                                let yy = y as isize + dy as isize - 1;
                                if yy < 0 || yy >= g as isize {
                                    continue;
                                }
                                for dx in 0..3 {
                                    let xs = xx as isize + dx as isize - 1;
                                    if xs < 0 || xs >= g as isize {
                                        continue;
                                    }
                                    let wi = (((o * cin + i) * 3 + dt) * 3 + dy) * 3 + dx;
                                    let xi = ((i * frames + t + dt) * g + yy as usize) * g + xs as usize;
                                    s += w[wi] * x[xi];
                                }
                            }
                        }
                    }
                    out[((o * fo + t) * g + y) * g + xx] = s.tanh();
                }
            }
        }
    }
    out
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Fixed, seeded spatiotemporal feature map standing in for a pretrained
/// video network.
///
/// Frames are averaged onto an 8×8 grid, passed through two random 3D
/// convolutions with tanh, and each channel is averaged over space and
/// time. The temporal kernels are asymmetric, so reversing a moving video
/// changes its features.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub seed: u64,
    /// Frames read from the start of each video.
    pub window: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl FeatureExtractor {
    pub const GRID: usize = 8;
    pub const HIDDEN: usize = 16;
    pub const DIM: usize = 64;

    pub fn new(seed: u64, window: usize) -> Result<Self> {
        if window < 5 {
            return Err(contract_err!("feature window must be at least 5 frames, got {window}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, d) = (Self::HIDDEN, Self::DIM);
        Ok(Self {
            seed,
            window,
            w1: random_weights(&mut rng, h * 3 * 27, 1.0 / 81f64.sqrt() * 2.0),
            b1: random_weights(&mut rng, h, 0.1),
            w2: random_weights(&mut rng, d * h * 27, 1.0 / ((h * 27) as f64).sqrt() * 2.0),
            b2: random_weights(&mut rng, d, 0.1),
        })
    }

    pub fn fvd(seed: u64) -> Self {
        Self::new(seed, FVD_WINDOW).expect("valid window")
    }

    /// Feature vector of one `(f, 3, h, w)` video; reads the first
    /// `min(f, window)` frames and requires at least `window` of them when
    /// `exact` is set.
    pub fn features(&self, video: &Tensor, exact: bool) -> Result<Vec<f64>> {
        let [f, _, _, _] = video_dims(video)?;
        let need = if exact { self.window } else { 5 };
        if f < need {
            return Err(contract_err!("video has {f} frames; this metric needs at least {need}"));
        }
        let frames = f.min(self.window);
        let g = Self::GRID;
        let x = pool_grid(video, frames, g)?;
        let h1 = conv3d_tanh(&x, 3, frames, g, &self.w1, &self.b1);
        let h2 = conv3d_tanh(&h1, Self::HIDDEN, frames - 2, g, &self.w2, &self.b2);
        let per = (frames - 4) * g * g;
        Ok(h2.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect())
    }

    /// Features of many videos as an `(n, DIM)` matrix, computed in parallel.
    pub fn feature_matrix(&self, videos: &[Tensor], exact: bool) -> Result<DMatrix<f64>> {
        let rows: Vec<Vec<f64>> = videos.par_iter().map(|v| self.features(v, exact)).collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(rows.len(), Self::DIM, |i, j| rows[i][j]))
    }
}

/// Fixed, seeded classifier standing in for a pretrained Inception network:
/// frame-averaged 4×4 colour grid, random linear map, softmax.
#[derive(Debug, Clone)]
pub struct ClassifierStub {
    pub classes: usize,
    weights: Vec<f64>,
}

impl ClassifierStub {
    const INPUTS: usize = 3 * 16;

    pub fn new(seed: u64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(contract_err!("a classifier needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self { classes, weights: random_weights(&mut rng, classes * Self::INPUTS, 2.0) })
    }

    pub fn probabilities(&self, video: &Tensor) -> Result<Vec<f64>> {
        let [f, _, _, _] = video_dims(video)?;
        let grid = pool_grid(video, f, 4)?;
        let mut x = vec![0.0; Self::INPUTS];
        for ch in 0..3 {
            for t in 0..f {
                for k in 0..16 {
                    x[ch * 16 + k] += grid[(ch * f + t) * 16 + k] / f as f64;
                }
            }
        }
        let logits: Vec<f64> =
            self.weights.chunks(Self::INPUTS).map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / s).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Fvd,
    Vfid,
    Is,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Fvd => "fvd",
            Metric::Vfid => "vfid",
            Metric::Is => "is",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fvd" => Ok(Metric::Fvd),
            "vfid" => Ok(Metric::Vfid),
            "is" => Ok(Metric::Is),
            _ => Err(Error::Config(format!("unknown metric '{s}' (expected fvd, vfid or is)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub seed: u64,
    /// Frames read by FVD; the convention is [`FVD_WINDOW`].
    pub fvd_window: usize,
    pub classes: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, fvd_window: FVD_WINDOW, classes: 10 }
    }
}

/// Score `fake` against `real` (videos are `(f, 3, h, w)`).
///
/// FVD reads exactly the first `fvd_window` frames of every video; VFID
/// reads up to [`VFID_WINDOW`]. IS only looks at `fake`.
pub fn evaluate_videos(real: &[Tensor], fake: &[Tensor], metric: Metric, opts: &EvalOptions) -> Result<f64> {
    match metric {
        Metric::Is => {
            let clf = ClassifierStub::new(opts.seed, opts.classes)?;
            let rows: Vec<Vec<f64>> = fake.par_iter().map(|v| clf.probabilities(v)).collect::<Result<_>>()?;
            if rows.is_empty() {
                return Err(contract_err!("no videos to score"));
            }
            inception_score(&DMatrix::from_fn(rows.len(), opts.classes, |i, j| rows[i][j]))
        }
        Metric::Fvd | Metric::Vfid => {
            let (window, exact) =
                if metric == Metric::Fvd { (opts.fvd_window, true) } else { (VFID_WINDOW, false) };
            let ex = FeatureExtractor::new(opts.seed, window)?;
            let r = fit_gaussian(&ex.feature_matrix(real, exact)?)?;
            let g = fit_gaussian(&ex.feature_matrix(fake, exact)?)?;
            frechet_distance(&r, &g)
        }
    }
}

//! Acceptance run: one PASS/FAIL line per criterion, each with its own
//! time budget. The training criteria share one desk-scale run.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use fashionflow::conditioning::{Embedder, ToyVae, VaeTrainConfig};
use fashionflow::data::{generate_dataset, generate_linear, stack_videos, Dataset};
use fashionflow::diffusion::{forward_diffuse, sample, InterpolationMask, MaskPattern, Mode, NoiseSchedule, SampleSpec, VideoLatent};
use fashionflow::gradcheck::{check_layer, LayerKind, Probe};
use fashionflow::metrics::{evaluate_videos, frechet_distance, inception_score, EvalOptions, Metric, MetricStats};
use fashionflow::nn::{Pseudo3dConv, SpatialAttention, TemporalAttention};
use fashionflow::training::{copy_baseline, fit, masked_frame_mse, TrainConfig, TrainState, TrainingSet};
use fashionflow::unet::{UNet, UNetConfig};
use fashionflow::params::Initializer;
use fashionflow::{ParamStore, Scope, Tape, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Debug>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| format!("{e:?}"))
}

struct Runner {
    failed: usize,
}

impl Runner {
    fn run(&mut self, n: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let (verdict, detail) = match out {
            Ok(d) if took <= budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over budget of {}s", budget.as_secs())),
            Err(e) => ("FAIL", e),
        };
        if verdict == "FAIL" {
            self.failed += 1;
        }
        println!("criterion {n:>2} {verdict} {name} ({:.1}s): {detail}", took.as_secs_f64());
    }
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, "");
    for kind in LayerKind::ALL {
        for seed in 0..50 {
            let r = ok(check_layer::<f32>(kind, seed, Probe::five_point(1e-2)))?;
            if r.rel_error > worst.0 {
                worst = (r.rel_error, kind.name());
            }
            ensure(r.rel_error < 1e-3, || format!("{} seed {seed}: relative error {:.3e}", kind.name(), r.rel_error))?;
        }
    }
    Ok(format!("{} layer types x 50 trials, worst {:.2e} ({})", LayerKind::ALL.len(), worst.0, worst.1))
}

fn schedule_suite() -> Outcome {
    let s = ok(NoiseSchedule::cosine(1000))?;
    let ab = &s.alpha_bar;
    ensure(ab[0] >= 0.99, || format!("alpha_bar[0] = {}", ab[0]))?;
    ensure(ab[999] <= 0.01, || format!("alpha_bar[999] = {}", ab[999]))?;
    ensure(ab.windows(2).all(|w| w[1] < w[0]), || "alpha_bar not strictly decreasing".into())?;
    ensure(s.beta.iter().all(|&b| b <= 0.999), || "beta above 0.999".into())?;

    // Walk the one-step chain and compare with the closed-form jump.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = 1.5;
    let mut worst = 0.0f64;
    for t in [10usize, 100, 400, 700] {
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let mut x = x0;
                for &b in &s.beta[..=t] {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x = (1.0 - b).sqrt() * x + b.sqrt() * e;
                }
                x
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (m_ref, v_ref) = (ab[t].sqrt() * x0, 1.0 - ab[t]);
        let (em, ev) = ((mean - m_ref).abs() / m_ref.abs(), (var - v_ref).abs() / v_ref);
        ensure(em < 0.05 && ev < 0.05, || format!("t={t}: mean {mean} vs {m_ref}, var {var} vs {v_ref}"))?;
        worst = worst.max(em).max(ev);
    }
    Ok(format!("endpoints {:.4}/{:.2e}, worst Monte Carlo deviation {:.2}%", ab[0], ab[999], worst * 100.0))
}

fn local_conditioning() -> Outcome {
    let cfg = UNetConfig::desk();
    let (net, store) = ok(UNet::build(&cfg, 4))?;
    let sched = ok(NoiseSchedule::cosine(cfg.timesteps))?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (f, h, w) = (8, 16, 16);
    let i_vae = Tensor::randn(vec![1, 4, h, w], &mut rng);

    let x0 = ok(VideoLatent::new(Tensor::randn(vec![1, 4, f, h, w], &mut rng), true))?;
    for t in [0, 250, 999] {
        let eps = Tensor::randn(vec![1, 4, f, h, w], &mut rng);
        let xt = ok(forward_diffuse(&x0, t, &eps, &sched))?;
        ensure(xt.frame(0) == x0.frame(0), || format!("frame 0 changed by corruption at t={t}"))?;
    }

    let spec = SampleSpec {
        frames: f,
        steps: 250,
        seed: 3,
        mode: Mode::Local,
        i_vae: &i_vae,
        tokens: None,
        aux: None,
        known: None,
        clip_x0: None,
        init: None,
    };
    let out = ok(sample(&net, &store, &sched, &spec))?;
    ensure(out.frame(0) == i_vae, || "frame 0 changed during sampling".into())?;
    ensure(out.data.all_finite(), || "non-finite sample".into())?;
    Ok("frame 0 bit-identical after corruption and a 250-step chain".into())
}

fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d + 2, |_, _| rng.random_range(-1.0..1.0));
    &b * b.transpose()
}

fn metric_oracles() -> Outcome {
    let st = |mu: Vec<f64>, s: DMatrix<f64>| ok(MetricStats::new(DVector::from_vec(mu), s, 10));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let i2 = DMatrix::<f64>::identity(2, 2);
    let a = st(vec![0.5, -1.0, 2.0], random_psd(3, &mut rng))?;
    let same = ok(frechet_distance(&a, &a))?;
    let shift = ok(frechet_distance(&st(vec![1.0, 0.0], i2.clone())?, &st(vec![0.0, 0.0], i2.clone())?))?;
    let wide = ok(frechet_distance(&st(vec![0.0, 0.0], i2.clone())?, &st(vec![0.0, 0.0], i2 * 4.0)?))?;
    ensure(same.abs() < 1e-8 && (shift - 1.0).abs() < 1e-8 && (wide - 2.0).abs() < 1e-8, || {
        format!("analytic cases gave {same}, {shift}, {wide}")
    })?;

    let mut worst = 0.0f64;
    for trial in 0..100 {
        let d = rng.random_range(1..=16);
        let mut mu = || (0..d).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
        let (mr, mg) = (mu(), mu());
        let r = st(mr, random_psd(d, &mut rng))?;
        let g = st(mg, random_psd(d, &mut rng))?;
        // Oracle: eigenvalues of the non-symmetric product via real Schur.
        let tr: f64 = (&r.sigma * &g.sigma).complex_eigenvalues().iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let want = (&r.mu - &g.mu).norm_squared() + r.sigma.trace() + g.sigma.trace() - 2.0 * tr;
        let got = ok(frechet_distance(&r, &g))?;
        let err = (got - want).abs() / want.abs().max(1.0);
        ensure(err <= 1e-6, || format!("trial {trial} (d={d}): {got} vs oracle {want}"))?;
        worst = worst.max(err);
    }

    let k = 10;
    let uniform = DMatrix::from_element(40, k, 1.0 / k as f64);
    let one_hot = DMatrix::from_fn(40, k, |i, j| if i % k == j { 1.0 } else { 0.0 });
    let (iu, io) = (ok(inception_score(&uniform))?, ok(inception_score(&one_hot))?);
    ensure((iu - 1.0).abs() < 1e-12 && (io - k as f64).abs() < 1e-12, || format!("IS gave {iu} and {io}"))?;
    Ok(format!("analytic cases exact, oracle worst rel {worst:.1e}, IS {iu} / {io}"))
}

/// Direct 3x3, stride 1, zero-padded convolution of one `(c, h, w)` frame.
fn conv2d_oracle(x: &[f32], wgt: &[f32], bias: &[f32], c: usize, o: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[oc] as f64;
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let xv = x[(ic * h + sy as usize) * w + sx as usize] as f64;
                            acc += xv * wgt[((oc * c + ic) * 3 + ky) * 3 + kx] as f64;
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

fn pseudo3d_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let (b, c, o) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=4));
        let (f, h, w) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let mut ps = ParamStore::new();
        let layer = Pseudo3dConv::new(&mut Scope::new(&mut Initializer::new(&mut ps, case)), c, o);
        // Random spatial bias and an explicit delta temporal kernel.
        *ps.value_mut(layer.spatial.bias) = Tensor::randn(vec![o], &mut rng);
        let mut delta = Tensor::zeros(vec![o, o, 3]);
        for i in 0..o {
            delta.data_mut()[(i * o + i) * 3 + 1] = 1.0;
        }
        *ps.value_mut(layer.temporal.weight) = delta;
        *ps.value_mut(layer.temporal.bias) = Tensor::zeros(vec![o]);

        let x = Tensor::randn(vec![b, c, f, h, w], &mut rng);
        let tape = Tape::no_grad();
        let y = ok(layer.forward(&tape, &ps, &tape.constant(x.clone())))?.to_tensor();
        let (wgt, bias) = (ps.value(layer.spatial.weight).data(), ps.value(layer.spatial.bias).data());
        for bi in 0..b {
            for fi in 0..f {
                let frame: Vec<f32> = (0..c * h * w)
                    .map(|k| {
                        let (ci, p) = (k / (h * w), k % (h * w));
                        x.data()[((bi * c + ci) * f + fi) * h * w + p]
                    })
                    .collect();
                let want = conv2d_oracle(&frame, wgt, bias, c, o, h, w);
                for (k, &v) in want.iter().enumerate() {
                    let (oc, p) = (k / (h * w), k % (h * w));
                    let got = y.data()[((bi * o + oc) * f + fi) * h * w + p] as f64;
                    worst = worst.max((got - v).abs());
                }
            }
        }
        ensure(worst < 1e-6, || format!("case {case}: deviation {worst:.2e}"))?;
    }
    Ok(format!("20 cases, max deviation {worst:.2e}"))
}

/// Reorder a `(b, c, f, h, w)` tensor: `frame_perm` maps new frame to old,
/// `pos_perm` maps new spatial position to old.
fn permute_video(t: &Tensor, frame_perm: &[usize], pos_perm: &[usize]) -> Tensor {
    let s = t.shape();
    let (bc, f, hw) = (s[0] * s[1], s[2], s[3] * s[4]);
    let mut out = vec![0.0f32; t.len()];
    for i in 0..bc {
        for (nf, &of) in frame_perm.iter().enumerate() {
            for (np, &op) in pos_perm.iter().enumerate() {
                out[(i * f + nf) * hw + np] = t.data()[(i * f + of) * hw + op];
            }
        }
    }
    Tensor::from_vec(s.to_vec(), out).unwrap()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

fn attention_equivariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let groups = rng.random_range(1..=2);
        let c = groups * rng.random_range(1..=4);
        let heads = if c % 2 == 0 { 2 } else { 1 };
        let (b, f, h, w) = (rng.random_range(1..=2), rng.random_range(2..=5), rng.random_range(2..=4), rng.random_range(2..=4));
        let mut ps = ParamStore::new();
        let (spatial, temporal) = {
            let mut init = Initializer::new(&mut ps, trial);
            let mut sc = Scope::new(&mut init);
            let s = ok(SpatialAttention::new(&mut sc.sub("s"), c, groups, heads))?;
            let t = ok(TemporalAttention::new(&mut sc.sub("t"), c, groups, heads))?;
            (s, t)
        };
        let x = Tensor::randn(vec![b, c, f, h, w], &mut rng);
        let ident_f: Vec<usize> = (0..f).collect();
        let ident_p: Vec<usize> = (0..h * w).collect();
        let pos = shuffled(h * w, &mut rng);
        let frames = shuffled(f, &mut rng);
        let tape = Tape::no_grad();
        let run_s = |v: &Tensor| spatial.forward(&tape, &ps, &tape.constant(v.clone())).map(|o| o.to_tensor());
        let run_t = |v: &Tensor| temporal.forward(&tape, &ps, &tape.constant(v.clone())).map(|o| o.to_tensor());

        let a = permute_video(&ok(run_s(&x))?, &ident_f, &pos);
        let b2 = ok(run_s(&permute_video(&x, &ident_f, &pos)))?;
        let c2 = permute_video(&ok(run_t(&x))?, &frames, &ident_p);
        let d2 = ok(run_t(&permute_video(&x, &frames, &ident_p)))?;
        for (p, q) in [(&a, &b2), (&c2, &d2)] {
            let dev = p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs() as f64).fold(0.0, f64::max);
            worst = worst.max(dev);
        }
        ensure(worst < 1e-5, || format!("trial {trial}: deviation {worst:.2e}"))?;
    }
    Ok(format!("20 trials each, max deviation {worst:.2e}"))
}

/// Everything the training criteria produce.
struct DeskRun {
    state: TrainState,
    data: Dataset,
    losses: Vec<f64>,
    checkpoints: Vec<PathBuf>,
}

fn desk_run(out: &Path) -> Result<DeskRun, String> {
    let data = generate_dataset(80, 8, 64, 7);
    let videos: Vec<&Tensor> = data.train.iter().map(|s| &s.video).collect();
    let frames = ok(ok(stack_videos(&videos))?.rearrange("b c f h w -> (b f) c h w", &[]))?;
    let mut vae = ToyVae::new(ToyVae::DEFAULT_HIDDEN, 0);
    ok(vae.train(&frames, &VaeTrainConfig::default()))?;
    let embedder = Embedder::new(0);
    let set = ok(TrainingSet::prepare(&vae, &embedder, &data.train))?;
    let config = TrainConfig { steps: 1000, batch: 4, mode: Mode::Both, ..TrainConfig::default() };
    let mut state = ok(TrainState::new(config, vae, embedder))?;
    let report = ok(fit(&mut state, &set, out))?;
    let mut checkpoints = report.checkpoints.clone();
    checkpoints.push(report.final_checkpoint.clone());
    Ok(DeskRun { state, data, losses: report.losses.iter().map(|l| l.1).collect(), checkpoints })
}

const SMOOTH: usize = 50;

fn smoke(run: &DeskRun) -> Outcome {
    let l = &run.losses;
    ensure(l.len() == 1000, || format!("{} losses logged", l.len()))?;
    ensure(l.iter().all(|v| v.is_finite()), || "non-finite loss".into())?;
    let head = l[..SMOOTH].iter().sum::<f64>() / SMOOTH as f64;
    let tail = l[l.len() - SMOOTH..].iter().sum::<f64>() / SMOOTH as f64;
    ensure(tail < 0.7 * head, || format!("smoothed loss {head:.4} -> {tail:.4}"))?;
    Ok(format!("smoothed loss {head:.4} -> {tail:.4} ({:.2}x)", tail / head))
}

const SAMPLE_STEPS: usize = 100;

/// FVD of samples and of decoded-noise videos against the test split.
fn generation_fvd(run: &DeskRun) -> Result<(f64, f64), String> {
    let real: Vec<Tensor> = run.data.test.iter().map(|s| s.video.clone()).collect();
    let conds: Vec<Tensor> = run.data.test.iter().map(|s| s.cond.clone()).collect();
    let fake = ok(run.state.generate(&conds, 8, SAMPLE_STEPS, 11, Mode::Both))?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise: Vec<Tensor> = (0..real.len())
        .map(|_| ok(run.state.vae.decode(&Tensor::randn(vec![8, 4, 16, 16], &mut rng))))
        .collect::<Result<_, _>>()?;
    let opts = EvalOptions { seed: 0, fvd_window: 8, ..EvalOptions::default() };
    Ok((ok(evaluate_videos(&real, &fake, Metric::Fvd, &opts))?, ok(evaluate_videos(&real, &noise, Metric::Fvd, &opts))?))
}

fn generation_trend(fvd: (f64, f64)) -> Outcome {
    let (samples, noise) = fvd;
    ensure(samples < noise, || format!("fvd(samples) {samples:.4} >= fvd(noise) {noise:.4}"))?;
    Ok(format!("fvd(samples) {samples:.4} < fvd(noise) {noise:.4}"))
}

fn all_modes(vae: &ToyVae, data: &Dataset) -> Outcome {
    let embedder = Embedder::new(0);
    let set = ok(TrainingSet::prepare(vae, &embedder, &data.train))?;
    let conds = [data.test[0].cond.clone(), data.test[1].cond.clone()];
    let mut notes = Vec::new();
    for mode in [Mode::Global, Mode::Local, Mode::Both] {
        let config = TrainConfig { mode, seed: 1, ..TrainConfig::default() };
        let mut state = ok(TrainState::new(config, vae.clone(), embedder.clone()))?;
        let mut last = f64::NAN;
        for _ in 0..20 {
            last = ok(state.step_once(&set))?;
            ensure(last.is_finite(), || format!("{mode}: non-finite loss"))?;
        }
        let videos = ok(state.generate(&conds, 8, 20, 0, mode))?;
        ensure(videos.iter().all(|v| v.shape() == [8, 3, 64, 64] && v.all_finite()), || format!("{mode}: bad sample"))?;
        notes.push(format!("{mode} loss {last:.3}"));
    }
    Ok(notes.join(", "))
}

fn interpolation(run: &DeskRun) -> Outcome {
    let held_out: Vec<Tensor> = generate_linear(8, 8, 64, 99).into_iter().map(|s| s.video).collect();
    let mask = ok(InterpolationMask::new(8, MaskPattern::Alternate))?;
    let filled = ok(run.state.interpolate(&held_out, &mask, SAMPLE_STEPS, 5))?;
    let model = ok(masked_frame_mse(&filled, &held_out, &mask))?;
    let baseline = ok(masked_frame_mse(&ok(copy_baseline(&held_out, &mask))?, &held_out, &mask))?;
    ensure(model <= 1.5 * baseline, || format!("masked MSE {model:.5} vs copy baseline {baseline:.5}"))?;
    Ok(format!("masked MSE {model:.5} vs copy baseline {baseline:.5} ({:.2}x)", model / baseline))
}

fn reproducibility(first: &DeskRun, first_fvd: (f64, f64), dir: &Path) -> Outcome {
    let second = desk_run(dir)?;
    ensure(first.losses == second.losses, || "loss trajectories differ".into())?;
    ensure(first.checkpoints.len() == second.checkpoints.len(), || "checkpoint counts differ".into())?;
    for (a, b) in first.checkpoints.iter().zip(&second.checkpoints) {
        let (x, y) = (ok(std::fs::read(a))?, ok(std::fs::read(b))?);
        ensure(x == y, || format!("{} differs between runs", a.file_name().unwrap().to_string_lossy()))?;
    }
    let fvd = generation_fvd(&second)?;
    ensure(fvd.0.to_bits() == first_fvd.0.to_bits() && fvd.1.to_bits() == first_fvd.1.to_bits(), || {
        format!("fvd {fvd:?} vs {first_fvd:?}")
    })?;
    Ok(format!("{} checkpoints and both FVD values bit-identical", first.checkpoints.len()))
}

fn main() {
    let mut r = Runner { failed: 0 };
    let minutes = |m: u64| Duration::from_secs(60 * m);
    r.run(1, "gradient suite", minutes(2), gradient_suite);
    r.run(2, "noise schedule", minutes(1), schedule_suite);
    r.run(3, "local conditioning", minutes(2), local_conditioning);
    r.run(4, "metric oracles", minutes(1), metric_oracles);
    r.run(5, "pseudo-3D reduction", minutes(1), pseudo3d_reduction);
    r.run(6, "attention equivariance", minutes(1), attention_equivariance);

    let root = tempfile::tempdir().expect("temp dir");
    let mut run = None;
    r.run(7, "end-to-end smoke", minutes(15), || {
        let d = desk_run(&root.path().join("first"))?;
        let out = smoke(&d);
        run = Some(d);
        out
    });
    let Some(run) = run else {
        for (n, name) in [(8, "generation trend"), (9, "all modes"), (10, "interpolation"), (11, "reproducibility")] {
            r.run(n, name, minutes(1), || Err("needs the desk run".into()));
        }
        std::process::exit(1);
    };
    let mut fvd = None;
    r.run(8, "generation trend", minutes(5), || {
        let v = generation_fvd(&run)?;
        fvd = Some(v);
        generation_trend(v)
    });
    r.run(9, "all modes", minutes(5), || all_modes(&run.state.vae, &run.data));
    r.run(10, "interpolation", minutes(5), || interpolation(&run));
    r.run(11, "reproducibility", minutes(25), || match fvd {
        Some(v) => reproducibility(&run, v, &root.path().join("second")),
        None => Err("criterion 8 produced no FVD values".into()),
    });

    if r.failed > 0 {
        println!("{} criteria failed", r.failed);
        std::process::exit(1);
    }
}

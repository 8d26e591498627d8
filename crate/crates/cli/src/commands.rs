use std::fs;
use std::path::{Path, PathBuf};

use fashionflow::conditioning::{Embedder, ToyVae, VaeTrainConfig};
use fashionflow::data::{self, generate_dataset, read_split, read_tensor, stack_videos, write_tensor, Checkpoint};
use fashionflow::diffusion::{InterpolationMask, MaskPattern, Mode};
use fashionflow::gradcheck::{check_layer, LayerKind, Probe};
use fashionflow::metrics::{evaluate_videos, EvalOptions, Metric};
use fashionflow::training::{copy_baseline, fit, masked_frame_mse, TrainConfig, TrainState, TrainingSet};
use fashionflow::{Error, Result, Tensor};

use crate::grid::write_grid;
use crate::{Eval, GenData, GradCheck, Interpolate, Sample, Train, TrainVae};

fn announce(command: &str, pairs: &[(&str, String)]) {
    eprintln!("fashionflow {command}");
    for (k, v) in pairs {
        eprintln!("  {k}={v}");
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn all_frames(videos: &[Tensor]) -> Result<Tensor> {
    let v: Vec<&Tensor> = videos.iter().collect();
    stack_videos(&v)?.rearrange("b c f h w -> (b f) c h w", &[])
}

fn grid_path(out: &Path) -> PathBuf {
    out.with_extension("png")
}

pub fn gen_data(a: GenData) -> Result<()> {
    announce(
        "gen-data",
        &[
            ("out", a.out.display().to_string()),
            ("count", a.count.to_string()),
            ("frames", a.frames.to_string()),
            ("size", a.size.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    if a.count == 0 || a.frames == 0 || a.size == 0 {
        return Err(Error::Contract("count, frames and size must be positive".into()));
    }
    let ds = generate_dataset(a.count, a.frames, a.size, a.seed);
    data::write_dataset(&a.out, &ds)?;
    println!("train={} test={}", ds.train.len(), ds.test.len());
    Ok(())
}

pub fn train_vae(a: TrainVae) -> Result<()> {
    let cfg = VaeTrainConfig { steps: a.steps, batch: a.batch, lr: a.lr, crop: (a.crop > 0).then_some(a.crop), seed: a.seed };
    announce(
        "train-vae",
        &[
            ("data", a.data.display().to_string()),
            ("out", a.out.display().to_string()),
            ("steps", cfg.steps.to_string()),
            ("batch", cfg.batch.to_string()),
            ("lr", cfg.lr.to_string()),
            ("crop", a.crop.to_string()),
            ("hidden", format!("{:?}", ToyVae::DEFAULT_HIDDEN)),
            ("seed", a.seed.to_string()),
        ],
    );
    let train: Vec<Tensor> = read_split(&a.data.join("train"))?.into_iter().map(|s| s.video).collect();
    let mut vae = ToyVae::new(ToyVae::DEFAULT_HIDDEN, a.seed);
    let report = vae.train(&all_frames(&train)?, &cfg)?;
    let mut ck = Checkpoint::new();
    ck.set("kind", "vae");
    vae.save(&mut ck);
    ck.write(&a.out)?;
    println!("final_loss={}", report.losses.last().copied().unwrap_or(f64::NAN));
    println!("latent_scale={}", report.latent_scale);
    let test_dir = a.data.join("test");
    if test_dir.is_dir() {
        let test: Vec<Tensor> = read_split(&test_dir)?.into_iter().map(|s| s.video).collect();
        println!("test_mse={}", vae.reconstruction_mse(&all_frames(&test)?)?);
    }
    Ok(())
}

pub fn train(a: Train) -> Result<()> {
    let samples = read_split(&a.data.join("train"))?;
    let mut state = match &a.resume {
        Some(path) => {
            let mut st = TrainState::load(path)?;
            if let Some(s) = a.steps {
                st.config.steps = s;
            }
            st
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => TrainConfig::read(p)?,
                None => TrainConfig::default(),
            };
            let flags: [(&str, Option<String>); 7] = [
                ("steps", a.steps.map(|v| v.to_string())),
                ("batch", a.batch.map(|v| v.to_string())),
                ("mode", a.mode.clone()),
                ("width_scale", a.width_scale.clone()),
                ("interpolation", a.interpolation.map(|v| v.to_string())),
                ("checkpoint_every", a.checkpoint_every.map(|v| v.to_string())),
                ("seed", a.seed.map(|v| v.to_string())),
            ];
            for (k, v) in flags {
                if let Some(v) = v {
                    cfg.set(k, &v)?;
                }
            }
            let vae = ToyVae::load(&Checkpoint::read(&a.vae)?)?;
            TrainState::new(cfg, vae, Embedder::new(a.vae_seed.unwrap_or(0)))?
        }
    };
    if a.resume.is_some() && (a.batch.is_some() || a.mode.is_some() || a.width_scale.is_some() || a.seed.is_some()) {
        return Err(Error::Contract("a resumed run keeps its checkpointed config; only --steps may change".into()));
    }
    let mut pairs: Vec<(&str, String)> = TrainConfig::KEYS.iter().map(|&k| (k, state.config.get(k).unwrap())).collect();
    pairs.push(("embed_seed", state.embedder.seed.to_string()));
    pairs.push(("start_step", state.step.to_string()));
    announce("train", &pairs);
    let set = TrainingSet::prepare(&state.vae, &state.embedder, &samples)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let cfg_path = a.out.join("config.txt");
    fs::write(&cfg_path, state.config.to_kv()).map_err(|e| io_err(&cfg_path, e))?;
    let report = fit(&mut state, &set, &a.out)?;
    if let Some(&(step, loss)) = report.losses.last() {
        println!("step={step} loss={loss}");
    }
    println!("checkpoint={}", report.final_checkpoint.display());
    Ok(())
}

/// Every `(f, 3, h, w)` video file in a directory, in name order.
fn read_video_dir(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vten"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let t = read_tensor(&p)?;
        if t.rank() == 4 && t.dim(1) == 3 {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(io_err(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no video files found")));
    }
    Ok(out)
}

fn resolve_mode(flag: &Option<String>, state: &TrainState) -> Result<Mode> {
    match flag {
        Some(m) => m.parse(),
        None => Ok(state.config.mode),
    }
}

pub fn sample(a: Sample) -> Result<()> {
    let state = TrainState::load(&a.ckpt)?;
    let mode = resolve_mode(&a.mode, &state)?;
    announce(
        "sample",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("image", a.image.display().to_string()),
            ("frames", a.frames.to_string()),
            ("steps", a.steps.to_string()),
            ("mode", mode.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    if a.image.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&a.image)
            .map_err(|e| io_err(&a.image, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("cond_") && n.ends_with(".vten")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(io_err(&a.image, std::io::Error::new(std::io::ErrorKind::NotFound, "no cond_*.vten files")));
        }
        let images = paths.iter().map(read_tensor).collect::<Result<Vec<_>>>()?;
        let videos = state.generate(&images, a.frames, a.steps, a.seed, mode)?;
        fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
        for (i, v) in videos.iter().enumerate() {
            write_tensor(data::video_path(&a.out, i), v)?;
        }
        if !a.no_grid {
            write_grid(&a.out.join("grid.png"), &videos)?;
        }
        println!("videos={}", videos.len());
    } else {
        let image = read_tensor(&a.image)?;
        let video = state.generate(&[image], a.frames, a.steps, a.seed, mode)?.remove(0);
        write_tensor(&a.out, &video)?;
        if !a.no_grid {
            write_grid(&grid_path(&a.out), std::slice::from_ref(&video))?;
        }
        println!("video={}", a.out.display());
    }
    Ok(())
}

pub fn interpolate(a: Interpolate) -> Result<()> {
    let state = TrainState::load(&a.ckpt)?;
    let video = read_tensor(&a.video)?;
    let f = video.shape().first().copied().unwrap_or(0);
    let pattern = match a.pattern.as_str() {
        "alternate" => MaskPattern::Alternate,
        "random" => MaskPattern::Random(a.seed),
        other => return Err(Error::Contract(format!("unknown pattern '{other}' (expected alternate or random)"))),
    };
    let mask = InterpolationMask::new(f, pattern)?;
    announce(
        "interpolate",
        &[
            ("ckpt", a.ckpt.display().to_string()),
            ("video", a.video.display().to_string()),
            ("pattern", a.pattern.clone()),
            ("masked_frames", format!("{:?}", mask.masked().collect::<Vec<_>>())),
            ("steps", a.steps.to_string()),
            ("strength", a.strength.to_string()),
            ("mode", state.config.mode.to_string()),
            ("seed", a.seed.to_string()),
            ("out", a.out.display().to_string()),
        ],
    );
    let filled = state.interpolate_with(std::slice::from_ref(&video), &mask, a.steps, a.seed, a.strength)?.remove(0);
    write_tensor(&a.out, &filled)?;
    if !a.no_grid {
        write_grid(&grid_path(&a.out), &[video.clone(), filled.clone()])?;
    }
    let truth = std::slice::from_ref(&video);
    println!("masked_mse={}", masked_frame_mse(std::slice::from_ref(&filled), truth, &mask)?);
    println!("copy_baseline_mse={}", masked_frame_mse(&copy_baseline(truth, &mask)?, truth, &mask)?);
    Ok(())
}

pub fn eval(a: Eval) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    announce(
        "eval",
        &[
            ("real", a.real.display().to_string()),
            ("fake", a.fake.display().to_string()),
            ("metric", metric.to_string()),
            ("window", a.window.to_string()),
            ("seed", a.seed.to_string()),
        ],
    );
    let real = read_video_dir(&a.real)?;
    let fake = read_video_dir(&a.fake)?;
    let opts = EvalOptions { seed: a.seed, fvd_window: a.window, ..Default::default() };
    println!("{metric}={}", evaluate_videos(&real, &fake, metric, &opts)?);
    Ok(())
}

pub fn grad_check(a: GradCheck) -> Result<()> {
    let (precision, tolerance) = if a.f64 { ("f64", 1e-6) } else { ("f32", 1e-3) };
    announce(
        "grad-check",
        &[("trials", a.trials.to_string()), ("precision", precision.to_string()), ("seed", a.seed.to_string())],
    );
    let mut worst_overall = 0.0f64;
    for kind in LayerKind::ALL {
        let mut worst = 0.0f64;
        for trial in 0..a.trials {
            let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(trial);
            let r = if a.f64 {
                check_layer::<f64>(kind, seed, Probe::five_point(1e-4))?
            } else {
                check_layer::<f32>(kind, seed, Probe::five_point(1e-2))?
            };
            worst = worst.max(r.rel_error);
        }
        println!("{} max_rel_error={worst:.3e}", kind.name());
        worst_overall = worst_overall.max(worst);
    }
    if worst_overall >= tolerance {
        return Err(Error::Numeric(format!("gradient check failed: {worst_overall:.3e} >= {tolerance:e}")));
    }
    Ok(())
}

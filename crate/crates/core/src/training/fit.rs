use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::conditioning::{Embedder, ToyVae};
use crate::data::Checkpoint;
use crate::diffusion::NoiseSchedule;
use crate::error::{contract_err, Error, Result};
use crate::params::ParamStore;

use super::{batch_indices, train_step, AdamW, DiffusionModel, TrainConfig, TrainingSet};

/// A complete, resumable training state: configuration, weights,
/// optimiser moments, step counter and the frozen encoders.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: DiffusionModel,
    pub store: ParamStore,
    pub opt: AdamW,
    /// Completed optimisation steps.
    pub step: u64,
    pub vae: ToyVae,
    pub embedder: Embedder,
    pub schedule: NoiseSchedule,
}

impl TrainState {
    /// Fresh weights seeded by `config.seed`.
    pub fn new(config: TrainConfig, vae: ToyVae, embedder: Embedder) -> Result<Self> {
        config.validate()?;
        if !vae.is_trained() {
            return Err(contract_err!("diffusion training needs a pretrained VAE"));
        }
        let (model, mut store) = DiffusionModel::build(&config.unet, config.seed)?;
        if !config.mode.uses_tokens() {
            // Without tokens the adapter and cross-attention never see a
            // gradient; keep them at their initial values.
            store.freeze_where(|name| name.starts_with("adapter.") || name.contains(".cross."));
        }
        let schedule = NoiseSchedule::cosine(config.unet.timesteps)?;
        let opt = AdamW::new(config.optimizer);
        Ok(Self { config, model, store, opt, step: 0, vae, embedder, schedule })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set("kind", "diffusion");
        for k in TrainConfig::KEYS {
            ck.set(&format!("config.{k}"), self.config.get(k).expect("listed key"));
        }
        ck.set("step", self.step);
        ck.set("embed_seed", self.embedder.seed);
        ck.push_store("model", &self.store);
        self.opt.save("adam", &self.store, &mut ck);
        self.vae.save(&mut ck);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.get("kind")? != "diffusion" {
            return Err(Error::Format { offset: 0, msg: "not a diffusion checkpoint".into() });
        }
        let mut config = TrainConfig::default();
        for k in TrainConfig::KEYS {
            config.set(k, ck.get(&format!("config.{k}"))?)?;
        }
        let vae = ToyVae::load(ck)?;
        let embedder = Embedder::new(ck.parse("embed_seed")?);
        let mut state = Self::new(config, vae, embedder)?;
        ck.load_store("model", &mut state.store)?;
        state.step = ck.parse("step")?;
        state.opt = AdamW::load(state.config.optimizer, "adam", &state.store, ck)?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }

    /// Run one step on the batch the schedule assigns to the current step.
    pub fn step_once(&mut self, set: &TrainingSet) -> Result<f64> {
        let idx = batch_indices(&self.config, set.len(), self.step);
        let loss =
            train_step(&self.model, &mut self.store, &mut self.opt, &self.config, set, &self.schedule, &idx, self.step)?;
        self.step += 1;
        Ok(loss)
    }
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// `(step, loss)` for the steps run by this call, steps counted from 1.
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.vten";

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.vten"))
}

/// Train from `state.step` up to `state.config.steps`, writing
/// `train_log.csv` (appended to on resume), periodic checkpoints and
/// `ckpt_final.vten` into `out_dir`.
pub fn fit(state: &mut TrainState, set: &TrainingSet, out_dir: &Path) -> Result<FitReport> {
    if set.is_empty() {
        return Err(contract_err!("training set is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log = out_dir.join(LOG_FILE);
    let resume = state.step > 0 && log.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&log)
        .map_err(|e| Error::io(&log, e))?;
    if !resume {
        writeln!(file, "step,loss").map_err(|e| Error::io(&log, e))?;
    }
    let mut report = FitReport {
        losses: Vec::new(),
        checkpoints: Vec::new(),
        final_checkpoint: out_dir.join(FINAL_CHECKPOINT),
        log: log.clone(),
    };
    while state.step < state.config.steps {
        let loss = state.step_once(set)?;
        writeln!(file, "{},{loss}", state.step).map_err(|e| Error::io(&log, e))?;
        report.losses.push((state.step, loss));
        let every = state.config.checkpoint_every;
        if every > 0 && state.step % every == 0 && state.step < state.config.steps {
            let path = checkpoint_path(out_dir, state.step);
            state.save(&path)?;
            report.checkpoints.push(path);
        }
    }
    file.flush().map_err(|e| Error::io(&log, e))?;
    state.save(&report.final_checkpoint)?;
    Ok(report)
}

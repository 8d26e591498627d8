use fashionflow::conditioning::{Embedder, ToyVae, VaeTrainConfig};
use fashionflow::data::{generate_dataset, stack_videos, Dataset};
use fashionflow::diffusion::Mode;
use fashionflow::gradcheck::{check, Probe};
use fashionflow::training::{
    batch_indices, batch_loss, fit, prepare_batch, train_step, TrainConfig, TrainState, TrainingSet,
};
use fashionflow::unet::WidthScale;
use fashionflow::{Error, ParamId, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config(mode: Mode) -> TrainConfig {
    let mut c = TrainConfig { mode, batch: 3, steps: 4, checkpoint_every: 2, ..Default::default() };
    c.unet.base_widths = [8, 16, 24, 32];
    c.unet.width_scale = WidthScale::ONE;
    c.unet.layers_per_block = 2;
    c.unet.mid_layers = 2;
    c.unet.norm_groups = 4;
    c.unet.context_dim = 8;
    c
}

fn fixture() -> (Dataset, ToyVae, Embedder) {
    let ds = generate_dataset(10, 4, 32, 3);
    let v: Vec<_> = ds.train.iter().map(|s| &s.video).collect();
    let frames = stack_videos(&v).unwrap().rearrange("b c f h w -> (b f) c h w", &[]).unwrap();
    let mut vae = ToyVae::new([4, 8], 1);
    vae.train(&frames, &VaeTrainConfig { steps: 2, crop: None, ..Default::default() }).unwrap();
    (ds, vae, Embedder::new(2))
}

fn state(mode: Mode) -> (TrainState, TrainingSet, Dataset) {
    let (ds, vae, emb) = fixture();
    let set = TrainingSet::prepare(&vae, &emb, &ds.train).unwrap();
    (TrainState::new(tiny_config(mode), vae, emb).unwrap(), set, ds)
}

#[test]
fn first_loss_is_finite_and_positive() {
    let (mut st, set, _) = state(Mode::Both);
    let l = st.step_once(&set).unwrap();
    assert!(l.is_finite() && l > 0.0, "{l}");
    assert_eq!(st.step, 1);
    assert_eq!(st.opt.steps(), 1);
}

#[test]
fn conditioning_frame_is_exempt_only_in_local_modes() {
    for mode in [Mode::Global, Mode::Local, Mode::Both] {
        let (st, set, _) = state(mode);
        let b = prepare_batch(&st.config, &set, &st.schedule, &[0, 2], 0).unwrap();
        let [f, h, w] = [b.eps.dim(2), b.eps.dim(3), b.eps.dim(4)];
        let frame0 = |t: &fashionflow::Tensor, item: usize, c: usize, cs: usize| -> Vec<f32> {
            t.data()[((item * cs + c) * f) * h * w..][..h * w].to_vec()
        };
        let clean = set.i_vae(0);
        let x0_frame0: Vec<f32> = clean.data()[..h * w].to_vec();
        let input0 = frame0(&b.input, 0, 0, 8);
        let weight0 = frame0(&b.weights, 0, 0, 4);
        if mode == Mode::Global {
            assert_ne!(input0, x0_frame0);
            assert!(weight0.iter().all(|&v| v == 1.0));
        } else {
            assert_eq!(input0, x0_frame0);
            assert!(weight0.iter().all(|&v| v == 0.0));
        }
        let weight1 = b.weights.data()[h * w..][..h * w].to_vec();
        assert!(weight1.iter().all(|&v| v == 1.0));
    }
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let run = || {
        let (mut st, set, _) = state(Mode::Both);
        (0..10).map(|_| st.step_once(&set).unwrap()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn loss_ignores_batch_order() {
    let (st, set, _) = state(Mode::Both);
    let mut idx = vec![0, 3, 5, 7];
    let loss = |idx: &[usize]| {
        let b = prepare_batch(&st.config, &set, &st.schedule, idx, 5).unwrap();
        let tape = Tape::no_grad();
        batch_loss(&st.model, &tape, &st.store, &b).unwrap().0.value().item()
    };
    let base = loss(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..4 {
        idx.shuffle(&mut rng);
        assert_eq!(loss(&idx), base);
    }
}

#[test]
fn masked_and_plain_steps_alternate() {
    let (st, set, _) = state(Mode::Both);
    for step in 0..4u64 {
        let b = prepare_batch(&st.config, &set, &st.schedule, &[1, 2], step).unwrap();
        assert_eq!(b.masked, step % 2 == 1);
        // Visibility channel is the last aux channel.
        let per = b.input.len() / (2 * 8);
        let vis = &b.input.data()[7 * per..8 * per];
        if b.masked {
            assert!(vis.contains(&1.0) && vis.contains(&0.0));
        } else {
            assert!(vis.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn train_step_gradient_matches_finite_differences() {
    let (st, set, _) = state(Mode::Both);
    let batch = prepare_batch(&st.config, &set, &st.schedule, &[1, 4], 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ids: Vec<ParamId> = st.store.ids().collect();
    ids.shuffle(&mut rng);
    ids.truncate(20);
    let probe = Probe::five_point(1e-4).sampled(1, 5);
    let ps = st.store.cast::<f64>();
    let r = check(&ps, &ids, &[], probe, |tape, ps, _| Ok(batch_loss(&st.model, tape, ps, &batch)?.0)).unwrap();
    assert!(r.rel_error < 1e-5, "{r:?}");
}

#[test]
fn non_finite_loss_reports_item_and_timestep() {
    let (mut st, set, _) = state(Mode::Both);
    let id = st.store.id("unet.conv_out.spatial.bias").expect("output bias");
    st.store.value_mut(id).data_mut()[0] = f32::NAN;
    let idx = batch_indices(&st.config, set.len(), 0);
    let err = train_step(&st.model, &mut st.store, &mut st.opt, &st.config, &set, &st.schedule, &idx, 0).unwrap_err();
    match err {
        Error::Numeric(m) => assert!(m.contains("t = ") && m.contains("dataset index"), "{m}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fit_writes_log_checkpoints_and_resumes_exactly() {
    let (mut st, set, ds) = state(Mode::Both);
    let dir = tempfile::tempdir().unwrap();
    let initial = st.clone();
    let report = fit(&mut st, &set, dir.path()).unwrap();
    assert_eq!(report.losses.len(), 4);
    let log = std::fs::read_to_string(&report.log).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(report.checkpoints.len(), 1);

    // Resume from the step-2 checkpoint and compare step 3.
    let mut resumed = TrainState::load(&report.checkpoints[0]).unwrap();
    assert_eq!(resumed.step, 2);
    let l3 = resumed.step_once(&set).unwrap();
    assert!((l3 - report.losses[2].1).abs() < 1e-6, "{l3} vs {}", report.losses[2].1);

    // The same run from scratch reproduces the final weights bit for bit.
    let mut again = initial;
    let dir2 = tempfile::tempdir().unwrap();
    fit(&mut again, &set, dir2.path()).unwrap();
    let a = std::fs::read(&report.final_checkpoint).unwrap();
    let b = std::fs::read(dir2.path().join("ckpt_final.vten")).unwrap();
    assert_eq!(a, b);

    let done = TrainState::load(&report.final_checkpoint).unwrap();
    let video = done.generate(&[ds.test[0].cond.clone()], 4, 5, 3, Mode::Both).unwrap();
    assert_eq!(video[0].shape(), &[4, 3, 32, 32]);
}

#[test]
fn every_mode_trains_and_samples() {
    for mode in [Mode::Global, Mode::Local, Mode::Both] {
        let (mut st, set, ds) = state(mode);
        for _ in 0..2 {
            assert!(st.step_once(&set).unwrap().is_finite());
        }
        let out = st.generate(&[ds.test[0].cond.clone(), ds.test[1].cond.clone()], 4, 3, 0, mode).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.all_finite()));
    }
}

#[test]
fn missing_log_directory_is_created_and_bad_dir_is_io_error() {
    let (mut st, set, _) = state(Mode::Local);
    st.config.steps = 1;
    let file = tempfile::NamedTempFile::new().unwrap();
    let err = fit(&mut st, &set, &file.path().join("sub")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err:?}");
}

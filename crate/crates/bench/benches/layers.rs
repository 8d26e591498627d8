use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fashionflow::conditioning::{Embedder, ToyVae, VaeTrainConfig};
use fashionflow::data::{generate_dataset, stack_videos};
use fashionflow::nn::{Pseudo3dConv, SpatialAttention, TemporalAttention};
use fashionflow::params::Initializer;
use fashionflow::training::{TrainConfig, TrainState, TrainingSet};
use fashionflow::{ParamStore, Scope, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn layers(c: &mut Criterion) {
    let mut ps = ParamStore::new();
    let (conv, spatial, temporal) = {
        let mut init = Initializer::new(&mut ps, 0);
        let mut sc = Scope::new(&mut init);
        (
            Pseudo3dConv::new(&mut sc.sub("conv"), 16, 16),
            SpatialAttention::new(&mut sc.sub("spatial"), 16, 4, 2).unwrap(),
            TemporalAttention::new(&mut sc.sub("temporal"), 16, 4, 2).unwrap(),
        )
    };
    let x = Tensor::randn(vec![2, 16, 8, 16, 16], &mut ChaCha8Rng::seed_from_u64(1));

    c.bench_function("pseudo3d_conv_forward", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            black_box(conv.forward(&tape, &ps, &tape.constant(x.clone())).unwrap().to_tensor())
        })
    });
    c.bench_function("pseudo3d_conv_forward_backward", |b| {
        b.iter(|| {
            let mut store = ps.clone();
            let tape = Tape::new();
            let y = conv.forward(&tape, &store, &tape.leaf(x.clone())).unwrap();
            tape.backward_into(&y.square().mean(), &mut store).unwrap();
            black_box(store)
        })
    });
    c.bench_function("spatial_attention_forward", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            black_box(spatial.forward(&tape, &ps, &tape.constant(x.clone())).unwrap().to_tensor())
        })
    });
    c.bench_function("temporal_attention_forward", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            black_box(temporal.forward(&tape, &ps, &tape.constant(x.clone())).unwrap().to_tensor())
        })
    });
}

fn train_step(c: &mut Criterion) {
    let data = generate_dataset(10, 8, 64, 0);
    let videos: Vec<&Tensor> = data.train.iter().map(|s| &s.video).collect();
    let frames = stack_videos(&videos).unwrap().rearrange("b c f h w -> (b f) c h w", &[]).unwrap();
    let mut vae = ToyVae::new(ToyVae::DEFAULT_HIDDEN, 0);
    vae.train(&frames, &VaeTrainConfig { steps: 2, ..VaeTrainConfig::default() }).unwrap();
    let embedder = Embedder::new(0);
    let set = TrainingSet::prepare(&vae, &embedder, &data.train).unwrap();
    let state = TrainState::new(TrainConfig::default(), vae, embedder).unwrap();

    let mut group = c.benchmark_group("desk");
    group.sample_size(10);
    group.bench_function("train_step_batch4", |b| {
        b.iter_batched(|| state.clone(), |mut s| black_box(s.step_once(&set).unwrap()), criterion::BatchSize::LargeInput)
    });
    group.finish();
}

criterion_group!(benches, layers, train_step);
criterion_main!(benches);

use fashionflow::conditioning::{
    encode_condition, Adapter, Embedder, ToyVae, VaeTrainConfig, EMBED_DIM,
};
use fashionflow::data::{generate_dataset, stack_videos, VideoSample};
use fashionflow::params::Initializer;
use fashionflow::unet::{UNet, UNetConfig, WidthScale};
use fashionflow::{Error, ParamStore, Scope, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn adapter(width: usize, seed: u64) -> (Adapter, ParamStore) {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let a = Adapter::new(&mut Scope::new(&mut init).sub("adapter"), width);
    (a, store)
}

/// A VAE with the trained flag set after a single update.
fn quick_vae(images: &Tensor) -> ToyVae {
    let mut vae = ToyVae::new([4, 8], 1);
    vae.train(images, &VaeTrainConfig { steps: 1, crop: None, ..Default::default() }).unwrap();
    vae
}

fn frames_of(samples: &[VideoSample]) -> Tensor {
    let v: Vec<_> = samples.iter().map(|s| &s.video).collect();
    stack_videos(&v).unwrap().rearrange("b c f h w -> (b f) c h w", &[]).unwrap()
}

#[test]
fn embedder_is_deterministic_and_unit_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let imgs = Tensor::rand_uniform(vec![6, 3, 16, 12], -1.0, 1.0, &mut rng);
    let e = Embedder::new(5);
    let a = e.embed(&imgs).unwrap();
    assert_eq!(a.shape(), &[6, EMBED_DIM]);
    assert_eq!(a, Embedder::new(5).embed(&imgs).unwrap());
    for row in a.data().chunks(EMBED_DIM) {
        let n: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{n}");
    }
    let zero = e.embed(&Tensor::zeros(vec![1, 3, 8, 8])).unwrap();
    assert!(zero.all_finite());
}

#[test]
fn bundle_shapes_and_channel_errors() {
    let ds = generate_dataset(2, 2, 32, 1);
    let vae = ToyVae::new([4, 8], 0);
    let emb = Embedder::new(0);
    let (ad, ps) = adapter(12, 0);
    let b = encode_condition(&vae, &emb, &ad, &ps, &ds.train[0].cond).unwrap();
    assert_eq!(b.i_vae.shape(), &[4, 8, 8]);
    assert_eq!(b.i_clip.shape(), &[EMBED_DIM]);
    assert_eq!(b.tokens.shape(), &[65, 12]);
    assert_eq!(b, encode_condition(&vae, &emb, &ad, &ps, &ds.train[0].cond).unwrap());

    let zero = encode_condition(&vae, &emb, &ad, &ps, &Tensor::zeros(vec![3, 8, 8])).unwrap();
    assert!(zero.tokens.all_finite());
    assert_eq!(zero.tokens.shape(), &[5, 12]);

    let gray = Tensor::zeros(vec![1, 32, 32]);
    assert!(matches!(encode_condition(&vae, &emb, &ad, &ps, &gray), Err(Error::Shape(_))));
}

#[test]
fn distinct_images_give_distinct_tokens() {
    let ds = generate_dataset(20, 1, 32, 4);
    let vae = ToyVae::new([4, 8], 0);
    let emb = Embedder::new(0);
    let (ad, ps) = adapter(8, 3);
    let all: Vec<_> = ds.train.iter().chain(&ds.test).collect();
    let toks: Vec<Tensor> =
        all.iter().map(|s| encode_condition(&vae, &emb, &ad, &ps, &s.cond).unwrap().tokens).collect();
    for i in 0..toks.len() {
        for j in i + 1..toks.len() {
            if all[i].cond != all[j].cond {
                assert_ne!(toks[i], toks[j], "{i} vs {j}");
            }
        }
    }
}

#[test]
fn zero_inputs_through_zeroed_adapter_give_zero_tokens() {
    let (ad, mut ps) = adapter(6, 0);
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        let shape = ps.value(id).shape().to_vec();
        ps.set_value(id, Tensor::zeros(shape)).unwrap();
    }
    let tape = Tape::no_grad();
    let t = ad
        .forward(
            &tape,
            &ps,
            &tape.constant(Tensor::zeros(vec![2, 4, 3, 5])),
            &tape.constant(Tensor::zeros(vec![2, EMBED_DIM])),
        )
        .unwrap();
    assert_eq!(t.shape(), &[2, 16, 6]);
    assert!(t.value().data().iter().all(|&v| v == 0.0));
}

fn tiny_config() -> UNetConfig {
    UNetConfig {
        base_widths: [4, 8, 12, 16],
        layers_per_block: 2,
        mid_layers: 2,
        norm_groups: 2,
        context_dim: 6,
        width_scale: WidthScale::ONE,
        ..UNetConfig::desk()
    }
}

fn tiny_model(seed: u64) -> (UNet, Adapter, ParamStore) {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let mut init = Initializer::new(&mut store, seed);
    let mut root = Scope::new(&mut init);
    let net = UNet::declare(&cfg, &mut root.sub("unet")).unwrap();
    let ad = Adapter::new(&mut root.sub("adapter"), cfg.context_dim);
    (net, ad, store)
}

#[test]
fn gradient_reaches_adapter_weights() {
    let (net, ad, mut ps) = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tape = Tape::new();
    let v = tape.constant(Tensor::randn(vec![1, 8, 2, 8, 8], &mut rng));
    let i_vae = tape.constant(Tensor::randn(vec![1, 4, 2, 2], &mut rng));
    let i_clip = tape.constant(Tensor::randn(vec![1, EMBED_DIM], &mut rng));
    let tokens = ad.forward(&tape, &ps, &i_vae, &i_clip).unwrap();
    let out = net.predict_noise(&tape, &ps, &v, &[300], Some(&tokens)).unwrap();
    let loss = out.square().mean();
    tape.backward_into(&loss, &mut ps).unwrap();
    for id in [ad.latent_proj.weight, ad.embed_proj.weight] {
        let g = ps.grad(id).expect("adapter weight gradient");
        assert!(g.data().iter().any(|&x| x != 0.0), "{}", ps.get(id).name);
    }
}

#[test]
fn changing_the_condition_changes_every_frame() {
    let (net, ad, ps) = tiny_model(4);
    let ds = generate_dataset(5, 1, 32, 2);
    let vae = ToyVae::new([4, 8], 0);
    let emb = Embedder::new(0);
    let (a, b) = (&ds.train[0].cond, &ds.train[1].cond);
    assert_ne!(a, b);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(vec![1, 8, 4, 8, 8], &mut rng);
    let run = |img: &Tensor| {
        let bundle = encode_condition(&vae, &emb, &ad, &ps, img).unwrap();
        let tape = Tape::no_grad();
        let toks = tape.constant(bundle.tokens.reshape(vec![1, 65, 6]).unwrap());
        net.predict_noise(&tape, &ps, &tape.constant(x.clone()), &[500], Some(&toks)).unwrap().to_tensor()
    };
    let (oa, ob) = (run(a), run(b));
    let per_frame = |t: &Tensor, f: usize| -> Vec<f32> {
        let (c, fr, hw) = (t.dim(1), t.dim(2), t.dim(3) * t.dim(4));
        (0..c).flat_map(|ci| t.data()[(ci * fr + f) * hw..][..hw].to_vec()).collect()
    };
    for f in 0..4 {
        assert_ne!(per_frame(&oa, f), per_frame(&ob, f), "frame {f}");
    }
}

#[test]
fn untrained_decoder_is_contract_error() {
    let vae = ToyVae::new([4, 8], 0);
    let z = Tensor::zeros(vec![1, 4, 2, 2, 2]);
    assert!(matches!(vae.decode_frames(&z), Err(Error::Contract(_))));
}

#[test]
fn frames_decode_independently_and_stay_in_range() {
    let ds = generate_dataset(2, 3, 16, 0);
    let vae = quick_vae(&frames_of(&ds.train));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z = Tensor::randn(vec![2, 4, 3, 4, 4], &mut rng).scale(3.0);
    let all = vae.decode_frames(&z).unwrap();
    assert_eq!(all.shape(), &[2, 3, 3, 16, 16]);
    assert!(all.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    for f in 0..3 {
        let one: Vec<f32> = (0..2 * 4)
            .flat_map(|bc| z.data()[(bc * 3 + f) * 16..][..16].to_vec())
            .collect();
        let alone = vae.decode_frames(&Tensor::from_vec(vec![2, 4, 1, 4, 4], one).unwrap()).unwrap();
        let row: Vec<f32> = (0..2 * 3)
            .flat_map(|bc| all.data()[(bc * 3 + f) * 256..][..256].to_vec())
            .collect();
        let diff = alone.data().iter().zip(&row).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff <= 1e-6, "frame {f}: {diff}");
    }
}

#[test]
fn vae_checkpoint_round_trip() {
    let ds = generate_dataset(5, 2, 16, 0);
    let vae = quick_vae(&frames_of(&ds.train));
    let mut ck = fashionflow::data::Checkpoint::new();
    vae.save(&mut ck);
    let back = ToyVae::load(&fashionflow::data::Checkpoint::decode(&ck.encode()).unwrap()).unwrap();
    assert!(back.is_trained());
    assert_eq!(back.latent_scale(), vae.latent_scale());
    let x = frames_of(&ds.test);
    assert_eq!(back.encode(&x).unwrap(), vae.encode(&x).unwrap());
    assert_eq!(back.decode(&vae.encode(&x).unwrap()).unwrap(), vae.decode(&vae.encode(&x).unwrap()).unwrap());
}

#[test]
fn pretrained_vae_reconstructs_held_out_images() {
    let ds = generate_dataset(80, 8, 64, 7);
    let mut vae = ToyVae::new(ToyVae::DEFAULT_HIDDEN, 0);
    let report = vae.train(&frames_of(&ds.train), &VaeTrainConfig::default()).unwrap();
    assert!(vae.is_trained());
    assert!(report.losses.iter().all(|l| l.is_finite()));
    let mse = vae.reconstruction_mse(&frames_of(&ds.test)).unwrap();
    assert!(mse < 0.01, "held-out reconstruction MSE {mse}");
    let z = vae.encode(&frames_of(&ds.train[..4])).unwrap();
    let std = (z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
    assert!(std > 0.3 && std < 3.0, "latent scale off: {std}");
}

use fashionflow::data::vten::{decode, encode};
use fashionflow::data::*;
use fashionflow::tensor::Tensor;
use fashionflow::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn hundred_random_tensors_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..100 {
        let rank = rng.random_range(0..5);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
        let n: usize = shape.iter().product();
        // Raw bit patterns, so NaN payloads and signed zeros are covered.
        let data = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let t = Tensor::from_vec(shape, data).unwrap();
        let p = dir.path().join(format!("t{i}.vten"));
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&t));
    }
}

proptest! {
    #[test]
    fn any_truncation_is_a_format_error(cut in 0usize..40) {
        let t = Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = encode(&t);
        let cut = cut.min(b.len() - 1);
        let is_format = matches!(decode(&b[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format);
    }
}

#[test]
fn missing_file_is_io_error_with_path() {
    let err = read_tensor("/nonexistent/x.vten").unwrap_err();
    assert!(err.is_io_or_format());
    assert!(err.to_string().contains("/nonexistent/x.vten"));
}

#[test]
fn dataset_layout_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(10, 4, 16, 5);
    write_dataset(dir.path(), &ds).unwrap();
    assert!(dir.path().join("train/vid_0007.vten").exists());
    assert!(dir.path().join("test/cond_0001.vten").exists());
    let train = read_split(&dir.path().join("train")).unwrap();
    assert_eq!(train, ds.train);
    assert!(read_split(&dir.path().join("nope")).is_err());
}

#[test]
fn default_desk_dataset_shape() {
    let ds = generate_dataset(80, 8, 64, 7);
    assert_eq!((ds.train.len(), ds.test.len()), (64, 16));
    assert_eq!(ds.train[0].video.shape(), &[8, 3, 64, 64]);
    assert_eq!(ds.train[0].cond.shape(), &[3, 64, 64]);
}

#[test]
fn stacking_round_trip() {
    let ds = generate_dataset(5, 3, 8, 1);
    let vids: Vec<&Tensor> = ds.train.iter().map(|s| &s.video).collect();
    let batch = stack_videos(&vids).unwrap();
    assert_eq!(batch.shape(), &[4, 3, 3, 8, 8]);
    let back = unstack_videos(&batch).unwrap();
    for (a, b) in back.iter().zip(&vids) {
        assert_eq!(a, *b);
    }
}

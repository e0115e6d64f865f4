use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ran_core::nn::{
    forward_classifier, forward_decoder, forward_encoder, Mode, ParamStore, Preset, RanArchitecture, Role,
};
use ran_core::tensor::Tensor;

fn mnist_arch() -> RanArchitecture {
    RanArchitecture::new(&[1, 28, 28], 10, Preset::MnistSmall).unwrap()
}

#[test]
fn hidden_dense_weights_follow_he_uniform() {
    let arch = mnist_arch();
    let store: ParamStore<f64> = arch.init(3);
    let (name, w) = store
        .params()
        .find(|(n, t)| Role::of(n) == Some(Role::Classifier) && t.shape() == [128, 784])
        .expect("784 -> 128 dense weight");
    let bound = (6.0f64 / 784.0).sqrt();
    let n = w.numel() as f64;
    let mean = w.data().iter().sum::<f64>() / n;
    let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(w.data().iter().all(|v| v.abs() <= bound), "{name}");
    assert!(mean.abs() < 3.0 * (bound * bound / 3.0 / n).sqrt(), "mean {mean}");
    assert!((var / (2.0 / 784.0) - 1.0).abs() < 0.03, "variance {var}");
    for (name, t) in store.params() {
        if name.ends_with(".bias") || name.ends_with(".beta") {
            assert_eq!(t.max_abs(), 0.0, "{name}");
        }
    }
}

#[test]
fn slot_values_depend_only_on_seed_and_name() {
    let arch = mnist_arch();
    let a: ParamStore<f64> = arch.init(5);
    let b: ParamStore<f64> = arch.init(6);
    let small = RanArchitecture::new(&[1, 28, 28], 3, Preset::MnistSmall).unwrap();
    let c: ParamStore<f64> = small.init(5);
    for (name, t) in a.params() {
        if name.ends_with(".weight") {
            assert_ne!(t, b.get(name).unwrap(), "{name}");
        }
        if Role::of(name) == Some(Role::Encoder) {
            assert_eq!(t, c.get(name).unwrap(), "{name}");
        }
    }
}

#[test]
fn roles_partition_the_store() {
    let arch = mnist_arch();
    let store: ParamStore<f32> = arch.init(1);
    let parts: Vec<_> = [Role::Encoder, Role::Decoder, Role::Classifier].map(|r| store.names_in(r)).into();
    let total: usize = parts.iter().map(|p| p.len()).sum();
    assert_eq!(total, store.len());
    assert!(parts.iter().all(|p| !p.is_empty()));
}

#[test]
fn inference_is_pure_and_decoder_stays_in_range() {
    let arch = mnist_arch();
    let mut store: ParamStore<f32> = arch.init(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[6, 1, 28, 28], |_| rng.random::<f32>());
    forward_encoder(&arch, &mut store, &x, Mode::Train).unwrap();
    let snapshot = store.clone();
    let f1 = forward_encoder(&arch, &mut store, &x, Mode::Infer).unwrap();
    let f2 = forward_encoder(&arch, &mut store, &x, Mode::Infer).unwrap();
    assert_eq!(f1.to_le_bytes(), f2.to_le_bytes());
    assert_eq!(store, snapshot);
    assert_eq!(f1.shape(), [6, 16, 7, 7]);

    // one sample alone gives the same features as inside a batch
    let alone = forward_encoder(&arch, &mut store, &x.slice_rows(2, 3), Mode::Infer).unwrap();
    assert_eq!(alone.data(), &f1.data()[2 * 784..3 * 784]);

    let big = f1.map(|v| v * 50.0);
    let recon = forward_decoder(&arch, &store, &big).unwrap();
    assert_eq!(recon.shape(), [6, 1, 28, 28]);
    assert!(recon.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(forward_classifier(&arch, &store, &f1).unwrap().shape(), [6, 10]);
}

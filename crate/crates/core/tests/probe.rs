use ran_core::data::{generate_synthetic, glyph_mask, texture_mask, SyntheticSpec};
use ran_core::probe::{nuisance_probe, run_probe_experiment, ProbeConfig, ProbeExperiment};
use ran_core::train::TrainConfig;

#[test]
fn test_split_decouples_nuisance_from_class() {
    let test = generate_synthetic(&SyntheticSpec::test(4000, 8)).unwrap();
    let nu = test.nuisance.as_ref().unwrap();
    let aligned = test.labels.iter().zip(nu).filter(|(c, n)| *c % 2 == **n).count() as f64 / 4000.0;
    assert!((aligned - 0.5).abs() < 0.03, "{aligned}");

    let train = generate_synthetic(&SyntheticSpec::train(4000, 8)).unwrap();
    let nu = train.nuisance.as_ref().unwrap();
    let aligned = train.labels.iter().zip(nu).filter(|(c, n)| *c % 2 == **n).count() as f64 / 4000.0;
    assert!((aligned - 0.9).abs() < 0.03, "{aligned}");
}

#[test]
fn raw_pixels_reveal_the_texture_but_not_through_the_glyph() {
    let test = generate_synthetic(&SyntheticSpec::test(1000, 4)).unwrap();
    let nu = test.nuisance.clone().unwrap();
    let cfg = ProbeConfig::default();
    assert!(nuisance_probe(&test.images, &nu, &cfg).unwrap() > 0.95);

    let glyph = glyph_mask(16);
    let texture = texture_mask(16);
    assert!(glyph.iter().zip(&texture).all(|(g, t)| !(g & t)));
    let mut inner = test.images.clone();
    for (i, v) in inner.data_mut().iter_mut().enumerate() {
        if !glyph[i % 256] {
            *v = 0.0;
        }
    }
    let acc = nuisance_probe(&inner, &nu, &cfg).unwrap();
    assert!((acc - 0.5).abs() < 0.07, "glyph pixels alone give {acc}");
}

#[test]
fn experiment_is_reproducible() {
    let exp = ProbeExperiment {
        train_samples: 256,
        test_samples: 128,
        train: TrainConfig { epochs: 1, k: 1, batch_size: 32, ..TrainConfig::default() },
        probe: ProbeConfig { epochs: 5, ..ProbeConfig::default() },
        ..ProbeExperiment::default()
    };
    let a = run_probe_experiment(&exp, 3).unwrap();
    assert_eq!(a, run_probe_experiment(&exp, 3).unwrap());
    for v in [a.ran_accuracy, a.dnn_accuracy, a.ran_probe, a.dnn_probe, a.raw_probe] {
        assert!((0.0..=1.0).contains(&v));
    }
}

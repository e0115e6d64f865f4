use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ran_core::autodiff::{Tape, Var};
use ran_core::kernels::Reduction;
use ran_core::nn::{bind, forward, Mode, Preset, RanArchitecture, Role};
use ran_core::objectives::{adversarial_loss, discriminative_loss, generative_loss};
use ran_core::tensor::Tensor;

fn naive_ce(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let rows = logits.chunks(k).zip(labels).map(|(row, &y)| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[y].exp() / z).ln()
    });
    rows.sum::<f64>() / labels.len() as f64
}

fn naive_mse(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s / a.len() as f64
}

struct Case {
    logits: Tensor<f64>,
    labels: Vec<usize>,
    original: Tensor<f64>,
    recon: Tensor<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..9), rng.random_range(2..11));
    Case {
        logits: Tensor::from_fn(&[n, k], |_| rng.random::<f64>() * 8.0 - 4.0),
        labels: (0..n).map(|_| rng.random_range(0..k)).collect(),
        original: Tensor::from_fn(&[n, 1, 3, 3], |_| rng.random()),
        recon: Tensor::from_fn(&[n, 1, 3, 3], |_| rng.random()),
    }
}

fn losses(c: &Case, lambda: f64) -> (f64, f64, f64) {
    let mut t = Tape::new();
    let l = t.leaf(c.logits.clone());
    let o = t.constant(c.original.clone());
    let r = t.leaf(c.recon.clone());
    let a = adversarial_loss(&mut t, l, &c.labels, o, r, lambda, Reduction::Mean).unwrap();
    (a.o_d.value(&t), a.o_g.value(&t), a.o_a.value(&t))
}

proptest! {
    #[test]
    fn losses_match_naive_loops(seed in any::<u64>()) {
        let c = case(seed);
        let (od, og, _) = losses(&c, 0.5);
        let k = c.logits.shape()[1];
        prop_assert!((od - naive_ce(c.logits.data(), k, &c.labels)).abs() < 1e-9);
        prop_assert!((og - naive_mse(c.original.data(), c.recon.data())).abs() < 1e-12);
        prop_assert!(od >= 0.0 && og >= 0.0);
    }

    #[test]
    fn mixed_objective_is_affine_in_lambda(seed in any::<u64>(), lambda in 0.0..=1.0f64) {
        let c = case(seed);
        let (od, og, oa) = losses(&c, lambda);
        prop_assert!((oa - (lambda * od - (1.0 - lambda) * og)).abs() < 1e-9);
        let (_, _, at0) = losses(&c, 0.0);
        let (_, _, at1) = losses(&c, 1.0);
        prop_assert!((oa - (at0 + lambda * (at1 - at0))).abs() < 1e-9);
    }
}

#[test]
fn shapes_and_labels_are_checked() {
    let mut t = Tape::<f64>::new();
    let l = t.leaf(Tensor::zeros(&[2, 3]));
    assert!(discriminative_loss(&mut t, l, &[0], Reduction::Mean).is_err());
    assert!(discriminative_loss(&mut t, l, &[0, 3], Reduction::Mean).is_err());
    let a = t.leaf(Tensor::zeros(&[2, 4]));
    let b = t.leaf(Tensor::zeros(&[2, 5]));
    assert!(generative_loss(&mut t, a, b, Reduction::Mean).is_err());
}

/// Gradients of every trainable slot under the full network for one objective.
fn network_grads(lambda: Option<f64>, decoder_trainable: bool) -> Vec<(String, Option<Tensor<f64>>)> {
    let arch = RanArchitecture::new(&[1, 8, 8], 3, Preset::MnistSmall).unwrap();
    let store = arch.init::<f64>(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.random::<f64>());
    let labels = [0, 1, 2, 1];
    let mut t = Tape::new();
    let enc = bind(&mut t, &store, &arch.encoder, true).unwrap();
    let dec = bind(&mut t, &store, &arch.decoder, decoder_trainable).unwrap();
    let cls = bind(&mut t, &store, &arch.classifier, true).unwrap();
    let input: Var = t.constant(x);
    let f = forward(&arch.encoder, &mut t, &enc, &store, input, Mode::Train).unwrap().out;
    let r = forward(&arch.decoder, &mut t, &dec, &store, f, Mode::Train).unwrap().out;
    let logits = forward(&arch.classifier, &mut t, &cls, &store, f, Mode::Train).unwrap().out;
    let a = adversarial_loss(&mut t, logits, &labels, input, r, lambda.unwrap_or(0.5), Reduction::Mean).unwrap();
    let loss = match lambda {
        Some(_) => a.o_a.var,
        None if decoder_trainable => a.o_g.var,
        None => a.o_d.var,
    };
    let grads = t.backward(loss).unwrap();
    enc.iter().chain(dec.iter()).chain(cls.iter()).map(|(n, &v)| (n.clone(), grads.try_get(v).cloned())).collect()
}

#[test]
fn mixed_gradient_is_the_weighted_difference() {
    let gd = network_grads(None, false);
    let gg = network_grads(None, true);
    for lambda in [0.0, 0.3, 1.0] {
        let ga = network_grads(Some(lambda), false);
        for ((name, a), ((_, d), (_, g))) in ga.iter().zip(gd.iter().zip(&gg)) {
            if Role::of(name) == Some(Role::Decoder) {
                continue;
            }
            let zero =
                |t: &Option<Tensor<f64>>, like: &Tensor<f64>| t.clone().unwrap_or_else(|| Tensor::zeros(like.shape()));
            let a = a.clone().expect("adversarial gradient reaches every encoder and classifier slot");
            let (d, g) = (zero(d, &a), zero(g, &a));
            for i in 0..a.numel() {
                let want = lambda * d.data()[i] - (1.0 - lambda) * g.data()[i];
                assert!((a.data()[i] - want).abs() < 1e-9, "{name}[{i}] at lambda {lambda}");
            }
        }
    }
}

#[test]
fn frozen_slots_receive_no_gradient() {
    for (name, g) in network_grads(Some(0.4), false) {
        if Role::of(&name) == Some(Role::Decoder) {
            assert!(g.is_none_or(|g| g.max_abs() == 0.0), "{name}");
        }
    }
    for (name, g) in network_grads(None, true) {
        if Role::of(&name) == Some(Role::Classifier) {
            assert!(g.is_none_or(|g| g.max_abs() == 0.0), "{name}");
        }
    }
}

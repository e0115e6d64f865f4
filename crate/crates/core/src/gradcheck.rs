//! Central finite-difference gradient checks (64-bit).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Reduction;
use crate::nn::{forward, init_params, ArchitectureSpec, Bound, Mode, ParamStore, Preset, RanArchitecture, Role};
use crate::objectives::{adversarial_loss, discriminative_loss, generative_loss};
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Options for [`grad_check_with`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates probed; `None` probes all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, max_coords: None, seed: 0 }
    }
}

/// Maximum relative error between the tape gradient of `f` at `input` and
/// central differences with step `h`, over every coordinate.
pub fn grad_check<F>(f: F, input: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(f, input, &GradCheck { step: h, ..GradCheck::default() })
}

pub fn grad_check_with<F>(f: F, input: &Tensor<f64>, opts: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|t, xs| f(t, xs[0]), std::slice::from_ref(input), opts)
}

/// [`grad_check_with`] for a function of several tensors. Every input is a
/// tracked leaf; `max_coords` applies to each input separately.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheck) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |vals: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let xs: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &xs)?;
        Ok((tape, xs, loss))
    };
    let (tape, xs, loss) = run(inputs)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = xs.iter().map(|&x| grads.get(x)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < input.numel() => {
                let mut idx = sample(&mut rng, input.numel(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.numel()).collect(),
        };
        for i in coords {
            let orig = probe[which].data()[i];
            probe[which].data_mut()[i] = orig + opts.step;
            let (t, _, l) = run(&probe)?;
            let up = t.value(l).item();
            probe[which].data_mut()[i] = orig - opts.step;
            let (t, _, l) = run(&probe)?;
            let down = t.value(l).item();
            probe[which].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// Distance of `f` at `inputs` from the nearest relu or max-pool kink.
pub fn kink_margin<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    f(&mut tape, &xs)?;
    Ok(tape.min_kink_margin())
}

/// Settings of [`run_suite`].
#[derive(Clone, Debug)]
pub struct SuiteConfig {
    /// Accepted random instances per case.
    pub instances: usize,
    pub step: f64,
    /// Instances closer than this to a kink are redrawn.
    pub kink_margin: f64,
    /// Coordinates probed per input tensor in the composed-network cases.
    pub network_coords: usize,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self { instances: 50, step: 1e-5, kink_margin: 1e-3, network_coords: 4, seed: 2024 }
    }
}

/// Outcome of one suite case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: String,
    pub instances: usize,
    /// Draws discarded for sitting near a kink.
    pub redrawn: usize,
    pub worst: f64,
}

impl CaseReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

type LossFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// One random instance: leaf values, the scalar function of them, and the
/// number of coordinates to probe per leaf (`None` = all).
struct Instance {
    inputs: Vec<Tensor<f64>>,
    f: LossFn,
    coords: Option<usize>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(y, c)?;
    Ok(tape.sum(p))
}

/// Unary-output case: `build` maps the leaves to a tensor that is then
/// reduced by a random weighted sum.
fn case<B>(inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, build: B) -> Result<Instance>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
{
    let mut tape = Tape::new();
    let xs: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = build(&mut tape, &xs)?;
    let r = randn(rng, tape.value(y).shape());
    let f: LossFn = Box::new(move |t, xs| {
        let y = build(t, xs)?;
        weighted_sum(t, y, &r)
    });
    Ok(Instance { inputs, f, coords: None })
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn shape4(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 5), dims(rng, 2, 5)]
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

type Maker = fn(&mut ChaCha8Rng, &SuiteConfig) -> Result<Instance>;

fn primitive_cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("add", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s), randn(rng, &s)], rng, |t, x| t.add(x[0], x[1]))
        }),
        ("sub", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s), randn(rng, &s)], rng, |t, x| t.sub(x[0], x[1]))
        }),
        ("mul", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s), randn(rng, &s)], rng, |t, x| t.mul(x[0], x[1]))
        }),
        ("scale", |rng, _| {
            let c: f64 = rng.random_range(-3.0..3.0);
            let s = shape4(rng);
            case(vec![randn(rng, &s)], rng, move |t, x| Ok(t.scale(x[0], c)))
        }),
        ("add_bias", |rng, _| {
            let s = if rng.random() { shape4(rng) } else { vec![dims(rng, 1, 4), dims(rng, 1, 6)] };
            let b = randn(rng, &[s[1]]);
            case(vec![randn(rng, &s), b], rng, |t, x| t.add_bias(x[0], x[1]))
        }),
        ("relu", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s)], rng, |t, x| Ok(t.relu(x[0])))
        }),
        ("sigmoid", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s).map(|v| 3.0 * v)], rng, |t, x| Ok(t.sigmoid(x[0])))
        }),
        ("reshape", |rng, _| {
            let s = shape4(rng);
            let flat = vec![s.iter().product::<usize>()];
            case(vec![randn(rng, &s)], rng, move |t, x| t.reshape(x[0], &flat))
        }),
        ("flatten", |rng, _| {
            let s = shape4(rng);
            case(vec![randn(rng, &s)], rng, |t, x| t.flatten(x[0]))
        }),
        ("linear", |rng, _| {
            let (n, i, o) = (dims(rng, 1, 4), dims(rng, 1, 6), dims(rng, 1, 5));
            case(vec![randn(rng, &[n, i]), randn(rng, &[o, i])], rng, |t, x| t.linear(x[0], x[1]))
        }),
        ("conv2d", |rng, _| {
            let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let k = dims(rng, 1, 3);
            let (stride, pad) = (dims(rng, 1, 2), rng.random_range(0..k));
            let (h, w) = (dims(rng, k, 6), dims(rng, k, 6));
            case(vec![randn(rng, &[n, c, h, w]), randn(rng, &[o, c, k, k])], rng, move |t, x| {
                t.conv2d(x[0], x[1], stride, pad)
            })
        }),
        ("conv_transpose2d", |rng, _| {
            let (n, c, o) = (dims(rng, 1, 2), dims(rng, 1, 3), dims(rng, 1, 3));
            let k = dims(rng, 1, 3);
            let (stride, pad) = (dims(rng, 1, 2), rng.random_range(0..k));
            // smallest input extent whose transposed output is non-empty
            let least = (2 * pad + 1).saturating_sub(k).div_ceil(stride) + 1;
            let (h, w) = (dims(rng, 2, 4).max(least), dims(rng, 2, 4).max(least));
            let extra = rng.random_range(0..stride);
            let oh = (h - 1) * stride + k - 2 * pad + extra;
            let ow = (w - 1) * stride + k - 2 * pad;
            case(vec![randn(rng, &[n, c, h, w]), randn(rng, &[c, o, k, k])], rng, move |t, x| {
                t.conv_transpose2d(x[0], x[1], stride, pad, oh, ow)
            })
        }),
        ("maxpool2d", |rng, _| {
            let win = dims(rng, 1, 3);
            let s = vec![dims(rng, 1, 2), dims(rng, 1, 3), win * dims(rng, 1, 3), win * dims(rng, 1, 3)];
            case(vec![randn(rng, &s)], rng, move |t, x| t.maxpool2d(x[0], win))
        }),
        ("max_unpool2d", |rng, _| {
            let win = dims(rng, 2, 3);
            let s = vec![dims(rng, 1, 2), dims(rng, 1, 3), win * dims(rng, 1, 3), win * dims(rng, 1, 3)];
            let (_, switches) = crate::kernels::maxpool2d(&randn(rng, &s), win)?;
            let pooled = vec![s[0], s[1], s[2] / win, s[3] / win];
            case(vec![randn(rng, &pooled)], rng, move |t, x| t.max_unpool2d(x[0], switches.clone()))
        }),
        ("upsample", |rng, _| {
            let f = dims(rng, 1, 3);
            let s = shape4(rng);
            case(vec![randn(rng, &s)], rng, move |t, x| t.upsample(x[0], f))
        }),
        ("batchnorm_train", |rng, _| {
            let s = vec![dims(rng, 2, 3), dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 3)];
            let c = s[1];
            case(vec![randn(rng, &s), randn(rng, &[c]), randn(rng, &[c])], rng, |t, x| {
                Ok(t.batchnorm_train(x[0], x[1], x[2])?.out)
            })
        }),
        ("batchnorm_infer", |rng, _| {
            let s = shape4(rng);
            let c = s[1];
            let stats = crate::kernels::RunningStats {
                mean: randn(rng, &[c]).into_data(),
                var: (0..c).map(|_| rng.random_range(0.2..2.0)).collect(),
                updates: 1,
            };
            case(vec![randn(rng, &s), randn(rng, &[c]), randn(rng, &[c])], rng, move |t, x| {
                t.batchnorm_infer(x[0], x[1], x[2], &stats, "bn")
            })
        }),
        ("log_softmax_nll", |rng, _| {
            let (n, k) = (dims(rng, 1, 5), dims(rng, 2, 6));
            let y = labels(rng, n, k);
            let red = if rng.random() { Reduction::Mean } else { Reduction::Sum };
            let f: LossFn = Box::new(move |t, x| t.log_softmax_nll(x[0], &y, red));
            Ok(Instance { inputs: vec![randn(rng, &[n, k]).map(|v| 2.0 * v)], f, coords: None })
        }),
        ("mse", |rng, _| {
            let s = shape4(rng);
            let red = if rng.random() { Reduction::Mean } else { Reduction::Sum };
            let f: LossFn = Box::new(move |t, x| t.mse(x[0], x[1], red));
            Ok(Instance { inputs: vec![randn(rng, &s), randn(rng, &s)], f, coords: None })
        }),
        ("sum", |rng, _| {
            let s = shape4(rng);
            let f: LossFn = Box::new(|t, x| Ok(t.sum(x[0])));
            Ok(Instance { inputs: vec![randn(rng, &s)], f, coords: None })
        }),
        ("mean", |rng, _| {
            let s = shape4(rng);
            let f: LossFn = Box::new(|t, x| Ok(t.mean(x[0])));
            Ok(Instance { inputs: vec![randn(rng, &s)], f, coords: None })
        }),
        ("conv_bn_relu_chain", |rng, _| {
            let (n, c, o) = (2, dims(rng, 1, 2), dims(rng, 1, 3));
            let s = vec![n, c, 5, 5];
            case(vec![randn(rng, &s), randn(rng, &[o, c, 3, 3]), randn(rng, &[o]), randn(rng, &[o])], rng, |t, x| {
                let y = t.conv2d(x[0], x[1], 1, 1)?;
                let y = t.batchnorm_train(y, x[2], x[3])?.out;
                Ok(t.relu(y))
            })
        }),
    ]
}

/// Small encoder/decoder/classifier stack used by the composed cases.
fn small_arch() -> Result<RanArchitecture> {
    RanArchitecture::new(&[1, 8, 8], 3, Preset::MnistSmall)
}

/// Leaves for a composed case: the image batch followed by every parameter
/// of `specs`, in slot order. Returns the slot names alongside.
fn network_inputs(rng: &mut ChaCha8Rng, specs: &[&ArchitectureSpec], n: usize) -> (Vec<Tensor<f64>>, Vec<String>) {
    let store: ParamStore<f64> = init_params(specs, rng.random());
    let mut inputs = vec![Tensor::from_fn(&[n, 1, 8, 8], |_| rng.random::<f64>())];
    let mut names = Vec::new();
    for (name, t) in store.params() {
        // random affine parameters instead of the (1, 0) init
        let t = if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias") {
            randn(rng, t.shape()).map(|v| 0.5 * v + if name.ends_with(".gamma") { 1.0 } else { 0.0 })
        } else {
            t.clone()
        };
        inputs.push(t);
        names.push(name.clone());
    }
    (inputs, names)
}

/// Forward `spec` in train mode using leaf vars for its parameters.
fn run_net(tape: &mut Tape<f64>, spec: &ArchitectureSpec, names: &[String], xs: &[Var], input: Var) -> Result<Var> {
    let pairs = names.iter().cloned().zip(xs[1..].iter().copied());
    let bound = Bound::from_pairs(pairs.filter(|(n, _)| Role::of(n) == Some(spec.role)));
    Ok(forward(spec, tape, &bound, &ParamStore::new(), input, Mode::Train)?.out)
}

fn network_case(rng: &mut ChaCha8Rng, cfg: &SuiteConfig, which: usize) -> Result<Instance> {
    let arch = small_arch()?;
    let n = 4;
    let y = labels(rng, n, 3);
    let lambda: f64 = rng.random_range(0.05..0.95);
    let red = if rng.random_bool(0.25) { Reduction::Sum } else { Reduction::Mean };
    let specs: Vec<&ArchitectureSpec> = match which {
        0 => vec![&arch.encoder, &arch.classifier],
        1 => vec![&arch.encoder, &arch.decoder],
        _ => vec![&arch.encoder, &arch.decoder, &arch.classifier],
    };
    let (inputs, names) = network_inputs(rng, &specs, n);
    let f: LossFn = Box::new(move |t, xs| {
        let feats = run_net(t, &arch.encoder, &names, xs, xs[0])?;
        match which {
            0 => {
                let logits = run_net(t, &arch.classifier, &names, xs, feats)?;
                Ok(discriminative_loss(t, logits, &y, red)?.var)
            }
            1 => {
                let recon = run_net(t, &arch.decoder, &names, xs, feats)?;
                Ok(generative_loss(t, xs[0], recon, red)?.var)
            }
            _ => {
                let logits = run_net(t, &arch.classifier, &names, xs, feats)?;
                let recon = run_net(t, &arch.decoder, &names, xs, feats)?;
                Ok(adversarial_loss(t, logits, &y, xs[0], recon, lambda, red)?.o_a.var)
            }
        }
    });
    Ok(Instance { inputs, f, coords: Some(cfg.network_coords) })
}

fn network_cases() -> Vec<(&'static str, Maker)> {
    vec![
        ("encoder+classifier O_d", |rng, cfg| network_case(rng, cfg, 0)),
        ("encoder+decoder O_g", |rng, cfg| network_case(rng, cfg, 1)),
        ("encoder+decoder+classifier O_a", |rng, cfg| network_case(rng, cfg, 2)),
    ]
}

/// Names of every case [`run_suite`] runs.
pub fn suite_case_names() -> Vec<&'static str> {
    primitive_cases().into_iter().chain(network_cases()).map(|(n, _)| n).collect()
}

/// Finite-difference check of every differentiable primitive and of the
/// composed network losses, each over `cfg.instances` random instances.
/// `observer` sees each case report as it finishes.
pub fn run_suite(cfg: &SuiteConfig, observer: &mut dyn FnMut(&CaseReport)) -> Result<Vec<CaseReport>> {
    const MAX_DRAWS: usize = 100;
    let mut reports = Vec::new();
    for (ci, (name, make)) in primitive_cases().into_iter().chain(network_cases()).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ci as u64);
        let mut report = CaseReport { name: name.to_string(), instances: 0, redrawn: 0, worst: 0.0 };
        while report.instances < cfg.instances {
            if report.redrawn > MAX_DRAWS * cfg.instances {
                return Err(Error::contract(format!(
                    "`{name}`: no instance clear of kinks after {} draws",
                    report.redrawn
                )));
            }
            let inst = make(&mut rng, cfg)?;
            if kink_margin(&inst.f, &inst.inputs)? <= cfg.kink_margin {
                report.redrawn += 1;
                continue;
            }
            let opts = GradCheck { step: cfg.step, max_coords: inst.coords, seed: rng.random() };
            let err = grad_check_many(&inst.f, &inst.inputs, &opts)?;
            report.worst = report.worst.max(err);
            report.instances += 1;
        }
        observer(&report);
        reports.push(report);
    }
    Ok(reports)
}

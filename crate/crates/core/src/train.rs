//! The three-stage adversarial training loop and its stage primitives.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::autodiff::{Gradients, Tape};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::kernels::loss::Reduction;
use crate::nn::{
    bind, calibrate_output_bias, channel_means, forward, infer_batched, init_params, ArchitectureSpec, Bound, Mode,
    ParamStore, RanArchitecture, Role,
};
use crate::objectives::{adversarial_loss, check_lambda, discriminative_loss, generative_loss};
use crate::optim::{clip_global_norm, AdamState, BatchPlan, NamedGrads};
use crate::tensor::{Scalar, Tensor};

/// How batches are drawn within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoopMode {
    /// Every mini-batch gets k paired steps plus one adversarial step.
    PerBatch,
    /// A single mini-batch per epoch.
    StrictLiteral,
}

/// Which objective drives the encoder and classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Full adversarial training.
    Ran,
    /// Cross-entropy only: the decoder stages are skipped and the
    /// adversarial slot runs a discriminative step with the third optimizer.
    ClassifierOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub k: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub lr_disc: f64,
    pub lr_gen: f64,
    pub lr_adv: f64,
    pub seed: u64,
    /// Global-norm clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Use summed instead of averaged losses.
    pub summed_loss: bool,
    pub loop_mode: LoopMode,
    pub objective: Objective,
    /// Halt when a generative loss exceeds this multiple of its epoch-1 mean.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            k: 3,
            batch_size: 64,
            lambda: 0.5,
            lr_disc: 1e-3,
            lr_gen: 1e-3,
            lr_adv: 1e-3,
            seed: 42,
            clip_norm: Some(5.0),
            summed_loss: false,
            loop_mode: LoopMode::PerBatch,
            objective: Objective::Ran,
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        check_lambda(self.lambda)?;
        for (name, lr) in [("l1", self.lr_disc), ("l2", self.lr_gen), ("l3", self.lr_adv)] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::config(format!("learning rate {name} must be finite and >= 0, got {lr}")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("clip norm must be positive, got {c}")));
            }
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::config("divergence factor must exceed 1"));
        }
        Ok(())
    }

    pub fn reduction(&self) -> Reduction {
        if self.summed_loss {
            Reduction::Sum
        } else {
            Reduction::Mean
        }
    }
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageOutcome {
    /// Loss before the update.
    pub loss: f64,
    /// Correct predictions in the batch before the update (0 for the
    /// generative stage).
    pub correct: usize,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub o_d: f64,
    /// `None` when the decoder is not trained.
    pub o_g: Option<f64>,
    pub o_a: f64,
    pub train_accuracy: f64,
    pub seconds: f64,
    pub disc_steps: usize,
    pub gen_steps: usize,
    pub adv_steps: usize,
    pub batches: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Equal in every field except wall time.
    pub fn same_numbers(&self, other: &TrainTrace) -> bool {
        self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| EpochRecord { seconds: 0.0, ..a.clone() } == EpochRecord { seconds: 0.0, ..b.clone() })
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

impl std::fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let og = self.o_g.map_or("-".to_string(), |v| format!("{v:.5}"));
        write!(
            f,
            "epoch {:>3}  O_d {:.5}  O_g {}  O_a {:.5}  acc {:.4}  {:.1}s",
            self.epoch, self.o_d, og, self.o_a, self.train_accuracy, self.seconds
        )
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1..].iter().product::<usize>().max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn collect_grads<T: Scalar>(grads: &Gradients<T>, bound: &[&Bound]) -> NamedGrads<T> {
    bound.iter().flat_map(|b| b.iter()).map(|(n, &v)| (n.clone(), grads.get(v))).collect()
}

fn names(bound: &[&Bound]) -> BTreeSet<String> {
    bound.iter().flat_map(|b| b.iter()).map(|(n, _)| n.clone()).collect()
}

fn finite_or(loss: f64, what: &str) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite { what: what.to_string(), epoch: 0, step: 0 })
    }
}

fn apply<T: Scalar>(
    store: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    mut grads: NamedGrads<T>,
    subset: &BTreeSet<String>,
    clip: Option<f64>,
) -> Result<f64> {
    let norm = match clip {
        Some(c) => clip_global_norm(&mut grads, c),
        None => crate::optim::global_norm(&grads),
    };
    opt.step(store, &grads, subset)?;
    Ok(norm)
}

#[cfg(debug_assertions)]
fn frozen_bytes<T: Scalar>(store: &ParamStore<T>, roles: &[Role]) -> Vec<(String, Vec<u8>)> {
    store
        .params()
        .filter(|(n, _)| Role::of(n).is_some_and(|r| roles.contains(&r)))
        .map(|(n, t)| (n.clone(), t.to_le_bytes()))
        .collect()
}

macro_rules! isolated {
    ($store:expr, $roles:expr, $body:expr) => {{
        #[cfg(debug_assertions)]
        let before = frozen_bytes($store, $roles);
        let out = $body;
        #[cfg(debug_assertions)]
        assert!(before == frozen_bytes($store, $roles), "stage modified a frozen partition");
        out
    }};
}

/// One Adam step on encoder and classifier against `O_d`.
pub fn stage_discriminative<T: Scalar>(
    arch: &RanArchitecture,
    store: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<StageOutcome> {
    Ok(isolated!(store, &[Role::Decoder], {
        let mut tape = Tape::new();
        let enc = bind(&mut tape, store, &arch.encoder, true)?;
        let cls = bind(&mut tape, store, &arch.classifier, true)?;
        let x = tape.constant(images.clone());
        let f = forward(&arch.encoder, &mut tape, &enc, store, x, Mode::Train)?;
        let logits = forward(&arch.classifier, &mut tape, &cls, store, f.out, Mode::Train)?.out;
        let od = discriminative_loss(&mut tape, logits, labels, config.reduction())?;
        let loss = finite_or(od.value(&tape), "O_d")?;
        let correct = count_correct(tape.value(logits), labels);
        let grads = tape.backward(od.var)?;
        let bound = [&enc, &cls];
        let grad_norm = apply(store, opt, collect_grads(&grads, &bound), &names(&bound), config.clip_norm)?;
        store.apply_bn_updates(&f.bn_updates);
        StageOutcome { loss, correct, grad_norm }
    }))
}

/// One Adam step on the decoder against `O_g`; the encoder runs as a
/// constant so no gradient reaches it.
pub fn stage_generative<T: Scalar>(
    arch: &RanArchitecture,
    store: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    config: &TrainConfig,
) -> Result<StageOutcome> {
    Ok(isolated!(store, &[Role::Encoder, Role::Classifier], {
        let mut tape = Tape::new();
        let enc = bind(&mut tape, store, &arch.encoder, false)?;
        let dec = bind(&mut tape, store, &arch.decoder, true)?;
        let x = tape.constant(images.clone());
        let f = forward(&arch.encoder, &mut tape, &enc, store, x, Mode::Train)?;
        let recon = forward(&arch.decoder, &mut tape, &dec, store, f.out, Mode::Train)?.out;
        let og = generative_loss(&mut tape, x, recon, config.reduction())?;
        let loss = finite_or(og.value(&tape), "O_g")?;
        let grads = tape.backward(og.var)?;
        let bound = [&dec];
        let grad_norm = apply(store, opt, collect_grads(&grads, &bound), &names(&bound), config.clip_norm)?;
        store.apply_bn_updates(&f.bn_updates);
        StageOutcome { loss, correct: 0, grad_norm }
    }))
}

/// One Adam step on encoder and classifier against
/// `O_a = lambda * O_d - (1 - lambda) * O_g` with the decoder frozen.
pub fn stage_adversarial<T: Scalar>(
    arch: &RanArchitecture,
    store: &mut ParamStore<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    config: &TrainConfig,
) -> Result<StageOutcome> {
    check_lambda(lambda)?;
    Ok(isolated!(store, &[Role::Decoder], {
        let mut tape = Tape::new();
        let enc = bind(&mut tape, store, &arch.encoder, true)?;
        let cls = bind(&mut tape, store, &arch.classifier, true)?;
        let dec = bind(&mut tape, store, &arch.decoder, false)?;
        let x = tape.constant(images.clone());
        let f = forward(&arch.encoder, &mut tape, &enc, store, x, Mode::Train)?;
        let logits = forward(&arch.classifier, &mut tape, &cls, store, f.out, Mode::Train)?.out;
        let recon = forward(&arch.decoder, &mut tape, &dec, store, f.out, Mode::Train)?.out;
        let losses = adversarial_loss(&mut tape, logits, labels, x, recon, lambda, config.reduction())?;
        finite_or(losses.o_d.value(&tape), "O_d")?;
        finite_or(losses.o_g.value(&tape), "O_g")?;
        let loss = finite_or(losses.o_a.value(&tape), "O_a")?;
        let correct = count_correct(tape.value(logits), labels);
        let grads = tape.backward(losses.o_a.var)?;
        let bound = [&enc, &cls];
        let grad_norm = apply(store, opt, collect_grads(&grads, &bound), &names(&bound), config.clip_norm)?;
        store.apply_bn_updates(&f.bn_updates);
        StageOutcome { loss, correct, grad_norm }
    }))
}

fn at(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, epoch, step },
        other => other,
    }
}

/// Parameters plus the three optimizer states of one training run.
pub struct Trainer<'a, T: Scalar> {
    pub arch: &'a RanArchitecture,
    pub store: ParamStore<T>,
    pub opt_disc: AdamState<T>,
    pub opt_gen: AdamState<T>,
    pub opt_adv: AdamState<T>,
    pub config: TrainConfig,
    pub trace: TrainTrace,
    og_baseline: Option<f64>,
    step: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(arch: &'a RanArchitecture, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let store = arch.init(config.seed);
        Ok(Self {
            arch,
            store,
            opt_disc: AdamState::new(config.lr_disc),
            opt_gen: AdamState::new(config.lr_gen),
            opt_adv: AdamState::new(config.lr_adv),
            config,
            trace: TrainTrace::default(),
            og_baseline: None,
            step: 0,
        })
    }

    /// Run the configured number of epochs over `data`, reporting each
    /// finished epoch to `observer`.
    pub fn run(&mut self, data: &LabeledDataset, observer: &mut dyn FnMut(&EpochRecord)) -> Result<()> {
        for _ in 0..self.config.epochs {
            let rec = self.epoch(data)?;
            observer(&rec);
        }
        Ok(())
    }

    pub fn epoch(&mut self, data: &LabeledDataset) -> Result<EpochRecord> {
        if data.sample_shape() != self.arch.encoder.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "dataset samples are {:?}, encoder expects {:?}",
                data.sample_shape(),
                self.arch.encoder.input_shape
            )));
        }
        if self.step == 0 {
            calibrate_output_bias(&mut self.store, &self.arch.decoder, &channel_means(&data.images))?;
        }
        let epoch = self.trace.epochs.len() + 1;
        let start = Instant::now();
        let plan = BatchPlan::new(data.len(), self.config.batch_size, self.config.seed, epoch)?;
        let mut batches: Vec<&[usize]> = plan.batches().collect();
        if self.config.loop_mode == LoopMode::StrictLiteral {
            batches.truncate(2);
        }
        let rounds = match self.config.loop_mode {
            LoopMode::PerBatch => batches.len(),
            LoopMode::StrictLiteral => 1,
        };

        let cfg = self.config.clone();
        let (mut sum_d, mut sum_g, mut sum_a) = (0.0, 0.0, 0.0);
        let (mut nd, mut ng, mut na) = (0usize, 0usize, 0usize);
        let (mut correct, mut seen) = (0usize, 0usize);
        for b in 0..rounds {
            let (images, labels) = data.batch::<T>(batches[b]);
            for j in 0..cfg.k {
                self.step += 1;
                let s = self.step;
                let d = stage_discriminative(self.arch, &mut self.store, &mut self.opt_disc, &images, &labels, &cfg)
                    .map_err(|e| at(e, epoch, s))?;
                sum_d += d.loss;
                nd += 1;
                if j == 0 {
                    correct += d.correct;
                    seen += labels.len();
                }
                if cfg.objective == Objective::Ran {
                    let g = stage_generative(self.arch, &mut self.store, &mut self.opt_gen, &images, &cfg)
                        .map_err(|e| at(e, epoch, s))?;
                    self.check_divergence(g.loss, epoch, s)?;
                    sum_g += g.loss;
                    ng += 1;
                }
            }
            let (fresh_images, fresh_labels) = data.batch::<T>(batches[(b + 1) % batches.len()]);
            self.step += 1;
            let s = self.step;
            let a = match cfg.objective {
                Objective::Ran => stage_adversarial(
                    self.arch,
                    &mut self.store,
                    &mut self.opt_adv,
                    &fresh_images,
                    &fresh_labels,
                    cfg.lambda,
                    &cfg,
                ),
                Objective::ClassifierOnly => stage_discriminative(
                    self.arch,
                    &mut self.store,
                    &mut self.opt_adv,
                    &fresh_images,
                    &fresh_labels,
                    &cfg,
                ),
            }
            .map_err(|e| at(e, epoch, s))?;
            sum_a += a.loss;
            na += 1;
        }

        if epoch == 1 && ng > 0 {
            self.og_baseline = Some(sum_g / ng as f64);
        }
        let rec = EpochRecord {
            epoch,
            o_d: sum_d / nd as f64,
            o_g: (ng > 0).then(|| sum_g / ng as f64),
            o_a: sum_a / na as f64,
            train_accuracy: correct as f64 / seen as f64,
            seconds: start.elapsed().as_secs_f64(),
            disc_steps: nd,
            gen_steps: ng,
            adv_steps: na,
            batches: rounds,
        };
        self.trace.epochs.push(rec.clone());
        Ok(rec)
    }

    fn check_divergence(&self, og: f64, epoch: usize, step: usize) -> Result<()> {
        if let Some(base) = self.og_baseline {
            if og > self.config.divergence_factor * base {
                return Err(Error::Divergence(format!(
                    "O_g {og:.4e} at epoch {epoch}, step {step} exceeds {}x its epoch-1 mean {base:.4e}",
                    self.config.divergence_factor
                )));
            }
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ParamStore<T>, TrainTrace) {
        (self.store, self.trace)
    }
}

/// Train encoder, decoder and classifier on `data`.
pub fn train_ran<T: Scalar>(
    data: &LabeledDataset,
    arch: &RanArchitecture,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(ParamStore<T>, TrainTrace)> {
    let mut trainer = Trainer::new(arch, config.clone())?;
    trainer.run(data, observer)?;
    Ok(trainer.into_parts())
}

/// Train encoder and classifier with cross-entropy only.
pub fn train_classifier<T: Scalar>(
    data: &LabeledDataset,
    arch: &RanArchitecture,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(ParamStore<T>, TrainTrace)> {
    let config = TrainConfig { objective: Objective::ClassifierOnly, ..config.clone() };
    train_ran(data, arch, &config, observer)
}

/// Test accuracy of classifier-on-encoder in infer mode.
pub fn evaluate_accuracy<T: Scalar>(
    arch: &RanArchitecture,
    store: &ParamStore<T>,
    data: &LabeledDataset,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let images: Tensor<T> = data.images.cast();
    let features = infer_batched(&arch.encoder, store, &images, 500)?;
    let logits = infer_batched(&arch.classifier, store, &features, 500)?;
    Ok(count_correct(&logits, &data.labels) as f64 / data.len() as f64)
}

/// Settings for fitting one network on fixed inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Start every weight at zero instead of the He-uniform draw.
    pub zero_init: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 64, lr: 1e-3, seed: 42, clip_norm: Some(5.0), zero_init: false }
    }
}

/// Train a classifier-role network on fixed `inputs` with cross-entropy.
pub fn fit_classifier(
    spec: &ArchitectureSpec,
    inputs: &Tensor<f32>,
    labels: &[usize],
    config: &FitConfig,
) -> Result<ParamStore<f32>> {
    if inputs.shape()[0] != labels.len() {
        return Err(Error::dim(format!("{} inputs but {} labels", inputs.shape()[0], labels.len())));
    }
    let mut params: ParamStore<f32> = init_params(&[spec], config.seed);
    if config.zero_init {
        for name in params.names() {
            params.get_mut(&name).expect("own name").data_mut().fill(0.0);
        }
    }
    let mut adam = AdamState::new(config.lr);
    let subset = params.names();
    for epoch in 1..=config.epochs {
        let plan = BatchPlan::new(labels.len(), config.batch_size, config.seed, epoch)?;
        for (step, idx) in plan.batches().enumerate() {
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params, spec, true)?;
            let x = tape.constant(inputs.select_rows(idx));
            let logits = forward(spec, &mut tape, &bound, &params, x, Mode::Train)?.out;
            let od = discriminative_loss(&mut tape, logits, &batch_labels, Reduction::Mean)?;
            if !od.value(&tape).is_finite() {
                return Err(Error::NonFinite { what: "O_d".into(), epoch, step: step + 1 });
            }
            let grads = tape.backward(od.var)?;
            apply(&mut params, &mut adam, collect_grads(&grads, &[&bound]), &subset, config.clip_norm)?;
        }
    }
    Ok(params)
}

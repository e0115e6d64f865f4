//! Sweep configuration and orchestration.
//!
//! A sweep config is a flat UTF-8 file of `key = value` lines; `#` starts a
//! comment. Lists are comma separated. Unknown or repeated keys are errors.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::attack::AttackConfig;
use crate::baselines::{
    assess_encoder, run_dnn_baseline, run_dnn_resized_baseline, run_noisy_baseline, NoiseFactorGrid, NoisyPoint,
};
use crate::data::{generate_synthetic, load_mnist_split, LabeledDataset, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{Preset, RanArchitecture};
use crate::report::{fnv1a, pareto_front, render_svg, to_csv, Method, ReportRow};
use crate::train::{train_ran, EpochRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    Mnist,
    Synthetic,
}

/// PCA target dimension for DNN(resized).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PcaDim {
    Fraction(f64),
    Fixed(usize),
}

impl PcaDim {
    pub fn resolve(self, dim: usize) -> usize {
        match self {
            PcaDim::Fraction(f) => ((dim as f64 * f).round() as usize).clamp(1, dim),
            PcaDim::Fixed(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub methods: BTreeSet<Method>,
    pub lambdas: Vec<f64>,
    pub noise_factors: Vec<f64>,
    pub seeds: Vec<u64>,
    pub dataset: Dataset,
    /// Training samples; `None` uses the whole split.
    pub subset: Option<usize>,
    /// Test samples; `None` uses the whole split.
    pub test_subset: Option<usize>,
    pub epochs: usize,
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub attack_epochs: usize,
    pub pca_dim: PcaDim,
}

pub const DEFAULT_LAMBDAS: [f64; 7] = [0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9];

/// λ = 0.01, 0.02, ..., 0.90.
pub fn full_lambda_grid() -> Vec<f64> {
    (1..=90).map(|i| i as f64 / 100.0).collect()
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.into_iter().collect(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
            noise_factors: NoiseFactorGrid::default().factors,
            seeds: vec![42],
            dataset: Dataset::Mnist,
            subset: Some(10_000),
            test_subset: None,
            epochs: 5,
            k: 3,
            batch_size: 64,
            lr: 1e-3,
            attack_epochs: 10,
            pca_dim: PcaDim::Fraction(0.25),
        }
    }
}

fn list<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<Vec<T>> {
    let items: Result<Vec<T>> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::config(format!("line {line}: bad value `{s}` for `{key}`"))))
        .collect();
    let items = items?;
    if items.is_empty() {
        return Err(Error::config(format!("line {line}: `{key}` is empty")));
    }
    Ok(items)
}

fn one<T: std::str::FromStr>(value: &str, key: &str, line: usize) -> Result<T> {
    value.trim().parse().map_err(|_| Error::config(format!("line {line}: bad value `{value}` for `{key}`")))
}

/// `0` or `full` means the whole split.
fn size(value: &str, key: &str, line: usize) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("full") {
        return Ok(None);
    }
    let n: usize = one(value, key, line)?;
    Ok((n > 0).then_some(n))
}

impl SweepConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SweepConfig::default();
        let mut seen = BTreeSet::new();
        let mut full_grid = false;
        let mut lambdas_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) =
                content.split_once('=').ok_or_else(|| Error::config(format!("line {line}: expected `key = value`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {line}: duplicate key `{key}`")));
            }
            match key {
                "methods" => cfg.methods = list::<Method>(value, key, line)?.into_iter().collect(),
                "lambdas" => {
                    cfg.lambdas = list(value, key, line)?;
                    lambdas_set = true;
                }
                "full_grid" => full_grid = one(value, key, line)?,
                "noise_factors" => cfg.noise_factors = list(value, key, line)?,
                "seeds" => cfg.seeds = list(value, key, line)?,
                "dataset" => {
                    cfg.dataset = match value.to_ascii_lowercase().as_str() {
                        "mnist" => Dataset::Mnist,
                        "synthetic" => Dataset::Synthetic,
                        _ => return Err(Error::config(format!("line {line}: unknown dataset `{value}`"))),
                    }
                }
                "subset" => cfg.subset = size(value, key, line)?,
                "test_subset" => cfg.test_subset = size(value, key, line)?,
                "epochs" => cfg.epochs = one(value, key, line)?,
                "k" => cfg.k = one(value, key, line)?,
                "batch" => cfg.batch_size = one(value, key, line)?,
                "lr" => cfg.lr = one(value, key, line)?,
                "attack_epochs" => cfg.attack_epochs = one(value, key, line)?,
                "pca_dim" => {
                    cfg.pca_dim = match value.strip_suffix('%') {
                        Some(p) => PcaDim::Fraction(one::<f64>(p, key, line)? / 100.0),
                        None => PcaDim::Fixed(one(value, key, line)?),
                    }
                }
                _ => return Err(Error::config(format!("line {line}: unknown key `{key}`"))),
            }
        }
        if full_grid {
            if lambdas_set {
                return Err(Error::config("`full_grid` and `lambdas` are mutually exclusive"));
            }
            cfg.lambdas = full_lambda_grid();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("no methods selected"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("no seeds"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::config(format!("lambda {l} outside [0, 1]")));
        }
        NoiseFactorGrid::new(self.noise_factors.clone())?;
        if let PcaDim::Fraction(f) = self.pca_dim {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!("pca_dim fraction {f} outside (0, 1]")));
            }
        }
        if self.attack_epochs == 0 {
            return Err(Error::config("attack_epochs must be >= 1"));
        }
        self.train_config(0.5, 0).validate()
    }

    pub fn train_config(&self, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            k: self.k,
            batch_size: self.batch_size,
            lambda,
            lr_disc: self.lr,
            lr_gen: self.lr,
            lr_adv: self.lr,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn attack_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            epochs: self.attack_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            ..AttackConfig::default()
        }
    }

    /// Canonical text of every setting that affects a row's numbers.
    fn canonical(&self, method: Method, setting: Option<f64>, seed: u64) -> String {
        format!(
            "method={method};setting={setting:?};seed={seed};dataset={:?};subset={:?};test_subset={:?};epochs={};k={};batch={};lr={};attack_epochs={};pca_dim={:?}",
            self.dataset,
            self.subset,
            self.test_subset,
            self.epochs,
            self.k,
            self.batch_size,
            self.lr,
            self.attack_epochs,
            self.pca_dim
        )
    }

    pub fn config_hash(&self, method: Method, setting: Option<f64>, seed: u64) -> u64 {
        fnv1a(self.canonical(method, setting, seed).as_bytes())
    }

    /// Number of rows the sweep will produce.
    pub fn expected_rows(&self) -> usize {
        let per_seed: usize = self
            .methods
            .iter()
            .map(|m| match m {
                Method::Ran => self.lambdas.len(),
                Method::Dnn => 1,
                Method::Noisy | Method::DnnResized => self.noise_factors.len(),
            })
            .sum();
        per_seed * self.seeds.len()
    }
}

/// Train and test splits for a sweep.
pub fn load_datasets(cfg: &SweepConfig, data_root: &Path, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    match cfg.dataset {
        Dataset::Mnist => {
            let train = load_mnist_split(data_root, Split::Train)?;
            let test = load_mnist_split(data_root, Split::Test)?;
            let train = cfg.subset.map_or(train.clone(), |n| train.take(n));
            let test = cfg.test_subset.map_or(test.clone(), |n| test.take(n));
            Ok((train, test))
        }
        Dataset::Synthetic => Ok((
            generate_synthetic(&SyntheticSpec::train(cfg.subset.unwrap_or(4000), seed))?,
            generate_synthetic(&SyntheticSpec::test(cfg.test_subset.unwrap_or(2000), seed))?,
        )),
    }
}

/// Progress notifications from a running sweep.
#[derive(Debug)]
pub enum SweepEvent<'a> {
    JobStarted { method: Method, setting: Option<f64>, seed: u64 },
    Epoch(&'a EpochRecord),
    Row(&'a ReportRow),
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    /// In (method, setting, seed) order.
    pub rows: Vec<ReportRow>,
    pub front: Vec<ReportRow>,
    /// Noisy-baseline detail, including pre-clamp information loss.
    pub noisy: Vec<(u64, NoisyPoint)>,
}

/// One scored point.
#[derive(Clone, Copy)]
struct Score {
    accuracy: f64,
    mse: f64,
    ln_mse: f64,
    seconds: f64,
}

fn emit(
    cfg: &SweepConfig,
    out: &mut SweepOutcome,
    (method, setting, seed): (Method, Option<f64>, u64),
    score: Score,
    progress: &mut dyn FnMut(SweepEvent<'_>),
) {
    let row = ReportRow {
        method,
        setting,
        seed,
        accuracy: score.accuracy,
        recon_mse: score.mse,
        ln_mse: score.ln_mse,
        runtime_s: score.seconds,
        config_hash: cfg.config_hash(method, setting, seed),
    };
    progress(SweepEvent::Row(&row));
    out.rows.push(row);
}

/// Run every job of `cfg` on the given splits. Rows come back sorted by
/// (method, setting, seed) whatever order the jobs ran in.
pub fn execute_sweep(
    cfg: &SweepConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    progress: &mut dyn FnMut(SweepEvent<'_>),
) -> Result<SweepOutcome> {
    cfg.validate()?;
    let arch = RanArchitecture::new(train.sample_shape(), train.num_classes, Preset::MnistSmall)?;
    let grid = NoiseFactorGrid::new(cfg.noise_factors.clone())?;
    let mut out = SweepOutcome::default();
    for &seed in &cfg.seeds {
        let attack = cfg.attack_config(seed);
        if cfg.methods.contains(&Method::Ran) {
            for &lambda in &cfg.lambdas {
                progress(SweepEvent::JobStarted { method: Method::Ran, setting: Some(lambda), seed });
                let start = Instant::now();
                let tc = cfg.train_config(lambda, seed);
                let (store, _) = train_ran::<f32>(train, &arch, &tc, &mut |e| progress(SweepEvent::Epoch(e)))?;
                let (acc, privacy) = assess_encoder(&arch, &store, train, test, &attack)?;
                let score = Score {
                    accuracy: acc,
                    mse: privacy.mse,
                    ln_mse: privacy.ln_mse,
                    seconds: start.elapsed().as_secs_f64(),
                };
                emit(cfg, &mut out, (Method::Ran, Some(lambda), seed), score, progress);
            }
        }

        let needs_dnn = cfg.methods.contains(&Method::Dnn) || cfg.methods.contains(&Method::DnnResized);
        let tc = cfg.train_config(1.0, seed);
        if needs_dnn {
            progress(SweepEvent::JobStarted { method: Method::Dnn, setting: None, seed });
            let dnn = run_dnn_baseline(train, test, &arch, &tc, &attack, &mut |e| progress(SweepEvent::Epoch(e)))?;
            if cfg.methods.contains(&Method::Dnn) {
                let score = Score {
                    accuracy: dnn.accuracy,
                    mse: dnn.privacy.mse,
                    ln_mse: dnn.privacy.ln_mse,
                    seconds: dnn.seconds,
                };
                emit(cfg, &mut out, (Method::Dnn, None, seed), score, progress);
            }
            if cfg.methods.contains(&Method::DnnResized) {
                let dim: usize = arch.encoder.output_shape().iter().product();
                let d = cfg.pca_dim.resolve(dim);
                progress(SweepEvent::JobStarted { method: Method::DnnResized, setting: None, seed });
                let mut points = Vec::new();
                run_dnn_resized_baseline(train, test, &arch, &dnn.store, &grid, Some(d), &tc, &attack, &mut |p| {
                    points.push(p.clone())
                })?;
                for p in points {
                    let score = Score {
                        accuracy: p.accuracy,
                        mse: p.privacy.mse,
                        ln_mse: p.privacy.ln_mse,
                        seconds: p.seconds,
                    };
                    emit(cfg, &mut out, (Method::DnnResized, Some(p.factor), seed), score, progress);
                }
            }
        }

        if cfg.methods.contains(&Method::Noisy) {
            progress(SweepEvent::JobStarted { method: Method::Noisy, setting: None, seed });
            let points = run_noisy_baseline(train, test, &arch, &grid, &tc, &mut |_| {})?;
            for p in points {
                let ln_mse = p.info_loss.max(crate::attack::MSE_FLOOR).ln();
                let score = Score { accuracy: p.accuracy, mse: p.info_loss, ln_mse, seconds: p.seconds };
                emit(cfg, &mut out, (Method::Noisy, Some(p.factor), seed), score, progress);
                out.noisy.push((seed, p));
            }
        }
    }
    out.rows.sort_by_key(ReportRow::key);
    out.front = pareto_front(&out.rows);
    Ok(out)
}

/// Paths of the files written by [`write_outputs`].
#[derive(Clone, Debug)]
pub struct SweepFiles {
    pub report: PathBuf,
    pub pareto: PathBuf,
    pub svg: PathBuf,
    pub noisy: PathBuf,
}

fn noisy_csv(points: &[(u64, NoisyPoint)]) -> String {
    let mut s = String::from("seed,factor,scale,accuracy,info_loss,info_loss_preclamp,laplace_variance\n");
    for (seed, p) in points {
        let _ = writeln!(
            s,
            "{seed},{},{},{},{},{},{}",
            p.factor,
            p.scale,
            p.accuracy,
            p.info_loss,
            p.info_loss_raw,
            2.0 * p.scale * p.scale
        );
    }
    s
}

pub fn write_outputs(outcome: &SweepOutcome, dir: &Path) -> Result<SweepFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = SweepFiles {
        report: dir.join("report.csv"),
        pareto: dir.join("pareto.csv"),
        svg: dir.join("tradeoff.svg"),
        noisy: dir.join("noisy_detail.csv"),
    };
    let write = |p: &Path, s: String| fs::write(p, s).map_err(|e| Error::io(p, e));
    write(&files.report, to_csv(&outcome.rows))?;
    write(&files.pareto, to_csv(&outcome.front))?;
    write(&files.svg, render_svg(&outcome.rows))?;
    if !outcome.noisy.is_empty() {
        write(&files.noisy, noisy_csv(&outcome.noisy))?;
    }
    Ok(files)
}

/// Load data, run the sweep and write its outputs to `out_dir`. Synthetic
/// data is regenerated per seed; MNIST is loaded once.
pub fn run_sweep(
    cfg: &SweepConfig,
    data_root: &Path,
    out_dir: &Path,
    progress: &mut dyn FnMut(SweepEvent<'_>),
) -> Result<(SweepOutcome, SweepFiles)> {
    cfg.validate()?;
    let outcome = match cfg.dataset {
        Dataset::Mnist => {
            let (train, test) = load_datasets(cfg, data_root, 0)?;
            execute_sweep(cfg, &train, &test, progress)?
        }
        Dataset::Synthetic => {
            let mut merged = SweepOutcome::default();
            for &seed in &cfg.seeds {
                let (train, test) = load_datasets(cfg, data_root, seed)?;
                let one = SweepConfig { seeds: vec![seed], ..cfg.clone() };
                let part = execute_sweep(&one, &train, &test, progress)?;
                merged.rows.extend(part.rows);
                merged.noisy.extend(part.noisy);
            }
            merged.rows.sort_by_key(ReportRow::key);
            merged.front = pareto_front(&merged.rows);
            merged
        }
    };
    let files = write_outputs(&outcome, out_dir)?;
    Ok((outcome, files))
}

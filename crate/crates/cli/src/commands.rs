use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ran_core::attack::{privacy_score, train_attacker, FrozenEncoder};
use ran_core::data::LabeledDataset;
use ran_core::gradcheck::{run_suite, SuiteConfig};
use ran_core::nn::{ParamStore, Preset, RanArchitecture};
use ran_core::probe::{run_probe_experiment, ProbeConfig, ProbeExperiment};
use ran_core::report::{fnv1a, to_csv, Method, ReportRow};
use ran_core::sweep::{execute_sweep, load_datasets, run_sweep, write_outputs, Dataset, SweepConfig, SweepEvent};
use ran_core::train::{evaluate_accuracy, train_ran, LoopMode, Objective, TrainConfig, TrainTrace};
use ran_core::weights::{load_weights, save_weights};

#[derive(Debug, Parser)]
#[command(name = "ran", version, about = "Train and evaluate privacy-preserving feature encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one encoder/decoder/classifier triple and save its weights
    Train(TrainArgs),
    /// Train a reconstruction attacker against a saved encoder
    Attack(AttackArgs),
    /// Run one baseline method over its noise-factor grid
    Baseline(BaselineArgs),
    /// Run a full sweep from a config file
    Sweep(SweepArgs),
    /// Nuisance-probe experiment on the synthetic dataset
    Probe(ProbeArgs),
    /// Finite-difference gradient checks of the autodiff engine
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
    pub dataset: DatasetArg,

    /// Dataset root; MNIST IDX files live here or in its `mnist/` child
    #[arg(long, env = "RAN_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,

    /// Training samples (0 = whole split)
    #[arg(long, default_value_t = 10_000)]
    pub subset: usize,

    /// Test samples (0 = whole split)
    #[arg(long, default_value_t = 0)]
    pub test_subset: usize,
}

impl DataArgs {
    fn sweep_base(&self) -> SweepConfig {
        SweepConfig {
            dataset: match self.dataset {
                DatasetArg::Mnist => Dataset::Mnist,
                DatasetArg::Synthetic => Dataset::Synthetic,
            },
            subset: (self.subset > 0).then_some(self.subset),
            test_subset: (self.test_subset > 0).then_some(self.test_subset),
            ..SweepConfig::default()
        }
    }

    fn load(&self, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
        Ok(load_datasets(&self.sweep_base(), &self.data_dir, seed)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LoopArg {
    PerBatch,
    StrictLiteral,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Weight of the classification term in the adversarial objective
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,

    /// Discriminative/generative steps per adversarial step
    #[arg(long, default_value_t = 3)]
    pub k: usize,

    #[arg(long, default_value_t = 5)]
    pub epochs: usize,

    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Global gradient-norm clip (0 disables)
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,

    /// Summed instead of averaged losses
    #[arg(long)]
    pub summed_loss: bool,

    #[arg(long = "loop", value_enum, default_value_t = LoopArg::PerBatch)]
    pub loop_mode: LoopArg,
}

impl TrainFlags {
    fn config(&self, objective: Objective) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            k: self.k,
            batch_size: self.batch,
            lambda: self.lambda,
            lr_disc: self.lr,
            lr_gen: self.lr,
            lr_adv: self.lr,
            seed: self.seed,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            summed_loss: self.summed_loss,
            loop_mode: match self.loop_mode {
                LoopArg::PerBatch => LoopMode::PerBatch,
                LoopArg::StrictLiteral => LoopMode::StrictLiteral,
            },
            objective,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub train: TrainFlags,

    /// Train encoder and classifier only (the plain DNN)
    #[arg(long)]
    pub dnn: bool,

    /// Output directory for `weights.ranw` and `trace.csv`
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Weights file written by `ran train`
    #[arg(long)]
    pub weights: PathBuf,

    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, default_value_t = 42)]
    pub seed: u64,

    /// Attacker training epochs
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,

    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,

    /// Method label of the report row
    #[arg(long, default_value = "RAN")]
    pub method: String,

    /// Setting recorded in the report row (λ or noise factor)
    #[arg(long)]
    pub setting: Option<f64>,

    /// Output directory for `attacker.ranw` and `attack.csv`
    #[arg(long, default_value = "runs/attack")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    Dnn,
    Noisy,
    DnnResized,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub method: BaselineKind,

    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub train: TrainFlags,

    /// Noise factors in (0, 1)
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
    pub factors: Vec<f64>,

    #[arg(long, default_value_t = 10)]
    pub attack_epochs: usize,

    #[arg(long, default_value = "runs/baseline")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Config file of `key = value` lines; defaults apply when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, env = "RAN_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,

    /// Override the config's seed list
    #[arg(long, value_delimiter = ',')]
    pub seed: Option<Vec<u64>>,

    /// Override the config's training subset (0 = whole split)
    #[arg(long)]
    pub subset: Option<usize>,

    #[arg(long, default_value = "runs/sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
    pub seed: Vec<u64>,

    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,

    #[arg(long, default_value_t = 3)]
    pub k: usize,

    #[arg(long, default_value_t = 5)]
    pub epochs: usize,

    #[arg(long, default_value_t = 64)]
    pub batch: usize,

    #[arg(long, default_value_t = 4000)]
    pub train_samples: usize,

    #[arg(long, default_value_t = 2000)]
    pub test_samples: usize,

    /// Output directory for `probe.csv`
    #[arg(long, default_value = "runs/probe")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random instances per case
    #[arg(long, default_value_t = 50)]
    pub instances: usize,

    #[arg(long, default_value_t = 2024)]
    pub seed: u64,

    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a),
        Command::Attack(a) => attack(&a),
        Command::Baseline(a) => baseline(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Probe(a) => probe(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn architecture(data: &LabeledDataset) -> Result<RanArchitecture> {
    Ok(RanArchitecture::new(data.sample_shape(), data.num_classes, Preset::MnistSmall)?)
}

/// Per-epoch losses; wall-clock time is left out so reruns compare equal.
fn trace_csv(trace: &TrainTrace) -> String {
    let mut s = String::from("epoch,o_d,o_g,o_a,train_accuracy\n");
    for e in &trace.epochs {
        let og = e.o_g.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(s, "{},{},{og},{},{}", e.epoch, e.o_d, e.o_a, e.train_accuracy);
    }
    s
}

fn train(a: &TrainArgs) -> Result<()> {
    let objective = if a.dnn { Objective::ClassifierOnly } else { Objective::Ran };
    let cfg = a.train.config(objective);
    cfg.validate()?;
    let (train, test) = a.data.load(cfg.seed)?;
    let arch = architecture(&train)?;
    eprintln!("training on {} samples, testing on {}", train.len(), test.len());
    let start = Instant::now();
    let (store, trace) = train_ran::<f32>(&train, &arch, &cfg, &mut |e| eprintln!("{e}"))?;
    let acc = evaluate_accuracy(&arch, &store, &test)?;
    create_dir(&a.out)?;
    save_weights(&store, a.out.join("weights.ranw"))?;
    write(&a.out.join("trace.csv"), &trace_csv(&trace))?;
    println!("test_accuracy {acc:.4}");
    println!("seconds {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}

fn attack(a: &AttackArgs) -> Result<()> {
    let method: Method = a.method.parse()?;
    let (train, test) = a.data.load(a.seed)?;
    let arch = architecture(&train)?;
    let store: ParamStore<f32> =
        load_weights(&a.weights).with_context(|| format!("loading {}", a.weights.display()))?;
    let start = Instant::now();
    let frozen = FrozenEncoder::from_trained(&arch.encoder, &store)?;
    let cfg = ran_core::attack::AttackConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        seed: a.seed,
        ..Default::default()
    };
    let attacker = train_attacker(&frozen, &train, &cfg)?;
    let privacy = privacy_score(&attacker, &frozen, &test)?;
    let accuracy = evaluate_accuracy(&arch, &store, &test)?;
    let key = format!(
        "attack;weights={};seed={};epochs={};batch={};lr={}",
        a.weights.display(),
        a.seed,
        a.epochs,
        a.batch,
        a.lr
    );
    let row = ReportRow {
        method,
        setting: a.setting,
        seed: a.seed,
        accuracy,
        recon_mse: privacy.mse,
        ln_mse: privacy.ln_mse,
        runtime_s: start.elapsed().as_secs_f64(),
        config_hash: fnv1a(key.as_bytes()),
    };
    create_dir(&a.out)?;
    save_weights(&attacker.params, a.out.join("attacker.ranw"))?;
    write(&a.out.join("attack.csv"), &to_csv(std::slice::from_ref(&row)))?;
    println!("test_accuracy {accuracy:.4}");
    println!(
        "attacker_mse {:.6} ln {:.4} p10 {:.6} p50 {:.6} p90 {:.6}",
        privacy.mse, privacy.ln_mse, privacy.p10, privacy.p50, privacy.p90
    );
    Ok(())
}

fn baseline(a: &BaselineArgs) -> Result<()> {
    let method = match a.method {
        BaselineKind::Dnn => Method::Dnn,
        BaselineKind::Noisy => Method::Noisy,
        BaselineKind::DnnResized => Method::DnnResized,
    };
    let cfg = SweepConfig {
        methods: BTreeSet::from([method]),
        lambdas: Vec::new(),
        noise_factors: a.factors.clone(),
        seeds: vec![a.train.seed],
        epochs: a.train.epochs,
        k: a.train.k,
        batch_size: a.train.batch,
        lr: a.train.lr,
        attack_epochs: a.attack_epochs,
        ..a.data.sweep_base()
    };
    cfg.validate()?;
    let (train, test) = a.data.load(a.train.seed)?;
    let outcome = execute_sweep(&cfg, &train, &test, &mut log_event)?;
    let files = write_outputs(&outcome, &a.out)?;
    print!("{}", to_csv(&outcome.rows));
    eprintln!("wrote {}", files.report.display());
    Ok(())
}

fn log_event(ev: SweepEvent<'_>) {
    match ev {
        SweepEvent::JobStarted { method, setting, seed } => match setting {
            Some(s) => eprintln!("== {method} {s} seed {seed}"),
            None => eprintln!("== {method} seed {seed}"),
        },
        SweepEvent::Epoch(e) => eprintln!("  {e}"),
        SweepEvent::Row(r) => eprintln!("  row: {}", r.to_csv()),
    }
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SweepConfig::load(p)?,
        None => SweepConfig::default(),
    };
    if let Some(seeds) = &a.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(n) = a.subset {
        cfg.subset = (n > 0).then_some(n);
    }
    cfg.validate()?;
    eprintln!("sweep: {} rows expected", cfg.expected_rows());
    let (outcome, files) = run_sweep(&cfg, &a.data_dir, &a.out, &mut log_event)?;
    eprintln!(
        "wrote {} ({} rows), {} ({} on the front), {}",
        files.report.display(),
        outcome.rows.len(),
        files.pareto.display(),
        outcome.front.len(),
        files.svg.display()
    );
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn probe(a: &ProbeArgs) -> Result<()> {
    let exp = ProbeExperiment {
        train_samples: a.train_samples,
        test_samples: a.test_samples,
        lambda: a.lambda,
        train: TrainConfig { epochs: a.epochs, k: a.k, batch_size: a.batch, ..TrainConfig::default() },
        probe: ProbeConfig::default(),
    };
    let mut csv = String::from("seed,ran_accuracy,dnn_accuracy,ran_probe,dnn_probe,raw_probe\n");
    let mut outcomes = Vec::new();
    for &seed in &a.seed {
        eprintln!("== probe seed {seed}");
        let o = run_probe_experiment(&exp, seed)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            o.seed, o.ran_accuracy, o.dnn_accuracy, o.ran_probe, o.dnn_probe, o.raw_probe
        );
        outcomes.push(o);
    }
    create_dir(&a.out)?;
    write(&a.out.join("probe.csv"), &csv)?;
    print!("{csv}");
    let med = |f: fn(&ran_core::probe::ProbeOutcome) -> f64| median(outcomes.iter().map(f).collect());
    println!(
        "median: accuracy RAN {:.4} DNN {:.4}; probe RAN {:.4} DNN {:.4}",
        med(|o| o.ran_accuracy),
        med(|o| o.dnn_accuracy),
        med(|o| o.ran_probe),
        med(|o| o.dnn_probe)
    );
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = SuiteConfig { instances: a.instances, seed: a.seed, ..SuiteConfig::default() };
    let start = Instant::now();
    let reports = run_suite(&cfg, &mut |r| {
        let status = if r.passed(a.tolerance) { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<28} worst {:.3e} over {} instances ({} redrawn)",
            r.name, r.worst, r.instances, r.redrawn
        );
    })?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed(a.tolerance)).map(|r| r.name.as_str()).collect();
    println!("{} cases in {:.1}s", reports.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        bail!("gradient check failed for {}", failed.join(", "));
    }
    Ok(())
}

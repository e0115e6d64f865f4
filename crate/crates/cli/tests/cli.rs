use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ran(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ran")).args(args).env_remove("RAN_DATA_DIR").output().expect("spawn ran")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const DATA: [&str; 6] = ["--dataset", "synthetic", "--subset", "160", "--test-subset", "80"];
const SCHEDULE: [&str; 4] = ["--epochs", "1", "--batch", "32"];

fn train_into(dir: &Path) -> Output {
    let mut args = vec!["train"];
    args.extend(DATA);
    args.extend(SCHEDULE);
    args.extend(["--seed", "5", "--lambda", "0.5", "--k", "2", "--out", dir.to_str().unwrap()]);
    ran(&args)
}

#[test]
fn gradcheck_reports_every_case() {
    let out = ran(&["gradcheck", "--instances", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("ok")).count() >= 20);
    assert!(!text.contains("FAIL"));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "epochs = 1\ncolour = red\n").unwrap();
    let out = ran(&["sweep", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn invalid_flag_values_exit_2() {
    assert_eq!(code(&ran(&["train", "--batch", "0", "--dataset", "synthetic"])), 2);
    assert_eq!(code(&ran(&["train", "--lambda", "1.5", "--dataset", "synthetic"])), 2);
    assert_eq!(code(&ran(&["train", "--epochs", "many"])), 2);
}

#[test]
fn missing_dataset_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = ran(&["train", "--data-dir", dir.path().to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-images-idx3-ubyte"));
}

#[test]
fn data_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ran"))
        .args(["train", "--epochs", "1"])
        .env("RAN_DATA_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(dir.path().to_str().unwrap()));
}

#[test]
fn corrupt_weights_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w.ranw");
    fs::write(&w, b"RANW\x01\x00\x00\x00garbage").unwrap();
    let mut args = vec!["attack", "--weights", w.to_str().unwrap()];
    args.extend(DATA);
    assert_eq!(code(&ran(&args)), 3);
}

#[test]
fn train_is_deterministic_and_attackable() {
    let root = tempfile::tempdir().unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    for dir in [&a, &b] {
        let out = train_into(dir);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("test_accuracy"));
    }
    let wa = fs::read(a.join("weights.ranw")).unwrap();
    assert_eq!(wa, fs::read(b.join("weights.ranw")).unwrap());
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());

    let attack_dir = root.path().join("attack");
    let weights = a.join("weights.ranw");
    let mut args = vec!["attack", "--weights", weights.to_str().unwrap(), "--epochs", "1", "--setting", "0.5"];
    args.extend(DATA);
    args.extend(["--out", attack_dir.to_str().unwrap()]);
    let out = ran(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(attack_dir.join("attack.csv")).unwrap();
    let rows = ran_core::report::parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].setting, Some(0.5));
    assert!(rows[0].recon_mse > 0.0 && (0.0..=1.0).contains(&rows[0].accuracy));
    assert!(attack_dir.join("attacker.ranw").exists());
}

#[test]
fn noisy_baseline_writes_one_row_per_factor() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["baseline", "--method", "noisy", "--factors", "0.2,0.8"];
    args.extend(DATA);
    args.extend(SCHEDULE);
    args.extend(["--out", dir.path().to_str().unwrap()]);
    let out = ran(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = ran_core::report::parse_csv(&fs::read_to_string(dir.path().join("report.csv")).unwrap()).unwrap();
    let settings: Vec<_> = rows.iter().map(|r| r.setting).collect();
    assert_eq!(settings, [Some(0.2), Some(0.8)]);
    assert!(rows[0].recon_mse < rows[1].recon_mse);
    assert!(dir.path().join("noisy_detail.csv").exists());
}

#[test]
fn sweep_reruns_reproduce_rows() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.cfg");
    fs::write(
        &cfg,
        "# tiny synthetic sweep\nmethods = ran, dnn\nlambdas = 0.3\nseeds = 1, 2\ndataset = synthetic\n\
         subset = 128\ntest_subset = 64\nepochs = 1\nk = 1\nbatch = 32\nattack_epochs = 1\n",
    )
    .unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = root.path().join(name);
        let out = ran(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("tradeoff.svg").exists() && out_dir.join("pareto.csv").exists());
        csvs.push(ran_core::report::parse_csv(&fs::read_to_string(out_dir.join("report.csv")).unwrap()).unwrap());
    }
    assert_eq!(csvs[0].len(), 4);
    assert!(csvs[0].iter().zip(&csvs[1]).all(|(x, y)| x.same_numbers(y)));
}

#[test]
fn probe_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ran(&[
        "probe",
        "--seed",
        "3",
        "--epochs",
        "1",
        "--k",
        "1",
        "--train-samples",
        "128",
        "--test-samples",
        "64",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(stdout(&out).contains("median"));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use censidx::io::{read_records, write_dataset, write_records, ReportRecord, SEED_ENV};
use censidx::sim::{calibrate_censoring_rate, generate_dataset, SimDesign};
use tempfile::TempDir;

fn censidx() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_censidx"));
    cmd.env_remove(SEED_ENV);
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn dataset(dir: &Path, p: f64) -> PathBuf {
    let design = SimDesign {
        n: 80,
        ..Default::default()
    };
    let lambda = if p > 0.0 {
        calibrate_censoring_rate(&design, p).unwrap()
    } else {
        0.0
    };
    let sample = generate_dataset(&design, lambda, 0).unwrap();
    let path = dir.join(format!("data_{p}.csv"));
    write_dataset(&path, &sample).unwrap();
    path
}

#[test]
fn empty_file_is_an_input_error_at_line_one() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("empty.csv");
    fs::write(&data, "").unwrap();
    let out = run(censidx()
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn malformed_rows_are_input_errors() {
    let dir = TempDir::new().unwrap();
    for (name, text) in [
        ("flag.csv", "z,delta,x1\n1.0,2,0.5\n"),
        ("missing.csv", "z,delta,x1\n1.0,1,\n"),
        ("header.csv", "time,delta,x1\n1.0,1,0.5\n"),
    ] {
        let data = dir.path().join(name);
        fs::write(&data, text).unwrap();
        let out = run(censidx()
            .arg("fit")
            .arg("--data")
            .arg(&data)
            .arg("--out-dir")
            .arg(dir.path()));
        assert_eq!(code(&out), 2, "{name}");
    }
    let out = run(censidx()
        .arg("fit")
        .arg("--data")
        .arg(dir.path().join("absent.csv"))
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(code(&out), 2);
}

#[test]
fn invalid_censoring_target_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = run(censidx()
        .args(["simulate", "--p", "0.95", "--reps", "1", "--out-dir"])
        .arg(dir.path()));
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[fit]\nbandwith = 1.0\n").unwrap();
    let data = dataset(dir.path(), 0.25);
    let out = run(censidx()
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&cfg));
    assert_eq!(code(&out), 2);
}

#[test]
fn uncensored_file_fits_and_is_flagged() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 0.0);
    let out = run(censidx()
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("fit_summary.txt")).unwrap();
    assert!(summary.contains("no censoring: KM path degenerate to empirical"));
}

#[test]
fn reports_round_trip_and_repeat_bit_for_bit() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 0.3);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = run(censidx()
            .arg("fit")
            .arg("--data")
            .arg(&data)
            .arg("--seed")
            .arg("9")
            .arg("--out-dir")
            .arg(out_dir));
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let first = fs::read(a.join("fit.jsonl")).unwrap();
    assert_eq!(first, fs::read(b.join("fit.jsonl")).unwrap());
    assert_eq!(
        fs::read(a.join("fit_summary.txt")).unwrap(),
        fs::read(b.join("fit_summary.txt")).unwrap()
    );

    let records = read_records(&a.join("fit.jsonl")).unwrap();
    assert!(matches!(records.first(), Some(ReportRecord::Header { .. })));
    assert!(records.iter().any(|r| matches!(r, ReportRecord::Fit(_))));
    let copy = dir.path().join("copy.jsonl");
    write_records(&copy, &records).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), first);
}

#[test]
fn seed_precedence_is_file_then_environment_then_flag() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 0.3);
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[fit]\nseed = 1\n").unwrap();
    let seed_of = |out_dir: &Path| -> u64 {
        let records = read_records(&out_dir.join("fit.jsonl")).unwrap();
        records
            .iter()
            .find_map(|r| match r {
                ReportRecord::Config { config } => Some(config.fit.seed),
                _ => None,
            })
            .unwrap()
    };
    let env_dir = dir.path().join("env");
    let out = run(censidx()
        .env(SEED_ENV, "5")
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(&env_dir));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(seed_of(&env_dir), 5);

    let flag_dir = dir.path().join("flag");
    let out = run(censidx()
        .env(SEED_ENV, "5")
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--seed")
        .arg("7")
        .arg("--out-dir")
        .arg(&flag_dir));
    assert_eq!(code(&out), 0);
    assert_eq!(seed_of(&flag_dir), 7);
}

#[test]
fn diagnose_with_single_truncation_point_gives_one_row() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 0.3);
    let sample = censidx::io::read_dataset(&data).unwrap().sample;
    let tau0 = sample.default_tau0().unwrap();
    let out = run(censidx()
        .arg("diagnose")
        .arg("--data")
        .arg(&data)
        .arg(format!("--tau-grid={tau0:?}"))
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(dir.path().join("diagnose_summary.txt")).unwrap();
    let table: Vec<&str> = summary
        .lines()
        .take_while(|l| !l.trim().is_empty())
        .collect();
    assert_eq!(table.len(), 2, "{summary}");
    assert!(summary.contains("weight_inf") && summary.contains("weight_tau"));
}

#[test]
fn truncation_below_first_decile_is_insufficient_data() {
    let dir = TempDir::new().unwrap();
    let data = dataset(dir.path(), 0.3);
    let sample = censidx::io::read_dataset(&data).unwrap().sample;
    let low = sample.uncensored_times()[1];
    let out = run(censidx()
        .arg("fit")
        .arg("--data")
        .arg(&data)
        .arg("--tau-grid")
        .arg(format!("{low:?}"))
        .arg("--out-dir")
        .arg(dir.path()));
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient data"));
}

#[test]
fn single_replication_simulation_completes() {
    let dir = TempDir::new().unwrap();
    let start = std::time::Instant::now();
    let out = run(censidx()
        .args([
            "simulate",
            "--n",
            "100",
            "--p",
            "0.25",
            "--reps",
            "1",
            "--out-dir",
        ])
        .arg(dir.path()));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let summary = fs::read_to_string(dir.path().join("simulate_summary.txt")).unwrap();
    assert!(summary.contains("adaptive") && summary.contains("fixed_tau0"));
    assert!(dir.path().join("simulate_timing.txt").exists());
}

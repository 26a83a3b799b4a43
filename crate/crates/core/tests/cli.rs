use std::fs;
use std::process::{Command, Output};

fn otafeel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otafeel")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn selftest_passes_on_a_clean_build() {
    let out = otafeel(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 10);
    assert!(!text.contains("FAIL"));
}

#[test]
fn unconstrained_schedule_keeps_every_device() {
    let out = otafeel(&["schedule", "--set", "eps0=1e9", "--set", "Gamma0=1e9"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.starts_with("policy=mp feasible=true selected=20 "), "{text}");
    assert!(text.contains("constraints_verified=true"));
}

#[test]
fn usage_errors_print_usage_and_exit_one() {
    let out = otafeel(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(otafeel(&["sweep", "--no-such-flag"]).status.code(), Some(1));
}

#[test]
fn help_documents_keys_and_defaults() {
    let out = otafeel(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for needle in ["eps0 = 200", "Gamma0 = ", "rounds = 50", "variable = eps0", "dataset = synthetic"] {
        assert!(text.contains(needle), "{needle}");
    }
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    let csv = dir.path().join("out.csv");
    fs::write(&cfg, "[channel]\nK = 8\n\n[harness]\nvariable = eps0\nvalues = 100, 300\ntrials = 4\npolicies = mp, random\n").unwrap();
    let out = otafeel(&["sweep", "--config", cfg.to_str().unwrap(), "--set", "sensing_blocks=0", "--out", csv.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("100,mp,") && rows[2].starts_with("100,random,"));
    assert!(rows[1..].iter().all(|r| r.split(',').nth(8) == Some("4")));
}

#[test]
fn bad_config_lists_every_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "N = 0\nwobble = 3\n[feel]\nrounds = many\n").unwrap();
    let out = otafeel(&["schedule", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("wobble") && err.contains("line 4"), "{err}");
}

#[test]
fn sweep_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let path = dir.path().join(name);
        let out = otafeel(&["sweep", "--seed", "5", "--trials", "6", "--out", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        fs::read(path).unwrap()
    };
    assert_eq!(run("a.csv"), run("b.csv"));
}

#[test]
fn sense_reports_bound_and_error() {
    let out = otafeel(&["sense", "--trials", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("crb=") && text.contains("empirical_mse=") && text.contains("blocks=20"), "{text}");
}

#[test]
fn train_prints_per_round_metrics() {
    let out = otafeel(&["train", "--set", "rounds=4", "--set", "samples=400"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert_eq!(text.lines().filter(|l| l.starts_with("round=")).count(), 4);
    assert!(text.contains("gap_recursion_holds="));
}

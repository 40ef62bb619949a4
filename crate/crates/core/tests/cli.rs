use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mbr_dpo::harness::ExperimentConfig;

const TINY: &str = include_str!("../../../configs/tiny.toml");

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbr-dpo")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn init_config_round_trips() {
    let text = ok(&["init-config"]);
    assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn stage_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let staged = dir.path().join("staged");
    let out = staged.to_str().unwrap();
    let split_counts = ok(&["gen-data", "-c", &cfg, "-o", out]);
    assert!(split_counts.contains("test: 6 examples"), "{split_counts}");
    for cmd in ["train-base", "sample", "rank", "make-prefs", "dpo-train"] {
        ok(&[cmd, "-c", &cfg, "-o", out]);
    }
    let table = ok(&["evaluate", "-c", &cfg, "-o", out]);
    for row in ["base-beam", "base-mbr@4", "dpo-beam"] {
        assert!(table.contains(row), "{table}");
    }
    assert!(ok(&["report", "-c", &cfg, "-o", out]).contains("dpo-beam"));

    let whole = dir.path().join("whole");
    ok(&["run", "-c", &cfg, "-o", whole.to_str().unwrap()]);
    let report = |root: &Path| fs::read(root.join("eval/report.json")).unwrap();
    assert_eq!(report(&staged), report(&whole));
    for file in ["prefs/triplets.jsonl", "samples/test.ranked.jsonl", "dpo/margins.jsonl"] {
        assert!(staged.join(file).exists(), "{file}");
    }
}

#[test]
fn sweep_and_grid_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let sweep = ok(&["sweep-beta", "-c", &cfg, "-o", out, "--betas", "0.1,0.7"]);
    assert!(sweep.contains("0.1") && sweep.contains("0.7"), "{sweep}");
    ok(&["grid-strategy", "-c", &cfg, "-o", out, "--strategies", "bw,cps2", "--sizes", "4"]);
    let report = ok(&["report", "-c", &cfg, "-o", out]);
    assert!(report.contains("sweep-beta.txt") && report.contains("grid-strategy.txt"), "{report}");
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[dpo]\nbeta = -1.0\n").unwrap();
    let out = cli(&["run", "-c", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    fs::write(&bad, "[model\n").unwrap();
    assert!(!cli(&["gen-data", "-c", bad.to_str().unwrap()]).status.success());

    let cfg = write_config(dir.path());
    let empty = dir.path().join("empty");
    let empty = empty.to_str().unwrap();
    assert!(!cli(&["dpo-train", "-c", &cfg, "-o", empty]).status.success());
    assert!(!cli(&["report", "-c", &cfg, "-o", empty]).status.success());
    assert!(!cli(&["grid-strategy", "-c", &cfg, "-o", empty, "--strategies", "zz"]).status.success());
}

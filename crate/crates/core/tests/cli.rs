use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shearmix::cli_io::{parse_config_text, resolve, write_config};
use shearmix::experiments::EnsembleConfig;

fn shearmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shearmix")).args(args).output().expect("binary runs")
}

const SMALL: &str = "samples = 4\nsteps = 6\ngrid = 16\nburn = 1\nprobes = 64\nkernel_pairs = 64\n";

fn write_small(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.cfg");
    fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path.display().to_string()
}

#[test]
fn no_arguments_is_usage_error() {
    assert_eq!(shearmix(&[]).status.code(), Some(2));
    assert_eq!(shearmix(&["mix", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(shearmix(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_name_the_key() {
    let out = shearmix(&["mix", "--eps", "0.5"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eps"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small(dir.path(), "# fine\nstirring = 3\n");
    let out = shearmix(&["mix", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stirring"));
}

#[test]
fn unwritable_output_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let cfg = write_small(dir.path(), "");
    let out_dir = blocker.join("sub").display().to_string();
    let out = shearmix(&["egorov", "--config", &cfg, "--out", &out_dir]);
    assert_eq!(out.status.code(), Some(4));
    let missing = dir.path().join("missing.cfg").display().to_string();
    assert_eq!(shearmix(&["egorov", "--config", &missing]).status.code(), Some(4));
}

#[test]
fn identity_mix_writes_flat_trace_into_nested_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small(dir.path(), "ensemble = identity\n");
    let out_dir = dir.path().join("a/b/c");
    let out = shearmix(&["mix", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let manifest = fs::read_to_string(out_dir.join("manifest")).unwrap();
    assert!(manifest.contains("seed = 3"));
    assert!(manifest.contains("version = "));

    let trace = fs::read_to_string(out_dir.join("mix_trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("n,mean,stderr,count"));
    let means: Vec<&str> = lines.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(means.len(), 7);
    assert!(means.iter().all(|m| *m == means[0]));

    let report = fs::read_to_string(out_dir.join("mix_report.csv")).unwrap();
    assert!(report.starts_with("key,value\n"));
    assert!(report.contains("mu_hat,0.0000000000000000e0"));
}

#[test]
fn cli_flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small(dir.path(), "seed = 5\n");
    let out_dir = dir.path().join("o");
    let out = shearmix(&["egorov", "--config", &cfg, "--seed", "9", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = fs::read_to_string(out_dir.join("manifest")).unwrap();
    assert!(manifest.contains("seed = 9"));
    assert!(manifest.contains("samples = 4"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small(dir.path(), "");
    let run = |name: &str, workers: &str| {
        let d = dir.path().join(name);
        let out = shearmix(&["mix", "--config", &cfg, "--out", d.to_str().unwrap(), "--workers", workers]);
        assert_eq!(out.status.code(), Some(0));
        (
            fs::read(d.join("mix_trace.csv")).unwrap(),
            fs::read(d.join("mix_report.csv")).unwrap(),
        )
    };
    let a = run("w1", "1");
    assert_eq!(a, run("w1b", "1"));
    assert_eq!(a, run("w3", "3"));
}

#[test]
fn written_config_round_trips() {
    let cfg = EnsembleConfig {
        eps: 0.123456789,
        seed: u64::MAX,
        ..Default::default()
    };
    let text = write_config(&cfg, Path::new("out/x"));
    let (back, out) = resolve(&parse_config_text(&text).unwrap(), &[]).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(write_config(&back, &out), text);
}

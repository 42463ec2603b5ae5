use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use swv::cli::build_model;
use swv::dataio::checkpoint::load_checkpoint;
use swv::dataio::config::{RunConfig, CONFIG_KEYS};

fn swv(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_swv")).current_dir(dir).args(args).output().unwrap();
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    (out.status.code().unwrap(), text)
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

const SMALL: &[&str] = &["--set", "runs=4", "--set", "samples_per_weight=5", "--set", "calibrate_weights=500"];

fn pipeline(dir: &Path) {
    for cmd in ["train", "quantize", "sensitivity", "writeverify-calibrate", "simulate", "sweep", "correlate", "report"] {
        let mut args = vec!["--out", "o"];
        args.extend_from_slice(SMALL);
        args.push(cmd);
        let (code, text) = swv(dir, &args);
        // Four runs may trip the statistical sweep checks; only bytes matter here.
        let ok = code == 0 || (cmd == "sweep" && code == 3);
        assert!(ok, "{cmd} exited {code}: {text}");
    }
}

#[test]
fn help_lists_every_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = swv(dir.path(), &["--help"]);
    assert_eq!(code, 0);
    for (key, default, _) in CONFIG_KEYS {
        assert!(text.contains(key) && text.contains(default), "missing {key} = {default}");
    }
}

#[test]
fn every_command_reruns_byte_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let fa = files(&a.path().join("o"));
    let fb = files(&b.path().join("o"));
    let names: Vec<&String> = fa.keys().collect();
    for expected in ["model.uswm", "quantized.csv", "sensitivity.csv", "calibration.json", "trajectories.jsonl", "sweep.csv", "sweep.json", "manifest.json", "correlation.csv", "report.md"] {
        assert!(fa.contains_key(expected), "{expected} missing from {names:?}");
    }
    assert_eq!(fa, fb);
}

#[test]
fn zero_epochs_saves_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = swv(dir.path(), &["--out", "o", "train", "--epochs", "0"]);
    assert_eq!(code, 0, "{text}");
    let (net, meta) = load_checkpoint(&dir.path().join("o/model.uswm")).unwrap();
    assert_eq!(meta.epochs, 0);
    let init = build_model(&RunConfig::default(), &[3], 2).unwrap();
    assert_eq!(net.params(), init.params());
}

#[test]
fn input_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(swv(p, &["--out", "o", "train"]).0, 0);
    let cases: &[&[&str]] = &[
        &["--out", "o", "--set", "strategy=Greedy", "simulate"],
        &["--out", "o", "--set", "weight_subset=0", "correlate"],
        &["--out", "o", "--set", "no_such_key=1", "train"],
        &["--out", "o", "--set", "sigma=-1", "simulate"],
        &["--out", "o", "--config", "missing.toml", "train"],
        &["--out", "empty", "simulate"],
        &["--out", "o", "--set", "dataset=mnist", "--set", "mnist_dir=nowhere", "train"],
    ];
    for args in cases {
        let (code, text) = swv(p, args);
        assert_eq!(code, 2, "{args:?}: {text}");
        assert!(!text.trim().is_empty());
    }
}

#[test]
fn invariant_violation_exits_with_three() {
    // A tolerance no draw can miss turns write-verify into a plain rewrite,
    // so later budgets need not reduce the spread. Seed 52 is a fixed draw
    // where the rewritten states spread significantly wider.
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(swv(p, &["--out", "o", "train"]).0, 0);
    let (code, text) = swv(
        p,
        &[
            "--out", "o", "--seed", "52", "--set", "sigma=0.3", "--set", "tolerance=100", "--set", "runs=20",
            "--set", "strategies=[\"USWIM\"]", "--set", "nwc_grid=[0.0, 0.5, 1.0]", "sweep",
        ],
    );
    assert_eq!(code, 3, "{text}");
    let manifest = std::fs::read_to_string(p.join("o/manifest.json")).unwrap();
    assert!(manifest.contains("exceeds"), "{manifest}");
}

#[test]
fn single_run_sweep_warns() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(swv(p, &["--out", "o", "train"]).0, 0);
    let (code, _) = swv(p, &["--out", "o", "--set", "runs=1", "--set", "strategies=[\"Magnitude\"]", "sweep"]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(p.join("o/sweep.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
    assert!(std::fs::read_to_string(p.join("o/manifest.json")).unwrap().contains("runs = 1"));
}

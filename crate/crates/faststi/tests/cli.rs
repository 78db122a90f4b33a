use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use faststi::io::{self, Checkpoint};
use faststi::pipeline::derived_rng;
use faststi_core::{ModelConfig, ModelParams};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_faststi"));
    c.env_remove("RUST_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, nodes: &str, steps: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("synth_{nodes}_{steps}"));
    let mut args = vec!["generate-synth", "--nodes", nodes, "--steps", steps, "--seed", "7", "--out-dir", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn write_config(dir: &Path, data: &Path, epochs: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "dataset": {
            "values": data.join("values.csv"),
            "distances": data.join("distances.csv"),
        },
        "output_dir": dir.join("run"),
        "seed": 5,
        "train": { "epochs": epochs, "train_stride": 8 },
        "model": {
            "residual_layers": 1, "residual_channels": 8, "attention_heads": 2,
            "time_embedding_dim": 8, "k_steps": 2, "rho": 0.1
        },
        "mask": { "strategy": "point" }
    });
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr has an error record");
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not JSON: {line}"))
}

#[test]
fn generate_synth_writes_three_deterministic_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "10", "200", &[]);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["distances.csv", "manifest.json", "values.csv"]);
    let first = fs::read(a.join("values.csv")).unwrap();
    let b = dir.path().join("again");
    ok(&["generate-synth", "--nodes", "10", "--steps", "200", "--seed", "7", "--out-dir", s(&b)]);
    assert_eq!(first, fs::read(b.join("values.csv")).unwrap());
    assert_eq!(fs::read(a.join("distances.csv")).unwrap(), fs::read(b.join("distances.csv")).unwrap());
}

#[test]
fn one_node_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["generate-synth", "--nodes", "1", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_two_with_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("nowhere"), 1);
    let out = run(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["exit_code"], 2);
    assert_eq!(rec["error"], "input");
    assert!(rec["message"].as_str().unwrap().contains("values.csv"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"dataset": {"values": "v", "distances": "d"}, "epochs": 3}"#).unwrap();
    let out = run(&["train", "--config", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "config");
}

#[test]
fn zero_epochs_write_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "4", "200", &[]);
    let cfg = write_config(dir.path(), &data, 3);
    ok(&["train", "--config", s(&cfg), "--epochs", "0"]);
    let run_dir = dir.path().join("run");
    let ckpt = Checkpoint::load(&run_dir.join("checkpoint.bin")).unwrap();
    let model: ModelConfig = serde_json::from_value(serde_json::json!({
        "residual_layers": 1, "residual_channels": 8, "attention_heads": 2,
        "time_embedding_dim": 8, "k_steps": 2, "rho": 0.1
    }))
    .unwrap();
    assert_eq!(ckpt.params, ModelParams::init(model, &mut derived_rng(5, 1, 0)).unwrap());
    assert_eq!(fs::read_to_string(run_dir.join("loss_curve.csv")).unwrap(), "epoch,train_loss,val_loss\n");
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["epochs"], 0);
    assert_eq!(resolved["train"]["seed"], 5);
}

/// Trains one epoch and imputes the held-out point mask.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = synth(&root, "4", "240", &["--holdout", "point"]);
    let cfg = write_config(&root, &data, 1);
    ok(&["train", "--config", s(&cfg)]);
    let ckpt = root.join("run").join("checkpoint.bin");
    Fixture { _dir: dir, root, data, ckpt }
}

fn impute(f: &Fixture, out: &str, extra: &[&str]) -> PathBuf {
    let dir = f.root.join(out);
    let (values, distances) = (f.data.join("masked.csv"), f.data.join("distances.csv"));
    let mut args = vec![
        "impute",
        "--checkpoint",
        s(&f.ckpt),
        "--values",
        s(&values),
        "--distances",
        s(&distances),
        "--output-dir",
        s(&dir),
    ];
    args.extend_from_slice(extra);
    ok(&args);
    dir
}

#[test]
fn impute_passes_observed_entries_through_and_is_deterministic() {
    let f = fixture();
    let steps = ["--method", "fastSTI4", "--steps", "6", "--samples", "1", "--seed", "3"];
    let a = impute(&f, "a", &steps);
    let b = impute(&f, "b", &steps);
    let text_a = fs::read(a.join("imputed.csv")).unwrap();
    assert_eq!(text_a, fs::read(b.join("imputed.csv")).unwrap());

    let input = io::read_values(&f.data.join("masked.csv"), Some(0.0)).unwrap();
    let output = io::read_values(&a.join("imputed.csv"), None).unwrap();
    assert_eq!(output.timestamps, input.timestamps);
    let mut imputed = 0;
    for l in 0..input.values.len() {
        for n in 0..input.values.nodes() {
            if input.mask.get(l, n) {
                assert_eq!(output.values.get(l, n).to_bits(), input.values.get(l, n).to_bits());
            } else {
                imputed += 1;
                assert!(output.values.get(l, n).is_finite());
            }
        }
    }
    assert!(imputed > 0);
    ok(&["rerun", s(&a.join("config.json"))]);
    assert_eq!(fs::read(a.join("imputed.csv")).unwrap(), text_a);
}

#[test]
fn aligned_schedule_file_and_conflicts() {
    let f = fixture();
    let sched = f.root.join("six_levels.json");
    fs::write(&sched, "[0.0001, 0.001, 0.2, 0.3, 0.5, 0.9]").unwrap();
    let out = impute(&f, "aligned", &["--aligned-schedule", s(&sched), "--trace"]);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,stage,t,abar,abar_next,state_norm,e_norm"));
    assert!(trace.lines().skip(1).count() >= 6);
    let (values, distances) = (f.data.join("masked.csv"), f.data.join("distances.csv"));

    let bad = run(&[
        "impute",
        "--checkpoint",
        s(&f.ckpt),
        "--values",
        s(&values),
        "--distances",
        s(&distances),
        "--aligned-schedule",
        s(&sched),
        "--steps",
        "10",
        "--output-dir",
        s(&f.root.join("bad")),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    let few = run(&[
        "impute",
        "--checkpoint",
        s(&f.ckpt),
        "--values",
        s(&values),
        "--distances",
        s(&distances),
        "--method",
        "fastSTI4",
        "--steps",
        "2",
        "--output-dir",
        s(&f.root.join("few")),
    ]);
    assert_eq!(few.status.code(), Some(2));
}

#[test]
fn evaluate_reports_zero_for_identical_files_and_crps_for_ensembles() {
    let f = fixture();
    let truth = f.data.join("values.csv");
    let mask = f.data.join("eval_mask.csv");
    let out = f.root.join("eval_same");
    ok(&["evaluate", "--truth", s(&truth), "--imputed", s(&truth), "--mask", s(&mask), "--output-dir", s(&out)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mae"], 0.0);
    assert_eq!(report["mse"], 0.0);
    assert_eq!(report["rmse"], 0.0);
    assert!(report["n_eval"].as_u64().unwrap() > 0);
    assert!(report.get("crps").is_some() && report.get("crps_normalized").is_some());

    let imp = impute(&f, "ens", &["--samples", "4", "--steps", "6", "--ensemble"]);
    let out = f.root.join("eval_ens");
    ok(&[
        "evaluate",
        "--truth",
        s(&truth),
        "--ensemble",
        s(&imp.join("ensemble.csv")),
        "--mask",
        s(&mask),
        "--output-dir",
        s(&out),
    ]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["crps"].as_f64().unwrap().is_finite());
    assert!(report["crps_normalized"].as_f64().unwrap().is_finite());
    assert!(report["mae"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_rows_are_ordered_and_plot_is_optional() {
    let f = fixture();
    let common = |out: &Path| {
        vec![
            "bench".to_string(),
            "--checkpoint".into(),
            s(&f.ckpt).into(),
            "--values".into(),
            s(&f.data.join("values.csv")).into(),
            "--distances".into(),
            s(&f.data.join("distances.csv")).into(),
            "--runs".into(),
            "fastSTI2@10,fastSTI2@aligned,ddim@6".into(),
            "--windows".into(),
            "1".into(),
            "--output-dir".into(),
            s(out).into(),
        ]
    };
    let plain = f.root.join("bench_plain");
    let args = common(&plain);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!plain.join("bench.svg").exists());
    let csv = fs::read_to_string(plain.join("bench.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let order: Vec<(&str, &str, &str)> = rows.iter().map(|r| (r[0], r[1], r[2])).collect();
    assert_eq!(order, [("fastSTI2", "10", "strided"), ("fastSTI2", "6", "aligned"), ("ddim", "6", "strided")]);

    let plotted = f.root.join("bench_plot");
    let mut args = common(&plotted);
    args.push("--plot".into());
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(fs::read_to_string(plotted.join("bench.svg")).unwrap().contains("<svg"));

    let too_few = run(&[
        "bench",
        "--checkpoint",
        s(&f.ckpt),
        "--values",
        s(&f.data.join("values.csv")),
        "--distances",
        s(&f.data.join("distances.csv")),
        "--repeats",
        "3",
    ]);
    assert_eq!(too_few.status.code(), Some(2));
}

#[test]
fn help_matches_golden_file() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for (name, args) in [
        ("help.txt", vec!["--help"]),
        ("help_impute.txt", vec!["impute", "--help"]),
        ("help_train.txt", vec!["train", "--help"]),
    ] {
        let out = ok(&args);
        let expected = fs::read_to_string(golden.join(name)).unwrap();
        assert_eq!(String::from_utf8(out.stdout).unwrap(), expected, "{name} differs");
    }
}

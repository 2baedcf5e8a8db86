use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stereosparse"));
    c.env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn resolved(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("config.resolved.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

const SMALL_NET: [&str; 12] = [
    "--features", "4", "--kernel", "3x8x8", "--stride", "1x4x4", "--mid-features", "4", "--epochs", "1", "--iters", "30",
];

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["encode", "--bogus", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--bogus"));
}

#[test]
fn missing_required_flag_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["encode", "--dict", "d.sten", "--input", "x.sten", "--out"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = bin().current_dir(dir.path()).args(["encode", "--dict", "d.sten", "--input", "x.sten"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("--out"), "{err}");
    assert!(err.contains("Usage:"), "{err}");
}

#[test]
fn supervised_variant_rejects_a_dictionary() {
    let o = run(&["train-net", "--variant", "conv_sup", "--dict", "d.sten", "--data", "m.jsonl", "--out", "m.model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("forbids a dictionary"), "{}", stderr(&o));
    let o = run(&["train-net", "--variant", "sparse_unsup", "--data", "m.jsonl", "--out", "m.model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("requires a dictionary"));
}

#[test]
fn unknown_variant_and_config_key_are_usage_errors() {
    let o = run(&["train-net", "--variant", "conv_super"]);
    assert_eq!(o.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"lamda": 0.1}"#).unwrap();
    let o = run(&["encode", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.sten");
    let o = run(&["encode", "--dict", "/nonexistent/d.sten", "--input", "x.sten", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("ERROR "), "{}", stderr(&o));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"n": 7, "n_test": 2, "seed": 3}"#).unwrap();
    let out = dir.path().join("data");
    let o = run(&["synth", "--config", p(&cfg), "--n", "6", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = resolved(&out);
    assert_eq!(r["n"], 6);
    assert_eq!(r["n_test"], 2);
    assert_eq!(r["seed"], 3);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 6);
    assert_eq!(manifest.matches("\"test\"").count(), 2);
}

#[test]
fn seed_defaults_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = run(&["synth", "--n", "2", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(resolved(&out)["seed"], 1);
    for line in stderr(&o).lines() {
        let mut parts = line.splitn(3, ' ');
        let level = parts.next().unwrap();
        assert!(["ERROR", "WARN", "INFO", "DEBUG", "TRACE"].contains(&level), "{line}");
        assert!(parts.next().unwrap().ends_with('Z'), "{line}");
    }
}

/// synth -> train-dict -> encode -> train-net -> eval -> analyze ->
/// run-matrix on a tiny synthetic set.
#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.jsonl");
    assert!(run(&["synth", "--n", "10", "--n-test", "4", "--seed", "2", "--out", p(&data)]).status.success());

    let dict_dir = d.join("dict");
    let dict = dict_dir.join("dict.sten");
    let o = run(&[
        "train-dict", "--data", p(&manifest), "--out", p(&dict), "--features", "4", "--kernel", "3x8x8",
        "--stride", "1x4x4", "--batches", "3", "--batch-size", "2", "--iters", "30",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let history = std::fs::read_to_string(dict_dir.join("dict.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);

    // Feeding the echoed configuration back reproduces the dictionary.
    let first = std::fs::read(&dict).unwrap();
    let echoed = d.join("dict-config.json");
    std::fs::copy(dict_dir.join("config.resolved.json"), &echoed).unwrap();
    let o = run(&["train-dict", "--config", p(&echoed)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&dict).unwrap(), first);

    let enc = d.join("enc").join("a.sten");
    let o = run(&[
        "encode", "--dict", p(&dict), "--stride", "1x4x4", "--input", p(&data.join("inputs/000000.sten")),
        "--out", p(&enc), "--iters", "40", "--pad",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let trace = std::fs::read_to_string(d.join("enc").join("a.energy.csv")).unwrap();
    assert!(trace.starts_with("iter,recon_err,sparsity,total,nnz\n"));
    let acts = stereosparse::sten::load(&enc).unwrap();
    assert_eq!(acts.dims(), &[1, 1, 16, 64, 4]);

    let model = d.join("net").join("sparse.model");
    let mut args = vec![
        "train-net", "--variant", "sparse_unsup", "--depth", "2", "--dict", p(&dict), "--data", p(&manifest),
        "--n-train", "4", "--out", p(&model),
    ];
    args.extend(SMALL_NET);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("net").join("sparse.train.csv").exists());

    let eval_dir = d.join("eval");
    let o = run(&["eval", "--model", p(&model), "--data", p(&manifest), "--out", p(&eval_dir)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let auc: f64 = stdout.trim().strip_prefix("auc ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(eval_dir.join("metrics.json").exists());
    assert_eq!(std::fs::read_to_string(eval_dir.join("scores.csv")).unwrap().lines().count(), 1 + 4 * 32);

    let control = d.join("net").join("conv.model");
    let mut args = vec![
        "train-net", "--variant", "conv_sup", "--depth", "2", "--data", p(&manifest), "--n-train", "4", "--out",
        p(&control),
    ];
    args.extend(SMALL_NET);
    assert!(run(&args).status.success());
    let an = d.join("analysis");
    let o = run(&[
        "analyze", "--model", p(&model), "--control", p(&control), "--n", "3", "--overlays", "1", "--out", p(&an),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["selectivity_model.csv", "selectivity_control.csv", "selectivity.json"] {
        assert!(an.join(f).exists(), "{f}");
    }
    let overlays = std::fs::read_dir(&an)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .count();
    assert!(overlays >= 1);

    let mx = d.join("matrix");
    let mut args = vec![
        "run-matrix", "--data", p(&manifest), "--dict", p(&dict), "--variants", "sparse_unsup,conv_rand",
        "--depths", "2", "--n-train", "3,6", "--seeds", "1,2", "--out", p(&mx),
    ];
    args.extend(SMALL_NET);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let results = std::fs::read_to_string(mx.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    assert!(mx.join("summary.csv").exists() && mx.join("table.txt").exists());

    // Second run is served from the cell cache and writes the same bytes.
    let o = run(&["run-matrix", "--config", p(&mx.join("config.resolved.json"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("cached"));
    assert_eq!(std::fs::read_to_string(mx.join("results.csv")).unwrap(), results);
}

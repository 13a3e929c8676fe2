use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough for the test suite
n_head_facts = 6
n_tail_facts = 10
head_rep = 4
n_filler = 20
calib_subjects = 8
calib_filler = 10
n_layers = 2
n_experts = 4
k_baseline = 2
d_model = 16
d_ff = 16
n_heads = 2
steps = 40
batch_size = 4
k_max = 3
";

fn corlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corlab"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = corlab(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn pipeline(dir: &Path) {
    std::fs::write(dir.join("run.conf"), TINY).unwrap();
    let c = ["--config", "run.conf"];
    let with = |rest: &[&'static str]| -> Vec<&str> { c.iter().chain(rest).copied().collect() };
    ok(dir, &with(&["gen-corpus", "--seed", "1"]));
    ok(dir, &with(&["train", "--corpus", "corpus.json", "--seed", "1"]));
    ok(dir, &with(&["calibrate", "--model", "model.ckpt", "--corpus", "corpus.json"]));
    ok(dir, &with(&["analyze-layers", "--model", "model.ckpt", "--calibration", "calibration.json"]));
    ok(dir, &with(&["analyze-experts", "--model", "model.ckpt", "--calibration", "calibration.json"]));
    ok(dir, &with(&["build-plan", "--rki", "rki.json", "--cei", "cei.json", "--model", "model.ckpt"]));
    ok(dir, &with(&["eval", "--model", "model.ckpt", "--corpus", "corpus.json", "--plan", "plan.json"]));
    ok(dir, &with(&["export-scatter", "--cei", "cei.json"]));
    ok(
        dir,
        &with(&["pareto", "--model", "model.ckpt", "--corpus", "corpus.json", "--rki", "rki.json", "--cei", "cei.json"]),
    );
}

const OUTPUTS: [&str; 12] = [
    "corpus.json",
    "model.ckpt",
    "loss_log.jsonl",
    "calibration.json",
    "rki.json",
    "cei.json",
    "plan.json",
    "eval.json",
    "scatter.csv",
    "pareto.csv",
    "lambda_sweep.csv",
    "train.manifest.json",
];

#[test]
fn full_pipeline_runs_from_an_empty_directory_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in OUTPUTS {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between identical runs");
    }
    let rki: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("rki.json")).unwrap()).unwrap();
    assert_eq!(rki.as_array().unwrap().len(), 2);
    let scatter = std::fs::read_to_string(a.path().join("scatter.csv")).unwrap();
    assert_eq!(scatter.lines().count(), 1 + 2 * 4);
    let pareto = std::fs::read_to_string(a.path().join("pareto.csv")).unwrap();
    assert_eq!(pareto.lines().count(), 1 + 2 * 3);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("eval.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "eval");
    assert_eq!(manifest["inputs"]["plan"], "plan.json");
    assert_eq!(manifest["outputs"][0], "eval.json");
}

#[test]
fn subcommands_leave_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let before: Vec<Vec<u8>> = ["model.ckpt", "calibration.json", "rki.json", "cei.json"]
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    ok(
        dir.path(),
        &["--config", "run.conf", "build-plan", "--rki", "rki.json", "--cei", "cei.json", "--out", "again"],
    );
    ok(
        dir.path(),
        &["--config", "run.conf", "analyze-layers", "--model", "model.ckpt", "--calibration", "calibration.json", "--out", "again"],
    );
    let after: Vec<Vec<u8>> = ["model.ckpt", "calibration.json", "rki.json", "cei.json"]
        .iter()
        .map(|n| std::fs::read(dir.path().join(n)).unwrap())
        .collect();
    assert_eq!(before, after);
    assert_eq!(
        std::fs::read(dir.path().join("rki.json")).unwrap(),
        std::fs::read(dir.path().join("again/rki.json")).unwrap()
    );
}

#[test]
fn large_lambda_warns_on_stderr_and_still_writes_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    let out = ok(
        dir.path(),
        &["--config", "run.conf", "build-plan", "--rki", "rki.json", "--cei", "cei.json", "--lambda", "0.5", "--out", "wide"],
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning") && stderr.contains("0.5"), "{stderr}");
    let plan = std::fs::read_to_string(dir.path().join("wide/plan.json")).unwrap();
    assert!(plan.contains("\"lambda\": 0.5"));
    let quiet = ok(
        dir.path(),
        &["--config", "run.conf", "build-plan", "--rki", "rki.json", "--cei", "cei.json", "--lambda", "0.1", "--out", "narrow"],
    );
    assert!(quiet.stderr.is_empty());
}

#[test]
fn input_and_config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| corlab(dir.path(), args).status.code();
    assert_eq!(code(&["train"]), Some(2));
    assert_eq!(code(&["eval", "--model", "missing.ckpt", "--corpus", "missing.json"]), Some(2));
    std::fs::write(dir.path().join("bad.conf"), "lamda = 0.1\n").unwrap();
    assert_eq!(code(&["--config", "bad.conf", "verify-cascade"]), Some(2));
    std::fs::write(dir.path().join("junk.ckpt"), b"MOECKPT0garbage").unwrap();
    std::fs::write(dir.path().join("corpus.json"), "{}").unwrap();
    let out = corlab(dir.path(), &["calibrate", "--model", "junk.ckpt", "--corpus", "corpus.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("format error at byte 0"));
    assert_eq!(code(&["no-such-command"]), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), TINY).unwrap();
    ok(dir.path(), &["--config", "run.conf", "gen-corpus"]);
    std::fs::write(dir.path().join("hot.conf"), format!("{TINY}learning_rate = 1e30\n")).unwrap();
    let out = corlab(dir.path(), &["--config", "hot.conf", "train", "--corpus", "corpus.json", "--out", "hot"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn cascade_check_reports_flat_intensity_and_finds_the_peak() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["verify-cascade", "--out", "flat"]);
    let flat: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("flat/cascade.json")).unwrap()).unwrap();
    assert_eq!(flat["raw_grows_with_distance"], true);
    assert!(flat["r_spread"].as_f64().unwrap() <= 1.10);
    std::fs::write(dir.path().join("peak.conf"), "peak = 2\ndepth = 5\n").unwrap();
    ok(dir.path(), &["--config", "peak.conf", "verify-cascade", "--out", "peak"]);
    let peak: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("peak/cascade.json")).unwrap()).unwrap();
    assert_eq!(peak["argmax_r"], 2);
}

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[corpus]
n_per_combo = 1
canvas = 8

[corpus.classifier]
hidden = 8
steps = 10
batch_size = 8

[base-train]
corpus = "corpus"

[base-train.training]
max_steps = 4
batch_size = 4
warmup_steps = 1
eval_every = 2
validation_size = 4

[base-train.training.unet]
image_size = 8
patch = 2
width = 8
heads = 2
text_dim = 6

[base-train.training.text]
dim = 6

[base-train.training.schedule]
steps = 20

[tune.tuning]
steps = 3

[sample]
prompt = "a thing in the shape of *m"
steps = 4
batch = 1
seed = 5
lambda = 0.0

[sweep]
prompt = "a thing in the shape of *m"
lambdas = [0.0]
seeds = [5]
steps = 4

[dichotomy]
seeds = [0]
references = []

[dichotomy.experiment]
images_per_seed = 1
sample_steps = 4

[dichotomy.experiment.tuning]
steps = 2

[ablation]
seeds = [0]

[ablation.experiment]
images_per_seed = 1
sample_steps = 4

[ablation.experiment.tuning]
steps = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrtune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    ok(dir.path(), &["corpus", "--config", "run.toml", "--out", "corpus"]);
    dir
}

#[test]
fn base_training_is_reproducible_and_guards_its_run_directory() {
    let dir = setup();
    let d = dir.path();
    let a = ok(d, &["base-train", "--config", "run.toml", "--out", "base"]);
    let b = ok(d, &["base-train", "--config", "run.toml", "--out", "base2"]);
    assert_eq!(a.trim().len(), 64);
    assert_eq!(a, b);
    assert!(d.join("base/config.toml").exists());
    assert!(d.join("base/loss.png").exists());

    let again = run(d, &["base-train", "--config", "run.toml", "--out", "base"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(d, &["base-train", "--config", "run.toml", "--out", "base", "--force"]);

    let other = ok(d, &["base-train", "--config", "run.toml", "--out", "base3", "--seed", "9"]);
    assert_ne!(a, other);
}

#[test]
fn missing_corpus_names_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), TINY).unwrap();
    let out = run(dir.path(), &["base-train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[tune]\nsteps = 3\n").unwrap();
    let out = run(dir.path(), &["tune", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tuning_sampling_and_sweeps_compose() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["base-train", "--config", "run.toml", "--out", "base"]);
    ok(d, &["tune", "--config", "run.toml", "--out", "tune"]);
    for f in ["artifact.json", "artifact.safetensors", "loss.csv", "reference.png", "config.toml"] {
        assert!(d.join("tune").join(f).exists(), "missing {f}");
    }
    let csv = std::fs::read_to_string(d.join("tune/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);

    // lambda = 0 through the sweep equals plain base sampling
    ok(d, &["sweep", "--config", "run.toml", "--out", "sweep"]);
    ok(d, &["sample", "--config", "run.toml", "--out", "sample"]);
    let swept = std::fs::read(d.join("sweep/lambda_0.000_seed_005.png")).unwrap();
    let sampled = std::fs::read(d.join("sample/sample_000.png")).unwrap();
    assert_eq!(swept, sampled);
    assert!(d.join("sweep/metrics.json").exists());
    assert!(d.join("sweep/summary.json").exists());

    // the echoed config alone reproduces the run
    ok(d, &["sample", "--config", "sample/config.toml", "--out", "sample_again"]);
    assert_eq!(
        std::fs::read(d.join("sample_again/sample_000.png")).unwrap(),
        sampled
    );

    ok(d, &["eval", "--config", "run.toml", "--out", "eval"]);
    assert!(d.join("eval/metrics.json").exists());

    // an artifact only loads against the base it was tuned on
    ok(d, &["base-train", "--config", "run.toml", "--out", "other", "--seed", "3"]);
    std::fs::write(
        d.join("mismatch.toml"),
        TINY.replace("[sample]\n", "[sample]\nartifact = \"tune\"\nbase = \"other\"\n"),
    )
    .unwrap();
    let out = run(d, &["sample", "--config", "mismatch.toml", "--out", "bad"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergent_tuning_exits_with_numeric_code() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["base-train", "--config", "run.toml", "--out", "base"]);
    std::fs::write(
        d.join("diverge.toml"),
        TINY.replace("[tune.tuning]\nsteps = 3", "[tune.tuning]\nsteps = 5\nlearning_rate = 1e300"),
    )
    .unwrap();
    let out = run(d, &["tune", "--config", "diverge.toml", "--out", "t"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn experiments_write_paired_reports() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["base-train", "--config", "run.toml", "--out", "base"]);
    ok(d, &["dichotomy", "--config", "run.toml", "--out", "dichotomy"]);
    for f in ["dichotomy.json", "metrics.json", "iou.png", "gram.png"] {
        assert!(d.join("dichotomy").join(f).exists(), "missing {f}");
    }
    ok(d, &["ablation", "--config", "run.toml", "--out", "ablation"]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ablation/ablation.json")).unwrap()).unwrap();
    let first = &report[0];
    assert_eq!(first["hypernet"]["loss_traces"][0].as_array().unwrap().len(), 2);
    assert_eq!(first["direct"]["loss_traces"][0].as_array().unwrap().len(), 2);
    let csvs = std::fs::read_dir(d.join("ablation"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".csv"))
        .count();
    assert_eq!(csvs, 6);
}

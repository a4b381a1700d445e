use std::path::Path;
use std::process::{Command, Output};

use fan_core::checkpoint;
use fan_core::data::{load_idx, procedural_digits, write_idx_labels, DomainTag};
use fan_core::model::{FanModel, LatentSplit, Variant};

const TINY: &[&str] = &[
    "--set",
    "data.source.train_samples=64",
    "--set",
    "data.target.train_samples=64",
    "--set",
    "data.source.test_samples=40",
    "--set",
    "data.target.test_samples=40",
    "--set",
    "train.batch_size=16",
    "--set",
    "train.source_epochs=1",
    "--set",
    "train.target_epochs=1",
];

fn fan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fan"))
        .args(args)
        .env_remove("FAN_DATA_ROOT")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().chain(TINY).copied().collect()
}

#[test]
fn missing_config_exits_with_config_code() {
    let o = fan(&["train-source", "--config", "/nonexistent/recipe.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config error"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_config_code() {
    assert_eq!(fan(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fan(&["run-recipe"]).status.code(), Some(2));
    let o = fan(&["run-recipe", "synth-invert", "--set", "train.bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fan(&["train-source", "--recipe", "mnist-usps-sampled", "--out", out]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("data error"), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = with_tiny(&["train-source", "--recipe", "synth-noise", "--out", out, "--set", "train.source_optim.lr=1e30"]);
    let o = fan(&args);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric failure"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_counts() {
    let o = fan(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let line = text.lines().last().unwrap();
    assert!(line.starts_with("gradcheck: ") && line.ends_with(" passed, 0 failed"), "{line}");
}

#[test]
fn eval_of_a_perfect_oracle_is_one() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels, ckpt) = (
        dir.path().join("images.idx"),
        dir.path().join("labels.idx"),
        dir.path().join("model.ckpt"),
    );
    procedural_digits(50, 3).unwrap().save_idx(&images, None).unwrap();
    let model = FanModel::new(Variant::Full, LatentSplit::default(), 4).unwrap();
    checkpoint::save_model(&ckpt, &model).unwrap();
    let ds = load_idx(&images, None, DomainTag::Target).unwrap();
    let own = model.logits(ds.images()).unwrap().argmax_rows();
    write_idx_labels(&labels, &own).unwrap();

    let p = |p: &Path| p.to_str().unwrap().to_string();
    let (c, i, l) = (p(&ckpt), p(&images), p(&labels));
    let o = fan(&["eval", "--checkpoint", &c, "--images", &i, "--labels", &l]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "accuracy 1.000000");

    let shifted: Vec<usize> = own.iter().map(|&c| (c + 1) % 10).collect();
    write_idx_labels(&labels, &shifted).unwrap();
    let o = fan(&["eval", "--checkpoint", &c, "--images", &i, "--labels", &l]);
    assert_eq!(stdout(&o).trim(), "accuracy 0.000000");
}

#[test]
fn run_recipe_writes_runs_and_results() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = fan(&with_tiny(&["run-recipe", "synth-invert", "--seed", "7", "--out", out]));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("runs/synth-invert/7");
    for f in ["config.toml", "source.ckpt", "target.ckpt", "discriminator.ckpt", "log.jsonl", "summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let frozen = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(frozen.contains("batch_size = 16"));
    let results = std::fs::read_to_string(dir.path().join("results.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(results.lines().next().unwrap()).unwrap();
    assert_eq!(rec["recipe"], "synth-invert");
    assert_eq!(rec["seeds"], serde_json::json!([7]));
    assert_eq!(rec["invariants_hold"], true);
    assert_eq!(stdout(&o).trim(), results.trim());
}

#[test]
fn staged_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (src, ada, emb, rec) = (d("src"), d("ada"), d("emb"), d("rec"));
    let base = ["--recipe", "synth-brightness", "--seed", "1"];

    let o = fan(&with_tiny(&[&["train-source", "--out", &src][..], &base].concat()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("source test accuracy "));
    let source_ckpt = d("src/source.ckpt");

    let o = fan(&with_tiny(&[&["adapt", "--out", &ada, "--source-model", &source_ckpt][..], &base].concat()));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let invariants: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("ada/invariants.json")).unwrap()).unwrap();
    assert_eq!(invariants["source_before"], invariants["source_after"]);
    let target_ckpt = d("ada/target.ckpt");

    let o = fan(&with_tiny(
        &[
            &["export-embeddings", "--out", &emb, "--source-model", &source_ckpt, "--target-model", &target_ckpt][..],
            &["--which", "dss", "--n", "30"],
            &base,
        ]
        .concat(),
    ));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("emb/embeddings-dss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 61);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 52);

    let o = fan(&with_tiny(
        &[
            &["export-reconstructions", "--out", &rec, "--source-model", &source_ckpt, "--target-model", &target_ckpt][..],
            &["--mode", "logit-swap", "--n", "12"],
            &base,
        ]
        .concat(),
    ));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["recon-logit-swap.png", "recon-logit-swap-inputs.npy", "recon-logit-swap-outputs.npy"] {
        assert!(dir.path().join("rec").join(f).is_file(), "{f}");
    }

    let o = fan(&["eval", "--checkpoint", &target_ckpt, "--recipe", "synth-brightness", "--domain", "target"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("accuracy "));

    let o = fan(&with_tiny(
        &[&["adapt", "--out", &ada, "--source-model", &source_ckpt][..], &base, &["--set", "model.variant=joint"]].concat(),
    ));
    assert_eq!(o.status.code(), Some(2));
}

use std::path::Path;
use std::process::Command;

use mts2graph::dataset::write_per_sample;
use mts2graph::synthetic;

const CONFIG: &str = r#"
cluster_counts = [4, 4, 4]
segment_length = 10

[cnn]
epochs = 4
learning_rate = 0.01

[[cnn.conv_layers]]
filters = 4
kernel = 8

[[cnn.conv_layers]]
filters = 4
kernel = 5

[[cnn.conv_layers]]
filters = 4
kernel = 3

[kshape]
restarts = 1
max_iter = 20

[embedding]
dim = 8
walks_per_node = 5

[gbdt]
rounds = 10

[folds]
k = 3
limit = 1
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mts2graph"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    write_per_sample(&synthetic::order_motif_dataset(36, 100, 0.1, 4).unwrap(), &data).unwrap();
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    (data, cfg)
}

#[test]
fn pipeline_then_explain_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let out = dir.path().join("run");
    run(bin()
        .args(["--log", "warn", "pipeline", "--seed", "5", "--embedding.dim", "6", "--gbdt.rounds=5"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .arg("--dataset")
        .arg(&data));
    let saved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(saved.contains("dim = 6") && saved.contains("rounds = 5") && saved.contains("seed = 5"));
    assert!(std::fs::read_to_string(out.join("metrics.txt")).unwrap().starts_with("accuracy: "));

    let text = run(bin().args(["--log", "warn", "explain", "--sample", "0", "--fold", "0"]).arg("--out").arg(&out));
    assert!(text.contains("sample 0"), "{text}");

    let dot = run(bin().args(["--log", "warn", "export-dot"]).arg("--out").arg(&out));
    assert!(dot.starts_with("digraph"), "{dot}");
}

#[test]
fn stage_commands_resume_from_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = setup(dir.path());
    let out = dir.path().join("run");
    run(bin().args(["--log", "warn", "train", "--seed", "3"]).arg("--config").arg(&cfg).arg("--out").arg(&out).arg("--dataset").arg(&data));
    assert!(out.join("fold_00/checkpoint.bin").exists());
    assert!(!out.join("fold_00/graph.tsv").exists());
    run(bin().args(["--log", "warn", "graph"]).arg("--out").arg(&out));
    assert!(out.join("fold_00/graph.tsv").exists());
    run(bin().args(["--log", "warn", "evaluate"]).arg("--out").arg(&out));
    assert!(out.join("fold_00/evaluation.json").exists());
}

#[test]
fn missing_required_flags_fail() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["pipeline", "--seed", "1"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!out.status.success());
    let out = bin().args(["sweep", "--param", "embedding-dim", "--grid", "x"]).output().unwrap();
    assert!(!out.status.success());
}

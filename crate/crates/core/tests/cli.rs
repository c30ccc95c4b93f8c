use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meshrecon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshrecon"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

const DATASET: &str = "n = 5\nfractions = [0.6, 0.2, 0.2]\ndims = [16, 16, 16]\ngt_subdivisions = 3\ntemplate_subdivisions = 2\n";

const RUN: &str = r#"
dataset = "data"
template = "template"
run_dir = "run"
epochs = 1
val_samples = 200
eval_samples = 300
[model]
channels = [2, 2, 2, 2, 2]
[model.decoder]
hidden = 8
latent = 4
gcn_channels = [4, 4, 4]
[model.deformer]
hidden = 8
"#;

#[test]
fn full_workflow_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("dataset.toml"), DATASET).unwrap();
    fs::write(d.join("run.toml"), RUN).unwrap();

    ok(&meshrecon(d, &["make-dataset", "--out", "data", "--config", "dataset.toml"]));
    ok(&meshrecon(d, &["make-template", "--dataset", "data", "--out", "template"]));
    ok(&meshrecon(d, &["train", "--config", "run.toml"]));
    for f in ["best.json", "last.bin", "train_log.json", "config.toml", "manifest.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
    ok(&meshrecon(d, &["eval", "--checkpoint", "run/best", "--split", "test"]));
    assert!(d.join("run/eval_test.json").exists());
    ok(&meshrecon(d, &["reconstruct", "--checkpoint", "run/best", "--volume", "data/s0000/volume", "--out", "rec"]));
    for s in ["template_ta", "s1", "s2", "s3", "s4"] {
        assert!(d.join(format!("rec_{s}.obj")).exists(), "{s}");
    }
    ok(&meshrecon(d, &["baseline-mc", "--dataset", "data", "--samples", "300", "--out", "mc"]));
    assert!(d.join("mc.csv").exists());

    let bad_mode = meshrecon(d, &["train", "--config", "run.toml", "--mode", "Tx"]);
    assert_eq!(bad_mode.status.code(), Some(2));
    fs::write(d.join("bad.toml"), format!("{RUN}batch_size = 4\n")).unwrap();
    assert_eq!(meshrecon(d, &["train", "--config", "bad.toml"]).status.code(), Some(2));
    fs::write(d.join("typo.toml"), format!("{RUN}epoch = 4\n")).unwrap();
    assert_eq!(meshrecon(d, &["train", "--config", "typo.toml"]).status.code(), Some(2));

    fs::write(d.join("blowup.toml"), format!("{RUN}[weights]\nchamfer = 1e300\n")).unwrap();
    let blowup = meshrecon(d, &["train", "--config", "blowup.toml", "--run-dir", "blowup"]);
    assert_eq!(blowup.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&blowup.stderr));

    let missing = meshrecon(d, &["eval", "--checkpoint", "nowhere/best"]);
    assert_eq!(missing.status.code(), Some(1));
}

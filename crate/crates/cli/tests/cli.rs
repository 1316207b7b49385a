use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mmvb(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvb")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = "model = \"mopoe\"\ndataset_dir = \"data\"\nlevel = 1\nlatent_dim = 3\nseeds = [0]\nepochs = 1\n\
                      batch_size = 8\nhidden = [8]\noutput_dir = \"runs\"\n[traversal]\nper_dim = 3\n";

fn small_dataset(dir: &Path) {
    let info = ok(&mmvb(
        &["generate", "--level", "1", "--out", "data", "--train-count", "24", "--val-count", "3", "--test-count", "12"],
        dir,
    ));
    let info: serde_json::Value = serde_json::from_str(&info).unwrap();
    assert_eq!(info["train_count"], 24);
    assert!(dir.join("data/shape_classifier.json").exists());
}

#[test]
fn generate_train_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    ok(&mmvb(&["train", "--config", "exp.toml"], dir.path()));
    let ckpt = "runs/mopoe_level1/latent3_seed0/final.mmvb";
    assert!(dir.path().join(ckpt).exists());

    ok(&mmvb(&["eval", "--checkpoint", ckpt, "--dataset", "data", "--level", "1", "--out", "report.json"], dir.path()));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["txt2img"]["n_samples"], 12);

    ok(&mmvb(&["export", "--checkpoint", ckpt, "--dataset", "data", "--out", "viz"], dir.path()));
    for f in ["traversal.png", "traversal_captions.txt", "latent_pca.csv", "loss_curves.csv"] {
        assert!(dir.path().join("viz").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_rejects_a_level_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    fs::write(dir.path().join("exp.toml"), CONFIG).unwrap();
    ok(&mmvb(&["train", "--config", "exp.toml"], dir.path()));
    let out = mmvb(
        &["eval", "--checkpoint", "runs/mopoe_level1/latent3_seed0/final.mmvb", "--dataset", "data", "--level", "3"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trained on level 1"));
}

#[test]
fn gridsearch_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    fs::write(dir.path().join("exp.toml"), CONFIG.replace("latent_dim = 3", "latent_dim = [2, 3]")).unwrap();
    let table = ok(&mmvb(&["gridsearch", "--config", "exp.toml"], dir.path()));
    assert!(table.contains("| mopoe | 2 |") && table.contains("| mopoe | 3 |"), "{table}");
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("exp.toml"), "model = \"vae\"\n").unwrap();
    let out = mmvb(&["train", "--config", "exp.toml"], dir.path());
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
sparsity = 0.5
seed = 1

[model]
image_size = 8
patch_size = 4
embed_dim = 16
num_blocks = 1
num_heads = 2
mlp_hidden = 32
num_classes = 4

[data]
kind = "synthetic"
seed = 2
classes = 4
samples = 200
image_size = 8
test_samples = 40

[optimizer]
epochs = 2
batch_size = 32
dense_epochs = 2

[ranking]
batch_size = 16
"#;

fn vitprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitprune"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn count_reproduces_known_sizes() {
    let o = vitprune(&["count", "--preset", "vit-small-cifar", "--sparsity", "0.4"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("params_before = 47993098"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("block,kappa_attn_h")));
}

#[test]
fn stage_commands_chain_through_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let o = vitprune(&["--config", &cfg, "--output-dir", out_s, "train-dense"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dense = out.join("dense.ckpt");
    assert!(dense.is_file());

    let o = vitprune(&[
        "--config",
        &cfg,
        "--output-dir",
        out_s,
        "rank",
        "--checkpoint",
        dense.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("block=0 scores=["));

    let o = vitprune(&[
        "--config",
        &cfg,
        "--output-dir",
        out_s,
        "prune",
        "--checkpoint",
        dense.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epoch,loss,masked_norm"));
    let compact = out.join("compact.ckpt");

    let o = vitprune(&[
        "--config",
        &cfg,
        "--output-dir",
        out_s,
        "finetune",
        "--checkpoint",
        compact.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("finetuned.ckpt").is_file());
}

#[test]
fn pipeline_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("p");
    let o = vitprune(&["--config", &cfg, "--output-dir", out.to_str().unwrap(), "pipeline"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("constraints_verified = true"));

    let o = vitprune(&["report", "--dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());

    let o = vitprune(&["--config", &cfg, "--sparsity", "1.5", "pipeline"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let o = vitprune(&["--config", &cfg, "rank", "--checkpoint", bogus.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let o = vitprune(&["--config", &cfg, "train-dense"]);
    assert_eq!(o.status.code(), Some(2), "missing output dir");

    let o = vitprune(&["report", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "no reports");

    let o = vitprune(&["no-such-command"]);
    assert!(!o.status.success());
}

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const TINY: &str = r#"{
  "task": "latch_spike",
  "demos": 3,
  "policy": {
    "fmt": { "d": 16, "heads": 2, "patch": 16, "ft_conv_channels": 8 },
    "head": { "heads": 2, "step_embed_dim": 16, "mlp_ratio": 2 },
    "diffusion": { "steps": 8 }
  },
  "train": { "epochs": 2, "batch_size": 16 }
}"#;

fn fmtforge(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmtforge"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn collect_train_eval_round_trip() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let out = fmtforge(&["collect", "--config", &cfg, "--out", "demos"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("demos/manifest.json").exists());

    let out = fmtforge(&["train", "--config", &cfg, "--store", "demos", "--out", "run", "--seed", "3"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let loss = std::fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(dir.path().join("run/config.json").exists());

    let out = fmtforge(&["eval", "--config", &cfg, "--checkpoint", "run/checkpoint", "--out", "eval"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let episodes = std::fs::read_to_string(dir.path().join("eval/episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 21);

    // A checkpoint trained with cross-attention cannot be evaluated without it.
    let out = fmtforge(&["eval", "--config", &cfg, "--checkpoint", "run/checkpoint", "--no-cross-attention", "--out", "x"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn expert_eval_respects_thread_cap() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_fmtforge"))
            .args(["eval", "--config", &cfg, "--expert", "--out", out])
            .current_dir(dir.path())
            .env("FMTFORGE_THREADS", threads)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(dir.path().join(out).join("episodes.csv")).unwrap()
    };
    assert_eq!(run("1", "one"), run("3", "three"));
}

#[test]
fn compensate_writes_a_new_store() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    assert_eq!(code(&fmtforge(&["collect", "--config", &cfg, "--out", "demos"], dir.path())), 0);
    let out = fmtforge(
        &["compensate", "--config", &cfg, "--store", "demos", "--mass", "0.6", "--com", "0.02,0,0.05", "--gravity", "9.81", "--out", "comp"],
        dir.path(),
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("comp/manifest.json").exists());

    let out = fmtforge(&["compensate", "--config", &cfg, "--store", "demos", "--mass", "-1", "--out", "bad"], dir.path());
    assert_eq!(code(&out), 2);
    let out = fmtforge(&["compensate", "--config", &cfg, "--store", "demos", "--com", "1,2", "--out", "bad"], dir.path());
    assert_eq!(code(&out), 2);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempdir().unwrap();
    let unknown = write_config(dir.path(), "unknown.json", r#"{"task": "peg_insert", "epochs": 3}"#);
    let malformed = write_config(dir.path(), "bad.json", "{ not json");
    let tiny = write_config(dir.path(), "tiny.json", TINY);
    for args in [
        vec!["collect", "--config", unknown.as_str()],
        vec!["collect", "--config", malformed.as_str()],
        vec!["collect", "--config", "missing.json"],
        vec!["collect", "--config", tiny.as_str(), "--ft-rate", "100"],
        vec!["frobnicate"],
        vec!["eval", "--config", tiny.as_str()],
    ] {
        let out = fmtforge(&args, dir.path());
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let out = fmtforge(&["train", "--config", &cfg, "--store", "no_such_store", "--out", "run"], dir.path());
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_exits_cleanly() {
    let dir = tempdir().unwrap();
    let out = fmtforge(&["--help"], dir.path());
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["collect", "train", "eval", "ablate", "compensate"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

use std::path::Path;
use std::process::{Command, Output};

fn invic(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invic"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--set",
    "data.n_train=120",
    "--set",
    "data.n_test=40",
    "--set",
    "train.phase0.max_epochs=1",
    "--set",
    "train.phase0.iid_threshold=0.0",
    "--set",
    "train.stage1.epochs=1",
    "--set",
    "train.stage2.epochs=1",
    "--set",
    "train.k=4",
];

#[test]
fn mask_dump_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = invic(dir.path(), &["mask-dump", "--layout", "2,2,1,1", "--stage", "1", "--mode", "prose"]);
    assert!(out.status.success());
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mask_2211_stage1_prose.txt")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(invic(dir.path(), &["mask-dump", "--layout", "2,2,1"]).status.code(), Some(2));
    assert_eq!(invic(dir.path(), &["mask-dump", "--layout", "1,1,1,1", "--stage", "3"]).status.code(), Some(2));
    assert_eq!(invic(dir.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_json_and_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = invic(dir.path(), &["stage1", "--backbone", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"].is_string());

    let out = invic(dir.path(), &["--set", "train.nope=1", "gradcheck"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_lists_config_keys() {
    let out = Command::new(env!("CARGO_BIN_EXE_invic")).arg("--help").output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["data.p_bias", "train.stage1.lr", "train.k", "model.decoder.d_llm"] {
        assert!(text.contains(key), "{key} missing from help");
    }
}

#[test]
fn gen_data_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = invic(d.path(), &["--seed", "11", "gen-data", "--n-train", "60", "--n-test", "20"]);
        assert!(out.status.success());
    }
    for f in ["train.jsonl", "test_iid.jsonl", "test_anti.jsonl", "dataset.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
        assert!(!x.is_empty());
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(a.path().join("gen-data.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["seed"], 11);
}

#[test]
fn staged_commands_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let d = data.to_str().unwrap();
    assert!(invic(&data, &["gen-data", "--n-train", "120", "--n-test", "40"]).status.success());
    for cmd in ["pretrain", "stage1", "stage2"] {
        let mut args = SMALL.to_vec();
        args.extend(["--data", d, cmd]);
        let out = invic(dir.path(), &args);
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["backbone.ckpt", "stage1.ckpt", "stage2.ckpt", "phase0.jsonl", "stage1.jsonl", "stage2.jsonl", "stage2.manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let ckpt = dir.path().join("stage2.ckpt");
    let mut args = SMALL.to_vec();
    args.extend(["--data", d, "eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(invic(dir.path(), &args).status.success());
    let eval = std::fs::read_to_string(dir.path().join("eval.jsonl")).unwrap();
    let report: serde_json::Value = serde_json::from_str(eval.lines().last().unwrap()).unwrap();
    let stage2 = std::fs::read_to_string(dir.path().join("stage2.jsonl")).unwrap();
    let trained: serde_json::Value = serde_json::from_str(stage2.lines().last().unwrap()).unwrap();
    assert_eq!(report["metrics"], trained["metrics"]);
}

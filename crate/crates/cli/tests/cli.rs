//! End-to-end runs of the `stimtrain` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_stimtrain");

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=3",
    "--set",
    "data.train_per_class=30",
    "--set",
    "data.calib_per_class=16",
    "--set",
    "data.eval_per_class=16",
    "--set",
    "network.width=8",
];

fn stimtrain(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("STIMTRAIN_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = stimtrain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, name: &str, mode: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--mode", mode, "--out", s(&out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn stimulative_run_produces_a_complete_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "st", "stimulative", &[]);
    for f in [
        "manifest.json",
        "metrics.jsonl",
        "timing.jsonl",
        "final.ckpt",
        "final_eval.json",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    for e in 1..=3 {
        assert!(run.join(format!("checkpoints/epoch_{e:04}.ckpt")).exists());
    }
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "completed");
    assert_eq!(manifest["config"]["train"]["lambda"], 10.0);
    assert_eq!(manifest["config"]["train"]["epochs"], 3);
    let last = jsonl(&run.join("metrics.jsonl")).pop().unwrap();
    assert!(last["loss_main_ce"].as_f64().unwrap() > 0.0);
    assert!(last["loss_kl"].as_f64().unwrap() >= 0.0);
    assert!(last.get("wall_time").is_none());
}

#[test]
fn common_matches_stimulative_with_zero_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let ct = train(dir.path(), "ct", "common", &[]);
    let st = train(
        dir.path(),
        "st0",
        "stimulative",
        &["--set", "train.lambda=0"],
    );
    assert_eq!(
        std::fs::read(ct.join("final.ckpt")).unwrap(),
        std::fs::read(st.join("final.ckpt")).unwrap()
    );
    let a = jsonl(&ct.join("metrics.jsonl"));
    let b = jsonl(&st.join("metrics.jsonl"));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x["loss_main_ce"], y["loss_main_ce"]);
        assert_eq!(x["loss_total"], y["loss_total"]);
    }
}

#[test]
fn config_errors_exit_with_code_two() {
    let out = stimtrain(&[
        "train",
        "--mode",
        "common",
        "--config",
        "/definitely/missing.toml",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/missing.toml"));

    let out = stimtrain(&["train", "--mode", "common", "--set", "train.lamda=1"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lamda") && err.contains("lambda"), "{err}");

    let out = stimtrain(&["config", "--set", "train.batch_size=0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("div");
    let mut args = vec![
        "train",
        "--mode",
        "common",
        "--out",
        s(&run),
        "--set",
        "train.lr0=1e200",
    ];
    args.extend_from_slice(SMALL);
    let out = stimtrain(&args);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
    let manifest = std::fs::read_to_string(run.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
}

#[test]
fn eval_subnets_reports_every_mask() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "st", "stimulative", &[]);
    let ev = dir.path().join("ev");
    let ckpt = run.join("final.ckpt");
    let mut args = vec!["eval-subnets", "--checkpoint", s(&ckpt), "--out", s(&ev)];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert_eq!(jsonl(&ev.join("subnets.jsonl")).len(), 144);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["masks"], 144);

    // a cap below 144 is refused with a hint
    let mut args = vec!["eval-subnets", "--checkpoint", s(&ckpt), "--cap", "100"];
    args.extend_from_slice(SMALL);
    let out = stimtrain(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--sample"));
}

#[test]
fn single_block_network_has_one_mask_with_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(
        dir.path(),
        "one",
        "common",
        &["--set", "network.blocks=[1]"],
    );
    let ev = dir.path().join("ev");
    let ckpt = run.join("final.ckpt");
    let mut args = vec![
        "eval-subnets",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&ev),
        "--set",
        "network.blocks=[1]",
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    assert_eq!(jsonl(&ev.join("subnets.jsonl")).len(), 1);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["std"], 0.0);
}

#[test]
fn corrupted_checkpoint_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "ct", "common", &[]);
    let ckpt = run.join("final.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckpt, bytes).unwrap();
    let mut args = vec!["eval-subnets", "--checkpoint", s(&ckpt)];
    args.extend_from_slice(SMALL);
    let out = stimtrain(&args);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupted"));
}

#[test]
fn destruct_levels_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ct = train(dir.path(), "ct", "common", &[]);
    let st = train(dir.path(), "st", "stimulative", &[]);
    let (ctc, stc) = (ct.join("final.ckpt"), st.join("final.ckpt"));
    let run = |kind: &str, name: &str| {
        let out = dir.path().join(name);
        let mut args = vec![
            "destruct",
            "--ct",
            s(&ctc),
            "--st",
            s(&stc),
            "--kind",
            kind,
            "--out",
            s(&out),
        ];
        args.extend_from_slice(SMALL);
        ok(&args);
        let report: Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap())
                .unwrap();
        (report, jsonl(&out.join("drops.jsonl")))
    };
    let (report, _) = run("permute", "perm");
    let counts: Vec<u64> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["plans"].as_u64().unwrap())
        .collect();
    assert_eq!(counts, [5, 9, 7, 2]);
    let (_, drops) = run("delete-one", "del");
    assert_eq!(drops.len(), 9);

    let mut args = vec![
        "destruct",
        "--ct",
        s(&ctc),
        "--st",
        s(&stc),
        "--kind",
        "delete-k",
        "--max-k",
        "0",
    ];
    args.extend_from_slice(SMALL);
    assert_eq!(code(&stimtrain(&args)), 2);

    // a network of another shape is incompatible
    let other = train(
        dir.path(),
        "other",
        "common",
        &["--set", "network.blocks=[2,2]"],
    );
    let oc = other.join("final.ckpt");
    let mut args = vec![
        "destruct",
        "--ct",
        s(&ctc),
        "--st",
        s(&oc),
        "--kind",
        "delete-one",
    ];
    args.extend_from_slice(SMALL);
    let out = stimtrain(&args);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));
}

#[test]
fn plan_files_drive_destruction() {
    let dir = tempfile::tempdir().unwrap();
    let ct = train(dir.path(), "ct", "common", &[]);
    let ckpt = ct.join("final.ckpt");
    let plans = ok(&["plans", "--kind", "permute", "--level", "2"]).stdout;
    let file = dir.path().join("plans.jsonl");
    std::fs::write(&file, [b"# chosen plans\n".as_slice(), &plans].concat()).unwrap();
    let out = dir.path().join("d");
    let mut args = vec![
        "destruct",
        "--ct",
        s(&ckpt),
        "--st",
        s(&ckpt),
        "--plans",
        s(&file),
        "--out",
        s(&out),
    ];
    args.extend_from_slice(SMALL);
    ok(&args);
    let drops = jsonl(&out.join("drops.jsonl"));
    assert_eq!(drops.len(), 9);
    // the same network on both sides sees identical damage
    assert!(drops
        .iter()
        .all(|d| d["drop_common"] == d["drop_stimulative"]));

    std::fs::write(
        &file,
        "{\"kind\":\"permute\",\"targets\":[1],\"complexity\":1}\n",
    )
    .unwrap();
    let mut args = vec![
        "destruct",
        "--ct",
        s(&ckpt),
        "--st",
        s(&ckpt),
        "--plans",
        s(&file),
    ];
    args.extend_from_slice(SMALL);
    let out = stimtrain(&args);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn kl_tracking_and_bound_check_over_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = train(dir.path(), "st", "stimulative", &[]);
    let kl = dir.path().join("kl");
    ok(&["track-kl", s(&run), "--out", s(&kl)]);
    let snaps = jsonl(&kl.join("kl.jsonl"));
    assert_eq!(snaps.len(), 3);
    for snap in &snaps {
        let main = snap["per_mask"]
            .as_array()
            .unwrap()
            .iter()
            .find(|m| m["mask"] == serde_json::json!([2, 3, 4, 2, 3]))
            .unwrap();
        assert_eq!(main["kl_per_sample"], 0.0);
    }
    let bc = dir.path().join("bc");
    ok(&["bound-check", s(&run), "--out", s(&bc)]);
    let rows = jsonl(&bc.join("bound.jsonl"));
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["all_hold"] == true));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = stimtrain(&["track-kl", s(&empty)]);
    assert_eq!(code(&out), 3);
    assert_ne!(code(&stimtrain(&["bound-check", s(&empty)])), 0);
}

#[test]
fn replay_reproduces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["common", "stimulative", "stochastic-depth", "individual"] {
        let run = train(dir.path(), mode, mode, &[]);
        let again = dir.path().join(format!("{mode}-replay"));
        ok(&[
            "replay",
            s(&run.join("manifest.json")),
            "--out",
            s(&again),
            "--verify",
        ]);
        assert_eq!(
            std::fs::read(run.join("metrics.jsonl")).unwrap(),
            std::fs::read(again.join("metrics.jsonl")).unwrap()
        );
    }
    // a tampered artifact is caught
    let run = dir.path().join("common");
    std::fs::write(run.join("final_eval.json"), "{}").unwrap();
    let out = stimtrain(&[
        "replay",
        s(&run),
        "--out",
        s(&dir.path().join("x")),
        "--verify",
    ]);
    assert_ne!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stderr).contains("final_eval.json"));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--mode", "common"];
    args.extend_from_slice(SMALL);
    let out = Command::new(BIN)
        .args(&args)
        .env("STIMTRAIN_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let runs: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].as_ref().unwrap().file_name();
    assert!(name.to_string_lossy().starts_with("train-"));
}

#[test]
fn config_prints_resolved_toml() {
    let out = ok(&["config", "--set", "train.lambda=2.5", "--seed", "7"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let table: toml::Table = toml::from_str(&text).unwrap();
    assert_eq!(table["train"]["lambda"].as_float(), Some(2.5));
    assert_eq!(table["data"]["seed"].as_integer(), Some(7));
}

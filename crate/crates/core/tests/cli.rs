use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_posefree"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn posefree")
}

const SMALL: &str = r#"{
  "model": {
    "res": 16, "patch": 4, "width": 16, "heads": 2, "ffn_mult": 1,
    "backbone_blocks": 1, "encoder_blocks": 1, "mapping_blocks": 1,
    "volume_res": 4, "field_res": 16, "feature_channels": 4, "decoder_channels": [8, 8],
    "render": { "n_samples": 8, "density_scale": 8.0, "stratified": false }
  },
  "train": { "steps": 2, "batch": 1, "warmup": 1, "log_every": 1 },
  "data": {
    "scene": { "res": 16, "grid_res": 24, "oracle_samples": 24 },
    "train_scenes": 2, "eval_scenes": 2, "probe_scenes": 1
  }
}"#;

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn gen_data_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b, &a] {
        let o = run(&[
            "gen-data",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = tree(&a);
    assert!(!ta.is_empty());
    assert_eq!(ta, tree(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["gen-data", "--bogus", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ \"model\": { \"res\": ").unwrap();
    let o = run(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    std::fs::write(&bad, "{ \"model\": { \"unknown_key\": 1 } }").unwrap();
    let o = run(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = run(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--out",
        tmp.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));
}

#[test]
fn train_then_eval_writes_finite_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let run_dir = tmp.path().join("run");
    let o = run(&["train", "--config", cfg, "--out", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(run_dir.join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,loss,lr,"));
    assert_eq!(log.lines().count(), 3);

    let ck = run_dir.join("checkpoint.json");
    let eval_dir = tmp.path().join("eval");
    let o = run(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval_report.json")).unwrap())
            .unwrap();
    let mean = report["mean_psnr"].as_f64().unwrap();
    assert!(mean.is_finite() && mean > 0.0, "{mean}");
    assert_eq!(report["scenes"].as_array().unwrap().len(), 2);

    let again = tmp.path().join("eval2");
    let o = run(&[
        "eval",
        "--config",
        cfg,
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(eval_dir.join("eval_report.json")).unwrap(),
        std::fs::read(again.join("eval_report.json")).unwrap()
    );
}

#[test]
fn experiment_commands_write_their_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let run_dir = tmp.path().join("run");
    assert!(
        run(&["train", "--config", cfg, "--out", run_dir.to_str().unwrap()])
            .status
            .success()
    );
    let ck = run_dir.join("checkpoint.json");
    let ck = ck.to_str().unwrap();
    let out = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();

    let o = run(&[
        "probe-epipolar",
        "--config",
        cfg,
        "--checkpoint",
        ck,
        "--out",
        &out("probe"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("probe/probe.json").exists());

    let o = run(&[
        "pose-noise",
        "--config",
        cfg,
        "--checkpoint",
        ck,
        "--sigmas",
        "0,15",
        "--out",
        &out("noise"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("noise/pose_noise.json")).unwrap(),
    )
    .unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["mean_psnr"], rows[1]["mean_psnr"]);

    let o = run(&[
        "inspect-attn",
        "--config",
        cfg,
        "--checkpoint",
        ck,
        "--out",
        &out("attn"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("attn/encoder0.nvu.ppm").exists());

    let pose = ["1", "0", "0", "0", "0", "1", "0", "0", "0", "0", "1", "0"];
    let mut args = vec!["render", "--config", cfg, "--checkpoint", ck, "--pose"];
    args.extend(pose);
    let dir = out("render");
    args.extend(["--out", dir.as_str()]);
    let o = run(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("render/view_0.ppm").exists());
}

#[test]
fn ablate_emits_one_report_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = tmp.path().join("abl");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in [
        "full",
        "no_encoder",
        "gcr_only",
        "nvu_only",
        "mapping_2",
        "world_frame",
    ] {
        assert!(out.join(v).join("eval_report.json").exists(), "{v}");
    }
    assert!(std::fs::read_to_string(out.join("ablation.txt"))
        .unwrap()
        .contains("world_frame"));
}

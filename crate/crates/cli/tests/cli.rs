use std::path::Path;
use std::process::Command;

use clap::Parser;
use tags_cli::{run, Cli};
use tags_core::io::{load_mask, DatasetManifest};
use tags_core::model::{ModelConfig, TagsModel};
use tags_core::pipeline::{Checkpoint, TrainConfig, TrainingState};

fn tags(args: &[&str]) -> anyhow::Result<String> {
    let cli = Cli::try_parse_from(std::iter::once("tags").chain(args.iter().copied()))?;
    let mut out = Vec::new();
    run(cli, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn random_checkpoint(dir: &Path) -> String {
    let cfg = ModelConfig::tiny();
    let (_, store) = TagsModel::init(&cfg, 5).unwrap();
    let path = dir.join("rand.ckpt");
    Checkpoint::new(&cfg, store, TrainingState::default(), Some(TrainConfig::tiny()))
        .save(&path)
        .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn phantom_writes_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let text = tags(&["phantom", "--out", out, "--cases", "2", "--size", "32"]).unwrap();
    assert!(text.contains("phantom001"));
    let m = DatasetManifest::load(&dir.path().join("manifest.json"), None).unwrap();
    assert_eq!(m.cases.len(), 2);
    let case = m.load_case(&m.cases[1]).unwrap();
    assert_eq!(case.image.shape(), [32, 32, 32]);
    assert!(!case.tumor.is_empty());
    assert!(tags(&["phantom", "--out", out, "--size", "8"]).is_err());

    let ladder = dir.path().join("ladder");
    tags(&["phantom", "--out", ladder.to_str().unwrap(), "--size", "32", "--tumor-hu", "190,120", "--jitter", "0"]).unwrap();
    let m = DatasetManifest::load(&ladder.join("manifest.json"), None).unwrap();
    assert_eq!(m.cases.len(), 2);
    let a = m.load_case(&m.cases[0]).unwrap();
    let b = m.load_case(&m.cases[1]).unwrap();
    assert_eq!(a.tumor, b.tumor);
    let mean_in = |c: &tags_core::io::LoadedCase| {
        let v = c.tumor.voxels();
        v.iter().map(|p| c.image.data[*p]).sum::<f64>() / v.len() as f64
    };
    assert!(mean_in(&a) > mean_in(&b) + 50.0);
}

#[test]
fn config_round_trips_through_train_loader() {
    let dir = tempfile::tempdir().unwrap();
    let toml = tags(&["config", "--tiny"]).unwrap();
    let path = dir.path().join("tiny.toml");
    std::fs::write(&path, toml).unwrap();
    assert_eq!(TrainConfig::load(&path).unwrap(), TrainConfig::tiny());
    let full = tags(&["config"]).unwrap();
    assert!(full.contains("lr = 0.0001"));
}

#[test]
fn train_infer_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tags(&["phantom", "--out", d.to_str().unwrap(), "--cases", "2", "--size", "32"]).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(2),
        ..TrainConfig::tiny()
    };
    std::fs::write(d.join("cfg.toml"), cfg.to_toml()).unwrap();
    let ckpt = d.join("m.ckpt");
    let log = d.join("log.jsonl");
    let text = tags(&[
        "train",
        "--config",
        d.join("cfg.toml").to_str().unwrap(),
        "--data-root",
        d.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ])
    .unwrap();
    assert!(text.contains("trained 2 steps"));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["step"], 1);
    assert_eq!(lines[0]["alignment"].as_array().unwrap().len(), 2);
    assert!(lines[0]["dice"].is_number() && lines[0]["loss"].is_number());

    let mask = d.join("pred.nii.gz");
    let summary = tags(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--volume",
        d.join("phantom000_image.nii.gz").to_str().unwrap(),
        "--organ",
        d.join("phantom000_organ.nii.gz").to_str().unwrap(),
        "--points",
        "16,15,18:fg",
        "3,3,3:bg",
        "--out",
        mask.to_str().unwrap(),
    ])
    .unwrap();
    let v: serde_json::Value = serde_json::from_str(summary.trim()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 2);
    assert_eq!(load_mask(&mask).unwrap().count() as u64, v["voxels"].as_u64().unwrap());

    let table = tags(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data-root", d.to_str().unwrap()]).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    for (i, name) in ["random(1)", "edge(1)", "edge(3)", "central(1)", "ICC"].iter().enumerate() {
        assert!(rows[i + 1].starts_with(name), "{table}");
    }
    let one = tags(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--manifest",
        d.join("manifest.json").to_str().unwrap(),
        "--strategy",
        "edge",
        "--points",
        "3",
    ])
    .unwrap();
    assert!(one.lines().nth(1).unwrap().starts_with("edge(3)"), "{one}");
}

#[test]
fn infer_by_strategy_needs_tumor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tags(&["phantom", "--out", d.to_str().unwrap(), "--size", "32"]).unwrap();
    let ckpt = random_checkpoint(d);
    let img = d.join("phantom000_image.nii.gz");
    let organ = d.join("phantom000_organ.nii.gz");
    let tumor = d.join("phantom000_tumor.nii.gz");
    let base = ["infer", "--ckpt", &ckpt, "--volume", img.to_str().unwrap(), "--organ", organ.to_str().unwrap()];
    assert!(tags(&[&base[..], &["--strategy", "central"]].concat()).is_err());
    let out = tags(&[&base[..], &["--strategy", "edge", "--k", "3", "--tumor", tumor.to_str().unwrap()]].concat()).unwrap();
    let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 3);
    assert!(tags(&base).is_err());
    assert!(tags(&[&base[..], &["--points", "1,2"]].concat()).is_err());
    assert!(tags(&[&base[..], &["--points", "99,0,0:fg"]].concat()).is_err());
}

#[test]
fn binary_reads_data_root_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_tags");
    let st = Command::new(bin)
        .args(["phantom", "--out", dir.path().to_str().unwrap(), "--size", "32"])
        .output()
        .unwrap();
    assert!(st.status.success());
    let ckpt = random_checkpoint(dir.path());
    let out = Command::new(bin)
        .args(["eval", "--ckpt", &ckpt, "--strategy", "central"])
        .env("TAGS_DATA_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("central(1)"));
    let out = Command::new(bin)
        .args(["eval", "--ckpt", &ckpt])
        .env_remove("TAGS_DATA_ROOT")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

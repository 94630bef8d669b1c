mod common;

use std::fs;

use common::{dmf, dmf_ok, tiny_config, workspace};

#[test]
fn help_lists_every_subcommand_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let top = String::from_utf8(dmf_ok(dir.path(), &["--help"]).stdout).unwrap();
    let subcommands: &[(&str, &[&str])] = &[
        ("gen-data", &["--config", "--out"]),
        ("pretrain", &["--config", "--data", "--out", "--log", "--no-text", "--no-image"]),
        ("finetune", &["--config", "--data", "--out", "--log", "--init", "--from-scratch"]),
        ("resume", &["--data", "--ckpt", "--out", "--log"]),
        ("eval", &["--config", "--data", "--ckpt", "--report"]),
        ("rank", &["--ckpt", "--data", "--queries", "--top-k", "--out"]),
        ("attn-dump", &["--ckpt", "--image", "--layer", "--out"]),
        ("ablation", &["--config", "--data", "--seeds", "--out"]),
    ];
    for (name, flags) in subcommands {
        assert!(top.contains(name), "{name} missing from --help");
        let help = String::from_utf8(dmf_ok(dir.path(), &[name, "--help"]).stdout).unwrap();
        for flag in *flags {
            assert!(help.contains(flag), "{flag} missing from `{name} --help`");
        }
    }
    assert!(top.contains("DMF_THREADS"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let code = |args: &[&str]| {
        let out = dmf(p, args);
        let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
        (out.status.code().unwrap(), stderr)
    };

    let (c, e) = code(&["pretrain", "--data", "data", "--out", "x.ckpt", "--no-text", "--no-image"]);
    assert_eq!(c, 2);
    assert!(e.starts_with("error[config]"), "{e}");

    fs::write(p.join("bad.json"), r#"{"train": {"p": 0}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", "bad.json", "--out", "data"]).0, 2);
    fs::write(p.join("typo.json"), r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", "typo.json", "--out", "data"]).0, 2);

    let (c, e) = code(&["eval", "--data", "nowhere", "--ckpt", "x.ckpt", "--report", "r.json"]);
    assert_eq!(c, 3);
    assert!(e.starts_with("error[data]"), "{e}");

    workspace(p, &tiny_config());
    let (c, e) = code(&["eval", "--data", "data", "--ckpt", "missing.ckpt", "--report", "r.json"]);
    assert_eq!(c, 4);
    assert!(e.starts_with("error[checkpoint]"), "{e}");
    fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["finetune", "--data", "data", "--out", "f.ckpt", "--init", "junk.ckpt"]).0, 4);

    let mut cfg = tiny_config();
    cfg.train.p = 50;
    fs::write(p.join("big.json"), cfg.to_json_pretty()).unwrap();
    let (c, e) = code(&["finetune", "--config", "big.json", "--data", "data", "--out", "f.ckpt", "--from-scratch"]);
    assert_eq!(c, 3, "{e}");

    let out = dmf(p, &["finetune", "--data", "data", "--out", "f.ckpt"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    workspace(p, &tiny_config());
    dmf_ok(p, &["pretrain", "--config", "config.json", "--data", "data", "--out", "pre.ckpt"]);
    assert_eq!(fs::read_to_string(p.join("pre.jsonl")).unwrap().lines().count(), 6);
    dmf_ok(p, &["finetune", "--config", "config.json", "--data", "data", "--out", "ft.ckpt", "--init", "pre.ckpt"]);

    let shown = dmf_ok(p, &["eval", "--data", "data", "--ckpt", "ft.ckpt", "--report", "r1.json"]);
    assert!(String::from_utf8(shown.stdout).unwrap().contains("mAP"));
    dmf_ok(p, &["eval", "--data", "data", "--ckpt", "ft.ckpt", "--report", "r2.json"]);
    assert_eq!(fs::read(p.join("r1.json")).unwrap(), fs::read(p.join("r2.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("r1.json")).unwrap()).unwrap();
    for key in ["rank1", "rank5", "rank10", "map", "cmc", "per_query", "checkpoint_id", "config"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }

    let manifest = dmf_core::synthdata::DatasetManifest::load(&p.join("data")).unwrap();
    let id = manifest.query[0].identity_id.to_string();
    dmf_ok(p, &["rank", "--ckpt", "ft.ckpt", "--data", "data", "--queries", &id, "--out", "grid"]);
    let sidecar: serde_json::Value = serde_json::from_slice(&fs::read(p.join("grid/ranking.json")).unwrap()).unwrap();
    assert_eq!(sidecar["top_k"], 3);
    assert_eq!(dmf(p, &["rank", "--ckpt", "ft.ckpt", "--data", "data", "--queries", "9999", "--out", "g"]).status.code(), Some(2));

    let image = format!("data/{}", manifest.query[0].file);
    dmf_ok(p, &["attn-dump", "--ckpt", "ft.ckpt", "--image", &image, "--layer", "0", "--out", "attn"]);
    assert!(p.join("attn/attention.f32").exists());
    assert!(p.join("attn/head_1.pgm").exists());
    assert_eq!(dmf(p, &["attn-dump", "--ckpt", "ft.ckpt", "--image", &image, "--layer", "3", "--out", "a"]).status.code(), Some(2));
}

#[test]
fn ablation_prints_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    workspace(p, &tiny_config());
    let out = dmf_ok(p, &["ablation", "--config", "config.json", "--data", "data", "--seeds", "1", "--out", "abl"]);
    let table = String::from_utf8(out.stdout).unwrap();
    for label in ["Base.", "w/ Text", "w/ Image", "w/ Text&Image"] {
        assert!(table.contains(label), "{label} missing:\n{table}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(p.join("abl/ablation.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert_eq!(fs::read_to_string(p.join("abl/ablation.txt")).unwrap(), table);
}

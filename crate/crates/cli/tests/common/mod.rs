#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use dmf_core::config::RunConfig;
use dmf_core::trainer::Budget;

pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.pretrain.identities = 6;
    cfg.data.pretrain.images_per_identity = 4;
    cfg.data.finetune.identities = 5;
    cfg.data.finetune.images_per_identity = 4;
    cfg.data.test.identities = 4;
    cfg.data.test.queries_per_identity = 1;
    cfg.data.test.gallery_per_identity = 3;
    cfg.data.min_images_per_identity = 2;
    cfg.model.image_dim = 16;
    cfg.model.text_dim = 8;
    cfg.model.transformer.depth = 1;
    cfg.model.transformer.heads = 2;
    cfg.model.transformer.model_dim = 16;
    cfg.model.transformer.mlp_ratio = 2;
    cfg.train.p = 3;
    cfg.train.k = 2;
    cfg.train.n1 = Budget::Steps(6);
    cfg.train.n2 = Budget::Steps(6);
    cfg.eval.top_k = 3;
    cfg
}

/// Runs `dmf` inside `dir` with a single worker thread.
pub fn dmf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmf"))
        .args(args)
        .current_dir(dir)
        .env("DMF_THREADS", "1")
        .output()
        .expect("dmf runs")
}

pub fn dmf_ok(dir: &Path, args: &[&str]) -> Output {
    let out = dmf(dir, args);
    assert!(
        out.status.success(),
        "dmf {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// A directory holding `config.json` and a generated dataset under `data/`.
pub fn workspace(dir: &Path, cfg: &RunConfig) {
    std::fs::write(dir.join("config.json"), cfg.to_json_pretty()).unwrap();
    dmf_ok(dir, &["gen-data", "--config", "config.json", "--out", "data"]);
}

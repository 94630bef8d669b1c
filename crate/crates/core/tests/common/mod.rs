#![allow(dead_code)]

use std::path::Path;

use dmf_core::config::RunConfig;
use dmf_core::synthdata::{build_dataset, DatasetManifest};
use dmf_core::trainer::Budget;

/// A run small enough for a few seconds of training: 64×32 images, a narrow
/// one-block transformer and 3×2 batches.
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
    cfg.train.n1 = Budget::Steps(8);
    cfg.train.n2 = Budget::Steps(8);
    cfg.eval.top_k = 3;
    cfg
}

pub fn dataset(cfg: &RunConfig, dir: &Path) -> DatasetManifest {
    build_dataset(&cfg.data, dir).unwrap()
}

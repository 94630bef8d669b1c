mod common;

use dmf_core::attention::{image_attention, read_attention, write_attention};
use dmf_core::fusion::Modality;
use dmf_core::retrieval_eval::{evaluate, export_ranking_grid, extract_features, retrieve};
use dmf_core::synthdata::{load_images, read_png};
use dmf_core::trainer::{finetune, pretrain};

fn setup(dir: &std::path::Path) -> (dmf_core::config::RunConfig, dmf_core::synthdata::DatasetManifest, dmf_core::checkpoint::Checkpoint) {
    let cfg = common::tiny_config();
    let root = dir.join("data");
    let manifest = common::dataset(&cfg, &root);
    let pre = pretrain(&root, &cfg, &[Modality::Image, Modality::Text], &dir.join("pre.ckpt"), None).unwrap();
    let ft = finetune(&root, &cfg, Some(&pre), &dir.join("ft.ckpt"), None).unwrap();
    (cfg, manifest, ft)
}

#[test]
fn features_are_deterministic_unit_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest, ckpt) = setup(dir.path());
    let root = dir.path().join("data");
    let a = extract_features(&root, &manifest.gallery, &ckpt).unwrap();
    let b = extract_features(&root, &manifest.gallery, &ckpt).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), manifest.gallery.len());
    for (row, rec) in a.rows.iter().zip(&manifest.gallery) {
        assert_eq!(row.identity_id, rec.identity_id);
        assert_eq!(row.camera_id, rec.camera_id);
        assert_eq!(row.feature.len(), 16);
        let norm = row.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn eval_reports_are_reproducible_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest, ckpt) = setup(dir.path());
    let root = dir.path().join("data");
    let a = evaluate(&root, &manifest, &ckpt, &cfg).unwrap();
    let b = evaluate(&root, &manifest, &ckpt, &cfg).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.checkpoint_id, ckpt.id());
    assert_eq!(a.metrics.per_query.len(), manifest.query.len());
    assert!(a.metrics.cmc.windows(2).all(|w| w[0] <= w[1]));
    assert!((0.0..=1.0).contains(&a.metrics.map));
    assert_eq!(a.rank1, a.metrics.cmc[0]);
    assert!(a.table().contains("Rank-1"));
}

#[test]
fn ranking_strips_follow_the_relevance_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, manifest, ckpt) = setup(dir.path());
    let root = dir.path().join("data");
    let r = retrieve(&root, &manifest, &ckpt).unwrap();
    let out = dir.path().join("grid");
    let queries: Vec<usize> = (0..manifest.query.len()).collect();
    let side = export_ranking_grid(&root, &manifest, &r, &queries, 15, &out, &ckpt.id(), &cfg).unwrap();
    let (h, w) = (manifest.image_height, manifest.image_width);
    for strip in &side.strips {
        let q = &manifest.query[strip.query];
        let valid = manifest
            .gallery
            .iter()
            .filter(|g| !(g.identity_id == q.identity_id && g.camera_id == q.camera_id))
            .count();
        assert_eq!(strip.shown_k, valid.min(15));
        assert_eq!(strip.truncated, valid < 15);
        let png = read_png(&out.join(&strip.image)).unwrap();
        assert_eq!(png.shape(), &[h, (1 + strip.shown_k) * w, 3]);
        for (slot, e) in strip.entries.iter().enumerate() {
            let g = &manifest.gallery[e.gallery];
            assert_ne!((g.identity_id, g.camera_id), (q.identity_id, q.camera_id));
            assert_eq!(e.matched, g.identity_id == q.identity_id);
            let x = (slot + 1) * w;
            let px = &png.data()[x * 3..x * 3 + 3];
            let green = px[1] > 0.5 && px[0] < 0.1;
            let red = px[0] > 0.5 && px[1] < 0.1;
            assert!(if e.matched { green } else { red }, "slot {slot} border {px:?}");
        }
        let query_px = load_images(&root, std::slice::from_ref(q)).unwrap();
        assert_eq!(&png.data()[..3], &query_px[0].pixels.data()[..3].iter().map(|v| (v * 255.0).round() / 255.0).collect::<Vec<_>>()[..]);
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ranking.json")).unwrap()).unwrap();
    assert_eq!(json["top_k"], 15);
}

#[test]
fn attention_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (_, manifest, ckpt) = setup(dir.path());
    let root = dir.path().join("data");
    let img = &load_images(&root, &manifest.query[..1]).unwrap()[0];
    let export = image_attention(&ckpt, img, 0).unwrap();
    assert_eq!(export.heads, 2);
    assert_eq!(export.tokens, 33);
    assert_eq!(export.grid, (8, 4));
    assert_eq!(export.cls_map(1).len(), 32);
    for row in export.weights.chunks(33) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let out = dir.path().join("attn");
    write_attention(&out, &export, "q0", &ckpt.id(), (8, 8)).unwrap();
    let bytes = std::fs::read(out.join("attention.f32")).unwrap();
    let header: Vec<&[u8]> = bytes.split(|&b| b == b'\n').take(8).collect();
    assert_eq!(header[0], b"DMF-ATTENTION 1");
    assert_eq!(header[5], b"sample q0");
    let back = read_attention(&out.join("attention.f32")).unwrap();
    assert_eq!((back.heads, back.tokens, back.grid, back.layer), (2, 33, (8, 4), 0));
    for (a, b) in back.weights.iter().zip(&export.weights) {
        assert_eq!(*a, *b as f32 as f64);
    }
    let pgm = std::fs::read(out.join("head_0.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 64\n255\n"));
    assert_eq!(pgm.len(), b"P5\n32 64\n255\n".len() + 32 * 64);
    assert!(image_attention(&ckpt, img, 1).is_err());
}

//! Retrieval evaluation: feature extraction, distance ranking, CMC and mAP
//! with same-identity same-camera exclusion, and ranking-strip export.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{split_patches, TranslatorInput};
use crate::numerics::DenseArray;
use crate::synthdata::{load_images, write_png, DatasetManifest, SampleRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub identity_id: u32,
    pub camera_id: u32,
    pub domain_id: u32,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub rows: Vec<FeatureRow>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.rows.first().map(|r| r.feature.len())
    }
}

const EXTRACT_CHUNK: usize = 64;

/// Eval-mode retrieval features for every record, in record order.
pub fn extract_features(root: &Path, records: &[SampleRecord], ckpt: &Checkpoint) -> Result<FeatureSet> {
    let model = ckpt.validate_against(None)?;
    let cfg = model.config();
    let mut rows = Vec::with_capacity(records.len());
    for chunk in records.chunks(EXTRACT_CHUNK) {
        let images = load_images(root, chunk)?;
        let grids = images
            .iter()
            .map(|img| split_patches(img, cfg.patch_height, cfg.patch_width))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<_> = grids.iter().map(TranslatorInput::Patches).collect();
        let feats = model.embed(&ckpt.params, &inputs)?;
        for (i, img) in images.iter().enumerate() {
            rows.push(FeatureRow {
                identity_id: img.identity_id,
                camera_id: img.camera_id,
                domain_id: img.domain_id,
                feature: feats.row(i).to_vec(),
            });
        }
    }
    Ok(FeatureSet { rows })
}

/// Gallery order for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    /// Gallery indices, nearest first.
    pub order: Vec<usize>,
    /// Parallel to `order`: same identity and same camera as the query.
    pub invalid: Vec<bool>,
}

impl RankedList {
    /// Valid gallery indices, nearest first.
    pub fn valid(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().zip(&self.invalid).filter(|(_, &bad)| !bad).map(|(&g, _)| g)
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sorts the gallery by squared Euclidean distance to each query; ties go to
/// the lower gallery index.
pub fn rank(query: &FeatureSet, gallery: &FeatureSet) -> Result<Vec<RankedList>> {
    if let (Some(dq), Some(dg)) = (query.dim(), gallery.dim()) {
        if dq != dg || query.rows.iter().chain(&gallery.rows).any(|r| r.feature.len() != dq) {
            return Err(Error::Shape {
                op: "rank",
                detail: format!("query dim {dq}, gallery dim {dg}"),
            });
        }
    }
    Ok(query
        .rows
        .iter()
        .map(|q| {
            let d: Vec<f64> = gallery.rows.iter().map(|g| sq_dist(&q.feature, &g.feature)).collect();
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            let invalid = order
                .iter()
                .map(|&g| {
                    let g = &gallery.rows[g];
                    g.identity_id == q.identity_id && g.camera_id == q.camera_id
                })
                .collect();
            RankedList { order, invalid }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: usize,
    pub identity_id: u32,
    /// Absent when the query was dropped.
    pub ap: Option<f64>,
    pub valid_gallery: usize,
    pub relevant: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `cmc[k-1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub evaluated: usize,
    pub dropped: usize,
    pub per_query: Vec<QueryResult>,
}

impl Metrics {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }
}

/// CMC up to `max_rank` and mAP. A gallery item is relevant to a query when it
/// is valid, has the same identity, and comes from another camera. Queries
/// with no valid gallery or no relevant item are dropped from the averages.
pub fn compute_cmc_map(ranked: &[RankedList], query: &FeatureSet, gallery: &FeatureSet, max_rank: usize) -> Metrics {
    let mut hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut evaluated = 0;
    let mut per_query = Vec::with_capacity(ranked.len());
    for (qi, list) in ranked.iter().enumerate() {
        let q = &query.rows[qi];
        let rel: Vec<bool> = list.valid().map(|g| gallery.rows[g].identity_id == q.identity_id).collect();
        let relevant = rel.iter().filter(|&&r| r).count();
        let mut result = QueryResult {
            query: qi,
            identity_id: q.identity_id,
            ap: None,
            valid_gallery: rel.len(),
            relevant,
            note: None,
        };
        if rel.is_empty() {
            result.note = Some("no valid gallery entry".into());
        } else if relevant == 0 {
            result.note = Some("no relevant gallery entry".into());
        } else {
            let mut found = 0;
            let mut precision_sum = 0.0;
            for (r, &is_rel) in rel.iter().enumerate() {
                if is_rel {
                    found += 1;
                    precision_sum += found as f64 / (r + 1) as f64;
                }
            }
            let first = rel.iter().position(|&r| r).expect("relevant exists");
            for h in hits.iter_mut().skip(first) {
                *h += 1;
            }
            let ap = precision_sum / relevant as f64;
            ap_sum += ap;
            evaluated += 1;
            result.ap = Some(ap);
        }
        per_query.push(result);
    }
    let denom = evaluated.max(1) as f64;
    Metrics {
        cmc: hits.iter().map(|&h| h as f64 / denom).collect(),
        map: ap_sum / denom,
        evaluated,
        dropped: ranked.len() - evaluated,
        per_query,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub checkpoint_id: String,
    pub config: RunConfig,
}

impl EvalReport {
    /// Rank-1 / Rank-5 / Rank-10 / mAP as percentages.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>8.1} {:>8.1} {:>8.1} {:>8.1}\n",
            "Rank-1",
            "Rank-5",
            "Rank-10",
            "mAP",
            100.0 * self.rank1,
            100.0 * self.rank5,
            100.0 * self.rank10,
            100.0 * self.metrics.map
        )
    }
}

/// Query and gallery features of the test split plus their rankings.
pub struct Retrieval {
    pub query: FeatureSet,
    pub gallery: FeatureSet,
    pub ranked: Vec<RankedList>,
}

pub fn retrieve(root: &Path, manifest: &DatasetManifest, ckpt: &Checkpoint) -> Result<Retrieval> {
    let query = extract_features(root, &manifest.query, ckpt)?;
    let gallery = extract_features(root, &manifest.gallery, ckpt)?;
    let ranked = rank(&query, &gallery)?;
    Ok(Retrieval { query, gallery, ranked })
}

/// Evaluates `ckpt` on the test split. `config` is echoed into the report.
pub fn evaluate(root: &Path, manifest: &DatasetManifest, ckpt: &Checkpoint, config: &RunConfig) -> Result<EvalReport> {
    let r = retrieve(root, manifest, ckpt)?;
    let metrics = compute_cmc_map(&r.ranked, &r.query, &r.gallery, config.eval.max_rank.max(10));
    Ok(EvalReport {
        rank1: metrics.rank(1),
        rank5: metrics.rank(5),
        rank10: metrics.rank(10),
        metrics,
        checkpoint_id: ckpt.id(),
        config: config.clone(),
    })
}

const BORDER: usize = 2;
const GREEN: [f64; 3] = [0.0, 0.8, 0.0];
const RED: [f64; 3] = [0.9, 0.0, 0.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripEntry {
    pub gallery: usize,
    pub file: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub matched: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Strip {
    pub query: usize,
    pub query_file: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub image: String,
    pub requested_k: usize,
    pub shown_k: usize,
    pub truncated: bool,
    pub entries: Vec<StripEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingSidecar {
    pub checkpoint_id: String,
    pub top_k: usize,
    pub strips: Vec<Strip>,
    pub config: RunConfig,
}

fn paint_border(canvas: &mut DenseArray, x0: usize, w: usize, color: [f64; 3]) {
    let (h, total_w) = (canvas.shape()[0], canvas.shape()[1]);
    let data = canvas.data_mut();
    for r in 0..h {
        for c in x0..x0 + w {
            if r < BORDER || r >= h - BORDER || c < x0 + BORDER || c >= x0 + w - BORDER {
                data[(r * total_w + c) * 3..(r * total_w + c) * 3 + 3].copy_from_slice(&color);
            }
        }
    }
}

fn blit(canvas: &mut DenseArray, x0: usize, img: &DenseArray) {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let total_w = canvas.shape()[1];
    let data = canvas.data_mut();
    for r in 0..h {
        data[(r * total_w + x0) * 3..(r * total_w + x0 + w) * 3].copy_from_slice(&img.data()[r * w * 3..(r + 1) * w * 3]);
    }
}

/// One PNG strip per selected query: the query image, then its top-k valid
/// gallery images framed green (same identity) or red. Writes
/// `query_<index>.png` files and `ranking.json` into `out`.
pub fn export_ranking_grid(
    root: &Path,
    manifest: &DatasetManifest,
    retrieval: &Retrieval,
    queries: &[usize],
    top_k: usize,
    out: &Path,
    checkpoint_id: &str,
    config: &RunConfig,
) -> Result<RankingSidecar> {
    if top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (h, w) = (manifest.image_height, manifest.image_width);
    let mut strips = Vec::with_capacity(queries.len());
    for &qi in queries {
        let list = retrieval
            .ranked
            .get(qi)
            .ok_or_else(|| Error::Config(format!("query index {qi} out of range (0..{})", retrieval.ranked.len())))?;
        let q = &retrieval.query.rows[qi];
        let shown: Vec<usize> = list.valid().take(top_k).collect();
        let mut records = vec![manifest.query[qi].clone()];
        records.extend(shown.iter().map(|&g| manifest.gallery[g].clone()));
        let images = load_images(root, &records)?;
        let mut canvas = DenseArray::zeros(&[h, w * records.len(), 3]);
        let mut entries = Vec::with_capacity(shown.len());
        for (slot, img) in images.iter().enumerate() {
            blit(&mut canvas, slot * w, &img.pixels);
            if slot > 0 {
                let g = shown[slot - 1];
                let matched = retrieval.gallery.rows[g].identity_id == q.identity_id;
                paint_border(&mut canvas, slot * w, w, if matched { GREEN } else { RED });
                entries.push(StripEntry {
                    gallery: g,
                    file: manifest.gallery[g].file.clone(),
                    identity_id: img.identity_id,
                    camera_id: img.camera_id,
                    matched,
                });
            }
        }
        let name = format!("query_{qi}.png");
        write_png(&out.join(&name), &canvas)?;
        strips.push(Strip {
            query: qi,
            query_file: manifest.query[qi].file.clone(),
            identity_id: q.identity_id,
            camera_id: q.camera_id,
            image: name,
            requested_k: top_k,
            shown_k: shown.len(),
            truncated: shown.len() < top_k,
            entries,
        });
    }
    let sidecar = RankingSidecar {
        checkpoint_id: checkpoint_id.to_string(),
        top_k,
        strips,
        config: config.clone(),
    };
    let path = out.join("ranking.json");
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(sidecar)
}

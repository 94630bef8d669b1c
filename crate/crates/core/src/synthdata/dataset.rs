//! Dataset generation and on-disk layout.
//!
//! ```text
//! <out>/manifest.json
//! <out>/vocabulary.json
//! <out>/attributes.json
//! <out>/images/<split>/<identity>_<camera>_<index>.png
//! <out>/captions/<identity>_<index>.json
//! ```

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::render::{render_image, DomainStyle, PersonImage};
use super::vocab::{
    caption_of, gen_identities, random_background, AttributeProfile, Caption, ATTRIBUTES_JSON,
    NUM_BACKGROUND, VOCABULARY_JSON,
};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub domains: Vec<DomainStyle>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSplitConfig {
    pub identities: usize,
    pub queries_per_identity: usize,
    pub gallery_per_identity: usize,
    pub domains: Vec<DomainStyle>,
}

/// Generator configuration. Every field has a desk-scale default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub image_height: usize,
    pub image_width: usize,
    /// Minimum images (and captions) per identity in every training split; the
    /// trainer's K.
    pub min_images_per_identity: usize,
    /// Minimum style distance between any held-out test domain and any
    /// training domain.
    pub min_style_distance: f64,
    pub pretrain: SplitConfig,
    pub finetune: SplitConfig,
    pub test: TestSplitConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        let dom = |domain_id, hue_shift, illumination_gain, background_palette, camera_count, noise_sigma| {
            DomainStyle {
                domain_id,
                hue_shift,
                illumination_gain,
                background_palette,
                camera_count,
                noise_sigma,
            }
        };
        Self {
            seed: 0,
            image_height: 64,
            image_width: 32,
            min_images_per_identity: 4,
            min_style_distance: 0.5,
            pretrain: SplitConfig {
                identities: 40,
                images_per_identity: 11,
                domains: vec![
                    dom(0, 0.0, 1.0, 101, 4, 0.02),
                    dom(1, 0.12, 0.8, 102, 4, 0.03),
                    dom(2, -0.15, 1.2, 103, 4, 0.02),
                ],
            },
            finetune: SplitConfig {
                identities: 30,
                images_per_identity: 12,
                domains: vec![dom(3, -0.05, 1.05, 201, 3, 0.02)],
            },
            test: TestSplitConfig {
                identities: 20,
                queries_per_identity: 2,
                gallery_per_identity: 8,
                domains: vec![dom(4, 0.25, 0.75, 301, 3, 0.04)],
            },
        }
    }
}

impl DataConfig {
    pub fn total_identities(&self) -> usize {
        self.pretrain.identities + self.finetune.identities + self.test.identities
    }

    fn all_domains(&self) -> impl Iterator<Item = &DomainStyle> {
        self.pretrain
            .domains
            .iter()
            .chain(&self.finetune.domains)
            .chain(&self.test.domains)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        for (name, n) in [
            ("pretrain", self.pretrain.domains.len()),
            ("finetune", self.finetune.domains.len()),
            ("test", self.test.domains.len()),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("{name} split names no domain")));
            }
        }
        let domains: Vec<&DomainStyle> = self.all_domains().collect();
        for d in &domains {
            d.validate()?;
        }
        let mut ids = HashSet::new();
        for d in &domains {
            if !ids.insert(d.domain_id) {
                return Err(Error::Config(format!("domain id {} used twice", d.domain_id)));
            }
        }
        for i in 0..domains.len() {
            for j in i + 1..domains.len() {
                if domains[i].same_style(domains[j]) {
                    return Err(Error::Config(format!(
                        "domains {} and {} have identical styles",
                        domains[i].domain_id, domains[j].domain_id
                    )));
                }
            }
        }
        for t in &self.test.domains {
            for s in self.pretrain.domains.iter().chain(&self.finetune.domains) {
                let d = t.distance(s);
                if d < self.min_style_distance {
                    return Err(Error::Config(format!(
                        "test domain {} is only {d:.3} from training domain {} (minimum {})",
                        t.domain_id, s.domain_id, self.min_style_distance
                    )));
                }
            }
        }
        let k = self.min_images_per_identity;
        for (name, split) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if split.identities < 2 {
                return Err(Error::Config(format!("{name} split needs at least 2 identities")));
            }
            if split.images_per_identity < k {
                return Err(Error::Config(format!(
                    "{name} split has {} images per identity, fewer than K = {k}",
                    split.images_per_identity
                )));
            }
        }
        let t = &self.test;
        if t.identities < 1 || t.queries_per_identity < 1 || t.gallery_per_identity < 1 {
            return Err(Error::Config(
                "test split needs identities with at least one query and one gallery image".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    /// Path relative to the dataset root.
    pub file: String,
    pub identity_id: u32,
    pub camera_id: u32,
    pub domain_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub generator: DataConfig,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub vocabulary: String,
    pub attributes: String,
    pub pretrain_images: Vec<SampleRecord>,
    pub pretrain_captions: Vec<SampleRecord>,
    pub finetune_images: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Finetune,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Finetune => "finetune",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

impl DatasetManifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "manifest format version {} unsupported (expected {MANIFEST_VERSION})",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Pretrain => &self.pretrain_images,
            Split::Finetune => &self.finetune_images,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    /// Checks the retrieval-split invariants: test identities are disjoint
    /// from fine-tuning identities and every query has a gallery entry of the
    /// same identity from another camera.
    pub fn check_retrieval_invariants(&self) -> Result<()> {
        let train: HashSet<u32> = self.finetune_images.iter().map(|r| r.identity_id).collect();
        if let Some(r) = self
            .query
            .iter()
            .chain(&self.gallery)
            .find(|r| train.contains(&r.identity_id))
        {
            return Err(Error::Data(format!(
                "test identity {} also appears in the fine-tuning split",
                r.identity_id
            )));
        }
        for q in &self.query {
            let matched = self
                .gallery
                .iter()
                .any(|g| g.identity_id == q.identity_id && g.camera_id != q.camera_id);
            if !matched {
                return Err(Error::Data(format!(
                    "query {} has no cross-camera gallery match",
                    q.file
                )));
            }
        }
        Ok(())
    }
}

struct RenderJob {
    split: Split,
    profile: AttributeProfile,
    style: DomainStyle,
    camera_id: u32,
    index: usize,
    noise_seed: u64,
}

impl RenderJob {
    fn file(&self) -> String {
        format!(
            "images/{}/{}_{}_{}.png",
            self.split.name(),
            self.profile.identity_id,
            self.camera_id,
            self.index
        )
    }

    fn record(&self) -> SampleRecord {
        SampleRecord {
            file: self.file(),
            identity_id: self.profile.identity_id,
            camera_id: self.camera_id,
            domain_id: self.style.domain_id,
        }
    }
}

/// Draws `n` pairwise-distinct background tuples (falls back to repeats only
/// when `n` exceeds the background space).
fn distinct_backgrounds<R: Rng>(rng: &mut R, n: usize) -> Vec<[u8; NUM_BACKGROUND]> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        let b = random_background(rng);
        attempts += 1;
        if seen.insert(b) || attempts > 10_000 {
            out.push(b);
        }
    }
    out
}

fn plan_jobs(cfg: &DataConfig, profiles: &[AttributeProfile]) -> Vec<RenderJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_DA7A);
    let (pre, rest) = profiles.split_at(cfg.pretrain.identities);
    let (fine, test) = rest.split_at(cfg.finetune.identities);
    let mut jobs = Vec::new();
    let plan = |split: Split, ids: &[AttributeProfile], per: usize, domains: &[DomainStyle], rng: &mut ChaCha8Rng| {
        let mut out = Vec::new();
        for p in ids {
            let backgrounds = distinct_backgrounds(rng, per);
            for (index, bgv) in backgrounds.into_iter().enumerate() {
                let style = domains[index % domains.len()].clone();
                let camera_id = (index as u32) % style.camera_count;
                out.push(RenderJob {
                    split,
                    profile: p.with_background(bgv),
                    style,
                    camera_id,
                    index,
                    noise_seed: rng.next_u64(),
                });
            }
        }
        out
    };
    jobs.extend(plan(Split::Pretrain, pre, cfg.pretrain.images_per_identity, &cfg.pretrain.domains, &mut rng));
    jobs.extend(plan(Split::Finetune, fine, cfg.finetune.images_per_identity, &cfg.finetune.domains, &mut rng));
    let per = cfg.test.queries_per_identity + cfg.test.gallery_per_identity;
    for mut job in plan(Split::Query, test, per, &cfg.test.domains, &mut rng) {
        if job.index >= cfg.test.queries_per_identity {
            job.split = Split::Gallery;
        }
        jobs.push(job);
    }
    jobs
}

pub fn quantize(pixels: &DenseArray) -> Vec<u8> {
    pixels
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_png(path: &Path, pixels: &DenseArray) -> Result<()> {
    let (h, w) = (pixels.shape()[0], pixels.shape()[1]);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    image::save_buffer_with_format(
        path,
        &quantize(pixels),
        w as u32,
        h as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an RGB PNG into `[H, W, 3]` values in [0, 1].
pub fn read_png(path: &Path) -> Result<DenseArray> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
    DenseArray::from_vec(&[h as usize, w as usize, 3], data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CaptionFile {
    identity_id: u32,
    domain_id: u32,
    camera_id: u32,
    image: String,
    tokens: Vec<String>,
}

/// Generates the whole dataset under `out_dir` and returns its manifest.
pub fn build_dataset(cfg: &DataConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    let profiles = gen_identities(cfg.total_identities(), cfg.seed)?;
    let jobs = plan_jobs(cfg, &profiles);

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for split in [Split::Pretrain, Split::Finetune, Split::Query, Split::Gallery] {
        let dir = out_dir.join("images").join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let cap_dir = out_dir.join("captions");
    fs::create_dir_all(&cap_dir).map_err(|e| Error::io(&cap_dir, e))?;

    let (h, w) = (cfg.image_height, cfg.image_width);
    jobs.par_iter().try_for_each(|job| -> Result<()> {
        let img = render_image(&job.profile, &job.style, job.camera_id, job.noise_seed, h, w)?;
        write_png(&out_dir.join(job.file()), &img.pixels)
    })?;

    let mut manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        generator: cfg.clone(),
        image_height: h,
        image_width: w,
        channels: 3,
        vocabulary: "vocabulary.json".into(),
        attributes: "attributes.json".into(),
        pretrain_images: Vec::new(),
        pretrain_captions: Vec::new(),
        finetune_images: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
    };
    for job in &jobs {
        let record = job.record();
        match job.split {
            Split::Pretrain => {
                let caption = caption_of(&job.profile, &job.profile.background, job.style.domain_id);
                let file = format!("captions/{}_{}.json", job.profile.identity_id, job.index);
                write_json(
                    &out_dir.join(&file),
                    &CaptionFile {
                        identity_id: caption.identity_id,
                        domain_id: caption.domain_id,
                        camera_id: job.camera_id,
                        image: record.file.clone(),
                        tokens: caption.tokens,
                    },
                )?;
                manifest.pretrain_captions.push(SampleRecord { file, ..record.clone() });
                manifest.pretrain_images.push(record);
            }
            Split::Finetune => manifest.finetune_images.push(record),
            Split::Query => manifest.query.push(record),
            Split::Gallery => manifest.gallery.push(record),
        }
    }
    manifest.check_retrieval_invariants()?;

    fs::write(out_dir.join("vocabulary.json"), VOCABULARY_JSON)
        .map_err(|e| Error::io(out_dir.join("vocabulary.json"), e))?;
    fs::write(out_dir.join("attributes.json"), ATTRIBUTES_JSON)
        .map_err(|e| Error::io(out_dir.join("attributes.json"), e))?;
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_images(root: &Path, records: &[SampleRecord]) -> Result<Vec<PersonImage>> {
    records
        .par_iter()
        .map(|r| {
            let path = root.join(&r.file);
            if !path.exists() {
                return Err(Error::Data(format!("missing image file {}", path.display())));
            }
            Ok(PersonImage {
                pixels: read_png(&path)?,
                identity_id: r.identity_id,
                camera_id: r.camera_id,
                domain_id: r.domain_id,
            })
        })
        .collect()
}

pub fn load_captions(root: &Path, records: &[SampleRecord]) -> Result<Vec<Caption>> {
    records
        .iter()
        .map(|r| {
            let path = root.join(&r.file);
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let file: CaptionFile = serde_json::from_str(&text)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            Ok(Caption {
                identity_id: file.identity_id,
                domain_id: file.domain_id,
                tokens: file.tokens,
            })
        })
        .collect()
}

/// Counts samples per identity.
pub fn identity_counts(records: &[SampleRecord]) -> BTreeMap<u32, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.identity_id).or_insert(0) += 1;
    }
    counts
}

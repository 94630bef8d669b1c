//! Two-stage training: multimodal pre-training over images and captions,
//! then image-only fine-tuning that carries every weight but the classifier.
//!
//! Each iteration draws one modality, samples a P×K batch from it, and takes
//! one SGD step on `l_ID + l_triplet`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BnMode;
use crate::checkpoint::{Checkpoint, CheckpointMeta, RngState, Stage, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fusion::{split_patches, Modality, PatchGrid, TranslatorInput};
use crate::losses::LossReport;
use crate::model::{FusionModel, ModelConfig, ModelShape};
use crate::numerics::{sgd_step, LrSchedule, ParamStore, ScheduleKind};
use crate::synthdata::{load_captions, load_images, DatasetManifest, Split, Vocabulary};

/// Length of a training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Passes over the stage's samples, rounded up to whole batches.
    Epochs(usize),
    Steps(usize),
}

impl Budget {
    pub fn steps(self, samples: usize, batch: usize) -> usize {
        match self {
            Budget::Steps(n) => n,
            Budget::Epochs(e) => (e * samples).div_ceil(batch),
        }
    }

    fn count(self) -> usize {
        match self {
            Budget::Steps(n) | Budget::Epochs(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Pre-training length.
    pub n1: Budget,
    /// Fine-tuning length.
    pub n2: Budget,
    /// Identities per batch.
    pub p: usize,
    /// Samples per identity in a batch.
    pub k: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub label_smoothing: f64,
    /// Intermediate checkpoint period in iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Adds elapsed seconds to every log record (logs are then not reproducible).
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n1: Budget::Epochs(120),
            n2: Budget::Epochs(120),
            p: 16,
            k: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: ScheduleKind::Cosine,
            seed: 0,
            label_smoothing: 0.0,
            checkpoint_every: 0,
            log_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::Config(format!(
                "batches need p >= 2 and k >= 2, got p={} k={}",
                self.p, self.k
            )));
        }
        if self.n1.count() == 0 || self.n2.count() == 0 {
            return Err(Error::Config("n1 and n2 must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr > 0, momentum in [0, 1), weight_decay >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    fn schedule(&self, total: usize) -> LrSchedule {
        LrSchedule {
            base_lr: self.lr,
            total_iters: total,
            kind: self.schedule,
        }
    }
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub stage: Stage,
    pub iteration: usize,
    pub modality: Modality,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

/// Samples of one stage, with images already cut into patches and captions
/// already mapped to token ids.
#[derive(Clone, Debug, Default)]
pub struct StageData {
    pub images: Vec<PatchGrid>,
    pub image_ids: Vec<u32>,
    pub captions: Vec<Vec<usize>>,
    pub caption_ids: Vec<u32>,
}

pub fn load_vocabulary(root: &Path, manifest: &DatasetManifest) -> Result<Vocabulary> {
    let path = root.join(&manifest.vocabulary);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let words: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(Vocabulary::from_words(words))
}

impl StageData {
    pub fn load(
        root: &Path,
        manifest: &DatasetManifest,
        split: Split,
        model: &ModelConfig,
        modalities: &[Modality],
    ) -> Result<Self> {
        let mut data = StageData::default();
        if modalities.contains(&Modality::Image) {
            let records = manifest.split(split);
            for img in load_images(root, records)? {
                data.images.push(split_patches(&img, model.patch_height, model.patch_width)?);
                data.image_ids.push(img.identity_id);
            }
        }
        if modalities.contains(&Modality::Text) {
            if split != Split::Pretrain {
                return Err(Error::Data(format!("the {} split has no captions", split.name())));
            }
            let vocab = load_vocabulary(root, manifest)?;
            for c in load_captions(root, &manifest.pretrain_captions)? {
                data.captions.push(vocab.encode(&c.tokens)?);
                data.caption_ids.push(c.identity_id);
            }
        }
        Ok(data)
    }

    fn ids(&self, modality: Modality) -> &[u32] {
        match modality {
            Modality::Image => &self.image_ids,
            Modality::Text => &self.caption_ids,
        }
    }

    fn input(&self, modality: Modality, i: usize) -> TranslatorInput<'_> {
        match modality {
            Modality::Image => TranslatorInput::Patches(&self.images[i]),
            Modality::Text => TranslatorInput::Tokens(&self.captions[i]),
        }
    }
}

/// Draws P identities, then K distinct samples of each.
#[derive(Clone, Debug)]
pub struct PkSampler {
    groups: Vec<(u32, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(ids: &[u32], p: usize, k: usize) -> Result<Self> {
        let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            by_id.entry(id).or_default().push(i);
        }
        let groups: Vec<(u32, Vec<usize>)> = by_id.into_iter().filter(|(_, v)| v.len() >= k).collect();
        if groups.len() < p {
            return Err(Error::Data(format!(
                "cannot sample {p}x{k} batches: only {} identities have at least {k} samples",
                groups.len()
            )));
        }
        Ok(Self { groups, p, k })
    }

    /// Sample indices, grouped by identity.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.p * self.k);
        for g in rand::seq::index::sample(rng, self.groups.len(), self.p) {
            let members = &self.groups[g].1;
            for j in rand::seq::index::sample(rng, members.len(), self.k) {
                out.push(members[j]);
            }
        }
        out
    }
}

/// Image with probability `p_image`, text otherwise.
pub fn draw_modality<R: Rng + ?Sized>(rng: &mut R, p_image: f64) -> Modality {
    if rng.random::<f64>() < p_image {
        Modality::Image
    } else {
        Modality::Text
    }
}

/// Everything needed to continue a stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: FusionModel,
    pub store: ParamStore,
    pub stage: Stage,
    pub iteration: usize,
    pub total: usize,
    pub classes: Vec<u32>,
    pub modalities: Vec<Modality>,
    rng: ChaCha8Rng,
}

fn sampler_rng(seed: u64, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match stage {
        Stage::Pretrain => 1,
        Stage::Finetune => 2,
    });
    rng
}

/// Trainable flags as the model defines them, then `frozen` prefixes off.
fn set_trainable_flags(store: &mut ParamStore, model: &FusionModel, frozen: &[&str]) -> Result<()> {
    for spec in FusionModel::param_specs(model.config(), model.shape())? {
        let off = frozen.iter().any(|p| spec.path.starts_with(p));
        store
            .by_path_mut(&spec.path)
            .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.path)))?
            .trainable = spec.trainable && !off;
    }
    Ok(())
}

fn model_shape(manifest: &DatasetManifest, vocab: usize, num_classes: usize) -> ModelShape {
    ModelShape {
        image_height: manifest.image_height,
        image_width: manifest.image_width,
        channels: manifest.channels,
        vocab,
        num_classes,
    }
}

fn class_list(records: &[crate::synthdata::SampleRecord]) -> Vec<u32> {
    let mut ids: Vec<u32> = records.iter().map(|r| r.identity_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn stage_samples(data: &StageData, modalities: &[Modality]) -> usize {
    modalities.iter().map(|&m| data.ids(m).len()).sum()
}

impl TrainState {
    /// Fresh stage-I state. Parameters of a modality that is not trained are frozen.
    pub fn pretrain(
        cfg: &RunConfig,
        manifest: &DatasetManifest,
        vocab_len: usize,
        modalities: &[Modality],
        data: &StageData,
    ) -> Result<Self> {
        cfg.validate()?;
        if modalities.is_empty() {
            return Err(Error::Config("pre-training needs at least one modality".into()));
        }
        let classes = class_list(&manifest.pretrain_images);
        let shape = model_shape(manifest, vocab_len, classes.len());
        let (model, mut store) = FusionModel::init(&cfg.model, &shape, &mut ChaCha8Rng::seed_from_u64(cfg.train.seed))?;
        let mut frozen = Vec::new();
        if !modalities.contains(&Modality::Image) {
            frozen.push("image.");
        }
        if !modalities.contains(&Modality::Text) {
            frozen.push("text.");
        }
        set_trainable_flags(&mut store, &model, &frozen)?;
        let total = cfg.train.n1.steps(stage_samples(data, modalities), cfg.train.batch_size()).max(1);
        Self::new(cfg, model, store, Stage::Pretrain, total, classes, modalities.to_vec())
    }

    /// Fresh stage-II state, from a stage-I checkpoint or from scratch.
    /// Everything but the classifier is carried over bitwise; momentum starts
    /// at zero and text parameters are frozen.
    pub fn finetune(
        cfg: &RunConfig,
        manifest: &DatasetManifest,
        vocab_len: usize,
        init: Option<&Checkpoint>,
        data: &StageData,
    ) -> Result<Self> {
        cfg.validate()?;
        let classes = class_list(&manifest.finetune_images);
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let (model, mut store) = match init {
            Some(ckpt) => {
                ckpt.validate_against(Some(&cfg.model))?;
                let mut shape = ckpt.meta.shape;
                let mut store = ckpt.params.clone();
                store.reset_velocities();
                store.zero_grads();
                let model = FusionModel::reinit_classifier(&cfg.model, &mut shape, &mut store, classes.len(), &mut init_rng)?;
                (model, store)
            }
            None => {
                let shape = model_shape(manifest, vocab_len, classes.len());
                FusionModel::init(&cfg.model, &shape, &mut init_rng)?
            }
        };
        set_trainable_flags(&mut store, &model, &["text."])?;
        let total = cfg.train.n2.steps(data.images.len(), cfg.train.batch_size()).max(1);
        Self::new(cfg, model, store, Stage::Finetune, total, classes, vec![Modality::Image])
    }

    fn new(
        cfg: &RunConfig,
        model: FusionModel,
        store: ParamStore,
        stage: Stage,
        total: usize,
        classes: Vec<u32>,
        modalities: Vec<Modality>,
    ) -> Result<Self> {
        Ok(Self {
            config: cfg.clone(),
            model,
            store,
            stage,
            iteration: 0,
            total,
            classes,
            modalities,
            rng: sampler_rng(cfg.train.seed, stage),
        })
    }

    /// Continues from a checkpoint written by [`TrainState::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let model = ckpt.validate_against(None)?;
        let meta = &ckpt.meta;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.rng.seed);
        rng.set_stream(meta.rng.stream);
        let pos: u128 = meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| crate::error::CheckpointError::Manifest(format!("bad word_pos `{}`", meta.rng.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(Self {
            config: meta.config.clone(),
            model,
            store: ckpt.params.clone(),
            stage: meta.stage,
            iteration: meta.iteration,
            total: meta.total_iterations,
            classes: meta.classes.clone(),
            modalities: meta.modalities.clone(),
            rng,
        })
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total
    }

    /// Rounds parameters and momentum to 32-bit precision and snapshots them,
    /// so training continued in memory matches training resumed from disk.
    pub fn checkpoint(&mut self) -> Checkpoint {
        self.store.round_to_f32();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                stage: self.stage,
                iteration: self.iteration,
                total_iterations: self.total,
                modalities: self.modalities.clone(),
                config: self.config.clone(),
                rng: RngState {
                    seed: self.config.train.seed,
                    stream: self.rng.get_stream(),
                    word_pos: self.rng.get_word_pos().to_string(),
                },
                classes: self.classes.clone(),
                shape: *self.model.shape(),
            },
            params: self.store.clone(),
        }
    }

    fn class_index(&self) -> BTreeMap<u32, usize> {
        self.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// One optimizer step.
    pub fn step(&mut self, data: &StageData, samplers: &Samplers) -> Result<TrainRecord> {
        let tc = &self.config.train;
        let modality = match samplers.p_image {
            Some(p) => draw_modality(&mut self.rng, p),
            None => self.modalities[0],
        };
        let sampler = samplers.get(modality);
        let picks = sampler.sample(&mut self.rng);
        let ids: Vec<u32> = picks.iter().map(|&i| data.ids(modality)[i]).collect();
        let index = self.class_index();
        let labels = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("identity {id} is not in the label space")))
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<TranslatorInput<'_>> = picks.iter().map(|&i| data.input(modality, i)).collect();
        let out = self
            .model
            .batch_loss(&self.store, &inputs, &ids, &labels, tc.label_smoothing, BnMode::Train, true)?;
        if !out.report.l_total.is_finite() {
            return Err(Error::NonFiniteLoss {
                stage: self.stage.name().into(),
                iteration: self.iteration,
            });
        }
        let lr = tc.schedule(self.total).lr(self.iteration);
        self.store.zero_grads();
        self.store.accumulate(out.grads.as_ref().expect("gradients requested"));
        sgd_step(&mut self.store, lr, tc.momentum, tc.weight_decay)?;
        if let Some(e) = self
            .store
            .iter()
            .find(|e| e.trainable && e.value.data().iter().any(|v| !(v.abs() <= f32::MAX as f64)))
        {
            return Err(Error::ParameterOverflow {
                path: e.path.clone(),
                stage: self.stage.name().into(),
                iteration: self.iteration,
            });
        }
        if let Some(stats) = &out.running {
            self.model.apply_running_stats(&mut self.store, stats);
        }
        let record = TrainRecord {
            stage: self.stage,
            iteration: self.iteration,
            modality,
            lr,
            loss: out.report,
            wall_time_s: None,
        };
        self.iteration += 1;
        Ok(record)
    }

    pub fn samplers(&self, data: &StageData) -> Result<Samplers> {
        let tc = &self.config.train;
        let make = |m: Modality| -> Result<Option<PkSampler>> {
            if self.modalities.contains(&m) {
                PkSampler::new(data.ids(m), tc.p, tc.k).map(Some)
            } else {
                Ok(None)
            }
        };
        let image = make(Modality::Image)?;
        let text = make(Modality::Text)?;
        let p_image = (image.is_some() && text.is_some()).then(|| {
            let ni = data.images.len() as f64;
            ni / (ni + data.captions.len() as f64)
        });
        Ok(Samplers { image, text, p_image })
    }

    /// Trains to the end of the stage, appending one JSON line per step to
    /// `log` and writing checkpoints to `out` (periodically and at the end).
    pub fn run(&mut self, data: &StageData, out: Option<&Path>, mut log: Option<&mut dyn Write>) -> Result<Checkpoint> {
        let samplers = self.samplers(data)?;
        let start = Instant::now();
        let every = self.config.train.checkpoint_every;
        while !self.is_done() {
            let mut record = self.step(data, &samplers)?;
            if self.config.train.log_wall_time {
                record.wall_time_s = Some(start.elapsed().as_secs_f64());
            }
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(w, "{line}").map_err(|e| Error::Data(format!("cannot write training log: {e}")))?;
            }
            if every > 0 && self.iteration % every == 0 && !self.is_done() {
                let ckpt = self.checkpoint();
                if let Some(path) = out {
                    ckpt.save(path)?;
                }
                if let Some(w) = log.as_deref_mut() {
                    w.flush().map_err(|e| Error::Data(format!("cannot write training log: {e}")))?;
                }
            }
        }
        let ckpt = self.checkpoint();
        if let Some(path) = out {
            ckpt.save(path)?;
        }
        if let Some(w) = log.as_deref_mut() {
            w.flush().map_err(|e| Error::Data(format!("cannot write training log: {e}")))?;
        }
        Ok(ckpt)
    }
}

/// Batch samplers for the modalities of a stage.
#[derive(Clone, Debug)]
pub struct Samplers {
    image: Option<PkSampler>,
    text: Option<PkSampler>,
    /// Set when both modalities are trained.
    pub p_image: Option<f64>,
}

impl Samplers {
    fn get(&self, m: Modality) -> &PkSampler {
        match m {
            Modality::Image => self.image.as_ref(),
            Modality::Text => self.text.as_ref(),
        }
        .expect("sampler exists for every trained modality")
    }
}

fn open_log(path: Option<&Path>, append: bool) -> Result<Option<BufWriter<fs::File>>> {
    path.map(|p| {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(p)
            .map(BufWriter::new)
            .map_err(|e| Error::io(p, e))
    })
    .transpose()
}

fn run_with_log(state: &mut TrainState, data: &StageData, out: &Path, log: Option<&Path>, append: bool) -> Result<Checkpoint> {
    let mut writer = open_log(log, append)?;
    state.run(data, Some(out), writer.as_mut().map(|w| w as &mut dyn Write))
}

/// Stage I on the dataset at `root`.
pub fn pretrain(root: &Path, cfg: &RunConfig, modalities: &[Modality], out: &Path, log: Option<&Path>) -> Result<Checkpoint> {
    let manifest = DatasetManifest::load(root)?;
    let vocab = load_vocabulary(root, &manifest)?;
    let data = StageData::load(root, &manifest, Split::Pretrain, &cfg.model, modalities)?;
    let mut state = TrainState::pretrain(cfg, &manifest, vocab.len(), modalities, &data)?;
    run_with_log(&mut state, &data, out, log, false)
}

/// Stage II on the dataset at `root`; `init` of `None` trains from scratch.
pub fn finetune(root: &Path, cfg: &RunConfig, init: Option<&Checkpoint>, out: &Path, log: Option<&Path>) -> Result<Checkpoint> {
    let manifest = DatasetManifest::load(root)?;
    let vocab = load_vocabulary(root, &manifest)?;
    let data = StageData::load(root, &manifest, Split::Finetune, &cfg.model, &[Modality::Image])?;
    let mut state = TrainState::finetune(cfg, &manifest, vocab.len(), init, &data)?;
    run_with_log(&mut state, &data, out, log, false)
}

/// Continues an interrupted stage; the log is appended to.
pub fn resume(root: &Path, ckpt: &Checkpoint, out: &Path, log: Option<&Path>) -> Result<Checkpoint> {
    let manifest = DatasetManifest::load(root)?;
    let mut state = TrainState::resume(ckpt)?;
    let split = match state.stage {
        Stage::Pretrain => Split::Pretrain,
        Stage::Finetune => Split::Finetune,
    };
    let data = StageData::load(root, &manifest, split, &state.config.model, &state.modalities)?;
    run_with_log(&mut state, &data, out, log, true)
}

/// Mean eval-mode `l_total` over `batches` image batches drawn with `seed`.
pub fn eval_loss(state: &TrainState, data: &StageData, batches: usize, seed: u64) -> Result<f64> {
    let tc = &state.config.train;
    let sampler = PkSampler::new(&data.image_ids, tc.p, tc.k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = state.class_index();
    let mut total = 0.0;
    for _ in 0..batches {
        let picks = sampler.sample(&mut rng);
        let ids: Vec<u32> = picks.iter().map(|&i| data.image_ids[i]).collect();
        let labels: Vec<usize> = ids.iter().map(|id| index[id]).collect();
        let inputs: Vec<_> = picks.iter().map(|&i| TranslatorInput::Patches(&data.images[i])).collect();
        let out = state
            .model
            .batch_loss(&state.store, &inputs, &ids, &labels, tc.label_smoothing, BnMode::Eval, false)?;
        total += out.report.l_total;
    }
    Ok(total / batches.max(1) as f64)
}

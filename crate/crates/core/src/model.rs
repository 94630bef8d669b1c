//! The full network: per-modality translators, the shared encoder and the
//! two-branch head, with batched loss and gradient evaluation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_head, head_backward, BnMode, BnNeckState, HeadGrads, HeadOutput, RunningStats, TransformerConfig,
    TransformerEncoder,
};
use crate::error::{Error, Result};
use crate::fusion::{FusedSequence, FusionDims, Modality, TranslateCache, Translator, TranslatorInput};
use crate::losses::{id_loss_with_grad, triplet_loss_with_grad, LossReport, TripletBatch};
use crate::numerics::params::trunc_normal;
use crate::numerics::{DenseArray, Grads, Init, ParamId, ParamSpec, ParamStore};
use crate::synthdata::CAPTION_LEN;

/// Samples per parallel work unit; gradients are reduced chunk by chunk in order.
const CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch_height: usize,
    pub patch_width: usize,
    /// Output width of the frozen image encoder.
    pub image_dim: usize,
    /// Width of the frozen word embeddings.
    pub text_dim: usize,
    pub transformer: TransformerConfig,
    pub init_std: f64,
    pub encoder_seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_height: 8,
            patch_width: 8,
            image_dim: 64,
            text_dim: 32,
            transformer: TransformerConfig::default(),
            init_std: 0.02,
            encoder_seed: 20_240_613,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

/// Data-dependent sizes the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub vocab: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self, shape: &ModelShape) -> Result<()> {
        self.transformer.validate()?;
        let (h, w) = (shape.image_height, shape.image_width);
        if self.patch_height == 0 || self.patch_width == 0 || h % self.patch_height != 0 || w % self.patch_width != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} does not tile {h}x{w} images",
                self.patch_height, self.patch_width
            )));
        }
        if self.num_tokens(shape) < CAPTION_LEN {
            return Err(Error::Config(format!(
                "{} patches cannot hold a {CAPTION_LEN}-word caption",
                self.num_tokens(shape)
            )));
        }
        if self.image_dim == 0 || self.text_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if !(self.init_std > 0.0) || !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("init_std and bn_eps must be positive, bn_momentum in [0, 1]".into()));
        }
        if shape.num_classes < 2 {
            return Err(Error::Config("the classifier needs at least 2 identities".into()));
        }
        Ok(())
    }

    pub fn num_tokens(&self, shape: &ModelShape) -> usize {
        (shape.image_height / self.patch_height) * (shape.image_width / self.patch_width)
    }

    fn dims(&self, shape: &ModelShape) -> FusionDims {
        FusionDims {
            num_tokens: self.num_tokens(shape),
            flat_dim: self.patch_height * self.patch_width * shape.channels,
            image_dim: self.image_dim,
            vocab: shape.vocab,
            text_dim: self.text_dim,
            model_dim: self.transformer.model_dim,
            encoder_seed: self.encoder_seed,
            init_std: self.init_std,
        }
    }
}

pub const BN_GAMMA: &str = "head.bnneck.gamma";
pub const BN_BETA: &str = "head.bnneck.beta";
pub const BN_RUNNING_MEAN: &str = "head.bnneck.running_mean";
pub const BN_RUNNING_VAR: &str = "head.bnneck.running_var";
pub const CLASSIFIER: &str = "head.classifier.weight";

#[derive(Clone, Debug)]
struct HeadIds {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    classifier: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    cfg: ModelConfig,
    shape: ModelShape,
    image: Translator,
    text: Translator,
    encoder: TransformerEncoder,
    head: HeadIds,
}

/// Loss, gradients and BN statistics for one batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub report: LossReport,
    pub grads: Option<Grads>,
    pub running: Option<RunningStats>,
}

struct SampleForward {
    translate: TranslateCache,
    encode: crate::backbone::EncodeCache,
    global: Vec<f64>,
}

impl FusionModel {
    pub fn param_specs(cfg: &ModelConfig, shape: &ModelShape) -> Result<Vec<ParamSpec>> {
        cfg.validate(shape)?;
        let dims = cfg.dims(shape);
        let d = cfg.transformer.model_dim;
        let mut specs = Translator::param_specs(Modality::Image, &dims);
        specs.extend(Translator::param_specs(Modality::Text, &dims));
        specs.extend(TransformerEncoder::param_specs(&cfg.transformer, cfg.init_std)?);
        specs.extend([
            ParamSpec::new(BN_GAMMA, &[d], Init::Ones),
            ParamSpec::new(BN_BETA, &[d], Init::Zeros),
            ParamSpec::new(BN_RUNNING_MEAN, &[d], Init::Zeros).frozen(),
            ParamSpec::new(BN_RUNNING_VAR, &[d], Init::Ones).frozen(),
            ParamSpec::new(CLASSIFIER, &[d, shape.num_classes], Init::TruncNormal { std: cfg.init_std }).decayed(),
        ]);
        Ok(specs)
    }

    /// Fresh parameters, drawn from `rng` in canonical path order.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, shape: &ModelShape, rng: &mut R) -> Result<(Self, ParamStore)> {
        let store = ParamStore::from_specs(Self::param_specs(cfg, shape)?, rng)?;
        Ok((Self::bind(cfg, shape, &store)?, store))
    }

    /// Resolves every path and checks every shape against `cfg`/`shape`.
    pub fn bind(cfg: &ModelConfig, shape: &ModelShape, store: &ParamStore) -> Result<Self> {
        let expected = Self::param_specs(cfg, shape)?;
        for spec in &expected {
            let e = store
                .by_path(&spec.path)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.path)))?;
            if e.value.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "model",
                    format!("`{}` has shape {:?}, expected {:?}", spec.path, e.value.shape(), spec.shape),
                ));
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            shape: *shape,
            image: Translator::bind(Modality::Image, store)?,
            text: Translator::bind(Modality::Text, store)?,
            encoder: TransformerEncoder::bind(&cfg.transformer, store)?,
            head: HeadIds {
                gamma: store.require(BN_GAMMA)?,
                beta: store.require(BN_BETA)?,
                running_mean: store.require(BN_RUNNING_MEAN)?,
                running_var: store.require(BN_RUNNING_VAR)?,
                classifier: store.require(CLASSIFIER)?,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn num_tokens(&self) -> usize {
        self.cfg.num_tokens(&self.shape)
    }

    pub fn encoder(&self) -> &TransformerEncoder {
        &self.encoder
    }

    pub fn translator(&self, modality: Modality) -> &Translator {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Draws a new `[D × num_classes]` classifier from `rng`.
    pub fn reinit_classifier<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        shape: &mut ModelShape,
        store: &mut ParamStore,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        shape.num_classes = num_classes;
        let d = cfg.transformer.model_dim;
        let data = (0..d * num_classes).map(|_| trunc_normal(rng, cfg.init_std)).collect();
        let id = store.require(CLASSIFIER)?;
        store.replace(id, DenseArray::from_vec(&[d, num_classes], data)?);
        Self::bind(cfg, shape, store)
    }

    pub fn translate(&self, store: &ParamStore, input: &TranslatorInput<'_>, identity_id: u32) -> Result<FusedSequence> {
        let modality = input.modality();
        let (tokens, _) = self.translator(modality).forward(store, input)?;
        Ok(FusedSequence {
            tokens,
            modality,
            identity_id,
        })
    }

    pub fn bn_state(&self, store: &ParamStore, mode: BnMode) -> BnNeckState {
        BnNeckState {
            running_mean: store.value(self.head.running_mean).data().to_vec(),
            running_var: store.value(self.head.running_var).data().to_vec(),
            gamma: store.value(self.head.gamma).data().to_vec(),
            beta: store.value(self.head.beta).data().to_vec(),
            momentum: self.cfg.bn_momentum,
            eps: self.cfg.bn_eps,
            mode,
        }
    }

    /// Writes running statistics produced by a train-mode pass.
    pub fn apply_running_stats(&self, store: &mut ParamStore, stats: &RunningStats) {
        store.entry_mut(self.head.running_mean).value.data_mut().copy_from_slice(&stats.mean);
        store.entry_mut(self.head.running_var).value.data_mut().copy_from_slice(&stats.var);
    }

    fn forward_sample(&self, store: &ParamStore, input: &TranslatorInput<'_>) -> Result<SampleForward> {
        let (tokens, translate) = self.translator(input.modality()).forward(store, input)?;
        let (out, encode) = self.encoder.forward(store, &tokens)?;
        Ok(SampleForward {
            translate,
            encode,
            global: out.row(0).to_vec(),
        })
    }

    /// Encoder output for one sample, `[(N+1) × D]`.
    pub fn encode(&self, store: &ParamStore, input: &TranslatorInput<'_>) -> Result<DenseArray> {
        let (tokens, _) = self.translator(input.modality()).forward(store, input)?;
        Ok(self.encoder.forward(store, &tokens)?.0)
    }

    /// Global (CLS) features for many samples, `[B × D]`.
    pub fn global_features(&self, store: &ParamStore, inputs: &[TranslatorInput<'_>]) -> Result<DenseArray> {
        let rows: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|inp| self.forward_sample(store, inp).map(|f| f.global))
            .collect::<Result<_>>()?;
        stack(&rows, self.cfg.transformer.model_dim)
    }

    /// Eval-mode head output for many samples.
    pub fn head_eval(&self, store: &ParamStore, inputs: &[TranslatorInput<'_>]) -> Result<HeadOutput> {
        let global = self.global_features(store, inputs)?;
        let bn = self.bn_state(store, BnMode::Eval);
        Ok(forward_head(&global, &bn, store.value(self.head.classifier))?.0)
    }

    /// Retrieval embeddings: eval-mode BNNeck features, L2-normalized.
    pub fn embed(&self, store: &ParamStore, inputs: &[TranslatorInput<'_>]) -> Result<DenseArray> {
        let mut f = self.head_eval(store, inputs)?.bn_feature;
        for r in 0..f.rows() {
            let row = f.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        Ok(f)
    }

    /// `l_ID + l_triplet` on one single-modality P×K batch, optionally with
    /// gradients for every parameter.
    pub fn batch_loss(
        &self,
        store: &ParamStore,
        inputs: &[TranslatorInput<'_>],
        identities: &[u32],
        class_labels: &[usize],
        smoothing: f64,
        mode: BnMode,
        want_grads: bool,
    ) -> Result<BatchOutcome> {
        let b = inputs.len();
        let modality = inputs
            .first()
            .map(|i| i.modality())
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        if inputs.iter().any(|i| i.modality() != modality) {
            return Err(Error::Data("a batch must hold a single modality".into()));
        }
        if identities.len() != b || class_labels.len() != b {
            return Err(Error::shape(
                "batch_loss",
                format!("{b} samples, {} identities, {} labels", identities.len(), class_labels.len()),
            ));
        }
        let forwards: Vec<SampleForward> = inputs
            .par_iter()
            .map(|inp| self.forward_sample(store, inp))
            .collect::<Result<_>>()?;
        let d = self.cfg.transformer.model_dim;
        let global = stack(&forwards.iter().map(|f| f.global.clone()).collect::<Vec<_>>(), d)?;

        let batch = TripletBatch::new(global.clone(), identities.to_vec(), modality)?;
        let triplet = triplet_loss_with_grad(&batch)?;
        let bn = self.bn_state(store, mode);
        let classifier = store.value(self.head.classifier);
        let (head, head_cache, running) = forward_head(&global, &bn, classifier)?;
        let (l_id, dlogits) = id_loss_with_grad(&head.logits, class_labels, smoothing)?;
        let report = LossReport {
            l_id,
            l_triplet: triplet.loss,
            l_total: l_id + triplet.loss,
            active_triplets: triplet.active_triplets,
        };
        if !want_grads {
            return Ok(BatchOutcome {
                report,
                grads: None,
                running,
            });
        }

        let mut grads = store.new_grads();
        let mut dglobal = {
            let mut gamma = vec![0.0; d];
            let mut beta = vec![0.0; d];
            let dg = head_backward(
                &head,
                &head_cache,
                &bn,
                classifier,
                &dlogits,
                HeadGrads {
                    gamma: &mut gamma,
                    beta: &mut beta,
                    classifier: grads.slot(self.head.classifier),
                },
            );
            add_into(grads.slot(self.head.gamma), &gamma);
            add_into(grads.slot(self.head.beta), &beta);
            dg
        };
        dglobal.add_assign(&triplet.grad);

        let translator = self.translator(modality);
        let tokens = self.num_tokens() + 1;
        let indices: Vec<usize> = (0..b).collect();
        let partials: Vec<Grads> = indices
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = store.new_grads();
                for &i in chunk {
                    let mut dout = DenseArray::zeros(&[tokens, d]);
                    dout.row_mut(0).copy_from_slice(dglobal.row(i));
                    let dtok = self.encoder.backward(store, &forwards[i].encode, &dout, &mut g);
                    translator.backward(&forwards[i].translate, &dtok, &mut g);
                }
                g
            })
            .collect();
        for p in &partials {
            grads.add(p);
        }
        Ok(BatchOutcome {
            report,
            grads: Some(grads),
            running,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn stack(rows: &[Vec<f64>], d: usize) -> Result<DenseArray> {
    DenseArray::from_vec(&[rows.len(), d], rows.concat())
}

//! Pre-norm transformer encoder shared by both modalities, and the
//! two-branch head: CLS output for the triplet loss, BNNeck-normalized
//! feature through a bias-free classifier for the ID loss.
//!
//! Attention has query and value biases only. The last block's output
//! projections (attention and MLP) carry no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedSequence;
use crate::numerics::layers::{
    batch_norm_train, batch_norm_train_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear,
    linear_backward, softmax_backward_row, softmax_in_place, NormCache,
};
use crate::numerics::{gemm, gemm_strided, DenseArray, Grads, Init, MatRef, ParamId, ParamSpec, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: usize,
    /// Only 0 is supported; training is deterministic.
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            model_dim: 64,
            mlp_ratio: 4,
            dropout: 0.0,
            ln_eps: 1e-5,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("transformer depth must be at least 1".into()));
        }
        if self.heads == 0 || self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config(format!("dropout {} is not supported; use 0", self.dropout)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    qkv: ParamId,
    q_bias: ParamId,
    v_bias: ParamId,
    out: ParamId,
    out_bias: Option<ParamId>,
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: ParamId,
    fc2_bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: NormCache,
    h1: DenseArray,
    qkv: DenseArray,
    /// `[heads × T × T]`, post-softmax.
    attn: Vec<f64>,
    ctx: DenseArray,
    ln2: NormCache,
    h2: DenseArray,
    pre_act: DenseArray,
    act: DenseArray,
}

/// Activations saved by [`TransformerEncoder::forward`].
#[derive(Clone, Debug)]
pub struct EncodeCache {
    blocks: Vec<BlockCache>,
    tokens: usize,
}

impl EncodeCache {
    /// Post-softmax attention of one layer, `[heads × T × T]`.
    pub fn attention(&self, layer: usize, heads: usize) -> DenseArray {
        let t = self.tokens;
        DenseArray::from_vec(&[heads, t, t], self.blocks[layer].attn.clone()).expect("attention shape")
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    cfg: TransformerConfig,
    blocks: Vec<BlockIds>,
}

fn block_prefix(i: usize) -> String {
    format!("backbone.blocks.{i}")
}

impl TransformerEncoder {
    pub fn param_specs(cfg: &TransformerConfig, init_std: f64) -> Result<Vec<ParamSpec>> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let hid = cfg.hidden_dim();
        let w = |path: String, shape: &[usize]| ParamSpec::new(path, shape, Init::TruncNormal { std: init_std }).decayed();
        let z = |path: String, n: usize| ParamSpec::new(path, &[n], Init::Zeros);
        let o = |path: String, n: usize| ParamSpec::new(path, &[n], Init::Ones);
        let mut specs = Vec::new();
        for i in 0..cfg.depth {
            let p = block_prefix(i);
            if i + 1 < cfg.depth {
                specs.push(z(format!("{p}.attn.out.bias"), d));
                specs.push(z(format!("{p}.mlp.fc2.bias"), d));
            }
            specs.extend([
                o(format!("{p}.norm1.gamma"), d),
                z(format!("{p}.norm1.beta"), d),
                w(format!("{p}.attn.qkv.weight"), &[d, 3 * d]),
                z(format!("{p}.attn.q.bias"), d),
                z(format!("{p}.attn.v.bias"), d),
                w(format!("{p}.attn.out.weight"), &[d, d]),
                o(format!("{p}.norm2.gamma"), d),
                z(format!("{p}.norm2.beta"), d),
                w(format!("{p}.mlp.fc1.weight"), &[d, hid]),
                z(format!("{p}.mlp.fc1.bias"), hid),
                w(format!("{p}.mlp.fc2.weight"), &[hid, d]),
            ]);
        }
        Ok(specs)
    }

    pub fn bind(cfg: &TransformerConfig, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let hid = cfg.hidden_dim();
        let get = |path: String, shape: &[usize]| -> Result<ParamId> {
            let id = store.require(&path)?;
            if store.value(id).shape() != shape {
                return Err(Error::shape(
                    "backbone",
                    format!("{path} has shape {:?}, expected {shape:?}", store.value(id).shape()),
                ));
            }
            Ok(id)
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = block_prefix(i);
            let inner = i + 1 < cfg.depth;
            blocks.push(BlockIds {
                norm1: (get(format!("{p}.norm1.gamma"), &[d])?, get(format!("{p}.norm1.beta"), &[d])?),
                qkv: get(format!("{p}.attn.qkv.weight"), &[d, 3 * d])?,
                q_bias: get(format!("{p}.attn.q.bias"), &[d])?,
                v_bias: get(format!("{p}.attn.v.bias"), &[d])?,
                out: get(format!("{p}.attn.out.weight"), &[d, d])?,
                out_bias: inner.then(|| get(format!("{p}.attn.out.bias"), &[d])).transpose()?,
                norm2: (get(format!("{p}.norm2.gamma"), &[d])?, get(format!("{p}.norm2.beta"), &[d])?),
                fc1: (get(format!("{p}.mlp.fc1.weight"), &[d, hid])?, get(format!("{p}.mlp.fc1.bias"), &[hid])?),
                fc2: get(format!("{p}.mlp.fc2.weight"), &[hid, d])?,
                fc2_bias: inner.then(|| get(format!("{p}.mlp.fc2.bias"), &[d])).transpose()?,
            });
        }
        Ok(Self { cfg: cfg.clone(), blocks })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn forward(&self, store: &ParamStore, tokens: &DenseArray) -> Result<(DenseArray, EncodeCache)> {
        let d = self.cfg.model_dim;
        if tokens.shape().len() != 2 || tokens.cols() != d {
            return Err(Error::shape(
                "encode",
                format!("sequence {:?} does not match model_dim {d}", tokens.shape()),
            ));
        }
        let t = tokens.rows();
        let eps = self.cfg.ln_eps;
        let mut x = tokens.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (h1, ln1) = layer_norm(&x, store.value(b.norm1.0), store.value(b.norm1.1), eps)?;
            let mut qkv = linear(&h1, store.value(b.qkv), None)?;
            let (qb, vb) = (store.value(b.q_bias).data(), store.value(b.v_bias).data());
            for r in 0..t {
                let row = qkv.row_mut(r);
                row[..d].iter_mut().zip(qb).for_each(|(x, b)| *x += b);
                row[2 * d..].iter_mut().zip(vb).for_each(|(x, b)| *x += b);
            }
            let (attn, ctx) = attention_forward(qkv.data(), t, d, self.cfg.heads);
            let a = linear(&ctx, store.value(b.out), b.out_bias.map(|id| store.value(id)))?;
            x.add_assign(&a);
            let (h2, ln2) = layer_norm(&x, store.value(b.norm2.0), store.value(b.norm2.1), eps)?;
            let pre_act = linear(&h2, store.value(b.fc1.0), Some(store.value(b.fc1.1)))?;
            let mut act = pre_act.clone();
            act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
            let m = linear(&act, store.value(b.fc2), b.fc2_bias.map(|id| store.value(id)))?;
            x.add_assign(&m);
            caches.push(BlockCache {
                ln1,
                h1,
                qkv,
                attn,
                ctx,
                ln2,
                h2,
                pre_act,
                act,
            });
        }
        Ok((x, EncodeCache { blocks: caches, tokens: t }))
    }

    /// Accumulates parameter gradients and returns the gradient for the input tokens.
    pub fn backward(&self, store: &ParamStore, cache: &EncodeCache, dout: &DenseArray, grads: &mut Grads) -> DenseArray {
        let d = self.cfg.model_dim;
        let t = cache.tokens;
        let mut dx = dout.clone();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let dact = match b.fc2_bias {
                Some(bias) => {
                    let (dw, db) = grads.pair(b.fc2, bias);
                    linear_backward(&c.act, store.value(b.fc2), &dx, dw, Some(db))
                }
                None => linear_backward(&c.act, store.value(b.fc2), &dx, grads.slot(b.fc2), None),
            };
            let mut dpre = dact;
            for (g, p) in dpre.data_mut().iter_mut().zip(c.pre_act.data()) {
                *g *= gelu_grad(*p);
            }
            let dh2 = {
                let (dw, db) = grads.pair(b.fc1.0, b.fc1.1);
                linear_backward(&c.h2, store.value(b.fc1.0), &dpre, dw, Some(db))
            };
            let dln2 = {
                let (dg, dbeta) = grads.pair(b.norm2.0, b.norm2.1);
                layer_norm_backward(&c.ln2, store.value(b.norm2.0), &dh2, dg, dbeta)
            };
            dx.add_assign(&dln2);

            let dctx = match b.out_bias {
                Some(bias) => {
                    let (dw, db) = grads.pair(b.out, bias);
                    linear_backward(&c.ctx, store.value(b.out), &dx, dw, Some(db))
                }
                None => linear_backward(&c.ctx, store.value(b.out), &dx, grads.slot(b.out), None),
            };
            let dqkv = attention_backward(c.qkv.data(), &c.attn, dctx.data(), t, d, self.cfg.heads);
            let dqkv = DenseArray::from_vec(&[t, 3 * d], dqkv).expect("qkv gradient");
            {
                let (dqb, dvb) = grads.pair(b.q_bias, b.v_bias);
                for r in 0..t {
                    let row = dqkv.row(r);
                    dqb.iter_mut().zip(&row[..d]).for_each(|(g, v)| *g += v);
                    dvb.iter_mut().zip(&row[2 * d..]).for_each(|(g, v)| *g += v);
                }
            }
            let dh1 = linear_backward(&c.h1, store.value(b.qkv), &dqkv, grads.slot(b.qkv), None);
            let dln1 = {
                let (dg, dbeta) = grads.pair(b.norm1.0, b.norm1.1);
                layer_norm_backward(&c.ln1, store.value(b.norm1.0), &dh1, dg, dbeta)
            };
            dx.add_assign(&dln1);
        }
        dx
    }

    /// Post-softmax attention weights of `layer`, `[heads × T × T]`.
    pub fn attention(&self, store: &ParamStore, tokens: &DenseArray, layer: usize) -> Result<DenseArray> {
        if layer >= self.blocks.len() {
            return Err(Error::Config(format!(
                "layer {layer} out of range; the encoder has {} layers",
                self.blocks.len()
            )));
        }
        let (_, cache) = self.forward(store, tokens)?;
        Ok(cache.attention(layer, self.cfg.heads))
    }
}

/// Multi-head scaled dot-product attention over a packed `[T × 3D]` q/k/v
/// buffer. Returns the attention weights and the concatenated head outputs.
fn attention_forward(qkv: &[f64], t: usize, d: usize, heads: usize) -> (Vec<f64>, DenseArray) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn = vec![0.0; heads * t * t];
    let mut ctx = DenseArray::zeros(&[t, d]);
    for h in 0..heads {
        let s = &mut attn[h * t * t..(h + 1) * t * t];
        gemm(
            t,
            dh,
            t,
            scale,
            MatRef::strided(&qkv[h * dh..], 3 * d, 1),
            MatRef::strided(&qkv[d + h * dh..], 1, 3 * d),
            0.0,
            s,
        );
        for row in s.chunks_mut(t) {
            softmax_in_place(row);
        }
        gemm_strided(
            t,
            t,
            dh,
            1.0,
            MatRef::row_major(s, t),
            MatRef::strided(&qkv[2 * d + h * dh..], 3 * d, 1),
            0.0,
            &mut ctx.data_mut()[h * dh..],
            d,
            1,
        );
    }
    (attn, ctx)
}

fn attention_backward(qkv: &[f64], attn: &[f64], dctx: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; t * 3 * d];
    let mut da = vec![0.0; t * t];
    let mut ds = vec![0.0; t * t];
    for h in 0..heads {
        let a = &attn[h * t * t..(h + 1) * t * t];
        let dctx_h = MatRef::strided(&dctx[h * dh..], d, 1);
        // dA = dctx_h · V_hᵀ
        gemm(
            t,
            dh,
            t,
            1.0,
            dctx_h,
            MatRef::strided(&qkv[2 * d + h * dh..], 1, 3 * d),
            0.0,
            &mut da,
        );
        // dV_h = Aᵀ · dctx_h
        gemm_strided(
            t,
            t,
            dh,
            1.0,
            MatRef::transposed(a, t),
            dctx_h,
            0.0,
            &mut dqkv[2 * d + h * dh..],
            3 * d,
            1,
        );
        for r in 0..t {
            softmax_backward_row(&a[r * t..(r + 1) * t], &da[r * t..(r + 1) * t], &mut ds[r * t..(r + 1) * t]);
        }
        // dQ_h = scale · dS · K_h
        gemm_strided(
            t,
            t,
            dh,
            scale,
            MatRef::row_major(&ds, t),
            MatRef::strided(&qkv[d + h * dh..], 3 * d, 1),
            0.0,
            &mut dqkv[h * dh..],
            3 * d,
            1,
        );
        // dK_h = scale · dSᵀ · Q_h
        gemm_strided(
            t,
            t,
            dh,
            scale,
            MatRef::transposed(&ds, t),
            MatRef::strided(&qkv[h * dh..], 3 * d, 1),
            0.0,
            &mut dqkv[d + h * dh..],
            3 * d,
            1,
        );
    }
    dqkv
}

/// Runs the encoder on one fused sequence.
pub fn encode(seq: &FusedSequence, cfg: &TransformerConfig, params: &ParamStore) -> Result<DenseArray> {
    let enc = TransformerEncoder::bind(cfg, params)?;
    Ok(enc.forward(params, &seq.tokens)?.0)
}

/// Post-softmax attention weights of one layer for one fused sequence.
pub fn extract_attention(
    seq: &FusedSequence,
    cfg: &TransformerConfig,
    params: &ParamStore,
    layer: usize,
) -> Result<DenseArray> {
    let enc = TransformerEncoder::bind(cfg, params)?;
    enc.attention(params, &seq.tokens, layer)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch normalization between the global feature and the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct BnNeckState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

impl BnNeckState {
    /// Fresh state: running statistics (0, 1), gamma 1, beta 0.
    pub fn new(dim: usize, momentum: f64, eps: f64, mode: BnMode) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            momentum,
            eps,
            mode,
        }
    }
}

/// Batched head output; row `i` belongs to sample `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    /// `[B × D]`, pre-BN, triplet branch.
    pub global_feature: DenseArray,
    /// `[B × D]`.
    pub bn_feature: DenseArray,
    /// `[B × M]`.
    pub logits: DenseArray,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    norm: NormCache,
    mode: BnMode,
}

/// Running statistics after a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `global_feature → BN → classifier`. In train mode the batch statistics
/// normalize and the updated running statistics are returned (unbiased batch
/// variance, exponential average with `momentum`); eval mode uses the running
/// statistics only.
pub fn forward_head(
    global: &DenseArray,
    bn: &BnNeckState,
    classifier: &DenseArray,
) -> Result<(HeadOutput, HeadCache, Option<RunningStats>)> {
    let (b, d) = (global.rows(), global.cols());
    if classifier.shape().len() != 2 || classifier.rows() != d {
        return Err(Error::shape(
            "forward_head",
            format!("features {:?} with classifier {:?}", global.shape(), classifier.shape()),
        ));
    }
    let gamma = DenseArray::from_vec(&[d], bn.gamma.clone())?;
    let beta = DenseArray::from_vec(&[d], bn.beta.clone())?;
    let (bn_feature, norm, stats) = match bn.mode {
        BnMode::Train => {
            if b < 2 {
                return Err(Error::Data("train-mode batch normalization needs at least 2 samples".into()));
            }
            let (out, cache, mean, var) = batch_norm_train(global, &gamma, &beta, bn.eps)?;
            let m = bn.momentum;
            let unbias = b as f64 / (b - 1) as f64;
            let stats = RunningStats {
                mean: bn.running_mean.iter().zip(&mean).map(|(r, v)| (1.0 - m) * r + m * v).collect(),
                var: bn.running_var.iter().zip(&var).map(|(r, v)| (1.0 - m) * r + m * v * unbias).collect(),
            };
            (out, cache, Some(stats))
        }
        BnMode::Eval => {
            let inv_std: Vec<f64> = bn.running_var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            let mut xhat = DenseArray::zeros(&[b, d]);
            let mut out = DenseArray::zeros(&[b, d]);
            for r in 0..b {
                for j in 0..d {
                    let h = (global.row(r)[j] - bn.running_mean[j]) * inv_std[j];
                    xhat.row_mut(r)[j] = h;
                    out.row_mut(r)[j] = bn.gamma[j] * h + bn.beta[j];
                }
            }
            (out, NormCache { xhat, inv_std }, None)
        }
    };
    let logits = linear(&bn_feature, classifier, None)?;
    Ok((
        HeadOutput {
            global_feature: global.clone(),
            bn_feature,
            logits,
        },
        HeadCache { norm, mode: bn.mode },
        stats,
    ))
}

/// Gradient slots for the head's learnable arrays.
pub struct HeadGrads<'a> {
    pub gamma: &'a mut [f64],
    pub beta: &'a mut [f64],
    pub classifier: &'a mut [f64],
}

/// Backward of [`forward_head`] from `dlogits`; returns the gradient for the
/// global features.
pub fn head_backward(
    out: &HeadOutput,
    cache: &HeadCache,
    bn: &BnNeckState,
    classifier: &DenseArray,
    dlogits: &DenseArray,
    grads: HeadGrads<'_>,
) -> DenseArray {
    let dbn = linear_backward(&out.bn_feature, classifier, dlogits, grads.classifier, None);
    let d = bn.gamma.len();
    let gamma = DenseArray::from_vec(&[d], bn.gamma.clone()).expect("gamma");
    match cache.mode {
        BnMode::Train => batch_norm_train_backward(&cache.norm, &gamma, &dbn, grads.gamma, grads.beta),
        BnMode::Eval => {
            let mut dx = DenseArray::zeros(dbn.shape());
            for r in 0..dbn.rows() {
                for j in 0..d {
                    let g = dbn.row(r)[j];
                    grads.gamma[j] += g * cache.norm.xhat.row(r)[j];
                    grads.beta[j] += g;
                    dx.row_mut(r)[j] = g * bn.gamma[j] * cache.norm.inv_std[j];
                }
            }
            dx
        }
    }
}

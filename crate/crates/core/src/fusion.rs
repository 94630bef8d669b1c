//! Translation of image patches and caption key-words into one shared
//! `(N+1)×D` token space.
//!
//! Each modality has a frozen encoder (image: fixed orthonormal map of the
//! flattened patch; text: fixed embedding table), its own learnable linear
//! projection to `D`, its own class token and its own position embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{linear, linear_backward_params};
use crate::numerics::{DenseArray, Grads, Init, ParamId, ParamSpec, ParamStore};
use crate::synthdata::{PersonImage, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Non-overlapping raster-order patches, each flattened `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_h: usize,
    pub patch_w: usize,
    /// Patches along the vertical and horizontal axes.
    pub grid: (usize, usize),
    /// `[N × patch_h·patch_w·C]`.
    pub patches: DenseArray,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat_dim(&self) -> usize {
        self.patches.cols()
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

pub fn split_patches(img: &PersonImage, patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    split_pixels(&img.pixels, patch_h, patch_w)
}

/// Patches an `[H, W, C]` array.
pub fn split_pixels(pixels: &DenseArray, patch_h: usize, patch_w: usize) -> Result<PatchGrid> {
    let shape = pixels.shape();
    if shape.len() != 3 {
        return Err(Error::shape("split_patches", format!("expected [H, W, C], got {shape:?}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    if patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0 {
        return Err(Error::Config(format!(
            "patch {patch_h}x{patch_w} does not tile a {h}x{w} image; valid patch heights {:?}, widths {:?}",
            divisors(h),
            divisors(w)
        )));
    }
    let (gh, gw) = (h / patch_h, w / patch_w);
    let flat = patch_h * patch_w * c;
    let mut patches = DenseArray::zeros(&[gh * gw, flat]);
    let src = pixels.data();
    for pr in 0..gh {
        for pc in 0..gw {
            let row = patches.row_mut(pr * gw + pc);
            let mut k = 0;
            for y in 0..patch_h {
                let start = ((pr * patch_h + y) * w + pc * patch_w) * c;
                let len = patch_w * c;
                row[k..k + len].copy_from_slice(&src[start..start + len]);
                k += len;
            }
        }
    }
    Ok(PatchGrid {
        patch_h,
        patch_w,
        grid: (gh, gw),
        patches,
    })
}

/// Seeded `rows × cols` matrix with orthonormal columns (or rows, when
/// `cols > rows`), by modified Gram–Schmidt on a Gaussian draw.
pub fn orthonormal_matrix(rows: usize, cols: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = if cols <= rows { (rows, cols) } else { (cols, rows) };
    // m vectors of length n
    let mut vecs: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    for i in 0..m {
        for j in 0..i {
            let (head, tail) = vecs.split_at_mut(i);
            let dot: f64 = tail[0].iter().zip(&head[j]).map(|(a, b)| a * b).sum();
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = vecs[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        vecs[i].iter_mut().for_each(|v| *v /= norm);
    }
    let mut out = DenseArray::zeros(&[rows, cols]);
    for (i, v) in vecs.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            let (r, c) = if cols <= rows { (j, i) } else { (i, j) };
            out.data_mut()[r * cols + c] = *x;
        }
    }
    out
}

/// Seeded standard-normal embedding table with an all-zero `PAD` row.
pub fn embedding_table(vocab: usize, dim: usize, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = DenseArray::zeros(&[vocab, dim]);
    for r in 0..vocab {
        for v in table.row_mut(r) {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    table.row_mut(PAD_ID).fill(0.0);
    table
}

/// A modality's translation parameters.
#[derive(Clone, Debug)]
pub struct Translator {
    pub modality: Modality,
    pub encoder: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
}

/// Shape bookkeeping for both translators.
#[derive(Clone, Copy, Debug)]
pub struct FusionDims {
    pub num_tokens: usize,
    pub flat_dim: usize,
    pub image_dim: usize,
    pub vocab: usize,
    pub text_dim: usize,
    pub model_dim: usize,
    pub encoder_seed: u64,
    pub init_std: f64,
}

impl Translator {
    pub fn prefix(modality: Modality) -> &'static str {
        modality.name()
    }

    pub fn param_specs(modality: Modality, dims: &FusionDims) -> Vec<ParamSpec> {
        let p = Self::prefix(modality);
        let std = dims.init_std;
        let (mut encoder, in_dim) = match modality {
            Modality::Image => (
                orthonormal_matrix(dims.flat_dim, dims.image_dim, dims.encoder_seed),
                dims.image_dim,
            ),
            Modality::Text => (
                embedding_table(dims.vocab, dims.text_dim, dims.encoder_seed ^ 0x7E47),
                dims.text_dim,
            ),
        };
        encoder.round_to_f32();
        vec![
            ParamSpec::new(format!("{p}.encoder"), encoder.shape(), Init::Value(encoder.clone())).frozen(),
            ParamSpec::new(format!("{p}.proj.weight"), &[in_dim, dims.model_dim], Init::TruncNormal { std }).decayed(),
            ParamSpec::new(format!("{p}.proj.bias"), &[dims.model_dim], Init::Zeros),
            ParamSpec::new(format!("{p}.cls"), &[1, dims.model_dim], Init::TruncNormal { std }),
            ParamSpec::new(format!("{p}.pos"), &[dims.num_tokens + 1, dims.model_dim], Init::TruncNormal { std }),
        ]
    }

    pub fn bind(modality: Modality, store: &ParamStore) -> Result<Self> {
        let p = Self::prefix(modality);
        Ok(Self {
            modality,
            encoder: store.require(&format!("{p}.encoder"))?,
            proj_weight: store.require(&format!("{p}.proj.weight"))?,
            proj_bias: store.require(&format!("{p}.proj.bias"))?,
            cls: store.require(&format!("{p}.cls"))?,
            pos: store.require(&format!("{p}.pos"))?,
        })
    }

    /// Frozen-encoder output for one sample: `[N × D_in]`.
    fn encode_content(&self, store: &ParamStore, input: &TranslatorInput<'_>) -> Result<DenseArray> {
        let enc = store.value(self.encoder);
        let n = store.value(self.pos).rows() - 1;
        match (self.modality, input) {
            (Modality::Image, TranslatorInput::Patches(grid)) => {
                if grid.len() != n {
                    return Err(Error::shape(
                        "image_translate",
                        format!("{} patches but position embedding expects {n}", grid.len()),
                    ));
                }
                if grid.flat_dim() != enc.rows() {
                    return Err(Error::shape(
                        "image_translate",
                        format!("patch dimension {} but encoder expects {}", grid.flat_dim(), enc.rows()),
                    ));
                }
                grid.patches.matmul(enc)
            }
            (Modality::Text, TranslatorInput::Tokens(ids)) => {
                if ids.len() > n {
                    return Err(Error::shape(
                        "text_translate",
                        format!("{} words exceed the {n} token slots", ids.len()),
                    ));
                }
                let dt = enc.cols();
                let mut out = DenseArray::zeros(&[n, dt]);
                for (k, &id) in ids.iter().enumerate() {
                    if id >= enc.rows() {
                        return Err(Error::Data(format!("token id {id} outside the vocabulary")));
                    }
                    out.row_mut(k).copy_from_slice(enc.row(id));
                }
                // remaining rows are PAD, whose embedding is zero
                Ok(out)
            }
            _ => Err(Error::Config(format!(
                "{} translator received the wrong input modality",
                self.modality.name()
            ))),
        }
    }

    /// `[cls, proj(e_1), …, proj(e_N)] + pos`.
    pub fn forward(&self, store: &ParamStore, input: &TranslatorInput<'_>) -> Result<(DenseArray, TranslateCache)> {
        let content = self.encode_content(store, input)?;
        let projected = linear(&content, store.value(self.proj_weight), Some(store.value(self.proj_bias)))
            .map_err(|_| {
                Error::shape(
                    "translate",
                    format!(
                        "encoder output width {} does not match projection {:?}",
                        content.cols(),
                        store.value(self.proj_weight).shape()
                    ),
                )
            })?;
        let pos = store.value(self.pos);
        let d = pos.cols();
        let mut tokens = pos.clone();
        for (t, c) in tokens.row_mut(0).iter_mut().zip(store.value(self.cls).data()) {
            *t += c;
        }
        for j in 0..projected.rows() {
            for (t, v) in tokens.row_mut(j + 1).iter_mut().zip(projected.row(j)) {
                *t += v;
            }
        }
        debug_assert_eq!(tokens.cols(), d);
        Ok((tokens, TranslateCache { content }))
    }

    pub fn backward(&self, cache: &TranslateCache, dtokens: &DenseArray, grads: &mut Grads) {
        grads.slot(self.pos).iter_mut().zip(dtokens.data()).for_each(|(g, d)| *g += d);
        grads.slot(self.cls).iter_mut().zip(dtokens.row(0)).for_each(|(g, d)| *g += d);
        let n = dtokens.rows() - 1;
        let d = dtokens.cols();
        let drows = DenseArray::from_vec(&[n, d], dtokens.data()[d..].to_vec()).expect("token rows");
        let (dw, db) = grads.pair(self.proj_weight, self.proj_bias);
        linear_backward_params(&cache.content, &drows, dw, Some(db));
    }
}

#[derive(Clone, Copy, Debug)]
pub enum TranslatorInput<'a> {
    Patches(&'a PatchGrid),
    Tokens(&'a [usize]),
}

impl TranslatorInput<'_> {
    pub fn modality(&self) -> Modality {
        match self {
            TranslatorInput::Patches(_) => Modality::Image,
            TranslatorInput::Tokens(_) => Modality::Text,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TranslateCache {
    content: DenseArray,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedSequence {
    /// `[(N+1) × D]`; row 0 is the class token.
    pub tokens: DenseArray,
    pub modality: Modality,
    pub identity_id: u32,
}

/// Translates one image into the fused space.
pub fn image_translate(
    store: &ParamStore,
    translator: &Translator,
    grid: &PatchGrid,
    identity_id: u32,
) -> Result<FusedSequence> {
    if translator.modality != Modality::Image {
        return Err(Error::Config("image_translate needs the image translator".into()));
    }
    let (tokens, _) = translator.forward(store, &TranslatorInput::Patches(grid))?;
    Ok(FusedSequence {
        tokens,
        modality: Modality::Image,
        identity_id,
    })
}

/// Translates one caption (token ids, at most N) into the fused space.
pub fn text_translate(
    store: &ParamStore,
    translator: &Translator,
    token_ids: &[usize],
    identity_id: u32,
) -> Result<FusedSequence> {
    if translator.modality != Modality::Text {
        return Err(Error::Config("text_translate needs the text translator".into()));
    }
    let (tokens, _) = translator.forward(store, &TranslatorInput::Tokens(token_ids))?;
    Ok(FusedSequence {
        tokens,
        modality: Modality::Text,
        identity_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> PersonImage {
        let data = (0..h * w * 3).map(|v| (v % 97) as f64 / 97.0).collect();
        PersonImage {
            pixels: DenseArray::from_vec(&[h, w, 3], data).unwrap(),
            identity_id: 0,
            camera_id: 0,
            domain_id: 0,
        }
    }

    #[test]
    fn default_patching_gives_32_patches() {
        let g = split_patches(&image(64, 32), 8, 8).unwrap();
        assert_eq!(g.len(), 32);
        assert_eq!(g.flat_dim(), 192);
        assert_eq!(g.grid, (8, 4));
    }

    #[test]
    fn whole_image_patch_is_the_image() {
        let img = image(64, 32);
        let g = split_patches(&img, 64, 32).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.patches.data(), img.pixels.data());
    }

    #[test]
    fn non_dividing_patch_suggests_sizes() {
        let err = split_patches(&image(64, 32), 7, 7).unwrap_err().to_string();
        assert!(err.contains("valid patch heights"), "{err}");
        assert!(err.contains('8'));
    }

    #[test]
    fn patches_are_raster_order() {
        let img = image(4, 4);
        let g = split_patches(&img, 2, 2).unwrap();
        // second patch starts at pixel (0, 2)
        assert_eq!(g.patches.row(1)[..3], *img.pixel(0, 2));
        // third patch starts at pixel (2, 0)
        assert_eq!(g.patches.row(2)[..3], *img.pixel(2, 0));
        assert_eq!(g.patches.row(3)[9..12], *img.pixel(3, 3));
    }

    #[test]
    fn orthonormal_columns() {
        let q = orthonormal_matrix(12, 5, 3);
        let gram = q.clone().reshape(&[12, 5]).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = (0..12).map(|r| gram.get2(r, a) * gram.get2(r, b)).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
        // wide case: orthonormal rows, hence an isometry
        let w = orthonormal_matrix(4, 9, 1);
        let x = DenseArray::from_vec(&[1, 4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = x.matmul(&w).unwrap();
        let nx: f64 = x.data().iter().map(|v| v * v).sum();
        let ny: f64 = y.data().iter().map(|v| v * v).sum();
        assert!((nx - ny).abs() < 1e-12);
    }

    #[test]
    fn pad_embedding_is_zero() {
        let t = embedding_table(10, 4, 0);
        assert!(t.row(PAD_ID).iter().all(|&v| v == 0.0));
        assert!(t.row(1).iter().any(|&v| v != 0.0));
    }
}

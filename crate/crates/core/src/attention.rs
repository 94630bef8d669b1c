//! Attention-map export for one image.
//!
//! `attention.f32` starts with eight newline-terminated ASCII lines
//!
//! ```text
//! DMF-ATTENTION 1
//! heads <h>
//! tokens <T>
//! grid <rows> <cols>
//! layer <l>
//! sample <id>
//! checkpoint <sha256>
//! data f32le heads*tokens*tokens
//! ```
//!
//! followed by the `[heads × T × T]` weights as 32-bit little-endian floats.
//! Each head also gets `head_<h>.pgm`: the CLS row without the CLS column,
//! laid out on the patch grid, scaled to 0..255 and enlarged to image size.

use std::fs;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::{split_patches, TranslatorInput};
use crate::synthdata::PersonImage;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionExport {
    pub heads: usize,
    pub tokens: usize,
    pub grid: (usize, usize),
    pub layer: usize,
    /// `[heads × T × T]`, row-major.
    pub weights: Vec<f64>,
}

impl AttentionExport {
    /// Attention from the CLS token to each patch for one head, row-major
    /// over the patch grid.
    pub fn cls_map(&self, head: usize) -> &[f64] {
        let t = self.tokens;
        &self.weights[head * t * t + 1..head * t * t + t]
    }
}

pub fn image_attention(ckpt: &Checkpoint, image: &PersonImage, layer: usize) -> Result<AttentionExport> {
    let model = ckpt.validate_against(None)?;
    let cfg = model.config();
    if image.height() != model.shape().image_height || image.width() != model.shape().image_width {
        return Err(Error::Data(format!(
            "image is {}x{}, the model expects {}x{}",
            image.height(),
            image.width(),
            model.shape().image_height,
            model.shape().image_width
        )));
    }
    let grid = split_patches(image, cfg.patch_height, cfg.patch_width)?;
    let (tokens, _) = model
        .translator(crate::fusion::Modality::Image)
        .forward(&ckpt.params, &TranslatorInput::Patches(&grid))?;
    let att = model.encoder().attention(&ckpt.params, &tokens, layer)?;
    let shape = att.shape().to_vec();
    Ok(AttentionExport {
        heads: shape[0],
        tokens: shape[1],
        grid: grid.grid,
        layer,
        weights: att.into_data(),
    })
}

pub fn write_attention(out: &Path, export: &AttentionExport, sample: &str, checkpoint_id: &str, scale: (usize, usize)) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let header = format!(
        "DMF-ATTENTION 1\nheads {}\ntokens {}\ngrid {} {}\nlayer {}\nsample {}\ncheckpoint {}\ndata f32le heads*tokens*tokens\n",
        export.heads, export.tokens, export.grid.0, export.grid.1, export.layer, sample, checkpoint_id
    );
    let mut bytes = header.into_bytes();
    for v in &export.weights {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let path = out.join("attention.f32");
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    let (rows, cols) = export.grid;
    let (sy, sx) = scale;
    for h in 0..export.heads {
        let map = export.cls_map(h);
        let (lo, hi) = map.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut pgm = format!("P5\n{} {}\n255\n", cols * sx, rows * sy).into_bytes();
        for r in 0..rows * sy {
            for c in 0..cols * sx {
                let v = (map[(r / sy) * cols + c / sx] - lo) / span;
                pgm.push((v * 255.0).round() as u8);
            }
        }
        let path = out.join(format!("head_{h}.pgm"));
        fs::write(&path, pgm).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Parses a file written by [`write_attention`].
pub fn read_attention(path: &Path) -> Result<AttentionExport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut lines = Vec::with_capacity(8);
    let mut pos = 0;
    for _ in 0..8 {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("short header"))?;
        lines.push(std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not ASCII"))?);
        pos += end + 1;
    }
    if lines[0] != "DMF-ATTENTION 1" {
        return Err(bad("not an attention export"));
    }
    let field = |i: usize, key: &str| -> Result<Vec<usize>> {
        let mut parts = lines[i].split(' ');
        if parts.next() != Some(key) {
            return Err(bad(&format!("expected `{key}` on header line {}", i + 1)));
        }
        parts.map(|p| p.parse().map_err(|_| bad(&format!("bad `{key}` value")))).collect()
    };
    let heads = field(1, "heads")?[0];
    let tokens = field(2, "tokens")?[0];
    let grid = field(3, "grid")?;
    let layer = field(4, "layer")?[0];
    let payload = &bytes[pos..];
    if payload.len() != heads * tokens * tokens * 4 || grid.len() != 2 {
        return Err(bad("payload length does not match the header"));
    }
    Ok(AttentionExport {
        heads,
        tokens,
        grid: (grid[0], grid[1]),
        layer,
        weights: payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    })
}

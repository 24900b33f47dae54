//! Trainable stand-ins for the two frozen vision backbones, plus the shared
//! word-embedding table.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, Attention, FeedForward, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::raster::Image;

/// Token sequence produced by a vision encoder, `(B, grid*grid, dim)`.
#[derive(Debug, Clone)]
pub struct VisionTokens {
    pub tokens: Tensor,
    pub grid: usize,
}

impl VisionTokens {
    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn len(&self) -> usize {
        self.tokens.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stack images into a `(B, H, W, 3)` tensor.
pub fn images_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::Shape(format!(
                "mixed image sizes in batch: {}x{} vs {h}x{w}",
                img.height, img.width
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// Pre-norm transformer block: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    ffn: FeedForward,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, group: ParamGroup) -> Result<Self> {
        Ok(EncoderBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, group)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, group)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, group)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, group)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, None)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

/// ViT-style encoder: non-overlapping patches, learned positional table
/// with one entry per grid cell, a small self-attention stack.
#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub image_size: usize,
    pub grid: usize,
    pub patch: usize,
    pub proj: Linear,
    pub pos: Tensor,
    blocks: Vec<EncoderBlock>,
}

impl PatchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        image_size: usize,
        grid: usize,
        dim: usize,
        heads: usize,
        layers: usize,
        group: ParamGroup,
    ) -> Result<Self> {
        if grid == 0 || image_size % grid != 0 {
            return Err(Error::Config(format!(
                "{name}: image size {image_size} not divisible by grid {grid}"
            )));
        }
        let patch = image_size / grid;
        let proj = Linear::new(store, &format!("{name}.patch"), 3 * patch * patch, dim, group)?;
        let pos = store.normal(&format!("{name}.pos"), &[grid * grid, dim], 0.02, group)?;
        let blocks = (0..layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.block{i}"), dim, heads, group))
            .collect::<Result<_>>()?;
        Ok(PatchEncoder {
            image_size,
            grid,
            patch,
            proj,
            pos,
            blocks,
        })
    }

    /// `(B, H, W, 3)` -> `(B, G*G, 3*P*P)`, patches in row-major grid order,
    /// each flattened as (row, col, channel).
    pub fn patchify(&self, images: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = images.dims4()?;
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::Config(format!(
                "encoder expects {0}x{0}x3 images, got {h}x{w}x{c}",
                self.image_size
            )));
        }
        let (g, p) = (self.grid, self.patch);
        Ok(images
            .reshape((b, g, p, g, p, 3))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, g * g, p * p * 3))?)
    }

    /// Patch projection plus positional embedding, before any attention.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.proj.forward(&self.patchify(images)?)?;
        Ok(x.broadcast_add(&self.pos)?)
    }

    pub fn encode(&self, images: &Tensor) -> Result<VisionTokens> {
        let mut x = self.embed(images)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        ensure_finite(&x, "vision encoder")?;
        Ok(VisionTokens {
            tokens: x,
            grid: self.grid,
        })
    }
}

/// `|V| x d_w` lookup table shared by the prompt path and the decoder
/// (which also uses it, transposed, as its output projection).
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub table: Tensor,
}

impl TextEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Result<Self> {
        Ok(TextEmbedding {
            table: store.normal(name, &[vocab, dim], 0.02, ParamGroup::Language)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.dims()[0]
    }

    /// `ids (B, L)` of dtype u32 -> `(B, L, d_w)`.
    pub fn embed(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        let v = self.vocab_size() as u32;
        if let Some(&bad) = flat.to_vec1::<u32>()?.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("token id {bad} >= vocabulary size {v}")));
        }
        let rows = self.table.index_select(&flat, 0)?;
        Ok(rows.reshape((b, l, self.table.dims()[1]))?)
    }
}

/// Token ids as a `(B, L)` u32 tensor; rows must share a length.
pub fn ids_to_tensor(rows: &[Vec<u32>], device: &Device) -> Result<Tensor> {
    let l = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != l) {
        return Err(Error::Shape("ragged token batch".into()));
    }
    let flat: Vec<u32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), l), device)?)
}

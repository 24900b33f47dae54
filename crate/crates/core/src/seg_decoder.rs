//! Emotion-driven segmentation: the feature mixer that fuses query tokens
//! (prompt + mask tokens) with vision tokens, and the mask head that turns
//! the refined mask token into a dynamic per-pixel classifier.

use candle_core::{DType, Tensor};

use crate::config::Paradigm;
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::raster::Grid;

/// One mixer block, pre-norm residual sub-layers in this order:
/// query self-attention, queries->vision cross-attention, query
/// feed-forward, vision->queries cross-attention.
#[derive(Debug, Clone)]
pub struct MixerBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_q2v_q: LayerNorm,
    pub norm_q2v_v: LayerNorm,
    pub q2v: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_v2q_v: LayerNorm,
    pub norm_v2q_q: LayerNorm,
    pub v2q: Attention,
}

impl MixerBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let g = ParamGroup::Mixer;
        let ln = |store: &mut ParamStore, s: &str| LayerNorm::new(store, &format!("{name}.{s}"), dim, g);
        Ok(MixerBlock {
            norm_self: ln(store, "norm_self")?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, g)?,
            norm_q2v_q: ln(store, "norm_q2v_q")?,
            norm_q2v_v: ln(store, "norm_q2v_v")?,
            q2v: Attention::new(store, &format!("{name}.q2v"), dim, heads, g)?,
            norm_ffn: ln(store, "norm_ffn")?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, g)?,
            norm_v2q_v: ln(store, "norm_v2q_v")?,
            norm_v2q_q: ln(store, "norm_v2q_q")?,
            v2q: Attention::new(store, &format!("{name}.v2q"), dim, heads, g)?,
        })
    }

    /// `queries (B, Lq, d)`, `vision (B, Lv, d)` -> updated pair, same shapes.
    pub fn forward(&self, queries: &Tensor, vision: &Tensor) -> Result<(Tensor, Tensor)> {
        let qd = queries.dims3()?.2;
        let vd = vision.dims3()?.2;
        if qd != vd {
            return Err(Error::Config(format!("mixer query dim {qd} != vision dim {vd}")));
        }
        let h = self.norm_self.forward(queries)?;
        let q = (queries + self.self_attn.forward(&h, &h, None)?)?;
        let hq = self.norm_q2v_q.forward(&q)?;
        let hv = self.norm_q2v_v.forward(vision)?;
        let q = (&q + self.q2v.forward(&hq, &hv, None)?)?;
        let q = (&q + self.ffn.forward(&self.norm_ffn.forward(&q)?)?)?;
        let hv = self.norm_v2q_v.forward(vision)?;
        let hq = self.norm_v2q_q.forward(&q)?;
        let v = (vision + self.v2q.forward(&hv, &hq, None)?)?;
        Ok((q, v))
    }
}

#[derive(Debug, Clone)]
pub struct FeatureMixer {
    pub blocks: Vec<MixerBlock>,
}

/// Mixer result split back into its roles. `prompt` is absent in
/// multi-mask mode.
#[derive(Debug, Clone)]
pub struct MixerOutput {
    pub prompt: Option<Tensor>,
    pub mask: Tensor,
    pub vision: Tensor,
}

impl FeatureMixer {
    pub fn new(store: &mut ParamStore, blocks: usize, dim: usize, heads: usize) -> Result<Self> {
        Ok(FeatureMixer {
            blocks: (0..blocks)
                .map(|i| MixerBlock::new(store, &format!("mixer.block{i}"), dim, heads))
                .collect::<Result<_>>()?,
        })
    }

    /// Single-mask: queries are `[prompt, mask]`. Multi-mask: queries are the
    /// eight mask tokens and no prompt may be given.
    pub fn run(
        &self,
        paradigm: Paradigm,
        prompt: Option<&Tensor>,
        mask_tokens: &Tensor,
        vision: &Tensor,
    ) -> Result<MixerOutput> {
        let (queries, prompt_len) = match (paradigm, prompt) {
            (Paradigm::Single, Some(p)) => (Tensor::cat(&[p, mask_tokens], 1)?, p.dims3()?.1),
            (Paradigm::Single, None) => {
                return Err(Error::Usage("single-mask mode needs prompt tokens".into()))
            }
            (Paradigm::Multi, Some(_)) => {
                return Err(Error::Usage("multi-mask mode takes no prompt".into()))
            }
            (Paradigm::Multi, None) => (mask_tokens.clone(), 0),
        };
        let mut q = queries;
        let mut v = vision.clone();
        for block in &self.blocks {
            (q, v) = block.forward(&q, &v)?;
        }
        let total = q.dims3()?.1;
        let prompt = match paradigm {
            Paradigm::Single => Some(q.narrow(1, 0, prompt_len)?),
            Paradigm::Multi => None,
        };
        Ok(MixerOutput {
            prompt,
            mask: q.narrow(1, prompt_len, total - prompt_len)?,
            vision: v,
        })
    }
}

/// Learnable mask token(s): one in single-mask mode, one per emotion
/// (row i bound to emotion id i) in multi-mask mode.
#[derive(Debug, Clone)]
pub struct MaskTokens {
    pub table: Tensor,
}

impl MaskTokens {
    pub fn new(store: &mut ParamStore, count: usize, dim: usize) -> Result<Self> {
        Ok(MaskTokens {
            table: store.normal("mask_tokens", &[count, dim], 1.0, ParamGroup::MaskTokens)?,
        })
    }

    pub fn count(&self) -> usize {
        self.table.dims()[0]
    }

    /// `(B, n, d)` copies of the table. With `trainable`, a `(B, n)` 0/1
    /// matrix, rows flagged 0 are detached so they receive no gradient from
    /// that batch element.
    pub fn expand(&self, batch: usize, trainable: Option<&[Vec<bool>]>) -> Result<Tensor> {
        let (n, d) = self.table.dims2()?;
        let live = self.table.unsqueeze(0)?.broadcast_as((batch, n, d))?;
        let Some(flags) = trainable else {
            return Ok(live.contiguous()?);
        };
        if flags.len() != batch || flags.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("mask-token selection does not match batch".into()));
        }
        let sel: Vec<f64> = flags.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let sel = Tensor::from_vec(sel, (batch, n, 1), self.table.device())?.to_dtype(self.table.dtype())?;
        let frozen = live.detach();
        let inv = (1.0 - &sel)?;
        Ok((live.broadcast_mul(&sel)? + frozen.broadcast_mul(&inv)?)?)
    }
}

/// Two stride-2 upsamplings (kernel 2, so each output pixel depends on one
/// token) with channel schedule d -> d/4 -> d/8, and a 3-layer MLP that maps
/// each refined mask token to a d/8 classifier vector.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub up1: Linear,
    pub up_norm: LayerNorm,
    pub up2: Linear,
    pub mlp: [Linear; 3],
    dim: usize,
}

/// `(B, S, S, 4c)` -> `(B, 2S, 2S, c)`; channel index is `(dy*2 + dx)*c + ch`.
fn pixel_shuffle2(x: &Tensor) -> Result<Tensor> {
    let (b, s, s2, c4) = x.dims4()?;
    debug_assert_eq!(s, s2);
    let c = c4 / 4;
    Ok(x.reshape((b, s, s, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 2 * s, 2 * s, c))?)
}

impl MaskHead {
    pub fn new(store: &mut ParamStore, dim: usize) -> Result<Self> {
        let g = ParamGroup::MaskHead;
        let (c1, c2) = (dim / 4, dim / 8);
        Ok(MaskHead {
            up1: Linear::new(store, "mask_head.up1", dim, 4 * c1, g)?,
            up_norm: LayerNorm::new(store, "mask_head.up_norm", c1, g)?,
            up2: Linear::new(store, "mask_head.up2", c1, 4 * c2, g)?,
            mlp: [
                Linear::new(store, "mask_head.mlp0", dim, dim, g)?,
                Linear::new(store, "mask_head.mlp1", dim, dim, g)?,
                Linear::new(store, "mask_head.mlp2", dim, c2, g)?,
            ],
            dim,
        })
    }

    /// `vision (B, G*G, d)` -> upsampled features `(B, 4G, 4G, d/8)`.
    pub fn upsample(&self, vision: &Tensor) -> Result<Tensor> {
        let (b, l, d) = vision.dims3()?;
        let g = (l as f64).sqrt().round() as usize;
        if g * g != l || d != self.dim {
            return Err(Error::Shape(format!("mask head cannot reshape {l}x{d} tokens to a square grid")));
        }
        let x = vision.reshape((b, g, g, d))?;
        let x = pixel_shuffle2(&self.up1.forward(&x)?)?;
        let x = self.up_norm.forward(&x)?.gelu()?;
        Ok(pixel_shuffle2(&self.up2.forward(&x)?)?.gelu()?)
    }

    /// `mask (B, T, d)` -> classifier vectors `(B, T, d/8)`.
    pub fn classifier(&self, mask: &Tensor) -> Result<Tensor> {
        let h = self.mlp[0].forward(mask)?.gelu()?;
        let h = self.mlp[1].forward(&h)?.gelu()?;
        self.mlp[2].forward(&h)
    }

    /// Saliency logits `(B, T, R, R)` with `R = 4G`.
    pub fn forward(&self, mask: &Tensor, vision: &Tensor) -> Result<Tensor> {
        let up = self.upsample(vision)?;
        let (b, r, _, c) = up.dims4()?;
        let cls = self.classifier(mask)?;
        let t = cls.dims3()?.1;
        let s = up.reshape((b, r * r, c))?.matmul(&cls.transpose(1, 2)?.contiguous()?)?;
        Ok(s.transpose(1, 2)?.reshape((b, t, r, r))?)
    }
}

/// Pull one `(R, R)` saliency map out of a `(B, T, R, R)` tensor.
pub fn saliency_grid(saliency: &Tensor, b: usize, t: usize) -> Result<Grid> {
    let m = saliency.get(b)?.get(t)?;
    let (h, w) = m.dims2()?;
    let data = m.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    Ok(Grid {
        height: h,
        width: w,
        data,
    })
}

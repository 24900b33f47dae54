//! Decoder-only language model over `[prefix, text]` with a cross-attention
//! to the language-stream vision tokens in every block, teacher-forced
//! training and nucleus-sampling generation.

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BOS, EOS};
use crate::encoders::{ids_to_tensor, TextEmbedding};
use crate::error::{Error, Result};
use crate::nn::{
    prefix_causal_mask, softmax, Attention, FeedForward, LayerNorm, ParamGroup, ParamStore,
};

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_cross: LayerNorm,
    pub norm_vision: LayerNorm,
    pub cross_attn: Attention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let g = ParamGroup::Language;
        let ln = |store: &mut ParamStore, s: &str| LayerNorm::new(store, &format!("{name}.{s}"), dim, g);
        Ok(DecoderBlock {
            norm_self: ln(store, "norm_self")?,
            self_attn: Attention::new(store, &format!("{name}.self_attn"), dim, heads, g)?,
            norm_cross: ln(store, "norm_cross")?,
            norm_vision: ln(store, "norm_vision")?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), dim, heads, g)?,
            norm_ffn: ln(store, "norm_ffn")?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, 4 * dim, g)?,
        })
    }

    /// Causal self-attention, then cross-attention to vision, then
    /// feed-forward; each pre-norm with a residual.
    pub fn forward(&self, x: &Tensor, vision: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.norm_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(mask))?)?;
        let h = self.norm_cross.forward(&x)?;
        let v = self.norm_vision.forward(vision)?;
        let x = (&x + self.cross_attn.forward(&h, &v, None)?)?;
        let h = self.norm_ffn.forward(&x)?;
        Ok((&x + self.ffn.forward(&h)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated ids, BOS excluded, EOS included when produced.
    pub tokens: Vec<u32>,
    /// Log-probability of each chosen token under the full distribution.
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LangDecoder {
    pub pos: Tensor,
    pub blocks: Vec<DecoderBlock>,
    pub norm_out: LayerNorm,
    pub max_len: usize,
}

impl LangDecoder {
    pub fn new(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        blocks: usize,
        max_prefix: usize,
        max_len: usize,
    ) -> Result<Self> {
        Ok(LangDecoder {
            pos: store.normal("decoder.pos", &[max_prefix + max_len, dim], 0.02, ParamGroup::Language)?,
            blocks: (0..blocks)
                .map(|i| DecoderBlock::new(store, &format!("decoder.block{i}"), dim, heads))
                .collect::<Result<_>>()?,
            norm_out: LayerNorm::new(store, "decoder.norm_out", dim, ParamGroup::Language)?,
            max_len,
        })
    }

    /// Hidden states for the text positions of `[prefix, embed(ids)]`.
    fn text_hidden(&self, emb: &TextEmbedding, vision: &Tensor, prefix: &Tensor, ids: &Tensor) -> Result<Tensor> {
        let (b, lf, d) = prefix.dims3()?;
        let (ib, l) = ids.dims2()?;
        if ib != b || vision.dims3()?.0 != b {
            return Err(Error::Shape("decoder batch sizes disagree".into()));
        }
        let total = lf + l;
        if total > self.pos.dims()[0] {
            return Err(Error::Shape(format!(
                "sequence of {total} positions exceeds the {} positional slots",
                self.pos.dims()[0]
            )));
        }
        let x = Tensor::cat(&[prefix, &emb.embed(ids)?], 1)?;
        let mut x = x.broadcast_add(&self.pos.narrow(0, 0, total)?)?;
        let mask = prefix_causal_mask(lf, total, x.dtype(), x.device())?;
        for block in &self.blocks {
            x = block.forward(&x, vision, &mask)?;
        }
        let h = self.norm_out.forward(&x.narrow(1, lf, l)?)?;
        debug_assert_eq!(h.dims(), &[b, l, d]);
        Ok(h)
    }

    /// Teacher-forced logits `(B, L, |V|)`: row `t` scores the token that
    /// follows `gold[t]`. Output projection is the transposed embedding.
    pub fn decode_train(&self, emb: &TextEmbedding, vision: &Tensor, prefix: &Tensor, gold: &Tensor) -> Result<Tensor> {
        let h = self.text_hidden(emb, vision, prefix, gold)?;
        let (b, l, d) = h.dims3()?;
        let logits = h.reshape((b * l, d))?.matmul(&emb.table.t()?)?;
        Ok(logits.reshape((b, l, emb.vocab_size()))?)
    }

    /// Generate one explanation per batch row. Row `i` samples from its own
    /// generator seeded with `seeds[i]`, so results do not depend on batching.
    pub fn generate(
        &self,
        emb: &TextEmbedding,
        vision: &Tensor,
        prefix: &Tensor,
        top_p: f64,
        seeds: &[u64],
    ) -> Result<Vec<GenerationResult>> {
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(Error::Config(format!("nucleus probability {top_p} outside (0, 1]")));
        }
        let b = prefix.dims3()?.0;
        if seeds.len() != b {
            return Err(Error::Shape("one seed per generated row required".into()));
        }
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
        let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; b];
        let mut results = vec![
            GenerationResult {
                tokens: Vec::new(),
                logprobs: Vec::new(),
            };
            b
        ];
        let mut done = vec![false; b];
        for _ in 0..self.max_len {
            let ids = ids_to_tensor(&seqs, prefix.device())?;
            let h = self.text_hidden(emb, vision, prefix, &ids)?;
            let last = h.narrow(1, seqs[0].len() - 1, 1)?.squeeze(1)?;
            let probs = softmax(&last.matmul(&emb.table.t()?)?)?
                .to_dtype(DType::F64)?
                .to_vec2::<f64>()?;
            for (i, row) in probs.iter().enumerate() {
                let next = if done[i] {
                    EOS
                } else {
                    let tok = nucleus_sample(row, top_p, &mut rngs[i]);
                    results[i].tokens.push(tok as u32);
                    results[i].logprobs.push(row[tok].ln());
                    if tok as u32 == EOS {
                        done[i] = true;
                    }
                    tok as u32
                };
                seqs[i].push(next);
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(results)
    }
}

/// Sort descending (ties by lower index), keep the smallest prefix whose
/// mass reaches `top_p`, renormalize and draw. A nucleus of one token is
/// plain argmax and consumes no randomness.
pub fn nucleus_sample(probs: &[f64], top_p: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut kept = 0;
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    if kept == 1 {
        return order[0];
    }
    let mut u = rng.random::<f64>() * mass;
    for &i in &order[..kept] {
        u -= probs[i];
        if u < 0.0 {
            return i;
        }
    }
    order[kept - 1]
}

/// Row sums of the softmax of `logits (…, V)`, for sanity checks.
pub fn softmax_row_sums(logits: &Tensor) -> Result<Vec<f64>> {
    Ok(softmax(logits)?
        .sum(D::Minus1)?
        .flatten_all()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

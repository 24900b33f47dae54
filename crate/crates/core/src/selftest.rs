//! Self-checks runnable from the CLI and the test suites: straight-line
//! reference implementations compared against the tensor modules, and
//! central-difference gradient checks.
//!
//! The reference code works on plain nested `Vec<f64>` with explicit
//! loops and shares nothing with the tensor implementations except the
//! parameter values it reads.

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{FreezeFlags, ModelConfig, Paradigm, Preset};
use crate::dataset::{build_vocabulary, Vocabulary, BOS, EOS, PAD};
use crate::emotion::Emotion;
use crate::encoders::{ids_to_tensor, TextEmbedding};
use crate::error::{Error, Result};
use crate::lang_decoder::LangDecoder;
use crate::losses::{dice_loss, focal_loss, lang_loss, to_f64, FocalParams};
use crate::model::{EmoSem, Target, TrainUnit};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, ParamStore};
use crate::prefix::PrefixAdapter;
use crate::projector::EmotionProjector;
use crate::raster::{Image, Mask};
use crate::seg_decoder::{FeatureMixer, MixerBlock};

pub mod oracle {
    //! Loop-level references. Matrices are row-major `Vec<Vec<f64>>`.

    pub type Mat = Vec<Vec<f64>>;

    pub fn matmul(a: &Mat, b: &Mat) -> Mat {
        let inner = b.len();
        let cols = b.first().map_or(0, Vec::len);
        a.iter()
            .map(|row| {
                assert_eq!(row.len(), inner);
                (0..cols).map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum()).collect()
            })
            .collect()
    }

    pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
        matmul(x, w)
            .into_iter()
            .map(|row| row.iter().zip(b).map(|(v, bb)| v + bb).collect())
            .collect()
    }

    pub fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    pub fn gelu(x: f64) -> f64 {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
    }

    pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
        a.iter().map(|r| r.iter().map(|&v| f(v)).collect()).collect()
    }

    pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64], eps: f64) -> Mat {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = (var + eps).sqrt();
                row.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) / sd * gain[i] + bias[i])
                    .collect()
            })
            .collect()
    }

    pub fn softmax(row: &[f64]) -> Vec<f64> {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Projection weights of one attention layer.
    pub struct AttnWeights {
        pub wq: Mat,
        pub bq: Vec<f64>,
        pub wk: Mat,
        pub bk: Vec<f64>,
        pub wv: Mat,
        pub bv: Vec<f64>,
        pub wo: Mat,
        pub bo: Vec<f64>,
        pub heads: usize,
    }

    /// Multi-head attention, one head and one query at a time.
    /// `allowed(i, j)` false removes key `j` from query `i`'s support.
    pub fn attention(queries: &Mat, keys: &Mat, w: &AttnWeights, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
        let q = linear(queries, &w.wq, &w.bq);
        let k = linear(keys, &w.wk, &w.bk);
        let v = linear(keys, &w.wv, &w.bv);
        let d = q[0].len();
        let hd = d / w.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut merged = vec![vec![0.0; d]; q.len()];
        for h in 0..w.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..q.len() {
                let scores: Vec<f64> = (0..k.len())
                    .map(|j| {
                        if allowed(i, j) {
                            cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
                let p = softmax(&scores);
                for c in cols.clone() {
                    merged[i][c] = (0..k.len()).map(|j| p[j] * v[j][c]).sum();
                }
            }
        }
        linear(&merged, &w.wo, &w.bo)
    }

    pub fn ffn(x: &Mat, w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Mat {
        linear(&map(&linear(x, w1, b1), gelu), w2, b2)
    }
}

use oracle::{AttnWeights, Mat};

fn mat2(t: &Tensor) -> Result<Mat> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

fn vec1(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn lin(l: &Linear) -> Result<(Mat, Vec<f64>)> {
    Ok((mat2(&l.weight)?, vec1(&l.bias)?))
}

fn attn_weights(a: &Attention) -> Result<AttnWeights> {
    let (wq, bq) = lin(&a.q)?;
    let (wk, bk) = lin(&a.k)?;
    let (wv, bv) = lin(&a.v)?;
    let (wo, bo) = lin(&a.o)?;
    Ok(AttnWeights {
        wq,
        bq,
        wk,
        bk,
        wv,
        bv,
        wo,
        bo,
        heads: a.heads,
    })
}

fn ln(x: &Mat, l: &LayerNorm) -> Result<Mat> {
    Ok(oracle::layer_norm(x, &vec1(&l.gain)?, &vec1(&l.bias)?, l.eps))
}

fn ff(x: &Mat, f: &FeedForward) -> Result<Mat> {
    let (w1, b1) = lin(&f.fc1)?;
    let (w2, b2) = lin(&f.fc2)?;
    Ok(oracle::ffn(x, &w1, &b1, &w2, &b2))
}

fn all(_: usize, _: usize) -> bool {
    true
}

/// Reference mixer block on one batch element.
pub fn oracle_mixer_block(b: &MixerBlock, q: &Mat, v: &Mat) -> Result<(Mat, Mat)> {
    let h = ln(q, &b.norm_self)?;
    let q = oracle::add(q, &oracle::attention(&h, &h, &attn_weights(&b.self_attn)?, &all));
    let hq = ln(&q, &b.norm_q2v_q)?;
    let hv = ln(v, &b.norm_q2v_v)?;
    let q = oracle::add(&q, &oracle::attention(&hq, &hv, &attn_weights(&b.q2v)?, &all));
    let q = oracle::add(&q, &ff(&ln(&q, &b.norm_ffn)?, &b.ffn)?);
    let hv = ln(v, &b.norm_v2q_v)?;
    let hq = ln(&q, &b.norm_v2q_q)?;
    let v = oracle::add(v, &oracle::attention(&hv, &hq, &attn_weights(&b.v2q)?, &all));
    Ok((q, v))
}

/// Reference teacher-forced logits for one batch element.
pub fn oracle_decode(dec: &LangDecoder, emb: &TextEmbedding, vision: &Mat, prefix: &Mat, gold: &[u32]) -> Result<Mat> {
    let table = mat2(&emb.table)?;
    let pos = mat2(&dec.pos)?;
    let lf = prefix.len();
    let mut x: Mat = prefix.clone();
    x.extend(gold.iter().map(|&id| table[id as usize].clone()));
    for (i, row) in x.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += pos[i][c];
        }
    }
    let causal = move |i: usize, j: usize| j < lf || j <= i;
    for blk in &dec.blocks {
        let h = ln(&x, &blk.norm_self)?;
        x = oracle::add(&x, &oracle::attention(&h, &h, &attn_weights(&blk.self_attn)?, &causal));
        let h = ln(&x, &blk.norm_cross)?;
        let vv = ln(vision, &blk.norm_vision)?;
        x = oracle::add(&x, &oracle::attention(&h, &vv, &attn_weights(&blk.cross_attn)?, &all));
        x = oracle::add(&x, &ff(&ln(&x, &blk.norm_ffn)?, &blk.ffn)?);
    }
    let h = ln(&x[lf..].to_vec(), &dec.norm_out)?;
    Ok(h.iter()
        .map(|row| table.iter().map(|e| row.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
        .collect())
}

pub fn oracle_project(p: &EmotionProjector, emb: &TextEmbedding, ids: &[u32]) -> Result<Mat> {
    let table = mat2(&emb.table)?;
    let x: Mat = ids.iter().map(|&i| table[i as usize].clone()).collect();
    let (w, b) = lin(&p.linear)?;
    Ok(oracle::linear(&x, &w, &b))
}

pub fn oracle_adapt(a: &PrefixAdapter, x: &Mat) -> Result<Mat> {
    let (w1, b1) = lin(&a.fc1)?;
    let (w2, b2) = lin(&a.fc2)?;
    Ok(oracle::ffn(x, &w1, &b1, &w2, &b2))
}

/// Overwrite every parameter with N(0, std) draws.
pub fn randomize(store: &ParamStore, rng: &mut impl Rng, std: f64) -> Result<()> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let names: Vec<(String, Vec<usize>)> = store.iter().map(|(k, p)| (k.clone(), p.var.dims().to_vec())).collect();
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
        store.assign(&name, &Tensor::from_vec(data, shape, &Device::Cpu)?)?;
    }
    Ok(())
}

fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let dist = Normal::new(0.0, 1.0).expect("unit normal");
    (0..rows).map(|_| (0..cols).map(|_| dist.sample(rng)).collect()).collect()
}

fn batch_tensor(items: &[Mat]) -> Result<Tensor> {
    let (r, c) = (items[0].len(), items[0][0].len());
    let flat: Vec<f64> = items.iter().flatten().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (items.len(), r, c), &Device::Cpu)?)
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn batch_item(t: &Tensor, i: usize) -> Result<Mat> {
    mat2(&t.get(i)?)
}

/// Outcome of one self-check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    /// Worst error observed (absolute for oracles, relative for gradients).
    pub worst: f64,
    pub tolerance: f64,
    pub trials: usize,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }
}

pub const ORACLE_TOL: f64 = 1e-5;

/// Mixer block against the reference on random dims and weights, plus the
/// two-block mixer against sequential application of its blocks.
pub fn check_mixer(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..=3) * 2;
        let (b, lq, lv) = (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(1..=5));
        let mut store = ParamStore::new(DType::F64, t as u64);
        let mixer = FeatureMixer::new(&mut store, 2, d, heads)?;
        randomize(&store, &mut rng, 0.5)?;
        let qs: Vec<Mat> = (0..b).map(|_| random_mat(&mut rng, lq, d)).collect();
        let vs: Vec<Mat> = (0..b).map(|_| random_mat(&mut rng, lv, d)).collect();
        let (q_t, v_t) = (batch_tensor(&qs)?, batch_tensor(&vs)?);
        let (q1, v1) = mixer.blocks[0].forward(&q_t, &v_t)?;
        let out = mixer.run(Paradigm::Multi, None, &q_t, &v_t)?;
        for i in 0..b {
            let (oq, ov) = oracle_mixer_block(&mixer.blocks[0], &qs[i], &vs[i])?;
            worst = worst.max(max_abs_diff(&oq, &batch_item(&q1, i)?));
            worst = worst.max(max_abs_diff(&ov, &batch_item(&v1, i)?));
            let (oq2, ov2) = oracle_mixer_block(&mixer.blocks[1], &oq, &ov)?;
            worst = worst.max(max_abs_diff(&oq2, &batch_item(&out.mask, i)?));
            worst = worst.max(max_abs_diff(&ov2, &batch_item(&out.vision, i)?));
        }
    }
    Ok(Check {
        name: "mixer_block oracle",
        worst,
        tolerance: ORACLE_TOL,
        trials,
    })
}

/// Teacher-forced decoding against the reference.
pub fn check_decoder(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let heads = [1, 2][rng.random_range(0..2)];
        let d = heads * rng.random_range(2..=4);
        let vocab = rng.random_range(5..=12);
        let (lf, lv, len) = (rng.random_range(1..=3), rng.random_range(1..=4), rng.random_range(2..=4));
        let blocks = rng.random_range(1..=2);
        let mut store = ParamStore::new(DType::F64, t as u64);
        let emb = TextEmbedding::new(&mut store, "emb", vocab, d)?;
        let dec = LangDecoder::new(&mut store, d, heads, blocks, lf, len)?;
        randomize(&store, &mut rng, 0.5)?;
        let b = rng.random_range(1..=2);
        let vis: Vec<Mat> = (0..b).map(|_| random_mat(&mut rng, lv, d)).collect();
        let pre: Vec<Mat> = (0..b).map(|_| random_mat(&mut rng, lf, d)).collect();
        let gold: Vec<Vec<u32>> = (0..b)
            .map(|_| {
                let mut g = vec![BOS];
                g.extend((1..len).map(|_| rng.random_range(0..vocab as u32)));
                g
            })
            .collect();
        let logits = dec.decode_train(&emb, &batch_tensor(&vis)?, &batch_tensor(&pre)?, &ids_to_tensor(&gold, &Device::Cpu)?)?;
        for i in 0..b {
            let o = oracle_decode(&dec, &emb, &vis[i], &pre[i], &gold[i])?;
            worst = worst.max(max_abs_diff(&o, &batch_item(&logits, i)?));
        }
    }
    Ok(Check {
        name: "decode_train oracle",
        worst,
        tolerance: ORACLE_TOL,
        trials,
    })
}

/// Emotion projector against `embedding . W + b`.
pub fn check_projector(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (vocab, dw, dk) = (rng.random_range(12..=20), rng.random_range(2..=8), 8 * rng.random_range(1..=2));
        let mut store = ParamStore::new(DType::F64, t as u64);
        let emb = TextEmbedding::new(&mut store, "emb", vocab, dw)?;
        let proj = EmotionProjector::new(&mut store, dw, dk)?;
        randomize(&store, &mut rng, 1.0)?;
        let ids: Vec<u32> = (0..8).map(|_| rng.random_range(0..vocab as u32)).collect();
        let out = proj.project(&emb, &ids_to_tensor(&[ids.clone()], &Device::Cpu)?)?;
        worst = worst.max(max_abs_diff(&oracle_project(&proj, &emb, &ids)?, &batch_item(&out, 0)?));
    }
    Ok(Check {
        name: "project oracle",
        worst,
        tolerance: ORACLE_TOL,
        trials,
    })
}

/// Prefix adapter against two matrix products with the nonlinearity.
pub fn check_adapter(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (dk, dh) = (rng.random_range(2..=8), rng.random_range(2..=8));
        let mut store = ParamStore::new(DType::F64, t as u64);
        let a = PrefixAdapter::new(&mut store, dk, dh)?;
        randomize(&store, &mut rng, 1.0)?;
        let single = rng.random_bool(0.5);
        let p = random_mat(&mut rng, 8, dk);
        let m = random_mat(&mut rng, 1, dk);
        let (out, input) = if single {
            let out = a.adapt(Some(&batch_tensor(&[p.clone()])?), &batch_tensor(&[m.clone()])?)?;
            let mut x = p.clone();
            x.extend(m.clone());
            (out, x)
        } else {
            (a.adapt(None, &batch_tensor(&[m.clone()])?)?, m.clone())
        };
        worst = worst.max(max_abs_diff(&oracle_adapt(&a, &input)?, &batch_item(&out, 0)?));
    }
    Ok(Check {
        name: "adapt oracle",
        worst,
        tolerance: ORACLE_TOL,
        trials,
    })
}

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-3;

/// Norm-wise relative error `|a - n| / (|a| + |n|)` between analytic and
/// numerical gradients; 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to entries `idx` of `var`.
pub fn numeric_grad(var: &Var, idx: &[usize], h: f64, f: &mut dyn FnMut() -> Result<f64>) -> Result<Vec<f64>> {
    let shape = var.dims().to_vec();
    let base = vec1(var.as_tensor())?;
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        let mut v = base.clone();
        v[i] = base[i] + h;
        var.set(&Tensor::from_vec(v.clone(), shape.as_slice(), &Device::Cpu)?)?;
        let up = f()?;
        v[i] = base[i] - h;
        var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?)?;
        let down = f()?;
        out.push((up - down) / (2.0 * h));
    }
    var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu)?)?;
    Ok(out)
}

fn grad_of(var: &Var, loss: &Tensor) -> Result<Vec<f64>> {
    let grads = loss.backward()?;
    match grads.get(var.as_tensor()) {
        Some(g) => vec1(g),
        None => Ok(vec![0.0; var.elem_count()]),
    }
}

fn random_var(rng: &mut impl Rng, shape: &[usize], std: f64) -> Result<Var> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Var::from_tensor(&Tensor::from_vec(data, shape, &Device::Cpu)?)?)
}

fn random_gt(rng: &mut impl Rng, n: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..n * n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (n, n), &Device::Cpu)?)
}

/// Scalar loss checks on 4x4 masks and 8-token sequences.
pub fn check_loss_gradients(trials: usize, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut dice_w, mut focal_w, mut lang_w): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let all16: Vec<usize> = (0..16).collect();
    for _ in 0..trials {
        let x = random_var(&mut rng, &[4, 4], 2.0)?;
        let gt = random_gt(&mut rng, 4)?;
        let a = grad_of(&x, &dice_loss(x.as_tensor(), &gt, 1.0)?)?;
        let n = numeric_grad(&x, &all16, GRAD_H, &mut || to_f64(&dice_loss(x.as_tensor(), &gt, 1.0)?))?;
        dice_w = dice_w.max(relative_error(&a, &n));

        let fp = FocalParams::from_alpha(0.25, 2.0);
        let a = grad_of(&x, &focal_loss(x.as_tensor(), &gt, fp)?)?;
        let n = numeric_grad(&x, &all16, GRAD_H, &mut || to_f64(&focal_loss(x.as_tensor(), &gt, fp)?))?;
        focal_w = focal_w.max(relative_error(&a, &n));

        let vocab = 10;
        let logits = random_var(&mut rng, &[8, vocab], 2.0)?;
        let mut gold = vec![BOS];
        gold.extend((0..7).map(|_| rng.random_range(3..vocab as u32)));
        let cut = rng.random_range(4..=8);
        for g in gold.iter_mut().skip(cut) {
            *g = PAD;
        }
        let idx: Vec<usize> = (0..8 * vocab).collect();
        let a = grad_of(&logits, &lang_loss(logits.as_tensor(), &gold, PAD)?)?;
        let n = numeric_grad(&logits, &idx, GRAD_H, &mut || to_f64(&lang_loss(logits.as_tensor(), &gold, PAD)?))?;
        lang_w = lang_w.max(relative_error(&a, &n));
    }
    let mk = |name, worst| Check {
        name,
        worst,
        tolerance: GRAD_TOL,
        trials,
    };
    Ok(vec![mk("dice gradient", dice_w), mk("focal gradient", focal_w), mk("lang gradient", lang_w)])
}

/// A model small enough for exhaustive finite differences.
pub fn micro_config(paradigm: Paradigm) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        d_k: 8,
        d_w: 8,
        d_h: 8,
        grid: 2,
        lang_grid: 2,
        encoder_layers: 1,
        mixer_blocks: 1,
        decoder_blocks: 1,
        seg_heads: 2,
        lang_heads: 2,
        max_len: 8,
        freeze: FreezeFlags::default(),
        ..ModelConfig::preset(Preset::Toy, paradigm)
    }
}

fn micro_vocab() -> Vocabulary {
    build_vocabulary(&[])
}

/// A fixed pseudo-random image of the given size.
pub fn noise_image(rng: &mut impl Rng, size: usize) -> Image {
    let mut img = Image::zeros(size, size);
    for v in img.data.iter_mut() {
        *v = rng.random::<f32>();
    }
    img
}

fn micro_unit(rng: &mut impl Rng, model: &EmoSem, emotions: &[Emotion]) -> TrainUnit {
    let side = model.config.saliency_side();
    let n_words = model.vocab.len() as u32;
    let targets = emotions
        .iter()
        .map(|&e| {
            let mut mask = Mask::empty(side, side);
            for y in 0..side {
                for x in 0..side {
                    mask.set(y, x, rng.random_bool(0.4));
                }
            }
            let mut explanation = vec![BOS];
            explanation.extend((0..6).map(|_| rng.random_range(4..n_words)));
            explanation.push(EOS);
            Target {
                emotion: e,
                mask,
                explanation,
            }
        })
        .collect();
    TrainUnit {
        image_id: "micro".into(),
        image: std::sync::Arc::new(noise_image(rng, model.config.image_size)),
        targets,
    }
}

/// End-to-end objective gradient against central differences, sampling
/// up to `per_param` entries of every parameter tensor.
pub fn check_total_gradient(paradigm: Paradigm, per_param: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EmoSem::new(micro_config(paradigm), micro_vocab(), seed, DType::F64)?;
    randomize(&model.store, &mut rng, 0.3)?;
    let emotions: &[Emotion] = match paradigm {
        Paradigm::Single => &[Emotion::Fear],
        Paradigm::Multi => &[Emotion::Fear, Emotion::Awe],
    };
    let units: Vec<TrainUnit> = (0..2).map(|_| micro_unit(&mut rng, &model, emotions)).collect();
    let refs: Vec<&TrainUnit> = units.iter().collect();
    let loss = model.batch_loss(&refs, 2.0)?;
    let grads = loss.objective.backward()?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let params: Vec<(String, Var)> = model.store.iter().map(|(k, p)| (k.clone(), p.var.clone())).collect();
    for (_, var) in &params {
        let n = var.elem_count();
        let mut idx: Vec<usize> = (0..n).collect();
        if n > per_param {
            idx = (0..per_param).map(|_| rng.random_range(0..n)).collect();
        }
        let full = match grads.get(var.as_tensor()) {
            Some(g) => vec1(g)?,
            None => vec![0.0; n],
        };
        analytic.extend(idx.iter().map(|&i| full[i]));
        numeric.extend(numeric_grad(var, &idx, GRAD_H, &mut || to_f64(&model.batch_loss(&refs, 2.0)?.objective))?);
    }
    Ok(Check {
        name: match paradigm {
            Paradigm::Single => "end-to-end gradient (single)",
            Paradigm::Multi => "end-to-end gradient (multi)",
        },
        worst: relative_error(&analytic, &numeric),
        tolerance: GRAD_TOL,
        trials: analytic.len(),
    })
}

/// Gradient reaching each mask-token row from a multi-mask batch in which
/// only `annotated` emotions are supervised. Returns the row-wise maximum
/// absolute gradient, indexed by emotion id.
pub fn mask_token_gradient_rows(annotated: &[Emotion], seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = EmoSem::new(micro_config(Paradigm::Multi), micro_vocab(), seed, DType::F64)?;
    randomize(&model.store, &mut rng, 0.3)?;
    let unit = micro_unit(&mut rng, &model, annotated);
    let loss = model.batch_loss(&[&unit], 1.0)?;
    let grads = loss.objective.backward()?;
    let g = grads
        .get(&model.mask_tokens.table)
        .ok_or_else(|| Error::Numerical("mask tokens received no gradient".into()))?;
    Ok(mat2(g)?
        .iter()
        .map(|row| row.iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect())
}

/// Every check at its default size.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![
        check_mixer(100, seed)?,
        check_decoder(100, seed + 1)?,
        check_projector(100, seed + 2)?,
        check_adapter(100, seed + 3)?,
    ];
    out.extend(check_loss_gradients(20, seed + 4)?);
    out.push(check_total_gradient(Paradigm::Single, 4, seed + 5)?);
    out.push(check_total_gradient(Paradigm::Multi, 4, seed + 6)?);
    let rows = mask_token_gradient_rows(&[Emotion::Fear], seed + 7)?;
    let leaked = rows
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != Emotion::Fear.id())
        .fold(0.0f64, |m, (_, &v)| m.max(v));
    out.push(Check {
        name: "unannotated mask-token gradient",
        // Exactly zero is required; any leak fails against a zero tolerance.
        worst: if leaked == 0.0 { 0.0 } else { f64::INFINITY },
        tolerance: f64::MIN_POSITIVE,
        trials: 1,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_softmax_and_gelu() {
        let p = oracle::softmax(&[0.0, 0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(oracle::gelu(0.0), 0.0);
        assert!((oracle::gelu(10.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn small_oracle_runs_pass() {
        assert!(check_mixer(5, 1).unwrap().passed());
        assert!(check_decoder(5, 2).unwrap().passed());
        assert!(check_projector(5, 3).unwrap().passed());
        assert!(check_adapter(5, 4).unwrap().passed());
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1.0], &[-1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn numeric_grad_of_square() {
        let v = Var::from_tensor(&Tensor::new(&[3.0f64], &Device::Cpu).unwrap()).unwrap();
        let g = numeric_grad(&v, &[0], 1e-5, &mut || {
            let x = v.as_tensor().to_vec1::<f64>()?[0];
            Ok(x * x)
        })
        .unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }
}

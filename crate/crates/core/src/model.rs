//! The assembled model: both vision streams, the emotion projector, mask
//! tokens, feature mixer, mask head, prefix adapter and language decoder,
//! plus batching, losses, inference and checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;

use crate::config::{ModelConfig, Paradigm};
use crate::dataset::{group_by_image, Sample, Vocabulary, PAD};
use crate::emotion::{Emotion, NUM_EMOTIONS};
use crate::encoders::{ids_to_tensor, images_to_tensor, PatchEncoder, TextEmbedding};
use crate::error::{Error, Result};
use crate::lang_decoder::{GenerationResult, LangDecoder};
use crate::losses::{dice_loss_batch, focal_loss_batch, lang_loss_batch, EmotionLoss, FocalParams, LossReport};
use crate::nn::{ParamGroup, ParamStore};
use crate::prefix::PrefixAdapter;
use crate::projector::{EmotionPrompt, EmotionProjector};
use crate::raster::{Grid, Image, Mask};
use crate::seg_decoder::{FeatureMixer, MaskHead, MaskTokens};

pub const CHECKPOINT_FORMAT: &str = "emosem-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

/// One supervised (emotion, mask, explanation) triple.
#[derive(Debug, Clone)]
pub struct Target {
    pub emotion: Emotion,
    /// Ground truth at the saliency resolution.
    pub mask: Mask,
    pub explanation: Vec<u32>,
}

/// The unit of batching: one image with its supervised targets. Single-mask
/// units carry exactly one target, multi-mask units every annotated emotion.
#[derive(Debug, Clone)]
pub struct TrainUnit {
    pub image_id: String,
    pub image: Arc<Image>,
    pub targets: Vec<Target>,
}

/// Build training units for `paradigm`, downsampling masks to `side`.
pub fn training_units(samples: &[Sample], paradigm: Paradigm, side: usize) -> Result<Vec<TrainUnit>> {
    let target = |s: &Sample| -> Result<Target> {
        Ok(Target {
            emotion: s.emotion,
            mask: s.mask.downsample_area(side)?,
            explanation: s.explanation.clone(),
        })
    };
    match paradigm {
        Paradigm::Single => samples
            .iter()
            .map(|s| {
                Ok(TrainUnit {
                    image_id: s.image_id.clone(),
                    image: s.image.clone(),
                    targets: vec![target(s)?],
                })
            })
            .collect(),
        Paradigm::Multi => group_by_image(samples)
            .into_iter()
            .map(|g| {
                let mut seen = [false; NUM_EMOTIONS];
                let mut targets = Vec::with_capacity(g.samples.len());
                for s in &g.samples {
                    if std::mem::replace(&mut seen[s.emotion.id()], true) {
                        return Err(Error::load(&g.image_id, format!("emotion {} annotated twice", s.emotion)));
                    }
                    targets.push(target(s)?);
                }
                Ok(TrainUnit {
                    image_id: g.image_id,
                    image: g.image,
                    targets,
                })
            })
            .collect(),
    }
}

/// Per-row tensors feeding both heads. Row `r` pairs image `rows[r].0`
/// with emotion `rows[r].1`.
#[derive(Debug)]
pub struct RowForward {
    /// `(R, S, S)` saliency logits.
    pub saliency: Tensor,
    /// `(R, l_f, d_h)`.
    pub prefix: Tensor,
    /// `(R, G_l*G_l, d_h)`.
    pub lang_vision: Tensor,
}

/// Losses for one micro-batch.
#[derive(Debug)]
pub struct BatchLoss {
    /// Sum over targets of `dice + focal + lang`, divided by the caller's
    /// normalizer; this is what gets differentiated.
    pub objective: Tensor,
    /// Unnormalized sums of each component.
    pub report: LossReport,
    pub targets: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub top_p: f64,
    /// Replace the prefix with zeros before decoding (ablation).
    pub zero_prefix: bool,
    pub generate: bool,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub emotion: Emotion,
    /// Raw logits at the saliency resolution.
    pub saliency: Grid,
    /// Thresholded at image resolution.
    pub mask: Mask,
    pub generation: Option<GenerationResult>,
    pub explanation: String,
}

#[derive(Debug)]
pub struct EmoSem {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub seg_encoder: PatchEncoder,
    pub lang_encoder: PatchEncoder,
    pub embedding: TextEmbedding,
    pub projector: EmotionProjector,
    pub mask_tokens: MaskTokens,
    pub mixer: FeatureMixer,
    pub mask_head: MaskHead,
    pub prefix: PrefixAdapter,
    pub decoder: LangDecoder,
    prompts: Vec<Vec<u32>>,
}

impl EmoSem {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new(dtype, seed);
        let seg_encoder = PatchEncoder::new(
            &mut store,
            "seg_encoder",
            c.image_size,
            c.grid,
            c.d_k,
            c.seg_heads,
            c.encoder_layers,
            ParamGroup::Encoder,
        )?;
        let lang_encoder = PatchEncoder::new(
            &mut store,
            "lang_encoder",
            c.image_size,
            c.lang_grid,
            c.d_w,
            c.lang_heads,
            c.encoder_layers,
            ParamGroup::Encoder,
        )?;
        let embedding = TextEmbedding::new(&mut store, "embedding", vocab.len(), c.d_w)?;
        let projector = EmotionProjector::new(&mut store, c.d_w, c.d_k)?;
        let mask_tokens = MaskTokens::new(&mut store, c.mask_token_count(), c.d_k)?;
        let mixer = FeatureMixer::new(&mut store, c.mixer_blocks, c.d_k, c.seg_heads)?;
        let mask_head = MaskHead::new(&mut store, c.d_k)?;
        let prefix = PrefixAdapter::new(&mut store, c.d_k, c.d_h)?;
        let decoder = LangDecoder::new(&mut store, c.d_h, c.lang_heads, c.decoder_blocks, c.prefix_len(), c.max_len)?;
        let prompts = Emotion::ALL
            .iter()
            .map(|&e| EmotionPrompt::new(e, &vocab, c.prompt_len).token_ids)
            .collect();
        Ok(EmoSem {
            config,
            vocab,
            store,
            seg_encoder,
            lang_encoder,
            embedding,
            projector,
            mask_tokens,
            mixer,
            mask_head,
            prefix,
            decoder,
            prompts,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn prompt_ids(&self, emotion: Emotion) -> &[u32] {
        &self.prompts[emotion.id()]
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let n = self.config.image_size;
        if image.height != n || image.width != n {
            return Err(Error::Config(format!(
                "model expects {n}x{n} images, got {}x{}",
                image.height, image.width
            )));
        }
        Ok(())
    }

    /// Prompt tokens `(B, l_e, d_k)` for a list of emotions.
    pub fn project(&self, emotions: &[Emotion]) -> Result<Tensor> {
        let rows: Vec<Vec<u32>> = emotions.iter().map(|&e| self.prompts[e.id()].clone()).collect();
        self.projector.project(&self.embedding, &ids_to_tensor(&rows, self.device())?)
    }

    /// Run both vision streams once per distinct image, then route rows
    /// through the mixer, mask head and prefix adapter. `trainable` (multi
    /// mode only) marks, per image, the mask tokens that may receive
    /// gradient.
    pub fn forward_rows(
        &self,
        images: &[&Image],
        rows: &[(usize, Emotion)],
        trainable: Option<&[Vec<bool>]>,
    ) -> Result<RowForward> {
        if rows.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        for img in images {
            self.check_image(img)?;
        }
        if let Some(&(bad, _)) = rows.iter().find(|(i, _)| *i >= images.len()) {
            return Err(Error::Index(format!("row refers to image {bad} of {}", images.len())));
        }
        let dev = self.device().clone();
        let pixels = images_to_tensor(images, self.dtype(), &dev)?;
        let seg = self.seg_encoder.encode(&pixels)?.tokens;
        let lang = self.lang_encoder.encode(&pixels)?.tokens;
        let row_img: Vec<u32> = rows.iter().map(|&(i, _)| i as u32).collect();
        let row_img = Tensor::from_vec(row_img, rows.len(), &dev)?;
        let lang_vision = lang.index_select(&row_img, 0)?;
        let (saliency, prefix) = match self.config.paradigm {
            Paradigm::Single => {
                let emotions: Vec<Emotion> = rows.iter().map(|&(_, e)| e).collect();
                let prompt = self.project(&emotions)?;
                let vision = seg.index_select(&row_img, 0)?;
                let mask = self.mask_tokens.expand(rows.len(), None)?;
                let out = self.mixer.run(Paradigm::Single, Some(&prompt), &mask, &vision)?;
                let sal = self.mask_head.forward(&out.mask, &out.vision)?.squeeze(1)?;
                let prefix = self.prefix.adapt(out.prompt.as_ref(), &out.mask)?;
                (sal, prefix)
            }
            Paradigm::Multi => {
                let n_img = images.len();
                let mask = self.mask_tokens.expand(n_img, trainable)?;
                let out = self.mixer.run(Paradigm::Multi, None, &mask, &seg)?;
                let sal = self.mask_head.forward(&out.mask, &out.vision)?;
                let (_, t, s, _) = sal.dims4()?;
                let flat: Vec<u32> = rows.iter().map(|&(i, e)| (i * t + e.id()) as u32).collect();
                let flat = Tensor::from_vec(flat, rows.len(), &dev)?;
                let sal = sal.reshape((n_img * t, s, s))?.index_select(&flat, 0)?;
                let prefix = self.prefix.adapt(None, &out.mask)?;
                let d = prefix.dims3()?.2;
                let prefix = prefix.reshape((n_img * t, 1, d))?.index_select(&flat, 0)?;
                (sal, prefix)
            }
        };
        Ok(RowForward {
            saliency,
            prefix,
            lang_vision,
        })
    }

    fn mask_tensor(&self, masks: &[&Mask]) -> Result<Tensor> {
        let (h, w) = (masks[0].height, masks[0].width);
        let data: Vec<f32> = masks
            .iter()
            .flat_map(|m| m.data.iter().map(|&b| if b { 1.0 } else { 0.0 }))
            .collect();
        Ok(Tensor::from_vec(data, (masks.len(), h, w), self.device())?.to_dtype(self.dtype())?)
    }

    /// Summed mask and language losses over every target in `units`,
    /// divided by `normalizer` for the differentiable objective.
    pub fn batch_loss(&self, units: &[&TrainUnit], normalizer: f64) -> Result<BatchLoss> {
        let mut images: Vec<&Image> = Vec::new();
        let mut rows = Vec::new();
        let mut targets: Vec<&Target> = Vec::new();
        let mut flags: Vec<Vec<bool>> = Vec::new();
        for u in units {
            let slot = match images.iter().position(|i| std::ptr::eq(*i, u.image.as_ref())) {
                Some(i) if self.config.paradigm == Paradigm::Single => i,
                _ => {
                    images.push(u.image.as_ref());
                    flags.push(vec![false; NUM_EMOTIONS]);
                    images.len() - 1
                }
            };
            if u.targets.is_empty() {
                return Err(Error::load(&u.image_id, "no annotated emotion"));
            }
            for t in &u.targets {
                rows.push((slot, t.emotion));
                flags[slot][t.emotion.id()] = true;
                targets.push(t);
            }
        }
        let trainable = (self.config.paradigm == Paradigm::Multi).then_some(flags.as_slice());
        let fwd = self.forward_rows(&images, &rows, trainable)?;
        let side = self.config.saliency_side();
        let gt_masks: Vec<&Mask> = targets.iter().map(|t| &t.mask).collect();
        if gt_masks.iter().any(|m| m.height != side || m.width != side) {
            return Err(Error::Shape(format!("targets must be downsampled to {side}x{side}")));
        }
        let gt = self.mask_tensor(&gt_masks)?;
        let c = &self.config;
        let dice = dice_loss_batch(&fwd.saliency, &gt, c.dice_eps)?;
        let focal = focal_loss_batch(&fwd.saliency, &gt, FocalParams::from_alpha(c.focal_alpha, c.focal_gamma))?;
        let max_len = targets.iter().map(|t| t.explanation.len()).max().unwrap_or(0);
        let gold: Vec<Vec<u32>> = targets
            .iter()
            .map(|t| {
                let mut g = t.explanation.clone();
                g.resize(max_len, PAD);
                g
            })
            .collect();
        let logits = self.decoder.decode_train(
            &self.embedding,
            &fwd.lang_vision,
            &fwd.prefix,
            &ids_to_tensor(&gold, self.device())?,
        )?;
        let lang = lang_loss_batch(&logits, &gold, PAD)?;
        let per_target = ((&dice + &focal)? + &lang)?;
        let objective = (per_target.sum_all()? / normalizer)?;

        let to_vec = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
        let (dv, fv, lv) = (to_vec(&dice)?, to_vec(&focal)?, to_vec(&lang)?);
        let mut report = LossReport::new(dv.iter().sum(), fv.iter().sum(), lv.iter().sum());
        if c.paradigm == Paradigm::Multi {
            for (i, t) in targets.iter().enumerate() {
                let slot = report.per_emotion.entry(t.emotion).or_insert_with(EmotionLoss::default);
                slot.mask += dv[i] + fv[i];
                slot.lang += lv[i];
            }
        }
        if !report.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss (dice {}, focal {}, lang {})",
                report.dice, report.focal, report.lang
            )));
        }
        Ok(BatchLoss {
            objective,
            report,
            targets: targets.len(),
        })
    }

    /// Per-target mean of each loss component over `units`, evaluated in
    /// chunks without updating anything.
    pub fn mean_loss(&self, units: &[TrainUnit], chunk: usize) -> Result<LossReport> {
        let mut sum = LossReport::default();
        let mut count = 0usize;
        let refs: Vec<&TrainUnit> = units.iter().collect();
        for part in refs.chunks(chunk.max(1)) {
            let loss = self.batch_loss(part, 1.0)?;
            sum.accumulate(&loss.report);
            count += loss.targets;
        }
        let n = count.max(1) as f64;
        Ok(LossReport::new(sum.dice / n, sum.focal / n, sum.lang / n))
    }

    /// Masks and (optionally) explanations for `(image, emotion)` pairs.
    /// `seeds[r]` drives the sampler for pair `r`.
    pub fn predict(
        &self,
        images: &[&Image],
        rows: &[(usize, Emotion)],
        seeds: &[u64],
        opts: PredictOptions,
    ) -> Result<Vec<Prediction>> {
        if seeds.len() != rows.len() {
            return Err(Error::Usage("one seed per prediction required".into()));
        }
        let fwd = self.forward_rows(images, rows, None)?;
        let generations = if opts.generate {
            let prefix = if opts.zero_prefix {
                fwd.prefix.zeros_like()?
            } else {
                fwd.prefix.clone()
            };
            Some(self.decoder.generate(&self.embedding, &fwd.lang_vision, &prefix, opts.top_p, seeds)?)
        } else {
            None
        };
        let side = self.config.saliency_side();
        let sal = fwd.saliency.to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(rows.len());
        for (r, &(img, emotion)) in rows.iter().enumerate() {
            let data = sal.get(r)?.flatten_all()?.to_vec1::<f32>()?;
            let saliency = Grid {
                height: side,
                width: side,
                data,
            };
            let image = images[img];
            let mask = saliency
                .resize_bilinear(image.height, image.width)
                .threshold(self.config.mask_threshold);
            let generation = generations.as_ref().map(|g| g[r].clone());
            let explanation = generation
                .as_ref()
                .map(|g| self.vocab.decode(&g.tokens))
                .unwrap_or_default();
            out.push(Prediction {
                emotion,
                saliency,
                mask,
                generation,
                explanation,
            });
        }
        Ok(out)
    }

    /// All eight emotions for one image.
    pub fn predict_all(&self, image: &Image, seed: u64, opts: PredictOptions) -> Result<Vec<Prediction>> {
        let rows: Vec<(usize, Emotion)> = Emotion::ALL.iter().map(|&e| (0, e)).collect();
        let seeds: Vec<u64> = Emotion::ALL.iter().map(|e| derive_seed(seed, e.id() as u64)).collect();
        self.predict(&[image], &rows, &seeds, opts)
    }

    /// Parameter groups that the freeze flags exclude from updates.
    pub fn frozen_groups(&self) -> Vec<ParamGroup> {
        let f = self.config.freeze;
        let mut g = Vec::new();
        if f.encoder {
            g.push(ParamGroup::Encoder);
        }
        if f.mixer {
            g.push(ParamGroup::Mixer);
        }
        if f.mask_head {
            g.push(ParamGroup::MaskHead);
        }
        g
    }

    fn metadata(&self) -> Result<HashMap<String, String>> {
        encode_header(&checkpoint_metadata(&self.config, &self.vocab)?)
    }

    /// Parameters plus config and vocabulary in one safetensors archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: BTreeMap<String, Tensor> = self
            .store
            .iter()
            .map(|(k, p)| (k.clone(), p.var.as_tensor().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, Some(self.metadata()?), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Restore a checkpoint written by [`EmoSem::save`].
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let header = read_header(&bytes, path)?;
        let config: ModelConfig = serde_json::from_str(header.get("config").map_or("", String::as_str))
            .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
        let vocab: Vocabulary = serde_json::from_str(header.get("vocab").map_or("", String::as_str))
            .map_err(|e| Error::Checkpoint(format!("{}: bad vocabulary: {e}", path.display())))?;
        let model = EmoSem::new(config, vocab.reindex()?, 0, dtype)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} tensors stored, model has {}",
                path.display(),
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, t) in &tensors {
            model.store.assign(name, t)?;
        }
        Ok(model)
    }

    /// Load and refuse checkpoints built for a different preset or mode.
    pub fn load_matching(path: &Path, expected: &ModelConfig, dtype: DType) -> Result<Self> {
        let model = Self::load(path, dtype)?;
        let c = &model.config;
        if c.preset != expected.preset || c.paradigm != expected.paradigm {
            return Err(Error::Checkpoint(format!(
                "{} was trained as {}/{}, requested {}/{}",
                path.display(),
                c.preset,
                c.paradigm,
                expected.preset,
                expected.paradigm
            )));
        }
        Ok(model)
    }
}

/// Safetensors metadata key holding every header field as one JSON object.
/// The metadata map is written in hash order, so a single key is what keeps
/// checkpoint bytes identical across runs.
pub const HEADER_KEY: &str = "emosem";

/// Wrap header fields for `safetensors::serialize_to_file`.
pub fn encode_header(fields: &BTreeMap<String, String>) -> Result<HashMap<String, String>> {
    Ok(HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(fields)?)]))
}

/// Header fields of a file written with [`encode_header`].
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, String>> {
    let (_, meta) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no emosem header", path.display())))?;
    serde_json::from_str(raw).map_err(|e| Error::Checkpoint(format!("{}: bad header: {e}", path.display())))
}

pub fn checkpoint_metadata(config: &ModelConfig, vocab: &Vocabulary) -> Result<BTreeMap<String, String>> {
    let mut meta = BTreeMap::new();
    meta.insert("format".into(), CHECKPOINT_FORMAT.into());
    meta.insert("version".into(), CHECKPOINT_VERSION.into());
    meta.insert("config".into(), serde_json::to_string(config)?);
    meta.insert("vocab".into(), serde_json::to_string(vocab)?);
    Ok(meta)
}

/// Validated model checkpoint header.
pub fn read_header(bytes: &[u8], path: &Path) -> Result<BTreeMap<String, String>> {
    let header = decode_header(bytes, path)?;
    match header.get("format").map(String::as_str) {
        Some(CHECKPOINT_FORMAT) => {}
        _ => return Err(Error::Checkpoint(format!("{} is not a model checkpoint", path.display()))),
    }
    match header.get("version").map(String::as_str) {
        Some(CHECKPOINT_VERSION) => Ok(header),
        other => Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {other:?}",
            path.display()
        ))),
    }
}

/// Mix a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::dataset::{build_vocabulary, load_samples, synthesize, SynthConfig};

    fn toy(paradigm: Paradigm) -> (EmoSem, Vec<Sample>, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            per_emotion: 1,
            ..SynthConfig::toy()
        };
        let manifest = synthesize(&cfg, 3, dir.path()).unwrap();
        let vocab = build_vocabulary(&[&manifest]);
        let mc = ModelConfig::preset(Preset::Toy, paradigm);
        let samples = load_samples(&manifest, &vocab, mc.max_len).unwrap();
        (EmoSem::new(mc, vocab, 1, DType::F32).unwrap(), samples, dir)
    }

    const OPTS: PredictOptions = PredictOptions {
        top_p: 0.9,
        zero_prefix: false,
        generate: true,
    };

    #[test]
    fn single_predictions_have_image_shape() {
        let (m, samples, _d) = toy(Paradigm::Single);
        let s = &samples[0];
        let p = m.predict(&[&s.image], &[(0, s.emotion)], &[5], OPTS).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].mask.height, p[0].mask.width), (64, 64));
        assert_eq!((p[0].saliency.height, p[0].saliency.width), (64, 64));
        assert!(p[0].generation.as_ref().unwrap().tokens.len() <= 25);
    }

    #[test]
    fn multi_predicts_eight_masks() {
        let (m, samples, _d) = toy(Paradigm::Multi);
        let p = m.predict_all(&samples[0].image, 9, OPTS).unwrap();
        assert_eq!(p.len(), 8);
        for (e, pred) in Emotion::ALL.iter().zip(&p) {
            assert_eq!(pred.emotion, *e);
        }
    }

    #[test]
    fn wrong_image_size_is_a_config_error() {
        let (m, _, _d) = toy(Paradigm::Single);
        let img = Image::zeros(32, 32);
        let err = m.predict(&[&img], &[(0, Emotion::Awe)], &[0], OPTS).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn single_report_total_is_sum() {
        let (m, samples, _d) = toy(Paradigm::Single);
        let units = training_units(&samples[..3], Paradigm::Single, 64).unwrap();
        let refs: Vec<&TrainUnit> = units.iter().collect();
        let l = m.batch_loss(&refs, 16.0).unwrap();
        assert_eq!(l.report.total, l.report.dice + l.report.focal + l.report.lang);
        assert_eq!(l.targets, 3);
        assert!(l.report.per_emotion.is_empty());
    }

    #[test]
    fn multi_report_has_one_entry_per_annotation() {
        let (m, samples, _d) = toy(Paradigm::Multi);
        let units = training_units(&samples, Paradigm::Multi, 64).unwrap();
        let u = units.iter().find(|u| u.targets.len() >= 2).expect("some image has two stimuli");
        let l = m.batch_loss(&[u], 1.0).unwrap();
        assert_eq!(l.report.per_emotion.len(), u.targets.len());
    }

    #[test]
    fn checkpoint_round_trip_and_refusal() {
        let (m, _, dir) = toy(Paradigm::Single);
        let path = dir.path().join("model.safetensors");
        m.save(&path).unwrap();
        let back = EmoSem::load(&path, DType::F32).unwrap();
        assert_eq!(back.store.snapshot().unwrap(), m.store.snapshot().unwrap());
        assert_eq!(back.vocab, m.vocab);
        let multi = ModelConfig::preset(Preset::Toy, Paradigm::Multi);
        assert!(matches!(
            EmoSem::load_matching(&path, &multi, DType::F32),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn grid_change_is_detected_at_load() {
        let (m, _, dir) = toy(Paradigm::Single);
        let path = dir.path().join("model.safetensors");
        let mut config = m.config.clone();
        config.grid = 8;
        let tensors: BTreeMap<String, Tensor> =
            m.store.iter().map(|(k, p)| (k.clone(), p.var.as_tensor().clone())).collect();
        let meta = encode_header(&checkpoint_metadata(&config, &m.vocab).unwrap()).unwrap();
        safetensors::serialize_to_file(tensors, Some(meta), &path).unwrap();
        let err = EmoSem::load(&path, DType::F32).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn version_is_required() {
        let (m, _, dir) = toy(Paradigm::Single);
        let path = dir.path().join("model.safetensors");
        let mut meta = checkpoint_metadata(&m.config, &m.vocab).unwrap();
        meta.insert("version".into(), "0".into());
        let tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        safetensors::serialize_to_file(tensors, Some(encode_header(&meta).unwrap()), &path).unwrap();
        assert!(matches!(EmoSem::load(&path, DType::F32), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
    }
}

//! Evaluation driver, scoring of prediction files, and inference artifacts.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Sample};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::metrics::{EmotionClassifier, EvalReport, SampleScore};
use crate::model::{derive_seed, EmoSem, PredictOptions, Prediction};
use crate::raster::{overlay, Image, Mask};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

#[derive(Debug, Clone)]
pub struct ScoredSample {
    pub image_id: String,
    pub emotion: Emotion,
    pub prediction: Prediction,
    pub score: SampleScore,
}

/// Segment and explain every sample, then score against the gold masks
/// and explanations. Sample `i` samples with `derive_seed(seed, i)`.
pub fn evaluate(
    model: &EmoSem,
    samples: &[Sample],
    seed: u64,
    zero_prefix: bool,
    classifier: &dyn EmotionClassifier,
) -> Result<(EvalReport, Vec<ScoredSample>)> {
    let opts = PredictOptions {
        top_p: model.config.nucleus_p,
        zero_prefix,
        generate: true,
    };
    let mut scored = Vec::with_capacity(samples.len());
    for (c, chunk) in samples.chunks(EVAL_CHUNK).enumerate() {
        let mut images: Vec<&Image> = Vec::new();
        let mut owners: Vec<&Arc<Image>> = Vec::new();
        let mut rows = Vec::with_capacity(chunk.len());
        for s in chunk {
            let slot = match owners.iter().position(|o| Arc::ptr_eq(o, &s.image)) {
                Some(i) => i,
                None => {
                    owners.push(&s.image);
                    images.push(s.image.as_ref());
                    images.len() - 1
                }
            };
            rows.push((slot, s.emotion));
        }
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| derive_seed(seed, (c * EVAL_CHUNK + i) as u64))
            .collect();
        let preds = model.predict(&images, &rows, &seeds, opts)?;
        for (s, p) in chunk.iter().zip(preds) {
            let score = SampleScore::compute(s.emotion, &p.mask, &s.mask, &p.explanation, &s.text, classifier)?;
            scored.push(ScoredSample {
                image_id: s.image_id.clone(),
                emotion: s.emotion,
                prediction: p,
                score,
            });
        }
    }
    let scores: Vec<SampleScore> = scored.iter().map(|s| s.score.clone()).collect();
    Ok((EvalReport::from_scores(&scores)?, scored))
}

/// One line of a predictions file. Paths are relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub mask_path: String,
    pub explanation: String,
    pub emotion: Emotion,
    /// Gold manifest image path; when absent, line `i` pairs with record `i`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::load(format!("{}:{}", path.display(), i + 1), e.to_string()))
        })
        .collect()
}

/// Score a predictions file against a gold manifest.
pub fn score_predictions(predictions: &Path, gold: &Manifest, classifier: &dyn EmotionClassifier) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    let base = predictions.parent().unwrap_or(Path::new("."));
    let mut by_key: HashMap<(&str, Emotion), usize> = HashMap::new();
    for (i, r) in gold.records.iter().enumerate() {
        let e = Emotion::from_name(&r.emotion)
            .ok_or_else(|| Error::load(&r.image_path, format!("unknown emotion {:?}", r.emotion)))?;
        by_key.insert((r.image_path.as_str(), e), i);
    }
    let mut scores = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let gi = match &p.image_path {
            Some(img) => *by_key
                .get(&(img.as_str(), p.emotion))
                .ok_or_else(|| Error::load(img, format!("no gold record for emotion {}", p.emotion)))?,
            None => i,
        };
        let g = gold
            .records
            .get(gi)
            .ok_or_else(|| Error::load(format!("prediction {}", i + 1), "more predictions than gold records"))?;
        if g.emotion != p.emotion.name() {
            return Err(Error::load(
                format!("prediction {}", i + 1),
                format!("emotion {} does not match gold {}", p.emotion, g.emotion),
            ));
        }
        let pred_mask = Mask::read_png(&base.join(&p.mask_path))?;
        let gold_mask = Mask::read_png(&gold.root.join(&g.mask_path))?;
        scores.push(SampleScore::compute(
            p.emotion,
            &pred_mask,
            &gold_mask,
            &p.explanation,
            &g.explanation,
            classifier,
        )?);
    }
    EvalReport::from_scores(&scores)
}

/// Write each scored sample's mask under `dir/masks` and a predictions
/// file that [`score_predictions`] can read back.
pub fn write_predictions(dir: &Path, scored: &[ScoredSample]) -> Result<PathBuf> {
    let masks = dir.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let mut lines = String::new();
    for (i, s) in scored.iter().enumerate() {
        let rel = format!("masks/{i:05}_{}.png", s.emotion);
        s.prediction.mask.write_png(&dir.join(&rel))?;
        let rec = PredictionRecord {
            mask_path: rel,
            explanation: s.prediction.explanation.clone(),
            emotion: s.emotion,
            image_path: Some(s.image_id.clone()),
        };
        lines.push_str(&serde_json::to_string(&rec)?);
        lines.push('\n');
    }
    let path = dir.join("predictions.jsonl");
    fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub emotion: Emotion,
    pub explanation: String,
    pub token_logprobs: Vec<f64>,
    pub mask_path: String,
}

/// Segment and explain one image, writing mask, 16-bit saliency, overlay
/// and JSON into `out`. `None` runs all eight emotions. Returns every path
/// written.
pub fn infer(model: &EmoSem, image: &Image, emotion: Option<Emotion>, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opts = PredictOptions {
        top_p: model.config.nucleus_p,
        zero_prefix: false,
        generate: true,
    };
    let preds = match emotion {
        Some(e) => model.predict(&[image], &[(0, e)], &[derive_seed(seed, e.id() as u64)], opts)?,
        None => model.predict_all(image, seed, opts)?,
    };
    let mut written = Vec::new();
    let mut results = Vec::with_capacity(preds.len());
    for p in &preds {
        let name = p.emotion.name();
        let mask_rel = format!("{name}_mask.png");
        let mask_path = out.join(&mask_rel);
        p.mask.write_png(&mask_path)?;
        let sal_path = out.join(format!("{name}_saliency.png"));
        p.saliency.to_gray16().save(&sal_path)?;
        let ov_path = out.join(format!("{name}_overlay.png"));
        overlay(image, &p.mask)?.save(&ov_path)?;
        written.extend([mask_path, sal_path, ov_path]);
        results.push(InferResult {
            emotion: p.emotion,
            explanation: p.explanation.clone(),
            token_logprobs: p.generation.as_ref().map(|g| g.logprobs.clone()).unwrap_or_default(),
            mask_path: mask_rel,
        });
    }
    let json = match emotion {
        Some(_) => serde_json::to_string_pretty(&results[0])?,
        None => serde_json::to_string_pretty(&serde_json::json!({ "results": results }))?,
    };
    let json_path = out.join("result.json");
    fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Paradigm, Preset};
    use crate::dataset::{build_vocabulary, load_samples, synthesize, SynthConfig};
    use crate::metrics::KeywordClassifier;
    use candle_core::DType;

    fn corpus() -> (Manifest, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            per_emotion: 1,
            ..SynthConfig::toy()
        };
        (synthesize(&cfg, 4, &dir.path().join("data")).unwrap(), dir)
    }

    fn oracle_file(dir: &Path, gold: &Manifest, empty: bool, with_path: bool) -> PathBuf {
        let mut lines = String::new();
        for (i, r) in gold.records.iter().enumerate() {
            let rel = format!("m{i}.png");
            let m = Mask::read_png(&gold.root.join(&r.mask_path)).unwrap();
            let m = if empty { Mask::empty(m.height, m.width) } else { m };
            m.write_png(&dir.join(&rel)).unwrap();
            let rec = PredictionRecord {
                mask_path: rel,
                explanation: r.explanation.clone(),
                emotion: Emotion::from_name(&r.emotion).unwrap(),
                image_path: with_path.then(|| r.image_path.clone()),
            };
            lines.push_str(&serde_json::to_string(&rec).unwrap());
            lines.push('\n');
        }
        let p = dir.join("pred.jsonl");
        fs::write(&p, lines).unwrap();
        p
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let (gold, dir) = corpus();
        let p = oracle_file(dir.path(), &gold, false, true);
        let r = score_predictions(&p, &gold, &KeywordClassifier::default()).unwrap();
        assert_eq!((r.seg_p25, r.seg_p50, r.bbox_p25, r.bbox_p50), (100.0, 100.0, 100.0, 100.0));
        assert_eq!((r.bleu1, r.ea), (100.0, 100.0));
        assert_eq!(r.samples, gold.records.len());
    }

    #[test]
    fn empty_predictor_scores_zero() {
        let (gold, dir) = corpus();
        let p = oracle_file(dir.path(), &gold, true, false);
        let r = score_predictions(&p, &gold, &KeywordClassifier::default()).unwrap();
        assert_eq!((r.seg_p25, r.seg_p50), (0.0, 0.0));
    }

    #[test]
    fn infer_file_counts() {
        let (gold, dir) = corpus();
        let vocab = build_vocabulary(&[&gold]);
        let samples = load_samples(&gold, &vocab, 25).unwrap();
        for (paradigm, emotion, expected) in [
            (Paradigm::Single, Some(Emotion::Fear), 4),
            (Paradigm::Multi, None, 25),
        ] {
            let m = EmoSem::new(ModelConfig::preset(Preset::Toy, paradigm), vocab.clone(), 0, DType::F32).unwrap();
            let out = dir.path().join(format!("infer_{paradigm}"));
            let files = infer(&m, &samples[0].image, emotion, 3, &out).unwrap();
            assert_eq!(files.len(), expected);
            assert_eq!(fs::read_dir(&out).unwrap().count(), expected);
            let first = fs::read(out.join("result.json")).unwrap();
            infer(&m, &samples[0].image, emotion, 3, &out).unwrap();
            assert_eq!(first, fs::read(out.join("result.json")).unwrap());
        }
    }

    #[test]
    fn evaluate_counts_every_sample() {
        let (gold, _dir) = corpus();
        let vocab = build_vocabulary(&[&gold]);
        let samples = load_samples(&gold, &vocab, 25).unwrap();
        let m = EmoSem::new(ModelConfig::preset(Preset::Toy, Paradigm::Multi), vocab, 0, DType::F32).unwrap();
        let (r, scored) = evaluate(&m, &samples, 1, false, &KeywordClassifier::default()).unwrap();
        assert_eq!(r.samples, samples.len());
        assert_eq!(scored.len(), samples.len());
    }
}

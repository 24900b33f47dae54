//! Evaluation metrics: mask and box IoU, precision at IoU thresholds,
//! BLEU-1..4, ROUGE-L, and emotion alignment of generated text.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::dataset::tokenize;
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::raster::Mask;

/// `|a & b| / |a | b|`; 1 when both are empty.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "iou of {}x{} and {}x{} masks",
            a.height, a.width, b.height, b.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BBox {
    pub fn area(&self) -> usize {
        (self.y1 - self.y0 + 1) * (self.x1 - self.x0 + 1)
    }

    pub fn intersection(&self, other: &BBox) -> usize {
        let y0 = self.y0.max(other.y0);
        let y1 = self.y1.min(other.y1);
        let x0 = self.x0.max(other.x0);
        let x1 = self.x1.min(other.x1);
        if y0 > y1 || x0 > x1 {
            0
        } else {
            (y1 - y0 + 1) * (x1 - x0 + 1)
        }
    }
}

/// Tightest box around the foreground, `None` for an empty mask.
pub fn bbox_from_mask(mask: &Mask) -> Option<BBox> {
    let mut b: Option<BBox> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                b = Some(match b {
                    None => BBox { y0: y, y1: y, x0: x, x1: x },
                    Some(b) => BBox {
                        y0: b.y0.min(y),
                        y1: b.y1.max(y),
                        x0: b.x0.min(x),
                        x1: b.x1.max(x),
                    },
                });
            }
        }
    }
    b
}

/// IoU of the two masks' bounding boxes, with the same empty conventions
/// as [`iou`].
pub fn bbox_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape("bbox iou of differently sized masks".into()));
    }
    Ok(match (bbox_from_mask(a), bbox_from_mask(b)) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some(p), Some(q)) => {
            let inter = p.intersection(&q);
            inter as f64 / (p.area() + q.area() - inter) as f64
        }
    })
}

/// Percentage of IoUs strictly above `threshold`.
pub fn p_at_k(ious: &[f64], threshold: f64) -> Result<f64> {
    if ious.is_empty() {
        return Err(Error::Usage("precision at k over an empty list".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Usage(format!("threshold {threshold} outside (0, 1)")));
    }
    let hits = ious.iter().filter(|&&v| v > threshold).count();
    Ok(100.0 * hits as f64 / ious.len() as f64)
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram precision of order `n` as `(matches, total)`.
pub fn modified_precision<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matches = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matches, cand.len().saturating_sub(n - 1))
}

/// Sentence BLEU-n against a single reference: geometric mean of clipped
/// precisions 1..=n with brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn bleu_n<T: Eq + Hash + Clone>(cand: &[T], reference: &[T], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, total) = modified_precision(cand, reference, k);
        if m == 0 || total == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / total as f64).ln();
    }
    let (c, r) = (cand.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * (log_sum / n as f64).exp()
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

/// LCS F-measure, `(1 + b^2) P R / (R + b^2 P)` with `b = 1.2`.
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / cand.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Maps explanation text to an emotion, or `None` when undecidable.
pub trait EmotionClassifier {
    fn classify(&self, text: &str) -> Option<Emotion>;
}

/// Scans for emotion names and a small keyword list; the first keyword in
/// reading order wins.
#[derive(Debug, Clone)]
pub struct KeywordClassifier {
    keywords: HashMap<String, Emotion>,
}

const KEYWORDS: &str = include_str!("../data/emotion_keywords.txt");

impl Default for KeywordClassifier {
    fn default() -> Self {
        let mut keywords = HashMap::new();
        for e in Emotion::ALL {
            keywords.insert(e.name().to_string(), e);
        }
        for line in KEYWORDS.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, words) = line.split_once(':').expect("keyword file lines are `emotion: words`");
            let e = Emotion::from_name(name.trim()).expect("keyword file names a known emotion");
            for w in words.split_whitespace() {
                keywords.insert(w.to_string(), e);
            }
        }
        KeywordClassifier { keywords }
    }
}

impl EmotionClassifier for KeywordClassifier {
    fn classify(&self, text: &str) -> Option<Emotion> {
        tokenize(text).iter().find_map(|w| self.keywords.get(w).copied())
    }
}

/// Percentage of explanations whose classified emotion equals the gold
/// label; unclassifiable text counts as a mismatch.
pub fn emotion_alignment<S: AsRef<str>>(
    explanations: &[S],
    gold: &[Emotion],
    classifier: &dyn EmotionClassifier,
) -> Result<f64> {
    if explanations.len() != gold.len() {
        return Err(Error::Usage(format!(
            "{} explanations vs {} gold emotions",
            explanations.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = explanations
        .iter()
        .zip(gold)
        .filter(|(t, g)| classifier.classify(t.as_ref()) == Some(**g))
        .count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Everything measured for one (image, emotion) prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub emotion: Emotion,
    pub seg_iou: f64,
    pub bbox_iou: f64,
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub aligned: bool,
}

impl SampleScore {
    pub fn compute(
        emotion: Emotion,
        pred_mask: &Mask,
        gold_mask: &Mask,
        pred_text: &str,
        gold_text: &str,
        classifier: &dyn EmotionClassifier,
    ) -> Result<Self> {
        let cand = tokenize(pred_text);
        let reference = tokenize(gold_text);
        Ok(SampleScore {
            emotion,
            seg_iou: iou(pred_mask, gold_mask)?,
            bbox_iou: bbox_iou(pred_mask, gold_mask)?,
            bleu: [1, 2, 3, 4].map(|n| bleu_n(&cand, &reference, n)),
            rouge_l: rouge_l(&cand, &reference),
            aligned: classifier.classify(pred_text) == Some(emotion),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmotionBreakdown {
    pub count: usize,
    pub seg_p50: f64,
    pub ea: f64,
}

/// Aggregate scores, all rates as percentages rounded to 2 decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub bbox_p25: f64,
    pub bbox_p50: f64,
    pub seg_p25: f64,
    pub seg_p50: f64,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub ea: f64,
    pub per_emotion: BTreeMap<Emotion, EmotionBreakdown>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl EvalReport {
    pub fn from_scores(scores: &[SampleScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Usage("no samples to evaluate".into()));
        }
        let n = scores.len() as f64;
        let seg: Vec<f64> = scores.iter().map(|s| s.seg_iou).collect();
        let bbox: Vec<f64> = scores.iter().map(|s| s.bbox_iou).collect();
        let mean = |f: &dyn Fn(&SampleScore) -> f64| 100.0 * scores.iter().map(f).sum::<f64>() / n;
        let mut per_emotion = BTreeMap::new();
        for e in Emotion::ALL {
            let subset: Vec<&SampleScore> = scores.iter().filter(|s| s.emotion == e).collect();
            if subset.is_empty() {
                continue;
            }
            let ious: Vec<f64> = subset.iter().map(|s| s.seg_iou).collect();
            let aligned = subset.iter().filter(|s| s.aligned).count();
            per_emotion.insert(
                e,
                EmotionBreakdown {
                    count: subset.len(),
                    seg_p50: round2(p_at_k(&ious, 0.5)?),
                    ea: round2(100.0 * aligned as f64 / subset.len() as f64),
                },
            );
        }
        Ok(EvalReport {
            samples: scores.len(),
            bbox_p25: round2(p_at_k(&bbox, 0.25)?),
            bbox_p50: round2(p_at_k(&bbox, 0.5)?),
            seg_p25: round2(p_at_k(&seg, 0.25)?),
            seg_p50: round2(p_at_k(&seg, 0.5)?),
            bleu1: round2(mean(&|s| s.bleu[0])),
            bleu2: round2(mean(&|s| s.bleu[1])),
            bleu3: round2(mean(&|s| s.bleu[2])),
            bleu4: round2(mean(&|s| s.bleu[3])),
            rouge_l: round2(mean(&|s| s.rouge_l)),
            ea: round2(mean(&|s| f64::from(u8::from(s.aligned)))),
            per_emotion,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7} {:>7} {:>8} {:>7}",
            "bbox@25", "bbox@50", "seg@25", "seg@50", "B1", "B2", "B3", "B4", "ROUGE-L", "EA"
        );
        let _ = writeln!(
            out,
            "{:>9.2} {:>9.2} {:>9.2} {:>9.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>7.2}",
            self.bbox_p25,
            self.bbox_p50,
            self.seg_p25,
            self.seg_p50,
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.ea
        );
        let _ = writeln!(out, "samples: {}", self.samples);
        for (e, b) in &self.per_emotion {
            let _ = writeln!(out, "  {:<12} n={:<4} seg@50={:>6.2} EA={:>6.2}", e.name(), b.count, b.seg_p50, b.ea);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(pixels: &[(usize, usize)], n: usize) -> Mask {
        let mut m = Mask::empty(n, n);
        for &(y, x) in pixels {
            m.set(y, x, true);
        }
        m
    }

    fn words(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn iou_fixtures() {
        let a = mask_from(&[(0, 0), (0, 1), (1, 0), (1, 1)], 4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = mask_from(&[(3, 3)], 4);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        // |a| = 4, |b| = 8, overlap 2
        let b = mask_from(&[(1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 1), (2, 2), (2, 3)], 4);
        assert!((iou(&a, &b).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(iou(&Mask::empty(2, 2), &Mask::empty(2, 2)).unwrap(), 1.0);
        assert_eq!(iou(&Mask::empty(4, 4), &a).unwrap(), 0.0);
        assert!(iou(&a, &Mask::empty(3, 3)).is_err());
    }

    #[test]
    fn bbox_fixtures() {
        let m = mask_from(&[(1, 1), (3, 2)], 5);
        assert_eq!(bbox_from_mask(&m), Some(BBox { y0: 1, y1: 3, x0: 1, x1: 2 }));
        assert_eq!(bbox_from_mask(&Mask::empty(3, 3)), None);
        assert_eq!(bbox_from_mask(&Mask::full(3, 4)), Some(BBox { y0: 0, y1: 2, x0: 0, x1: 3 }));
    }

    #[test]
    fn p_at_k_fixtures() {
        let ious = [0.3, 0.6, 0.1];
        assert!((p_at_k(&ious, 0.25).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((p_at_k(&ious, 0.5).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(p_at_k(&[1.0; 5], 0.5).unwrap(), 100.0);
        // strict inequality
        assert_eq!(p_at_k(&[0.5], 0.5).unwrap(), 0.0);
        assert!(p_at_k(&[], 0.5).is_err());
    }

    #[test]
    fn bleu_fixtures() {
        let x = words("the red circle fills me with fear");
        for n in 1..=4 {
            assert!((bleu_n(&x, &x, n) - 1.0).abs() < 1e-12);
        }
        // clipped unigram precision 1/3; candidate longer than reference, so no penalty
        let c = words("the the the");
        let r = words("the cat");
        assert!((bleu_n(&c, &r, 1) - 1.0 / 3.0).abs() < 1e-12);
        // short candidate: precision 1, brevity penalty exp(1 - 4/2)
        let c = words("the cat");
        let r = words("the cat sat down");
        assert!((bleu_n(&c, &r, 1) - (-1f64).exp()).abs() < 1e-12);
        assert!((bleu_n(&c, &r, 2) - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(bleu_n(&[] as &[String], &r, 1), 0.0);
    }

    #[test]
    fn rouge_fixtures() {
        let x = words("a b c");
        assert!((rouge_l(&x, &x) - 1.0).abs() < 1e-12);
        let c = words("a b c d");
        let r = words("a c d");
        let (p, rr, b2) = (0.75, 1.0, 1.44);
        let expected = (1.0 + b2) * p * rr / (rr + b2 * p);
        assert!((rouge_l(&c, &r) - expected).abs() < 1e-12);
        assert_eq!(rouge_l(&words("x y"), &words("a b")), 0.0);
        assert_eq!(lcs_len(&c, &r), 3);
    }

    #[test]
    fn keyword_alignment() {
        let k = KeywordClassifier::default();
        assert_eq!(k.classify("the red circle fills me with fear"), Some(Emotion::Fear));
        assert_eq!(k.classify("a blue square"), None);
        assert_eq!(k.classify("I am so SCARED."), Some(Emotion::Fear));
        let texts: Vec<String> = (0..10)
            .map(|i| if i < 7 { "pure awe".to_string() } else { "nothing".to_string() })
            .collect();
        let gold = vec![Emotion::Awe; 10];
        assert!((emotion_alignment(&texts, &gold, &k).unwrap() - 70.0).abs() < 1e-12);
        assert!(emotion_alignment(&texts, &gold[..3], &k).is_err());
    }

    #[test]
    fn report_rounds_and_breaks_down() {
        let m = mask_from(&[(0, 0)], 2);
        let k = KeywordClassifier::default();
        let s1 = SampleScore::compute(Emotion::Fear, &m, &m, "i feel fear", "i feel fear", &k).unwrap();
        let s2 = SampleScore::compute(Emotion::Awe, &Mask::empty(2, 2), &m, "nothing", "awe", &k).unwrap();
        let s3 = SampleScore::compute(Emotion::Awe, &m, &m, "awe", "awe", &k).unwrap();
        let r = EvalReport::from_scores(&[s1, s2, s3]).unwrap();
        assert_eq!(r.seg_p50, 66.67);
        assert_eq!(r.ea, 66.67);
        assert_eq!(r.per_emotion[&Emotion::Awe].count, 2);
        assert_eq!(r.per_emotion.values().map(|b| b.count).sum::<usize>(), r.samples);
        assert!(r.to_table().contains("seg@50"));
    }
}

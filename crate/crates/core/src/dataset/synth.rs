//! Synthetic art-emotion corpus: geometric shapes on textured backgrounds,
//! one designated stimulus shape per (image, emotion) record, with its exact
//! mask and a templated explanation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord, Split};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// Shapes are centred on integer coordinates with integer radius so that no
/// pixel centre (always on a half-integer) lies exactly on a boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: i32,
    pub cy: i32,
    /// Circle radius, square half-side, triangle half-base (= half-height).
    pub r: i32,
}

impl Shape {
    /// `(x0, y0, x1, y1)`, exclusive upper bounds.
    pub fn bbox(&self) -> (i32, i32, i32, i32) {
        (self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)
    }

    /// Inclusive column span covered on row `y`, unclipped.
    fn row_span(&self, y: i32) -> Option<(i32, i32)> {
        let py = f64::from(y) + 0.5;
        let (cx, cy, r) = (f64::from(self.cx), f64::from(self.cy), f64::from(self.r));
        if py < cy - r || py > cy + r {
            return None;
        }
        let half = match self.kind {
            ShapeKind::Circle => (r * r - (py - cy) * (py - cy)).sqrt(),
            ShapeKind::Square => r,
            // apex at (cx, cy - r), base corners at (cx ± r, cy + r)
            ShapeKind::Triangle => (py - (cy - r)) / 2.0,
        };
        let lo = (cx - half - 0.5).ceil() as i32;
        let hi = (cx + half - 0.5).floor() as i32;
        (lo <= hi).then_some((lo, hi))
    }

    /// Scanline rasterization: a pixel is covered when its centre is inside.
    pub fn rasterize(&self, height: usize, width: usize) -> Mask {
        let mut mask = Mask::empty(height, width);
        for y in 0..height as i32 {
            if let Some((lo, hi)) = self.row_span(y) {
                let lo = lo.max(0);
                let hi = hi.min(width as i32 - 1);
                for x in lo..=hi {
                    mask.set(y as usize, x as usize, true);
                }
            }
        }
        mask
    }
}

pub fn emotion_color(emotion: Emotion) -> (&'static str, [u8; 3]) {
    match emotion {
        Emotion::Amusement => ("yellow", [240, 220, 40]),
        Emotion::Awe => ("purple", [140, 60, 200]),
        Emotion::Contentment => ("green", [50, 170, 70]),
        Emotion::Excitement => ("orange", [250, 140, 20]),
        Emotion::Anger => ("red", [220, 30, 30]),
        Emotion::Disgust => ("pink", [250, 110, 180]),
        Emotion::Fear => ("black", [20, 20, 20]),
        Emotion::Sadness => ("blue", [40, 80, 220]),
    }
}

const DISTRACTOR_COLORS: [[u8; 3]; 3] = [[245, 245, 245], [110, 110, 110], [40, 200, 200]];

/// The explanation template is a fixed function of the emotion so that the
/// text is fully determined by (emotion, stimulus shape).
pub fn explanation(emotion: Emotion, shape: ShapeKind) -> String {
    let (color, _) = emotion_color(emotion);
    let (e, s) = (emotion.name(), shape.word());
    match emotion.id() % 3 {
        0 => format!("the {color} {s} fills me with {e}"),
        1 => format!("the {color} {s} makes me feel {e}"),
        _ => format!("i feel {e} because of the {color} {s}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub per_emotion: usize,
    pub val_per_emotion: usize,
    pub test_per_emotion: usize,
    pub shapes: Vec<ShapeKind>,
    /// Chance that an image carries a second, differently-labelled stimulus.
    pub pair_probability: f64,
}

impl SynthConfig {
    pub fn toy() -> Self {
        SynthConfig {
            image_size: 64,
            per_emotion: 4,
            val_per_emotion: 0,
            test_per_emotion: 0,
            shapes: ShapeKind::ALL.to_vec(),
            pair_probability: 0.6,
        }
    }
}

/// One synthesized image with its stimulus annotations, kept in memory.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub name: String,
    pub split: Split,
    pub image: Image,
    pub shapes: Vec<Shape>,
    /// `(emotion, index into shapes)`
    pub stimuli: Vec<(Emotion, usize)>,
}

fn place_shapes(rng: &mut ChaCha8Rng, cfg: &SynthConfig, count: usize) -> Vec<Shape> {
    let size = cfg.image_size as i32;
    let r_min = (size / 8).max(2);
    let r_max = (size / 5).max(r_min);
    let gap = 2;
    let mut shapes: Vec<Shape> = Vec::with_capacity(count);
    let mut r_hi = r_max;
    while shapes.len() < count {
        let mut placed = false;
        for _ in 0..500 {
            let r = rng.random_range(r_min.min(r_hi)..=r_hi);
            let lo = r + 1;
            let hi = size - r - 1;
            if lo > hi {
                break;
            }
            let cand = Shape {
                kind: *cfg.shapes.choose(rng).expect("non-empty shape palette"),
                cx: rng.random_range(lo..=hi),
                cy: rng.random_range(lo..=hi),
                r,
            };
            let (ax0, ay0, ax1, ay1) = cand.bbox();
            let clear = shapes.iter().all(|s| {
                let (bx0, by0, bx1, by1) = s.bbox();
                ax1 + gap <= bx0 || bx1 + gap <= ax0 || ay1 + gap <= by0 || by1 + gap <= ay0
            });
            if clear {
                shapes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            if r_hi <= 2 {
                // Nothing else fits; give up on the remaining distractors.
                break;
            }
            r_hi -= 1;
        }
    }
    shapes
}

fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig, shapes: &[Shape], colors: &[[u8; 3]]) -> Image {
    let n = cfg.image_size;
    let base = [
        rng.random_range(165..=195) as f32,
        rng.random_range(150..=180) as f32,
        rng.random_range(120..=155) as f32,
    ];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let period: f32 = rng.random_range(6.0..14.0);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut rgb = vec![0u8; n * n * 3];
    for y in 0..n {
        for x in 0..n {
            let phase = (x as f32 * ca + y as f32 * sa) / period * std::f32::consts::TAU;
            let stripe = 10.0 * phase.sin();
            for c in 0..3 {
                let noise: f32 = rng.random_range(-5.0..5.0);
                rgb[(y * n + x) * 3 + c] = (base[c] + stripe + noise).clamp(0.0, 255.0) as u8;
            }
        }
    }
    for (shape, color) in shapes.iter().zip(colors) {
        let m = shape.rasterize(n, n);
        for (i, &on) in m.data.iter().enumerate() {
            if on {
                rgb[i * 3..i * 3 + 3].copy_from_slice(color);
            }
        }
    }
    Image {
        height: n,
        width: n,
        data: rgb.iter().map(|&v| f32::from(v) / 255.0).collect(),
    }
}

/// Group the `per_emotion x 8` stimulus slots of one split into images of one
/// or two distinct-emotion stimuli plus optional distractors (1-3 shapes).
fn synth_split(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    split: Split,
    per_emotion: usize,
) -> Vec<SynthImage> {
    let mut slots: Vec<Emotion> = Emotion::ALL
        .iter()
        .flat_map(|&e| std::iter::repeat_n(e, per_emotion))
        .collect();
    slots.shuffle(rng);
    let mut images = Vec::new();
    while let Some(first) = slots.first().copied() {
        slots.remove(0);
        let mut emotions = vec![first];
        if rng.random_bool(cfg.pair_probability) {
            if let Some(pos) = slots.iter().position(|&e| e != first) {
                emotions.push(slots.remove(pos));
            }
        }
        let distractors = rng.random_range(0..=3 - emotions.len());
        let shapes = place_shapes(rng, cfg, emotions.len() + distractors);
        let mut colors: Vec<[u8; 3]> = emotions.iter().map(|&e| emotion_color(e).1).collect();
        for _ in emotions.len()..shapes.len() {
            colors.push(*DISTRACTOR_COLORS.choose(rng).expect("non-empty"));
        }
        let image = render(rng, cfg, &shapes, &colors);
        let name = format!("{}_{:04}", split.as_str(), images.len());
        images.push(SynthImage {
            name,
            split,
            image,
            shapes,
            stimuli: emotions.into_iter().enumerate().map(|(i, e)| (e, i)).collect(),
        });
    }
    images
}

/// Generate the corpus in memory. Deterministic for a fixed seed.
pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthImage>> {
    if cfg.shapes.is_empty() {
        return Err(Error::Config("shape palette is empty".into()));
    }
    if cfg.image_size < 16 {
        return Err(Error::Config(format!("image size {} too small", cfg.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (split, n) in [
        (Split::Train, cfg.per_emotion),
        (Split::Val, cfg.val_per_emotion),
        (Split::Test, cfg.test_per_emotion),
    ] {
        out.extend(synth_split(&mut rng, cfg, split, n));
    }
    Ok(out)
}

/// Generate the corpus and write images, masks and `manifest.jsonl` under `root`.
pub fn synthesize(cfg: &SynthConfig, seed: u64, root: &Path) -> Result<Manifest> {
    let images = generate(cfg, seed)?;
    for dir in [root.to_path_buf(), root.join("images"), root.join("masks")] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::new();
    for img in &images {
        let image_rel = format!("images/{}.png", img.name);
        let path = root.join(&image_rel);
        img.image.to_rgb8().save(&path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(&path, io),
            other => other.into(),
        })?;
        for &(emotion, idx) in &img.stimuli {
            let shape = img.shapes[idx];
            let mask_rel = format!("masks/{}_{}.png", img.name, emotion.name());
            shape
                .rasterize(cfg.image_size, cfg.image_size)
                .write_png(&root.join(&mask_rel))?;
            records.push(ManifestRecord {
                image_path: image_rel.clone(),
                mask_path: mask_rel,
                emotion: emotion.name().to_string(),
                explanation: explanation(emotion, shape.kind),
                split: img.split,
            });
        }
    }
    let manifest = Manifest {
        root: root.to_path_buf(),
        records,
    };
    manifest.write(&root.join(super::manifest::MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent per-pixel point-in-shape test.
    fn contains(shape: &Shape, px: f64, py: f64) -> bool {
        let (cx, cy, r) = (f64::from(shape.cx), f64::from(shape.cy), f64::from(shape.r));
        match shape.kind {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            ShapeKind::Triangle => {
                let v = [(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)];
                let cross = |a: (f64, f64), b: (f64, f64)| {
                    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
                };
                let s = [cross(v[0], v[1]), cross(v[1], v[2]), cross(v[2], v[0])];
                s.iter().all(|&c| c >= 0.0) || s.iter().all(|&c| c <= 0.0)
            }
        }
    }

    fn brute_force(shape: &Shape, n: usize) -> Mask {
        let mut m = Mask::empty(n, n);
        for y in 0..n {
            for x in 0..n {
                m.set(y, x, contains(shape, x as f64 + 0.5, y as f64 + 0.5));
            }
        }
        m
    }

    #[test]
    fn scanline_matches_point_in_shape() {
        for kind in ShapeKind::ALL {
            for r in 2..14 {
                for (cx, cy) in [(20, 20), (r + 1, 30), (17, 40 - r)] {
                    let s = Shape { kind, cx, cy, r };
                    assert_eq!(s.rasterize(48, 48), brute_force(&s, 48), "{s:?}");
                }
            }
        }
    }

    #[test]
    fn synthesized_masks_match_oracle_and_are_nonempty() {
        let cfg = SynthConfig::toy();
        let images = generate(&cfg, 7).unwrap();
        let mut records = 0;
        for img in &images {
            assert!((1..=3).contains(&img.shapes.len()));
            assert!((1..=2).contains(&img.stimuli.len()));
            for &(_, idx) in &img.stimuli {
                let s = &img.shapes[idx];
                let m = s.rasterize(64, 64);
                let oracle = brute_force(s, 64);
                assert_eq!(m.count(), oracle.count());
                assert_eq!(m, oracle);
                assert!(m.count() > 0);
                let (x0, y0, x1, y1) = s.bbox();
                assert!(x0 >= 0 && y0 >= 0 && x1 <= 64 && y1 <= 64);
                records += 1;
            }
            let mut emos: Vec<_> = img.stimuli.iter().map(|s| s.0).collect();
            emos.dedup();
            assert_eq!(emos.len(), img.stimuli.len());
        }
        assert_eq!(records, 32);
    }

    #[test]
    fn stimulus_pixels_carry_emotion_color() {
        let images = generate(&SynthConfig::toy(), 3).unwrap();
        for img in &images {
            for &(e, idx) in &img.stimuli {
                let m = img.shapes[idx].rasterize(64, 64);
                let want = emotion_color(e).1.map(|c| f32::from(c) / 255.0);
                for y in 0..64 {
                    for x in 0..64 {
                        if m.get(y, x) {
                            assert_eq!(img.image.pixel(y, x), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn explanation_contains_words() {
        let t = explanation(Emotion::Fear, ShapeKind::Circle);
        assert!(t.contains("fear") && t.contains("black") && t.contains("circle"));
        for e in Emotion::ALL {
            assert!(explanation(e, ShapeKind::Square).split(' ').any(|w| w == e.name()));
        }
    }

    #[test]
    fn empty_palette_rejected() {
        let cfg = SynthConfig {
            shapes: vec![],
            ..SynthConfig::toy()
        };
        assert!(generate(&cfg, 0).is_err());
    }
}

//! Model and training configuration, the two named presets, and the
//! `key = value` config-file format accepted by the CLI.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected paper|toy)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Toy => "toy",
        })
    }
}

/// Single-Mask: one prompt-conditioned mask per pass.
/// Multi-Masks: eight emotion-bound mask tokens, no prompt stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Single,
    Multi,
}

impl FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Paradigm::Single),
            "multi" => Ok(Paradigm::Multi),
            other => Err(Error::Config(format!("unknown mode {other:?} (expected single|multi)"))),
        }
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Single => "single",
            Paradigm::Multi => "multi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub mixer: bool,
    pub mask_head: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset: Preset,
    pub paradigm: Paradigm,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Segmentation feature width.
    pub d_k: usize,
    /// Word-embedding / language-stream width.
    pub d_w: usize,
    /// Prefix width; must equal `d_w` since the prefix shares the decoder input.
    pub d_h: usize,
    /// Segmentation token grid side.
    pub grid: usize,
    /// Language-stream token grid side.
    pub lang_grid: usize,
    pub encoder_layers: usize,
    pub mixer_blocks: usize,
    pub decoder_blocks: usize,
    pub seg_heads: usize,
    pub lang_heads: usize,
    pub max_len: usize,
    pub prompt_len: usize,
    pub nucleus_p: f64,
    pub mask_threshold: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub dice_eps: f64,
    pub freeze: FreezeFlags,
}

impl ModelConfig {
    pub fn preset(preset: Preset, paradigm: Paradigm) -> Self {
        match preset {
            Preset::Paper => ModelConfig {
                preset,
                paradigm,
                image_size: 1024,
                d_k: 256,
                d_w: 768,
                d_h: 768,
                grid: 64,
                lang_grid: 16,
                encoder_layers: 2,
                mixer_blocks: 2,
                decoder_blocks: 6,
                seg_heads: 8,
                lang_heads: 12,
                max_len: 25,
                prompt_len: 8,
                nucleus_p: 0.9,
                mask_threshold: 0.0,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                dice_eps: 1.0,
                freeze: FreezeFlags {
                    encoder: true,
                    mixer: true,
                    mask_head: false,
                },
            },
            Preset::Toy => ModelConfig {
                preset,
                paradigm,
                image_size: 64,
                d_k: 32,
                d_w: 64,
                d_h: 64,
                grid: 16,
                lang_grid: 8,
                encoder_layers: 1,
                mixer_blocks: 2,
                decoder_blocks: 2,
                seg_heads: 4,
                lang_heads: 4,
                max_len: 25,
                prompt_len: 8,
                nucleus_p: 0.9,
                mask_threshold: 0.0,
                focal_alpha: 0.25,
                focal_gamma: 2.0,
                dice_eps: 1.0,
                freeze: FreezeFlags::default(),
            },
        }
    }

    pub fn seg_patch(&self) -> usize {
        self.image_size / self.grid
    }

    pub fn lang_patch(&self) -> usize {
        self.image_size / self.lang_grid
    }

    /// Side of the saliency grid: two 2x upsamplings of the token grid.
    pub fn saliency_side(&self) -> usize {
        4 * self.grid
    }

    pub fn mask_token_count(&self) -> usize {
        match self.paradigm {
            Paradigm::Single => 1,
            Paradigm::Multi => crate::emotion::NUM_EMOTIONS,
        }
    }

    /// Prefix length fed to the language decoder.
    pub fn prefix_len(&self) -> usize {
        match self.paradigm {
            Paradigm::Single => self.prompt_len + 1,
            Paradigm::Multi => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid == 0 || self.image_size % self.grid != 0 {
            return bad(format!(
                "image size {} not divisible by grid {}",
                self.image_size, self.grid
            ));
        }
        if self.lang_grid == 0 || self.image_size % self.lang_grid != 0 {
            return bad(format!(
                "image size {} not divisible by language grid {}",
                self.image_size, self.lang_grid
            ));
        }
        if self.d_k % 8 != 0 {
            return bad(format!("d_k = {} must be divisible by 8", self.d_k));
        }
        if self.seg_heads == 0 || self.d_k % self.seg_heads != 0 {
            return bad(format!("d_k = {} not divisible by {} heads", self.d_k, self.seg_heads));
        }
        if self.lang_heads == 0 || self.d_w % self.lang_heads != 0 {
            return bad(format!("d_w = {} not divisible by {} heads", self.d_w, self.lang_heads));
        }
        if self.d_h != self.d_w {
            return bad(format!("d_h = {} must equal d_w = {}", self.d_h, self.d_w));
        }
        if self.prompt_len < 2 {
            return bad("prompt length must be at least 2".into());
        }
        if self.max_len < 2 {
            return bad("max_len must be at least 2".into());
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return bad(format!("nucleus_p = {} outside (0, 1]", self.nucleus_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_lang: f64,
    /// Learning rate for the projector, mask tokens, mask head, prefix
    /// adapter and (when unfrozen) the vision encoders and mixer.
    pub lr_seg: f64,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: usize,
    /// Hard cap on optimizer updates; `0` means no cap.
    pub max_updates: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eval_seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, paradigm: Paradigm) -> Self {
        let base = TrainConfig {
            lr_lang: 2e-4,
            lr_seg: match paradigm {
                Paradigm::Single => 1e-4,
                Paradigm::Multi => 8e-5,
            },
            batch_size: 4,
            accumulation: 4,
            epochs: 10,
            max_updates: 0,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_seed: 1234,
        };
        match preset {
            Preset::Paper => base,
            // From-scratch training needs far larger steps than fine-tuning.
            Preset::Toy => TrainConfig {
                lr_lang: 3e-3,
                lr_seg: 3e-3,
                epochs: 1000,
                max_updates: 500,
                ..base
            },
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(Error::Config("batch size and accumulation must be positive".into()));
        }
        if !(self.lr_lang >= 0.0 && self.lr_seg >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset, paradigm: Paradigm) -> Self {
        RunConfig {
            model: ModelConfig::preset(preset, paradigm),
            train: TrainConfig::preset(preset, paradigm),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => m.preset = value.parse()?,
            "mode" | "paradigm" => m.paradigm = value.parse()?,
            "image_size" => m.image_size = parse(key, value)?,
            "d_k" => m.d_k = parse(key, value)?,
            "d_w" => m.d_w = parse(key, value)?,
            "d_h" => m.d_h = parse(key, value)?,
            "grid" => m.grid = parse(key, value)?,
            "lang_grid" => m.lang_grid = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "mixer_blocks" => m.mixer_blocks = parse(key, value)?,
            "decoder_blocks" => m.decoder_blocks = parse(key, value)?,
            "seg_heads" => m.seg_heads = parse(key, value)?,
            "lang_heads" => m.lang_heads = parse(key, value)?,
            "max_len" => m.max_len = parse(key, value)?,
            "prompt_len" => m.prompt_len = parse(key, value)?,
            "nucleus_p" => m.nucleus_p = parse(key, value)?,
            "mask_threshold" => m.mask_threshold = parse(key, value)?,
            "focal_alpha" => m.focal_alpha = parse(key, value)?,
            "focal_gamma" => m.focal_gamma = parse(key, value)?,
            "dice_eps" => m.dice_eps = parse(key, value)?,
            "freeze.encoder" => m.freeze.encoder = parse(key, value)?,
            "freeze.mixer" => m.freeze.mixer = parse(key, value)?,
            "freeze.mask_head" => m.freeze.mask_head = parse(key, value)?,
            "lr_lang" => t.lr_lang = parse(key, value)?,
            "lr_seg" => t.lr_seg = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "accumulation" => t.accumulation = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "max_updates" => t.max_updates = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "adam_eps" => t.adam_eps = parse(key, value)?,
            "eval_seed" => t.eval_seed = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for preset in [Preset::Paper, Preset::Toy] {
            for paradigm in [Paradigm::Single, Paradigm::Multi] {
                RunConfig::preset(preset, paradigm).validate().unwrap();
            }
        }
    }

    #[test]
    fn paper_preset_values() {
        let m = ModelConfig::preset(Preset::Paper, Paradigm::Single);
        assert_eq!((m.d_k, m.d_w, m.grid, m.mixer_blocks, m.decoder_blocks), (256, 768, 64, 2, 6));
        assert_eq!((m.lang_heads, m.max_len, m.prompt_len), (12, 25, 8));
        assert_eq!(m.saliency_side(), 256);
        assert_eq!(m.nucleus_p, 0.9);
        assert!(m.freeze.encoder && m.freeze.mixer && !m.freeze.mask_head);

        let t = TrainConfig::preset(Preset::Paper, Paradigm::Single);
        assert_eq!(t.effective_batch(), 16);
        assert_eq!(t.lr_lang, 2e-4);
        assert_eq!(t.lr_seg, 1e-4);
        assert_eq!(TrainConfig::preset(Preset::Paper, Paradigm::Multi).lr_seg, 8e-5);
    }

    #[test]
    fn toy_preset_trains_everything() {
        let m = ModelConfig::preset(Preset::Toy, Paradigm::Single);
        assert_eq!(m.freeze, FreezeFlags::default());
        assert_eq!(m.seg_patch(), 4);
        assert_eq!(m.saliency_side(), 64);
    }

    #[test]
    fn config_file_overrides() {
        let mut rc = RunConfig::preset(Preset::Toy, Paradigm::Single);
        rc.apply_str("# comment\nd_k = 64\nfreeze.mixer = true\nlr_lang = 1e-3 # trailing\n\nmode = multi\n")
            .unwrap();
        assert_eq!(rc.model.d_k, 64);
        assert!(rc.model.freeze.mixer);
        assert_eq!(rc.train.lr_lang, 1e-3);
        assert_eq!(rc.model.paradigm, Paradigm::Multi);
        assert!(rc.apply_str("bogus = 1").is_err());
        assert!(rc.apply_str("d_k = abc").is_err());
        assert!(rc.apply_str("d_k 32").is_err());
    }

    #[test]
    fn validation_rejects_indivisible_dims() {
        let mut m = ModelConfig::preset(Preset::Toy, Paradigm::Single);
        m.grid = 15;
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let mut m = ModelConfig::preset(Preset::Toy, Paradigm::Single);
        m.seg_heads = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::preset(Preset::Toy, Paradigm::Single);
        m.d_k = 36;
        m.seg_heads = 4;
        assert!(m.validate().is_err());
    }
}

//! Training: AdamW with a language and a segmentation learning-rate group,
//! freeze policy, gradient accumulation, JSONL logging, per-epoch
//! checkpoints with optimizer state, and resume.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::EvalReport;
use crate::model::{decode_header, derive_seed, encode_header, EmoSem, TrainUnit};
use crate::nn::ParamGroup;

pub const MODEL_FILE: &str = "model.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RECORD_FILE: &str = "run_record.json";
pub const NAN_DUMP_FILE: &str = "nan_dump.json";

/// Content hash of the crate version, formatted like a git blob id.
pub fn code_version_hash() -> String {
    let content = env!("CARGO_PKG_VERSION");
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One line of the training log: per-target means over one update window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub dice: f64,
    pub focal: f64,
    pub lang: f64,
    pub total: f64,
    pub lr: f64,
    pub lr_seg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub code_version: String,
    pub losses: Vec<StepLog>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_eval: Option<EvalReport>,
}

/// Gradients summed over an accumulation window, by parameter name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Decoupled-weight-decay Adam. Moments are created lazily for parameters
/// that have received a gradient.
#[derive(Debug, Default)]
pub struct AdamW {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

impl AdamW {
    /// Apply one update. Parameters in `frozen` groups or without a
    /// gradient are left untouched.
    pub fn step(&mut self, model: &EmoSem, grads: &Gradients, cfg: &TrainConfig, frozen: &[ParamGroup]) -> Result<()> {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, p) in model.store.iter() {
            if frozen.contains(&p.group) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let lr = if p.group == ParamGroup::Language { cfg.lr_lang } else { cfg.lr_seg };
            let m = match self.m.get(name) {
                Some(m) => ((m * cfg.beta1)? + (g * (1.0 - cfg.beta1))?)?,
                None => (g * (1.0 - cfg.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * cfg.beta2)? + (g2 * (1.0 - cfg.beta2))?)?,
                None => (g2 * (1.0 - cfg.beta2))?,
            };
            let update = (&m / bc1)?.div(&((&v / bc2)?.sqrt()? + cfg.adam_eps)?)?;
            let w = p.var.as_tensor();
            // Decay matrices only; gains, biases and vectors are exempt.
            let decayed = if w.rank() >= 2 && cfg.weight_decay > 0.0 {
                (w * (1.0 - lr * cfg.weight_decay))?
            } else {
                w.clone()
            };
            p.var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Optimizer state plus loop position; saved next to each checkpoint.
#[derive(Debug)]
pub struct Trainer {
    pub model: EmoSem,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub updates: usize,
}

impl Trainer {
    pub fn new(model: EmoSem, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            optimizer: AdamW::default(),
            epoch: 0,
            updates: 0,
        })
    }

    /// Forward and backward over every micro-batch in `window`, summing
    /// gradients. The objective of each micro-batch is divided by the
    /// effective batch size, so the sum equals the large-batch gradient.
    pub fn gradients(&self, window: &[Vec<&TrainUnit>]) -> Result<(Gradients, LossReport, usize)> {
        let norm = self.config.effective_batch() as f64;
        let mut grads = Gradients::new();
        let mut report = LossReport::default();
        let mut targets = 0;
        for micro in window {
            let loss = self.model.batch_loss(micro, norm)?;
            let store = loss.objective.backward()?;
            for (name, p) in self.model.store.iter() {
                if let Some(g) = store.get(p.var.as_tensor()) {
                    // Gradients carry their own graph; drop it so optimizer
                    // state does not keep every step alive.
                    let g = g.detach();
                    let sum = match grads.remove(name) {
                        Some(acc) => (acc + g)?,
                        None => g,
                    };
                    grads.insert(name.clone(), sum);
                }
            }
            report.accumulate(&loss.report);
            targets += loss.targets;
        }
        for (name, g) in &grads {
            let s = g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
        }
        Ok((grads, report, targets))
    }

    /// One optimizer update over an accumulation window; returns the
    /// per-target mean losses.
    pub fn update(&mut self, window: &[Vec<&TrainUnit>]) -> Result<StepLog> {
        let (grads, report, targets) = self.gradients(window)?;
        let frozen = self.model.frozen_groups();
        self.optimizer.step(&self.model, &grads, &self.config, &frozen)?;
        self.updates += 1;
        let n = targets.max(1) as f64;
        Ok(StepLog {
            step: self.updates,
            dice: report.dice / n,
            focal: report.focal / n,
            lang: report.lang / n,
            total: report.total / n,
            lr: self.config.lr_lang,
            lr_seg: self.config.lr_seg,
        })
    }

    /// Update windows for the next epoch: a seeded shuffle, split into
    /// micro-batches, grouped by the accumulation count.
    pub fn epoch_windows<'a>(&self, units: &'a [TrainUnit]) -> Vec<Vec<Vec<&'a TrainUnit>>> {
        let mut order: Vec<&TrainUnit> = units.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, self.epoch as u64));
        order.shuffle(&mut rng);
        let micro: Vec<Vec<&TrainUnit>> = order.chunks(self.config.batch_size).map(<[_]>::to_vec).collect();
        micro.chunks(self.config.accumulation).map(<[_]>::to_vec).collect()
    }

    fn cap_reached(&self) -> bool {
        self.config.max_updates > 0 && self.updates >= self.config.max_updates
    }

    pub fn done(&self) -> bool {
        self.cap_reached() || self.epoch >= self.config.epochs
    }

    /// Run one epoch (or until the update cap). A non-finite loss aborts
    /// with the offending window's identity written to `dump`.
    pub fn run_epoch(&mut self, units: &[TrainUnit], dump: Option<&Path>, log: &mut dyn FnMut(&StepLog) -> Result<()>) -> Result<()> {
        for window in self.epoch_windows(units) {
            if self.cap_reached() {
                break;
            }
            match self.update(&window) {
                Ok(step) => log(&step)?,
                Err(Error::Numerical(msg)) => {
                    if let Some(path) = dump {
                        write_nan_dump(path, self, &window, &msg)?;
                    }
                    return Err(Error::Numerical(msg));
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        Ok(())
    }

    /// Train until the epoch budget or update cap, without touching disk.
    pub fn fit(&mut self, units: &[TrainUnit]) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.done() {
            self.run_epoch(units, None, &mut |s| {
                logs.push(s.clone());
                Ok(())
            })?;
        }
        Ok(logs)
    }

    /// Model checkpoint plus optimizer state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join(MODEL_FILE))?;
        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        for (k, m) in &self.optimizer.m {
            tensors.insert(format!("m.{k}"), m.clone());
        }
        for (k, v) in &self.optimizer.v {
            tensors.insert(format!("v.{k}"), v.clone());
        }
        let mut meta = BTreeMap::new();
        meta.insert("format".to_string(), "emosem-optimizer".to_string());
        meta.insert("t".to_string(), self.optimizer.t.to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("updates".to_string(), self.updates.to_string());
        meta.insert("train".to_string(), serde_json::to_string(&self.config)?);
        let path = dir.join(OPTIMIZER_FILE);
        safetensors::serialize_to_file(tensors, Some(encode_header(&meta)?), &path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Restore a trainer saved by [`Trainer::save`]. The stored training
    /// config is kept unless `config` overrides it.
    pub fn resume(dir: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let model = EmoSem::load(&dir.join(MODEL_FILE), DType::F32)?;
        let path = dir.join(OPTIMIZER_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta = decode_header(&bytes, &path)?;
        if meta.get("format").map(String::as_str) != Some("emosem-optimizer") {
            return Err(Error::Checkpoint(format!("{} is not optimizer state", path.display())));
        }
        let field = |k: &str| -> Result<u64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing {k}", path.display())))
        };
        let stored: TrainConfig = serde_json::from_str(meta.get("train").map_or("", String::as_str))
            .map_err(|e| Error::Checkpoint(format!("{}: bad training config: {e}", path.display())))?;
        let mut optimizer = AdamW {
            t: field("t")?,
            ..AdamW::default()
        };
        for (k, t) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            let t = t.to_dtype(model.dtype())?;
            if let Some(name) = k.strip_prefix("m.") {
                optimizer.m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix("v.") {
                optimizer.v.insert(name.to_string(), t);
            }
        }
        Ok(Trainer {
            model,
            config: config.unwrap_or(stored),
            optimizer,
            epoch: field("epoch")? as usize,
            updates: field("updates")? as usize,
        })
    }
}

fn write_nan_dump(path: &Path, trainer: &Trainer, window: &[Vec<&TrainUnit>], msg: &str) -> Result<()> {
    let batch: Vec<serde_json::Value> = window
        .iter()
        .flatten()
        .map(|u| {
            serde_json::json!({
                "image": u.image_id,
                "emotions": u.targets.iter().map(|t| t.emotion.name()).collect::<Vec<_>>(),
                "explanations": u.targets.iter().map(|t| trainer.model.vocab.decode(&t.explanation)).collect::<Vec<_>>(),
            })
        })
        .collect();
    let dump = serde_json::json!({
        "error": msg,
        "epoch": trainer.epoch,
        "update": trainer.updates + 1,
        "batch": batch,
    });
    fs::write(path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(path, e))
}

/// Appends one JSON object per line.
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        writeln!(self.out).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Full on-disk run: trains `units`, logging to `out/train_log.jsonl`,
/// checkpointing into `out` after every epoch. With `resume`, continues
/// from the checkpoint already in `out`.
pub fn train_to_dir(run: &RunConfig, model: EmoSem, units: &[TrainUnit], out: &Path, resume: bool) -> Result<RunRecord> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = if resume {
        let t = Trainer::resume(out, Some(run.train.clone()))?;
        if t.model.config != run.model {
            return Err(Error::Checkpoint("checkpoint model config differs from the requested run".into()));
        }
        t
    } else {
        let _ = fs::remove_file(out.join(LOG_FILE));
        Trainer::new(model, run.train.clone())?
    };
    let mut log = JsonlWriter::append(&out.join(LOG_FILE))?;
    let mut losses = Vec::new();
    let dump = out.join(NAN_DUMP_FILE);
    while !trainer.done() {
        trainer.run_epoch(units, Some(&dump), &mut |s| {
            log::info!(
                "step {} dice {:.4} focal {:.4} lang {:.4} total {:.4}",
                s.step,
                s.dice,
                s.focal,
                s.lang,
                s.total
            );
            losses.push(s.clone());
            log.write(s)
        })?;
        trainer.save(out)?;
    }
    let record = RunRecord {
        config: run.clone(),
        code_version: code_version_hash(),
        losses,
        final_eval: None,
    };
    fs::write(out.join(RECORD_FILE), serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(out, e))?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Paradigm, Preset};
    use crate::dataset::{build_vocabulary, load_samples, synthesize, SynthConfig};
    use crate::model::training_units;

    fn setup(paradigm: Paradigm) -> (Trainer, Vec<TrainUnit>, tempfile::TempDir) {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            per_emotion: 1,
            ..SynthConfig::toy()
        };
        let manifest = synthesize(&cfg, 5, &dir.path().join("data")).unwrap();
        let vocab = build_vocabulary(&[&manifest]);
        let run = RunConfig::preset(Preset::Toy, paradigm);
        let samples = load_samples(&manifest, &vocab, run.model.max_len).unwrap();
        let units = training_units(&samples, paradigm, run.model.saliency_side()).unwrap();
        let model = EmoSem::new(run.model.clone(), vocab, 2, DType::F32).unwrap();
        (Trainer::new(model, run.train).unwrap(), units, dir)
    }

    #[test]
    fn version_hash_is_hex_sha256() {
        let h = code_version_hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn windows_cover_every_unit_once() {
        let (t, units, _d) = setup(Paradigm::Single);
        let windows = t.epoch_windows(&units);
        let n: usize = windows.iter().flatten().map(Vec::len).sum();
        assert_eq!(n, units.len());
        assert!(windows.iter().all(|w| w.len() <= 4));
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (mut t, units, _d) = setup(Paradigm::Single);
        t.model.config.freeze.encoder = true;
        t.model.config.freeze.mixer = true;
        let before = t.model.store.snapshot().unwrap();
        let refs: Vec<&TrainUnit> = units.iter().take(4).collect();
        t.update(&[refs]).unwrap();
        let after = t.model.store.snapshot().unwrap();
        for (name, p) in t.model.store.iter() {
            let same = before[name] == after[name];
            match p.group {
                ParamGroup::Encoder | ParamGroup::Mixer => assert!(same, "{name} moved"),
                ParamGroup::MaskHead | ParamGroup::Prefix => assert!(!same, "{name} did not move"),
                _ => {}
            }
        }
    }

    #[test]
    fn save_and_resume_restores_state() {
        let (mut t, units, dir) = setup(Paradigm::Multi);
        t.config.max_updates = 1;
        t.fit(&units).unwrap();
        let ckpt = dir.path().join("ckpt");
        t.save(&ckpt).unwrap();
        let r = Trainer::resume(&ckpt, None).unwrap();
        assert_eq!(r.updates, 1);
        assert_eq!(r.optimizer.t, 1);
        assert_eq!(r.optimizer.m.len(), t.optimizer.m.len());
        assert_eq!(r.model.store.snapshot().unwrap(), t.model.store.snapshot().unwrap());
    }
}

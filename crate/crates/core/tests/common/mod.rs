#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use candle_core::DType;
use emosem::dataset::{build_vocabulary, load_samples, synthesize, Manifest, Sample, SynthConfig};
use emosem::model::{training_units, EmoSem, TrainUnit};
use emosem::{Paradigm, Preset, RunConfig};

static HEAVY: Mutex<()> = Mutex::new(());

/// Serializes compute-heavy tests so wall time tracks CPU time and runs
/// stay single-threaded.
pub fn exclusive() -> MutexGuard<'static, ()> {
    std::env::set_var("RAYON_NUM_THREADS", "1");
    HEAVY.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Toy {
    pub dir: tempfile::TempDir,
    pub manifest: Manifest,
    pub run: RunConfig,
    pub samples: Vec<Sample>,
    pub units: Vec<TrainUnit>,
}

impl Toy {
    pub fn new(paradigm: Paradigm, data_seed: u64) -> Toy {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synthesize(&SynthConfig::toy(), data_seed, &dir.path().join("data")).unwrap();
        let run = RunConfig::preset(Preset::Toy, paradigm);
        let vocab = build_vocabulary(&[&manifest]);
        let samples = load_samples(&manifest, &vocab, run.model.max_len).unwrap();
        let units = training_units(&samples, paradigm, run.model.saliency_side()).unwrap();
        Toy {
            dir,
            manifest,
            run,
            samples,
            units,
        }
    }

    pub fn model(&self) -> EmoSem {
        let vocab = build_vocabulary(&[&self.manifest]);
        EmoSem::new(self.run.model.clone(), vocab, self.run.train.seed, DType::F32).unwrap()
    }
}

/// Every file under `root`, keyed by relative path.
pub fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

/// Bitwise equality of two parameter snapshots.
pub fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// One line per criterion, written past the test harness's output capture.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("criterion {criterion}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

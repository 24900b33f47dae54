use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One JSONL line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub emotion: String,
    pub explanation: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// Accept either a manifest file or a directory containing `manifest.jsonl`.
pub fn resolve_manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let path = resolve_manifest_path(path);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::load(format!("line {}", i + 1), e.to_string()))?;
            records.push(rec);
        }
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Manifest { root, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn explanations(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.explanation.as_str())
    }

    /// Check every record: files exist, the emotion is known, the
    /// explanation is non-empty.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            validate_record(&self.root, i, rec)?;
        }
        Ok(())
    }
}

fn record_name(i: usize, rec: &ManifestRecord) -> String {
    format!("#{i} ({} / {})", rec.image_path, rec.emotion)
}

fn validate_record(root: &Path, i: usize, rec: &ManifestRecord) -> Result<Emotion> {
    let emotion = Emotion::from_name(&rec.emotion)
        .ok_or_else(|| Error::load(record_name(i, rec), format!("unknown emotion {:?}", rec.emotion)))?;
    if rec.explanation.trim().is_empty() {
        return Err(Error::load(record_name(i, rec), "empty explanation"));
    }
    for p in [&rec.image_path, &rec.mask_path] {
        if !root.join(p).is_file() {
            return Err(Error::load(record_name(i, rec), format!("missing file {p}")));
        }
    }
    Ok(emotion)
}

/// Training/evaluation record with decoded pixels and token ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Manifest-relative image path; identifies the image across records.
    pub image_id: String,
    pub image: Arc<Image>,
    pub emotion: Emotion,
    pub mask: Mask,
    /// `BOS ... EOS`, at most `max_len` long.
    pub explanation: Vec<u32>,
    pub text: String,
    pub split: Split,
}

/// Decode every record. Images shared by several records are decoded once.
pub fn load_samples(manifest: &Manifest, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sample>> {
    let mut cache: HashMap<&str, Arc<Image>> = HashMap::new();
    let mut out = Vec::with_capacity(manifest.records.len());
    for (i, rec) in manifest.records.iter().enumerate() {
        let emotion = validate_record(&manifest.root, i, rec)?;
        let name = || record_name(i, rec);
        let image = match cache.get(rec.image_path.as_str()) {
            Some(img) => img.clone(),
            None => {
                let img = Image::read_png(&manifest.root.join(&rec.image_path))
                    .map_err(|e| Error::load(name(), e.to_string()))?;
                let img = Arc::new(img);
                cache.insert(&rec.image_path, img.clone());
                img
            }
        };
        let mask = Mask::read_png(&manifest.root.join(&rec.mask_path))
            .map_err(|e| Error::load(name(), e.to_string()))?;
        if mask.height != image.height || mask.width != image.width {
            return Err(Error::load(name(), "mask and image sizes differ"));
        }
        out.push(Sample {
            image_id: rec.image_path.clone(),
            image,
            emotion,
            mask,
            explanation: vocab.encode_explanation(&rec.explanation, max_len),
            text: rec.explanation.clone(),
            split: rec.split,
        });
    }
    Ok(out)
}

/// Read a manifest and decode it in one go.
pub fn load_manifest(path: &Path, vocab: &Vocabulary, max_len: usize) -> Result<Vec<Sample>> {
    load_samples(&Manifest::read(path)?, vocab, max_len)
}

/// All records of one image, in manifest order. Used by multi-mask training.
#[derive(Debug, Clone)]
pub struct ImageGroup {
    pub image_id: String,
    pub image: Arc<Image>,
    pub samples: Vec<Sample>,
}

pub fn group_by_image(samples: &[Sample]) -> Vec<ImageGroup> {
    let mut order: Vec<ImageGroup> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for s in samples {
        match index.get(s.image_id.as_str()) {
            Some(&i) => order[i].samples.push(s.clone()),
            None => {
                index.insert(&s.image_id, order.len());
                order.push(ImageGroup {
                    image_id: s.image_id.clone(),
                    image: s.image.clone(),
                    samples: vec![s.clone()],
                });
            }
        }
    }
    order
}

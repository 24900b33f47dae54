//! Overfit the toy preset on the 32-sample synthetic corpus and report the
//! train-split scores, with and without the language prefix.
//!
//! cargo run --release -p emosem-core --example overfit -- [single|multi] [updates] [lr]

use std::time::Instant;

use candle_core::DType;
use emosem::dataset::{build_vocabulary, load_samples, synthesize, SynthConfig};
use emosem::eval::evaluate;
use emosem::metrics::KeywordClassifier;
use emosem::model::{training_units, EmoSem};
use emosem::train::Trainer;
use emosem::{Paradigm, Preset, RunConfig};

fn main() -> anyhow::Result<()> {
    let mode: Paradigm = std::env::args().nth(1).unwrap_or("single".into()).parse()?;
    let updates: usize = std::env::args().nth(2).map_or(Ok(500), |s| s.parse())?;
    let lr: f64 = std::env::args().nth(3).map_or(Ok(3e-3), |s| s.parse())?;
    let dir = tempfile::tempdir()?;
    let manifest = synthesize(&SynthConfig::toy(), 7, dir.path())?;
    let vocab = build_vocabulary(&[&manifest]);
    let mut run = RunConfig::preset(Preset::Toy, mode);
    run.train.max_updates = updates;
    run.train.lr_lang = lr;
    run.train.lr_seg = lr;
    let samples = load_samples(&manifest, &vocab, run.model.max_len)?;
    let units = training_units(&samples, mode, run.model.saliency_side())?;
    println!("{} samples, {} units, vocab {}", samples.len(), units.len(), vocab.len());
    let model = EmoSem::new(run.model.clone(), vocab, run.train.seed, DType::F32)?;
    let mut t = Trainer::new(model, run.train.clone())?;
    let start = Instant::now();
    while !t.done() {
        t.run_epoch(&units, None, &mut |s| {
            if s.step % 25 == 0 || s.step == 1 {
                println!("{:4} dice {:.4} focal {:.4} lang {:.4} ({:.1}s)", s.step, s.dice, s.focal, s.lang, start.elapsed().as_secs_f64());
            }
            Ok(())
        })?;
    }
    let seed = run.train.eval_seed;
    println!("mean train lang loss {:.4}", t.model.mean_loss(&units, 8)?.lang);
    let (r, _) = evaluate(&t.model, &samples, seed, false, &KeywordClassifier::default())?;
    println!("{}", r.to_table());
    let (r, _) = evaluate(&t.model, &samples, seed, true, &KeywordClassifier::default())?;
    println!("zero prefix EA {}", r.ea);
    Ok(())
}

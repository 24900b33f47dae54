mod common;

use candle_core::DType;
use emosem::dataset::build_vocabulary;
use emosem::model::{EmoSem, TrainUnit};
use emosem::train::Trainer;
use emosem::{Paradigm, TrainConfig};

use common::{exclusive, Toy};

fn flat(grads: &emosem::train::Gradients) -> Vec<f64> {
    grads
        .values()
        .flat_map(|g| g.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap())
        .collect()
}

fn f64_model(toy: &Toy) -> EmoSem {
    EmoSem::new(toy.run.model.clone(), build_vocabulary(&[&toy.manifest]), 1, DType::F64).unwrap()
}

fn accumulation_matches(paradigm: Paradigm) {
    let _g = exclusive();
    let toy = Toy::new(paradigm, 2);
    let units: Vec<&TrainUnit> = toy.units.iter().take(16).collect();
    let run = |batch_size: usize, accumulation: usize| {
        let cfg = TrainConfig {
            batch_size,
            accumulation,
            ..toy.run.train.clone()
        };
        let mut t = Trainer::new(f64_model(&toy), cfg).unwrap();
        let window: Vec<Vec<&TrainUnit>> = units.chunks(batch_size).map(<[_]>::to_vec).collect();
        let before = t.model.store.snapshot().unwrap();
        let (grads, _, _) = t.gradients(&window).unwrap();
        t.update(&window).unwrap();
        let after = t.model.store.snapshot().unwrap();
        let delta: Vec<f64> = before
            .iter()
            .flat_map(|(k, b)| b.iter().zip(&after[k]).map(|(x, y)| y - x).collect::<Vec<_>>())
            .collect();
        (flat(&grads), delta)
    };
    let (g_big, d_big) = run(16, 1);
    let (g_acc, d_acc) = run(4, 4);
    let scale = g_big.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gdiff = g_big.iter().zip(&g_acc).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(gdiff / scale < 1e-6, "gradient mismatch {gdiff} (scale {scale})");
    let ddiff = d_big.iter().zip(&d_acc).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let dscale = d_big.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(ddiff / dscale < 1e-6, "update mismatch {ddiff} (scale {dscale})");
}

#[test]
fn accumulation_equals_large_batch_single() {
    accumulation_matches(Paradigm::Single);
}

#[test]
fn accumulation_equals_large_batch_multi() {
    accumulation_matches(Paradigm::Multi);
}

#[test]
fn resume_continues_trajectory() {
    let _g = exclusive();
    let toy = Toy::new(Paradigm::Single, 4);
    let cfg = TrainConfig {
        max_updates: 4,
        ..toy.run.train.clone()
    };
    let mut straight = Trainer::new(toy.model(), cfg.clone()).unwrap();
    let full = straight.fit(&toy.units).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(toy.model(), TrainConfig { max_updates: 2, ..cfg.clone() }).unwrap();
    let head = first.fit(&toy.units).unwrap();
    first.save(dir.path()).unwrap();
    let mut resumed = Trainer::resume(dir.path(), Some(cfg)).unwrap();
    let tail = resumed.fit(&toy.units).unwrap();

    assert_eq!(head, full[..2]);
    assert_eq!(tail.len(), 2);
    assert_eq!(tail[0].step, 3);
    assert!((tail[0].total - full[2].total).abs() < 1e-5, "{} vs {}", tail[0].total, full[2].total);
}

#[test]
fn training_reduces_loss() {
    let _g = exclusive();
    let toy = Toy::new(Paradigm::Multi, 6);
    let cfg = TrainConfig {
        max_updates: 30,
        ..toy.run.train.clone()
    };
    let mut t = Trainer::new(toy.model(), cfg).unwrap();
    let logs = t.fit(&toy.units).unwrap();
    let mean = |s: &[emosem::train::StepLog]| s.iter().map(|l| l.total).sum::<f64>() / s.len() as f64;
    assert!(mean(&logs[20..]) < mean(&logs[..10]));
}

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use emosem::dataset::tokenize;
use emosem::metrics::{bbox_iou, bleu_n, iou, rouge_l};
use emosem::Mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mask(rng: &mut impl Rng, side: usize) -> Mask {
    Mask {
        height: side,
        width: side,
        data: (0..side * side).map(|_| rng.random_bool(0.3)).collect(),
    }
}

fn masks(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (a, b) = (random_mask(&mut rng, 256), random_mask(&mut rng, 256));
    c.bench_function("iou 256x256", |bch| bch.iter(|| black_box(iou(&a, &b).unwrap())));
    c.bench_function("bbox_iou 256x256", |bch| bch.iter(|| black_box(bbox_iou(&a, &b).unwrap())));
}

fn text(c: &mut Criterion) {
    let cand = tokenize("the dark stormy sky over the sea makes me feel fear and a little awe");
    let reference = tokenize("the storm over the sea is frightening and i feel fear");
    c.bench_function("bleu_4", |b| b.iter(|| black_box(bleu_n(&cand, &reference, 4))));
    c.bench_function("rouge_l", |b| b.iter(|| black_box(rouge_l(&cand, &reference))));
}

criterion_group!(benches, masks, text);
criterion_main!(benches);

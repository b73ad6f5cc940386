use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use phnn_bench::{lung_mask, perturbed};
use phnn_core::metrics::{asd, dice};
use phnn_core::postproc::keep_lungs;

fn postprocessing(c: &mut Criterion) {
    let gt = lung_mask(1);
    let noisy = perturbed(&gt, 97);
    c.bench_function("keep_lungs 64x64x32", |b| b.iter(|| black_box(keep_lungs(&noisy))));
    c.bench_function("dice 64x64x32", |b| b.iter(|| black_box(dice(&noisy, &gt).unwrap())));
    c.bench_function("asd 64x64x32", |b| b.iter(|| black_box(asd(&noisy, &gt).unwrap())));
}

criterion_group!(benches, postprocessing);
criterion_main!(benches);

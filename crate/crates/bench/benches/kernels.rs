use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use phnn_bench::wavy;
use phnn_core::autodiff::{Mode, Tape, Tensor};
use phnn_core::model::{FusionMode, Model, ModelConfig};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d 3x3");
    for &(cin, cout, hw) in &[(3, 8, 64), (8, 16, 32), (32, 64, 8)] {
        let x = wavy(&[4, cin, hw, hw]);
        let w = wavy(&[cout, cin, 3, 3]);
        let id = format!("{cin}->{cout} @{hw}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                black_box(t.conv2d(xv, wv, None, 1, 1).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward+backward", &id), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let xv = t.leaf(x.clone());
                let wv = t.leaf(w.clone());
                let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
                let s = t.sum(y);
                t.backward(s).unwrap();
                black_box(t.grad(wv).map(|g| g[0]));
            })
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model train forward+backward, batch 4 @64");
    group.sample_size(10);
    for m in [3, 5] {
        for mode in [FusionMode::Hnn, FusionMode::PhnnCumulative] {
            let mut model = Model::new(ModelConfig::with_stages(m).width(1.0 / 8.0).fusion(mode)).unwrap();
            let x = Tensor::from_fn(&[4, 3, 64, 64], |i| 0.5 + 0.5 * ((i as f64) * 0.618_034).sin());
            group.bench_function(format!("M={m} {mode}"), |b| {
                b.iter(|| {
                    let mut t = Tape::new();
                    let xv = t.constant(x.clone());
                    let out = model.forward(&mut t, xv, Mode::Train).unwrap();
                    let s = t.sum(out.final_output().probability);
                    t.backward(s).unwrap();
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, conv, model_forward);
criterion_main!(benches);

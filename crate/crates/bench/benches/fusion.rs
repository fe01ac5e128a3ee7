use argf_bench::fixture;
use argf_core::harness::Trainer;
use argf_core::model::losses;
use argf_core::numcore::Tape;
use argf_core::FusionKind;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuse_forward_backward");
    for kind in FusionKind::ALL {
        let (_, model, batch) = fixture(kind, 8, 64);
        group.bench_function(BenchmarkId::from_parameter(kind), |b| {
            b.iter(|| {
                let mut tape = Tape::new(&model.store);
                let e = model.stage.encode_batch(&mut tape, &batch).unwrap();
                let m = model.head.fuse(&mut tape, e).unwrap();
                let y = tape.constant(batch.onehot.clone());
                let loss = losses::mse(&mut tape, m, y).unwrap();
                black_box(tape.backward(loss).unwrap())
            })
        });
    }
    group.finish();
}

fn gfn_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("gfn_predict");
    for k in [8, 50] {
        let (_, model, batch) = fixture(FusionKind::Gfn, k, 256);
        group.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| black_box(model.predict(&batch).unwrap()))
        });
    }
    group.finish();
}

fn batch_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_step");
    for k in [8, 50] {
        let (_, model, batch) = fixture(FusionKind::Gfn, k, 64);
        let mut trainer = Trainer::from_model(model);
        group.bench_function(BenchmarkId::from_parameter(k), |b| {
            b.iter(|| black_box(trainer.batch_step(&batch).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward, gfn_forward, batch_step);
criterion_main!(benches);

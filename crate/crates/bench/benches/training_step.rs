use criterion::{criterion_group, criterion_main, Criterion};
use punctscl::losses::compute_loss;
use punctscl::{LossConfig, Tape};
use punctscl_bench::toy_model_and_batch;

fn step(c: &mut Criterion) {
    let (model, batch) = toy_model_and_batch();
    let mut group = c.benchmark_group("training_step");
    group.sample_size(10);
    group.bench_function("forward_eval", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            model.forward(&mut tape, &batch, false, 0).unwrap().logits
        })
    });
    for (name, loss) in [
        ("ce", LossConfig::cross_entropy()),
        ("scl_combined", LossConfig::default()),
    ] {
        group.bench_function(format!("forward_backward_{name}"), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &batch, true, 1).unwrap();
                let parts =
                    compute_loss(&mut tape, out.logits, out.reps, &batch.labels, &batch.mask, &loss, 2).unwrap();
                tape.backward(parts.total).unwrap();
                tape.value(parts.total).item()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);

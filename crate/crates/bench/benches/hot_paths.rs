use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use zerorte::codec::{parse_triplets, serialize_triplets, TargetStyle, TripletOrder};
use zerorte::system::Variant;
use zerorte_bench::{fixture, system};

fn codec(c: &mut Criterion) {
    let fx = fixture(TargetStyle::Plain);
    let triplets: Vec<_> = fx.split.train.samples()[..64].iter().map(|s| s.surface_triplets()).collect();
    c.bench_function("codec/serialize_parse_64", |b| {
        b.iter(|| {
            for ts in &triplets {
                let text = serialize_triplets(ts, TripletOrder::Htr, TargetStyle::Plain).unwrap();
                black_box(parse_triplets(&text.text, TripletOrder::Htr, TargetStyle::Plain));
            }
        })
    });
}

fn gradients(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradients_16");
    group.sample_size(10);
    for (variant, style) in [
        (Variant::Tgm, TargetStyle::Plain),
        (Variant::Metric, TargetStyle::Prototype),
        (Variant::Model, TargetStyle::Plain),
    ] {
        let fx = fixture(style);
        let sys = system(variant, &fx.split);
        let batch = &fx.instances[..16];
        group.bench_function(variant.name(), |b| b.iter(|| black_box(sys.batch_gradients(batch, None).unwrap())));
    }
    group.finish();
}

fn generation(c: &mut Criterion) {
    let fx = fixture(TargetStyle::Plain);
    let sys = system(Variant::Tgm, &fx.split);
    let inst = &fx.instances[0];
    let mut group = c.benchmark_group("generation");
    group.sample_size(10);
    group.bench_function("greedy_48", |b| {
        b.iter(|| black_box(sys.generate(&inst.task, &inst.sample.tokens, 48).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, codec, gradients, generation);
criterion_main!(benches);

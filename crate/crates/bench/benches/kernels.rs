use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::rngs::StdRng;
use rand::SeedableRng;

use sep_core::data::{generate_dataset, SyntheticSpec};
use sep_core::objectives::LossWeights;
use sep_core::sep::{tfm_fuse, PromptParams, SepConfig};
use sep_core::training::{tune, TrainConfig, TrainSet};
use sep_core::{Backbone, BackboneConfig, Tape, Tensor};

fn frozen_backbone() -> Backbone {
    let mut b = Backbone::init(BackboneConfig::default(), &mut StdRng::seed_from_u64(0)).unwrap();
    b.freeze();
    b
}

fn bench_tfm(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(1);
    let s = Tensor::randn(&mut rng, &[4, 16, 32], 1.0);
    let p = Tensor::randn(&mut rng, &[4, 16, 32], 1.0);
    c.bench_function("tfm_fuse forward+backward k=4 n=16 d=32", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let sv = tape.constant(s.clone());
            let pv = tape.param(p.clone());
            let out = tfm_fuse(&mut tape, sv, pv, 1, None).unwrap();
            let loss = tape.sum(out);
            tape.backward(loss).unwrap();
            black_box(tape.grad(pv).is_some())
        })
    });
}

fn bench_encode(c: &mut Criterion) {
    let backbone = frozen_backbone();
    let data = generate_dataset(&SyntheticSpec::default(), 1).unwrap();
    let batch = data.batch(&(0..64).collect::<Vec<_>>()).unwrap();
    c.bench_function("frozen image encode batch=64", |b| {
        b.iter(|| black_box(backbone.encode_frozen_image(&batch).unwrap()))
    });
    let classes: Vec<usize> = (0..20).collect();
    c.bench_function("frozen text encode 20 classes", |b| {
        b.iter(|| black_box(backbone.encode_frozen_text(&classes).unwrap()))
    });
}

fn bench_tune_epoch(c: &mut Criterion) {
    let backbone = frozen_backbone();
    let spec = SyntheticSpec {
        n_classes: 4,
        samples_per_class: 16,
        ..SyntheticSpec::default()
    };
    let data = generate_dataset(&spec, 1).unwrap();
    let classes = data.classes();
    let sep = SepConfig::default();
    let init = PromptParams::init(&sep, &backbone, &mut StdRng::seed_from_u64(2)).unwrap();
    let train = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("tune");
    group.sample_size(10);
    group.bench_function("one epoch, 4 classes x 16 images", |b| {
        b.iter_batched(
            || init.clone(),
            |init| {
                let set = TrainSet {
                    images: &data.features,
                    labels: &data.labels,
                    classes: &classes,
                };
                black_box(tune(&backbone, &init, &sep, &LossWeights::default(), set, &train, 1).unwrap())
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, bench_tfm, bench_encode, bench_tune_epoch);
criterion_main!(benches);

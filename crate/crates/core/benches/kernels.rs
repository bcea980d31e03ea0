//! Parallel vs sequential execution of the hot training kernels.
//!
//! The `seq` variants run inside a one-thread rayon pool (or through
//! `par::seq` where a helper is called directly), so both paths execute
//! identical code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use kdistill::dataset::synthetic::{generate, SyntheticSpec};
use kdistill::dataset::{example_stream, preprocess, preprocess_batch, PreprocessSpec, IMAGE_BYTES};
use kdistill::nn::Tensor;
use kdistill::par;
use kdistill::zoo::{build_model, ModelSpec};

fn one_thread<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn bench_preprocess(c: &mut Criterion) {
    let source = generate(&SyntheticSpec {
        train: 512,
        test: 16,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let ids: Vec<usize> = (0..256).collect();
    let spec = PreprocessSpec::from_train_stats(&source, &ids).unwrap();
    let streams: Vec<u64> = ids.iter().map(|&i| example_stream(0, 0, i as u64)).collect();
    let mut g = c.benchmark_group("preprocess_256");
    g.bench_function("par", |b| b.iter(|| preprocess_batch(source.images_only(), &ids, &spec, &streams)));
    g.bench_function("seq", |b| {
        b.iter(|| {
            let mut out = vec![0f32; ids.len() * IMAGE_BYTES];
            par::seq::for_each_chunk_mut(&mut out, IMAGE_BYTES, |i, dst| {
                dst.copy_from_slice(&preprocess(source.image(ids[i]), &spec, streams[i]).unwrap());
            });
            out
        })
    });
    g.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("forward_batch32");
    g.sample_size(10);
    for name in ["desk-small", "desk-large"] {
        let model = build_model(&ModelSpec::registered(name).unwrap()).unwrap();
        let x = Tensor::new(vec![32, 3, 32, 32], (0..32 * IMAGE_BYTES).map(|i| (i % 17) as f32 / 17.0).collect())
            .unwrap();
        g.bench_with_input(BenchmarkId::new("par", name), &x, |b, x| b.iter(|| model.forward(x).unwrap()));
        g.bench_with_input(BenchmarkId::new("seq", name), &x, |b, x| {
            b.iter(|| one_thread(|| model.forward(x).unwrap()))
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_batch32");
    g.sample_size(10);
    let mut model = build_model(&ModelSpec::registered("desk-small").unwrap()).unwrap();
    let x = Tensor::new(vec![32, 3, 32, 32], (0..32 * IMAGE_BYTES).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let step = |m: &mut kdistill::zoo::ModelHandle| {
        let logits = m.forward_train(&x).unwrap();
        let grad = Tensor::new(logits.shape().to_vec(), vec![1e-3; logits.data().len()]).unwrap();
        m.backward(&grad).unwrap();
        m.zero_grad();
    };
    g.bench_function("par", |b| b.iter(|| step(&mut model)));
    g.bench_function("seq", |b| b.iter(|| one_thread(|| step(&mut model))));
    g.finish();
}

criterion_group!(benches, bench_preprocess, bench_forward, bench_train_step);
criterion_main!(benches);

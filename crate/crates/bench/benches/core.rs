use cemb_bench::{conditions, samples};
use cemb_core::graph::Graph;
use cemb_core::model::{ModelBundle, ModelConfig, Stage};
use cemb_core::rng::stream;
use cemb_core::train::{Batch, EvalOptions, TrainConfig, Trainer, evaluate};
use cemb_core::Tensor;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let x = Tensor::<f32>::uniform([8, 32, 8, 8], -1.0, 1.0, &mut stream(0, "bench", 0));
    let w = Tensor::<f32>::uniform([32, 32, 3, 3], -0.1, 0.1, &mut stream(0, "bench", 1));
    c.bench_function("conv2d_fwd_bwd_8x32x8x8", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap();
            black_box(g.grad(wv).map(|t| t.sum()))
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let data = samples(8, &cfg);
    let m = ModelBundle::<f32>::init(cfg, 0, true).unwrap();
    let images: Vec<Tensor<f32>> = data.iter().map(|s| s.image.clone()).collect();
    let x = Tensor::stack(&images).unwrap();
    let boxes: Vec<_> = data.iter().map(|s| s.bbox).collect();
    let conds = conditions(&data);
    c.bench_function("predict_batch8_64px", |b| {
        b.iter(|| black_box(m.predict(&x, &boxes, Some(&conds), true).unwrap()))
    });
    let opts = EvalOptions { use_cemb: true, batch_size: 8, threads: 1 };
    c.bench_function("evaluate_8", |b| b.iter(|| black_box(evaluate(&m, &data, &[], opts).unwrap())));
}

fn train_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let data = samples(8, &cfg);
    let refs: Vec<_> = data.iter().collect();
    let batch = Batch::<f32>::from_samples(&refs, data.iter().map(|s| s.bbox).collect()).unwrap();
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let mut m = ModelBundle::<f32>::init(cfg, 0, true).unwrap();
        let mut t = Trainer::new(&mut m, stage, &TrainConfig::default());
        c.bench_function(&format!("train_step_{stage:?}_batch8").to_lowercase(), |b| {
            b.iter(|| black_box(t.step(&mut m, &batch).unwrap()))
        });
    }
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, model, train_step
}
criterion_main!(benches);

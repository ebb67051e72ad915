use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphvec_core::align::{max_density_align, AlignmentConfig};
use graphvec_core::encoder::GraphBatch;
use graphvec_core::graph::{generate_synthetic, GraphDataset, SyntheticKind};
use graphvec_core::kernel::{multi_scale_embed, ScaleConfig};
use graphvec_core::model::{Model, ModelConfig};
use graphvec_core::reference::mmd;
use graphvec_core::train::{train_step, AdamState, TrainConfig};

fn dataset() -> GraphDataset {
    let a = generate_synthetic(SyntheticKind::Er { p: 0.2 }, 48, (10, 20), 1).unwrap();
    let b = generate_synthetic(SyntheticKind::Ba { m: 2 }, 48, (10, 20), 2).unwrap();
    GraphDataset::from_labeled_parts("bench", [(a, 0), (b, 1)]).unwrap()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() - 0.5)
}

fn embed(c: &mut Criterion) {
    let ds = dataset();
    let cfg = ScaleConfig::default();
    c.bench_function("multi_scale_embed/96 graphs", |b| b.iter(|| multi_scale_embed(&ds, &cfg).unwrap()));
}

fn align(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let means: Vec<_> = (0..8).map(|_| random(1, 32, &mut rng).row(0).to_owned()).collect();
    let frozen = vec![false; means.len()];
    let cfg = AlignmentConfig::default();
    c.bench_function("max_density_align/8 means d=32", |b| {
        b.iter(|| max_density_align(&means, None, &frozen, &cfg).unwrap())
    });
}

fn step(c: &mut Criterion) {
    let ds = dataset();
    let emb = multi_scale_embed(&ds, &ScaleConfig::default()).unwrap();
    let idx: Vec<usize> = (0..32).map(|i| i * 3).collect();
    let graphs: Vec<_> = idx.iter().map(|&i| &ds.graphs()[i]).collect();
    let inputs: Vec<_> = idx.iter().map(|&i| emb.graph_inputs(i)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels().unwrap()[i]).collect();
    let model = Model::new(ModelConfig::default()).unwrap();
    let batch = GraphBatch::new(&graphs, &inputs, model.config.encoder.epsilon).unwrap();
    let cfg = TrainConfig::default();
    c.bench_function("train_step/32 graphs", |b| {
        b.iter_batched(
            || (model.clone(), AdamState::new(&model.params)),
            |(mut m, mut opt)| train_step(&mut m, &mut opt, &batch, &labels, &cfg).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn kernel_mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = random(20, 64, &mut rng);
    let v = random(10, 64, &mut rng);
    c.bench_function("mmd/20x10 d=64", |b| b.iter(|| mmd(h.view(), v.view(), 1.0).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = embed, align, step, kernel_mmd
}
criterion_main!(benches);

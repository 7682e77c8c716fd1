use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ht_bench::random_tensor;
use ht_core::encoder::{EncoderConfig, LaneAdjacency, LaneConvBlock, SparseAttention};
use ht_core::forge::{generate_scenario, MapKind};
use ht_core::model::{HtModel, ModelConfig};
use ht_core::tensor::{ParamStore, Tape};

fn attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention_block");
    for ratio in [0.25, 1.0] {
        let cfg = EncoderConfig {
            d_model: 64,
            sparsity: ratio,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let att = SparseAttention::new(&mut store, "a", &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let x = random_tensor(20, 64, 1);
        g.bench_with_input(BenchmarkId::from_parameter(ratio), &ratio, |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let p = store.bind(&mut t);
                let xv = t.constant(x.clone());
                att.forward(&mut t, &p, xv).unwrap()
            })
        });
    }
    g.finish();
}

fn lane_conv(c: &mut Criterion) {
    let sc = generate_scenario(MapKind::Crossing, 4, 0).unwrap();
    let adj = LaneAdjacency::from_graph(&sc.graph, &[1, 2, 4]).unwrap();
    let mut store = ParamStore::new();
    let blk = LaneConvBlock::new(&mut store, "lc", 32, &mut ChaCha8Rng::seed_from_u64(0));
    let x = random_tensor(adj.n, 32, 2);
    c.bench_function("lane_conv_block", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let p = store.bind(&mut t);
            let a = adj.bind(&mut t);
            let xv = t.constant(x.clone());
            blk.forward(&mut t, &p, xv, &a).unwrap()
        })
    });
}

fn full_model(c: &mut Criterion) {
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            d_model: 32,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = HtModel::new(cfg, 0).unwrap();
    let sc = generate_scenario(MapKind::TJunction, 5, 3).unwrap();
    let x = model.inputs(&sc).unwrap();
    c.bench_function("forward", |b| b.iter(|| model.predict(&x).unwrap()));
    c.bench_function("forward_backward", |b| b.iter(|| model.loss_and_grads(&x).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = attention, lane_conv, full_model
}
criterion_main!(benches);

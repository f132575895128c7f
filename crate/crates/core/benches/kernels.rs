//! Kernel and engine throughput. Group names carry the backend, so running
//! once with default features and once with `--no-default-features` puts the
//! rayon and sequential numbers side by side in the criterion report.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use pcirc_core::bench::SyntheticWeights;
use pcirc_core::structures::{self, StructureConfig, StructureKind};
use pcirc_core::{compile, oracle, par, Batch, CompileConfig, Engine};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 256;
const TILE: usize = 64;

fn backend() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn synthetic_layer(c: &mut Criterion) {
    let w = SyntheticWeights::generate(512, 512, 32, 0.25, 1).expect("synthetic weights");
    let mut group = c.benchmark_group(format!("layer_forward/{}", backend()));
    group.throughput(Throughput::Elements((w.num_edges() * BATCH) as u64));
    for k in [1, 8, 32] {
        let layer = w.layout(k).expect("layout");
        let mut tiles = layer.tiles(BATCH, TILE, 7);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| b.iter(|| layer.forward(&mut tiles, TILE)));
    }
    group.finish();
}

fn hmm_engine(c: &mut Criterion) {
    let cfg = StructureConfig {
        kind: StructureKind::Hmm,
        seq_len: 16,
        hidden_dim: 64,
        vocab_size: 50,
        ..Default::default()
    };
    let g = structures::build(&cfg).expect("hmm");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut data = Batch::new(g.num_vars() as usize);
    for _ in 0..BATCH {
        let row: Vec<Option<u32>> = oracle::sample(&g, &mut rng).into_iter().map(Some).collect();
        data.push(&row);
    }

    let mut group = c.benchmark_group(format!("hmm_engine/{}", backend()));
    group.throughput(Throughput::Elements(BATCH as u64));
    for k in [1, 64] {
        let compiled = compile(&g, &CompileConfig::with_block_size(k)).expect("compile");
        let mut engine: Engine = Engine::with_batch_tile(&compiled, TILE);
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |b, _| {
            b.iter(|| engine.forward(&data).expect("forward"))
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", k), &k, |b, _| {
            b.iter(|| {
                engine.forward(&data).expect("forward");
                engine.backward().expect("backward");
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = synthetic_layer, hmm_engine
}
criterion_main!(benches);

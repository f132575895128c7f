use pcirc_core::oracle::{self, RandomCircuitConfig};
use pcirc_core::{compile, Batch, CircuitGraph, CompileConfig, Engine, NodeId, VarId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch(g: &CircuitGraph, rng: &mut ChaCha8Rng, n: usize, missing: f64) -> Vec<Vec<Option<u32>>> {
    let ncat = oracle::category_counts(g);
    (0..n)
        .map(|_| ncat.iter().map(|&k| (!rng.gen_bool(missing)).then(|| rng.gen_range(0..k))).collect())
        .collect()
}

fn batch_of(g: &CircuitGraph, rows: &[Vec<Option<u32>>]) -> Batch {
    Batch::from_rows(g.num_vars() as usize, rows.iter().map(|r| r.as_slice()))
}

/// Block size `k` everywhere, without falling back to smaller blocks on
/// sparse layers.
fn forced_blocks(k: usize) -> CompileConfig {
    CompileConfig { min_block_efficiency: 0.0, ..CompileConfig::with_block_size(k) }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    if a == b {
        return true;
    }
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Checks forward values, node flows and key flows of one circuit at one
/// block size against the naive evaluator.
fn check_against_oracle(g: &CircuitGraph, rows: &[Vec<Option<u32>>], k: usize, batch_tile: usize) {
    let c = compile(g, &forced_blocks(k)).unwrap();
    let mut e: Engine = Engine::with_batch_tile(&c, batch_tile);
    let lls = e.forward(&batch_of(g, rows)).unwrap();
    e.backward().unwrap();
    let mut key_flows = vec![0.0; c.params.num_keys()];
    let mut node_flows = vec![0.0; g.num_nodes()];
    for (s, x) in rows.iter().enumerate() {
        let want = oracle::naive_forward(g, x);
        assert!(close(lls[s], want, 1e-10), "sample {s} at K={k}: {} vs {want}", lls[s]);
        let f = oracle::naive_flows(g, x);
        for (slot, &v) in f.slot.iter().enumerate() {
            key_flows[c.params.slot_keys[slot] as usize] += v;
        }
        for (n, &v) in f.node.iter().enumerate() {
            node_flows[n] += v;
        }
    }
    for (key, (&got, &want)) in e.key_flows().unwrap().iter().zip(&key_flows).enumerate() {
        assert!(close(got, want, 1e-9), "key {key} at K={k}: {got} vs {want}");
    }
    for (n, &want) in node_flows.iter().enumerate() {
        let got: f64 = e.node_flows(NodeId(n as u32)).unwrap().iter().sum();
        assert!(close(got, want, 1e-9), "node {n} at K={k}: {got} vs {want}");
    }
}

#[test]
fn random_circuits_match_oracle_at_every_block_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut blocked_layers = 0;
    for _ in 0..40 {
        let g = oracle::random_circuit(&mut rng, &RandomCircuitConfig::default());
        let rows = random_batch(&g, &mut rng, 37, 0.2);
        for k in [1, 2, 3, 4, 8] {
            check_against_oracle(&g, &rows, k, 16);
            let c = compile(&g, &forced_blocks(k)).unwrap();
            blocked_layers += c.sum_layers.iter().filter(|l| l.k_m > 1 && l.k_n > 1).count();
        }
    }
    assert!(blocked_layers > 50, "only {blocked_layers} blocked layers");
}

#[test]
fn tile_size_does_not_change_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = oracle::random_circuit(&mut rng, &RandomCircuitConfig::default());
    let rows = random_batch(&g, &mut rng, 50, 0.1);
    let c = compile(&g, &forced_blocks(4)).unwrap();
    let batch = batch_of(&g, &rows);
    let mut reference: Option<(Vec<f64>, Vec<f64>)> = None;
    for kb in [1, 7, 16, 64, 100] {
        let mut e: Engine = Engine::with_batch_tile(&c, kb);
        let lls = e.forward(&batch).unwrap();
        e.backward().unwrap();
        let flows = e.key_flows().unwrap().to_vec();
        match &reference {
            None => reference = Some((lls, flows)),
            Some((l0, f0)) => {
                assert!(l0.iter().zip(&lls).all(|(a, b)| close(*a, *b, 1e-12)));
                assert!(f0.iter().zip(&flows).all(|(a, b)| close(*a, *b, 1e-12)));
            }
        }
    }
}

#[test]
fn single_precision_engine_tracks_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = oracle::random_circuit(&mut rng, &RandomCircuitConfig::default());
    let rows = random_batch(&g, &mut rng, 20, 0.1);
    let c = compile(&g, &forced_blocks(2)).unwrap();
    let batch = batch_of(&g, &rows);
    let mut e64: Engine<f64> = Engine::new(&c);
    let mut e32: Engine<f32> = Engine::new(&c);
    let a = e64.forward(&batch).unwrap();
    let b = e32.forward(&batch).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(close(*x, *y, 1e-4), "{x} vs {y}");
    }
}

#[test]
fn backward_requires_forward() {
    let mut g = CircuitGraph::new(1);
    let a = g.add_input(VarId(0), &[0.5, 0.5]).unwrap();
    let b = g.add_input(VarId(0), &[0.1, 0.9]).unwrap();
    g.add_sum(&[a, b], &[0.5, 0.5]).unwrap();
    let c = compile(&g, &CompileConfig::default()).unwrap();
    let mut e: Engine = Engine::new(&c);
    assert!(matches!(e.backward(), Err(pcirc_core::Error::BackwardBeforeForward)));
    assert!(e.key_flows().is_err());
    let bad = Batch::from_rows(1, [[Some(2)].as_slice()]);
    assert!(matches!(e.forward(&bad), Err(pcirc_core::Error::Data(_))));
    assert!(matches!(e.set_key_values(&[f64::NAN, 1.0, 0.5, 0.5, 0.1, 0.9]), Err(pcirc_core::Error::Numeric(_))));
}

#[test]
fn zero_probability_samples_have_zero_flows() {
    let mut g = CircuitGraph::new(1);
    let a = g.add_input(VarId(0), &[1.0, 0.0, 0.0]).unwrap();
    let b = g.add_input(VarId(0), &[0.0, 1.0, 0.0]).unwrap();
    g.add_sum(&[a, b], &[0.4, 0.6]).unwrap();
    let c = compile(&g, &CompileConfig::default()).unwrap();
    let mut e: Engine = Engine::new(&c);
    let lls = e.forward(&Batch::from_rows(1, [[Some(2)].as_slice(), [Some(0)].as_slice()])).unwrap();
    assert_eq!(lls[0], f64::NEG_INFINITY);
    e.backward().unwrap();
    assert!(e.key_flows().unwrap().iter().all(|f| f.is_finite()));
    assert!(close(e.key_flows().unwrap().iter().sum::<f64>(), 2.0, 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn engine_matches_oracle(seed in any::<u64>(), k in 1usize..6, kb in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = RandomCircuitConfig { max_nodes: 120, ..Default::default() };
        let g = oracle::random_circuit(&mut rng, &cfg);
        let rows = random_batch(&g, &mut rng, 23, 0.25);
        check_against_oracle(&g, &rows, k, kb);
    }
}

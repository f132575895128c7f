use pcirc_core::compiler::cache;
use pcirc_core::oracle;
use pcirc_core::structures::{self, build_hmm_with_params, HmmParams, StructureConfig, StructureKind};
use pcirc_core::{compile, Batch, CircuitGraph, Node, CompileConfig, CompiledCircuit, Engine};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn forced(k: usize) -> CompileConfig {
    CompileConfig { min_block_efficiency: 0.0, ..CompileConfig::with_block_size(k) }
}

fn sampled(g: &CircuitGraph, n: usize, seed: u64, missing: f64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Batch::new(g.num_vars() as usize);
    for _ in 0..n {
        let row: Vec<Option<u32>> =
            oracle::sample(g, &mut rng).into_iter().map(|x| (!rng.gen_bool(missing)).then_some(x)).collect();
        b.push(&row);
    }
    b
}

fn key_flows(c: &CompiledCircuit, data: &Batch) -> Vec<f64> {
    let mut e: Engine = Engine::new(c);
    e.forward(data).unwrap();
    e.backward().unwrap();
    e.key_flows().unwrap().to_vec()
}

#[test]
fn tied_hmm_flows_are_sums_of_untied_flows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = HmmParams::random(5, 6, &mut rng);
    let tied = build_hmm_with_params(7, &p, true).unwrap();
    let untied = build_hmm_with_params(7, &p, false).unwrap();
    assert_eq!(tied.num_nodes(), untied.num_nodes());
    assert!(tied.num_param_slots() < untied.num_param_slots());
    let (tk, uk) = (tied.slot_keys(), untied.slot_keys());

    // pair up the parameter keys of every edge and input category
    let mut pairs = Vec::new();
    for (a, b) in tied.nodes().iter().zip(untied.nodes()) {
        match (a, b) {
            (Node::Sum { slots: sa, .. }, Node::Sum { slots: sb, .. }) => {
                pairs.extend(sa.iter().zip(sb).map(|(&x, &y)| (tk[x as usize], uk[y as usize])));
            }
            (
                Node::Input { pmf_slot: x, num_categories: n, .. },
                Node::Input { pmf_slot: y, .. },
            ) => pairs.extend((0..*n).map(|c| (tk[(x + c) as usize], uk[(y + c) as usize]))),
            (Node::Product { .. }, Node::Product { .. }) => {}
            _ => panic!("tied and untied graphs differ in shape"),
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut seen = std::collections::HashSet::new();
    assert!(pairs.iter().all(|&(_, u)| seen.insert(u)), "an untied key appears under two tied keys");

    let data = sampled(&tied, 40, 3, 0.2);
    for k in [1, 5] {
        let ct = compile(&tied, &forced(k)).unwrap();
        let cu = compile(&untied, &forced(k)).unwrap();
        let ft = key_flows(&ct, &data);
        let fu = key_flows(&cu, &data);
        let mut folded = vec![0.0; ft.len()];
        for &(t, u) in &pairs {
            folded[t as usize] += fu[u as usize];
        }
        for (i, (a, b)) in ft.iter().zip(&folded).enumerate() {
            assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "K={k} key {i}: tied {a} vs folded {b}");
        }
    }
}

#[test]
fn shared_transition_range_gets_flow_replicas() {
    let cfg = StructureConfig { kind: StructureKind::Hmm, seq_len: 16, hidden_dim: 8, vocab_size: 10, ..Default::default() };
    let g = structures::build(&cfg).unwrap();
    let c = compile(&g, &forced(8)).unwrap();
    let hot: Vec<_> = c.params.ranges.iter().filter(|r| r.writers > c.params.tie_writer_threshold).collect();
    assert!(hot.iter().any(|r| r.writers == 15 && !r.replicas.is_empty()), "ranges: {:?}", c.params.ranges);
    assert!(!c.params.reductions.is_empty());

    let again = compile(&g, &forced(8)).unwrap();
    assert_eq!(cache::to_bytes(&c), cache::to_bytes(&again));

    // the replicated layout must still produce the exact flows
    let data = sampled(&g, 24, 5, 0.1);
    let flows = key_flows(&c, &data);
    let reference = key_flows(&compile(&g, &forced(1)).unwrap(), &data);
    for (a, b) in flows.iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
    }
}

fn assert_block_sparse(c: &CompiledCircuit, hidden: u32) {
    let wide: Vec<_> = c.sum_layers.iter().filter(|l| l.num_sums >= hidden).collect();
    assert!(!wide.is_empty());
    for l in wide {
        assert_eq!(l.k_m, hidden, "{}", c.describe());
        assert!(l.report.is_block_sparse(), "{}", c.describe());
        assert!(l.efficiency() >= 0.999, "{}", c.describe());
    }
}

#[test]
fn pd_and_ratspn_layers_are_block_sparse_at_hidden_size() {
    let pd = StructureConfig {
        kind: StructureKind::Pd,
        shape: vec![4, 4],
        hidden_dim: 3,
        num_categories: 4,
        ..Default::default()
    };
    let g = structures::build(&pd).unwrap();
    assert_block_sparse(&compile(&g, &CompileConfig::with_block_size(3)).unwrap(), 3);

    let rat = StructureConfig {
        kind: StructureKind::RatSpn,
        num_vars: 8,
        depth: 3,
        num_sums_per_region: 4,
        num_input_components: 4,
        ..Default::default()
    };
    let g = structures::build(&rat).unwrap();
    assert_block_sparse(&compile(&g, &CompileConfig::with_block_size(4)).unwrap(), 4);
}

#[test]
fn cache_round_trip_and_mismatch() {
    let cfg = StructureConfig { kind: StructureKind::Hmm, seq_len: 6, hidden_dim: 4, vocab_size: 5, ..Default::default() };
    let mut g = structures::build(&cfg).unwrap();
    let ccfg = CompileConfig::with_block_size(4);
    let c = compile(&g, &ccfg).unwrap();
    let bytes = cache::to_bytes(&c);
    assert_eq!(cache::from_bytes(&bytes).unwrap(), c);
    assert_eq!(cache::load_for(&bytes, &g, &ccfg).unwrap(), c);
    assert!(cache::load_for(&bytes, &g, &CompileConfig::with_block_size(2)).is_err());
    assert!(cache::from_bytes(&bytes[..bytes.len() / 2]).is_err());

    // new parameter values reuse the structure but pick up the new values
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let fresh = HmmParams::random(4, 5, &mut rng);
    let other = build_hmm_with_params(6, &fresh, true).unwrap();
    g.params_mut().copy_from_slice(other.params());
    let reloaded = cache::load_for(&bytes, &g, &ccfg).unwrap();
    let data = sampled(&g, 16, 9, 0.0);
    let mut e: Engine = Engine::new(&reloaded);
    let lls = e.forward(&data).unwrap();
    for (i, ll) in lls.iter().enumerate() {
        let want = oracle::naive_forward(&g, &data.row(i));
        assert!((ll - want).abs() < 1e-10);
    }
}

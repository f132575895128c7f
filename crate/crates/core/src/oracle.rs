//! Slow reference implementations used to check the compiled engine.
//!
//! Everything here walks the source graph directly, node by node, with no
//! blocking, tiling or parameter flattening.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, Node, NodeId, VarId};

/// Observed value of every variable, `None` when marginalized.
pub type Assignment = [Option<u32>];

fn logsumexp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Log-probability of every node under `x`, computed children first.
pub fn naive_node_log_values(g: &CircuitGraph, x: &Assignment) -> Vec<f64> {
    naive_values_with(g, g.params(), x)
}

fn naive_values_with(g: &CircuitGraph, params: &[f64], x: &Assignment) -> Vec<f64> {
    let order = g.topo_order().expect("oracle requires an acyclic graph");
    let mut l = vec![0.0; g.num_nodes()];
    for id in order {
        l[id.index()] = match g.node(id) {
            Node::Input { var, pmf_slot, .. } => match x[var.index()] {
                Some(v) => params[(*pmf_slot + v) as usize].ln(),
                None => 0.0,
            },
            Node::Product { children } => children.iter().map(|c| l[c.index()]).sum(),
            Node::Sum { children, slots } => {
                logsumexp(children.iter().zip(slots).map(|(c, &s)| params[s as usize].ln() + l[c.index()]))
            }
        };
    }
    l
}

/// Root log-probability by direct recursion, with missing variables marginalized.
pub fn naive_forward(g: &CircuitGraph, x: &Assignment) -> f64 {
    naive_node_log_values(g, x)[g.root().index()]
}

/// Root probability in linear space with parameters overridden by `params`.
/// Values may be negative when `params` leaves the simplex.
pub fn naive_forward_linear(g: &CircuitGraph, params: &[f64], x: &Assignment) -> f64 {
    let order = g.topo_order().expect("oracle requires an acyclic graph");
    let mut p = vec![0.0; g.num_nodes()];
    for id in order {
        p[id.index()] = match g.node(id) {
            Node::Input { var, pmf_slot, num_categories } => match x[var.index()] {
                Some(v) => params[(*pmf_slot + v) as usize],
                None => (0..*num_categories).map(|k| params[(*pmf_slot + k) as usize]).sum(),
            },
            Node::Product { children } => children.iter().map(|c| p[c.index()]).product(),
            Node::Sum { children, slots } => {
                children.iter().zip(slots).map(|(c, &s)| params[s as usize] * p[c.index()]).sum()
            }
        };
    }
    p[g.root().index()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flows {
    /// Flow of every node.
    pub node: Vec<f64>,
    /// Edge flow of every sum edge, aligned with the node's children. Empty
    /// for non-sum nodes.
    pub edge: Vec<Vec<f64>>,
    /// Flow of every parameter slot: edge flows for sum slots and
    /// `F_n * d log f_n / d log pmf[k]` for input pmf slots.
    pub slot: Vec<f64>,
}

/// Top-down flow recursion. The root has flow 1; a child of a product
/// receives the product's flow, a child of a sum receives
/// `theta * p_c / p_m * F_m`, and contributions through parents with zero
/// probability are zero.
pub fn naive_flows(g: &CircuitGraph, x: &Assignment) -> Flows {
    let l = naive_node_log_values(g, x);
    let order = g.topo_order().expect("oracle requires an acyclic graph");
    let params = g.params();
    let mut node = vec![0.0; g.num_nodes()];
    let mut edge = vec![Vec::new(); g.num_nodes()];
    let mut slot = vec![0.0; g.num_param_slots()];
    node[g.root().index()] = 1.0;
    for &id in order.iter().rev() {
        let f = node[id.index()];
        match g.node(id) {
            Node::Input { var, pmf_slot, num_categories } => match x[var.index()] {
                Some(v) => slot[(*pmf_slot + v) as usize] += f,
                None => {
                    for k in 0..*num_categories {
                        slot[(*pmf_slot + k) as usize] += f * params[(*pmf_slot + k) as usize];
                    }
                }
            },
            Node::Product { children } => {
                for c in children {
                    node[c.index()] += f;
                }
            }
            Node::Sum { children, slots } => {
                let lm = l[id.index()];
                let flows: Vec<f64> = children
                    .iter()
                    .zip(slots)
                    .map(|(c, &s)| {
                        if f == 0.0 || lm == f64::NEG_INFINITY {
                            0.0
                        } else {
                            params[s as usize] * (l[c.index()] - lm).exp() * f
                        }
                    })
                    .collect();
                for ((c, &s), &e) in children.iter().zip(slots).zip(&flows) {
                    node[c.index()] += e;
                    slot[s as usize] += e;
                }
                edge[id.index()] = flows;
            }
        }
    }
    Flows { node, edge, slot }
}

/// `theta * d log p / d theta` for one parameter slot by central differences
/// of the linear-space root probability. Every edge referencing the slot is
/// perturbed together.
pub fn fd_param_gradient(g: &CircuitGraph, x: &Assignment, slot: u32, h: f64) -> f64 {
    assert!((1e-8..=1e-4).contains(&h), "step {h} outside [1e-8, 1e-4]");
    let mut params = g.params().to_vec();
    let theta = params[slot as usize];
    let p = naive_forward_linear(g, &params, x);
    params[slot as usize] = theta + h;
    let up = naive_forward_linear(g, &params, x);
    params[slot as usize] = theta - h;
    let down = naive_forward_linear(g, &params, x);
    theta * (up - down) / (2.0 * h * p)
}

/// Minimal overhead `sum_i k_i * g_i` over every way of choosing at most
/// `max_groups` capacities among the unique values, by enumeration.
pub fn brute_partition(nchs: &[u32], max_groups: usize) -> Result<u64> {
    let mut uniq = nchs.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.is_empty() || max_groups == 0 {
        return Err(Error::Config("need at least one count and one group".into()));
    }
    if uniq.len() > 16 {
        return Err(Error::Config(format!("{} unique values is too many to enumerate", uniq.len())));
    }
    let top = uniq.len() - 1;
    let mut best = u64::MAX;
    // the largest value is always a capacity; choose the rest as a subset
    for mask in 0u32..(1 << top) {
        if mask.count_ones() as usize + 1 > max_groups {
            continue;
        }
        let mut caps: Vec<u32> = (0..top).filter(|i| mask & (1 << i) != 0).map(|i| uniq[i]).collect();
        caps.push(uniq[top]);
        let cost: u64 = nchs
            .iter()
            .map(|&n| *caps.iter().find(|&&c| c >= n).unwrap() as u64)
            .sum();
        best = best.min(cost);
    }
    Ok(best)
}

/// Classical HMM forward recursion in log space. `init` has length K,
/// `trans` is K x K row-major (`trans[i*K + j] = P(z' = j | z = i)`), `emit`
/// is K x V row-major.
pub fn hmm_forward_reference(init: &[f64], trans: &[f64], emit: &[f64], tokens: &[u32]) -> f64 {
    let k = init.len();
    let v = emit.len() / k;
    let e = |state: usize, t: usize| emit[state * v + tokens[t] as usize].ln();
    let mut alpha: Vec<f64> = (0..k).map(|i| init[i].ln() + e(i, 0)).collect();
    for t in 1..tokens.len() {
        alpha = (0..k)
            .map(|j| logsumexp((0..k).map(|i| alpha[i] + trans[i * k + j].ln())) + e(j, t))
            .collect();
    }
    logsumexp(alpha.into_iter())
}

#[derive(Debug, Clone)]
pub struct RandomCircuitConfig {
    pub max_vars: u32,
    pub max_categories: u32,
    pub max_nodes: usize,
    /// Probability of reusing an existing node for a scope instead of
    /// building a new one.
    pub reuse: f64,
    /// Probability that a freshly drawn distribution gets a zero entry.
    pub zero_prob: f64,
    /// Round every distribution to multiples of 2^-20 so that it sums to
    /// exactly one in floating point, in any order.
    pub dyadic: bool,
}

impl Default for RandomCircuitConfig {
    fn default() -> Self {
        RandomCircuitConfig { max_vars: 8, max_categories: 4, max_nodes: 200, reuse: 0.3, zero_prob: 0.1, dyadic: false }
    }
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
    cfg: &'a RandomCircuitConfig,
    g: CircuitGraph,
    ncat: Vec<u32>,
    sums: HashMap<Vec<u32>, Vec<NodeId>>,
    prods: HashMap<Vec<u32>, Vec<NodeId>>,
    inputs: HashMap<u32, Vec<NodeId>>,
}

impl Gen<'_> {
    fn simplex(&mut self, n: usize) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|_| -self.rng.gen::<f64>().max(1e-12).ln()).collect();
        if n > 1 && self.rng.gen_bool(self.cfg.zero_prob) {
            let z = self.rng.gen_range(0..n);
            w[z] = 0.0;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        // remove rounding drift so the vector sums to one to within an ulp or two
        let drift: f64 = 1.0 - w.iter().sum::<f64>();
        let big = (0..n).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
        w[big] += drift;
        if self.cfg.dyadic {
            const SCALE: f64 = (1u64 << 20) as f64;
            w.iter_mut().for_each(|v| *v = (*v * SCALE).floor() / SCALE);
            w[big] += 1.0 - w.iter().sum::<f64>();
        }
        w
    }

    fn crowded(&self) -> bool {
        self.g.num_nodes() + 12 > self.cfg.max_nodes
    }

    fn reuse(&mut self, pool: Option<&Vec<NodeId>>) -> Option<NodeId> {
        let pool = pool?;
        if pool.is_empty() || !(self.crowded() || self.rng.gen_bool(self.cfg.reuse)) {
            return None;
        }
        pool.choose(self.rng).copied()
    }

    fn input(&mut self, var: u32) -> NodeId {
        let pool = self.inputs.get(&var).cloned();
        if let Some(n) = self.reuse(pool.as_ref()) {
            return n;
        }
        let pmf = self.simplex(self.ncat[var as usize] as usize);
        let n = self.g.add_input(VarId(var), &pmf).unwrap();
        self.inputs.entry(var).or_default().push(n);
        n
    }

    /// A node of the given scope that may be a sum's child: a product, or an
    /// input for singleton scopes.
    fn sum_child(&mut self, scope: &[u32]) -> NodeId {
        if scope.len() == 1 && self.rng.gen_bool(0.5) {
            return self.input(scope[0]);
        }
        self.product(scope)
    }

    /// A node that may be a product's child: a sum, or an input.
    fn product_child(&mut self, scope: &[u32]) -> NodeId {
        if scope.len() == 1 && self.rng.gen_bool(0.4) {
            return self.input(scope[0]);
        }
        self.sum(scope)
    }

    fn sum(&mut self, scope: &[u32]) -> NodeId {
        let pool = self.sums.get(scope).cloned();
        if let Some(n) = self.reuse(pool.as_ref()) {
            return n;
        }
        let k = if self.crowded() { 1 } else { self.rng.gen_range(1..=3) };
        let mut children: Vec<NodeId> = (0..k).map(|_| self.sum_child(scope)).collect();
        children.sort_unstable();
        children.dedup();
        children.shuffle(self.rng);
        let w = self.simplex(children.len());
        let n = self.g.add_sum(&children, &w).unwrap();
        self.sums.entry(scope.to_vec()).or_default().push(n);
        n
    }

    fn product(&mut self, scope: &[u32]) -> NodeId {
        let pool = self.prods.get(scope).cloned();
        if let Some(n) = self.reuse(pool.as_ref()) {
            return n;
        }
        let children: Vec<NodeId> = if scope.len() == 1 {
            vec![self.product_child(scope)]
        } else {
            let mut vars = scope.to_vec();
            vars.shuffle(self.rng);
            let parts = self.rng.gen_range(2..=vars.len().min(3));
            let mut cuts: Vec<usize> = rand::seq::index::sample(self.rng, vars.len() - 1, parts - 1)
                .into_iter()
                .map(|c| c + 1)
                .collect();
            cuts.sort_unstable();
            cuts.push(vars.len());
            let mut start = 0;
            let mut out = Vec::new();
            for c in cuts {
                let mut part = vars[start..c].to_vec();
                part.sort_unstable();
                out.push(self.product_child(&part));
                start = c;
            }
            out
        };
        let n = self.g.add_product(&children).unwrap();
        self.prods.entry(scope.to_vec()).or_default().push(n);
        n
    }
}

/// Random valid circuit: smooth, decomposable, alternating, with node
/// sharing, inputs directly under sums, occasional zero parameters, and sum
/// or product roots. Draws are repeated until the circuit fits `max_nodes`.
pub fn random_circuit(rng: &mut ChaCha8Rng, cfg: &RandomCircuitConfig) -> CircuitGraph {
    loop {
        let g = random_circuit_once(rng, cfg);
        if g.num_nodes() <= cfg.max_nodes {
            return g;
        }
    }
}

fn random_circuit_once(rng: &mut ChaCha8Rng, cfg: &RandomCircuitConfig) -> CircuitGraph {
    let nv = rng.gen_range(1..=cfg.max_vars.max(1));
    let ncat: Vec<u32> = (0..nv).map(|_| rng.gen_range(2..=cfg.max_categories.max(2))).collect();
    let scope: Vec<u32> = (0..nv).collect();
    let root_is_sum = rng.gen_bool(0.65);
    let mut gen = Gen {
        rng,
        cfg,
        g: CircuitGraph::new(nv),
        ncat,
        sums: HashMap::new(),
        prods: HashMap::new(),
        inputs: HashMap::new(),
    };
    // pools are empty here, so the root is built fresh and gets the highest id
    if root_is_sum {
        gen.sum(&scope);
    } else if nv == 1 {
        let c = gen.sum(&scope);
        gen.g.add_product(&[c]).unwrap();
    } else {
        gen.product(&scope);
    }
    prune_unreachable(gen.g)
}

/// Drops nodes that the root cannot reach (pooled nodes left behind when a
/// sum deduplicates its children) and renumbers the rest.
fn prune_unreachable(g: CircuitGraph) -> CircuitGraph {
    let root = g.root();
    let mut keep = vec![false; g.num_nodes()];
    keep[root.index()] = true;
    for i in (0..g.num_nodes()).rev() {
        if keep[i] {
            for c in g.nodes()[i].children() {
                keep[c.index()] = true;
            }
        }
    }
    if keep.iter().all(|&k| k) {
        return g;
    }
    let mut new_id = vec![u32::MAX; g.num_nodes()];
    let mut out = CircuitGraph::new(g.num_vars());
    for (i, node) in g.nodes().iter().enumerate() {
        if !keep[i] {
            continue;
        }
        let id = match node {
            Node::Input { var, num_categories, pmf_slot } => {
                let s = *pmf_slot as usize;
                out.add_input(*var, &g.params()[s..s + *num_categories as usize]).unwrap()
            }
            Node::Product { children } => {
                let ch: Vec<NodeId> = children.iter().map(|c| NodeId(new_id[c.index()])).collect();
                out.add_product(&ch).unwrap()
            }
            Node::Sum { children, slots } => {
                let ch: Vec<NodeId> = children.iter().map(|c| NodeId(new_id[c.index()])).collect();
                let w: Vec<f64> = slots.iter().map(|&s| g.params()[s as usize]).collect();
                out.add_sum(&ch, &w).unwrap()
            }
        };
        new_id[i] = id.0;
    }
    out
}

/// Every assignment of a circuit whose variables have the given category
/// counts, in lexicographic order.
pub fn all_assignments(ncat: &[u32]) -> Vec<Vec<Option<u32>>> {
    let mut out = vec![Vec::new()];
    for &k in ncat {
        out = out
            .into_iter()
            .flat_map(|prefix: Vec<Option<u32>>| {
                (0..k).map(move |v| {
                    let mut p = prefix.clone();
                    p.push(Some(v));
                    p
                })
            })
            .collect();
    }
    out
}

/// Ancestral sample: sums pick one child by weight, products visit every
/// child and inputs draw from their pmf.
pub fn sample(g: &CircuitGraph, rng: &mut impl Rng) -> Vec<u32> {
    let mut x = vec![0u32; g.num_vars() as usize];
    let params = g.params();
    let mut stack = vec![g.root()];
    let draw = |rng: &mut dyn rand::RngCore, w: &mut dyn Iterator<Item = f64>| -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in w.enumerate() {
            if p > 0.0 {
                last = i;
            }
            acc += p;
            if u < acc {
                return i;
            }
        }
        last
    };
    while let Some(id) = stack.pop() {
        match g.node(id) {
            Node::Input { var, num_categories, pmf_slot } => {
                let pmf = &params[*pmf_slot as usize..(*pmf_slot + *num_categories) as usize];
                x[var.index()] = draw(rng, &mut pmf.iter().copied()) as u32;
            }
            Node::Product { children } => stack.extend(children.iter().copied()),
            Node::Sum { children, slots } => {
                let i = draw(rng, &mut slots.iter().map(|&s| params[s as usize]));
                stack.push(children[i]);
            }
        }
    }
    x
}

/// Category count of every variable, taken from the input nodes.
pub fn category_counts(g: &CircuitGraph) -> Vec<u32> {
    let mut ncat = vec![0u32; g.num_vars() as usize];
    for node in g.nodes() {
        if let Node::Input { var, num_categories, .. } = node {
            ncat[var.index()] = ncat[var.index()].max(*num_categories);
        }
    }
    ncat
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two_indicators() -> CircuitGraph {
        let mut g = CircuitGraph::new(1);
        let a = g.add_input(VarId(0), &[1.0, 0.0]).unwrap();
        let b = g.add_input(VarId(0), &[0.0, 1.0]).unwrap();
        g.add_sum(&[a, b], &[0.3, 0.7]).unwrap();
        g
    }

    #[test]
    fn mixture_values_and_flows() {
        let g = two_indicators();
        assert!((naive_forward(&g, &[Some(1)]) - 0.7f64.ln()).abs() < 1e-15);
        assert!(naive_forward(&g, &[None]).abs() < 1e-15);
        let f = naive_flows(&g, &[Some(1)]);
        assert_eq!(f.edge[2], vec![0.0, 1.0]);
        assert_eq!(f.node[1], 1.0);
        assert_eq!(f.node[2], 1.0);
        let fd = fd_param_gradient(&g, &[Some(1)], 5, 1e-6);
        assert!((fd - 1.0).abs() < 1e-9);
        assert_eq!(fd_param_gradient(&g, &[Some(1)], 4, 1e-6), 0.0);
    }

    #[test]
    fn brute_partition_examples() {
        assert_eq!(brute_partition(&[2, 2, 3, 7], 2).unwrap(), 16);
        assert_eq!(brute_partition(&[3, 3, 3], 1).unwrap(), 9);
        assert_eq!(brute_partition(&[1, 4, 6], 3).unwrap(), 11);
        assert!(brute_partition(&(0..20).collect::<Vec<_>>(), 2).is_err());
    }

    #[test]
    fn hmm_reference_trivial_cases() {
        let init = [0.25; 4];
        let trans = [0.25; 16];
        let emit = [0.2; 20];
        let l = hmm_forward_reference(&init, &trans, &emit, &[0, 3, 4, 1]);
        assert!((l + 4.0 * 5f64.ln()).abs() < 1e-12);
        let init = [0.6, 0.4];
        let emit = [0.5, 0.5, 0.1, 0.9];
        let l = hmm_forward_reference(&init, &[0.5; 4], &emit, &[1]);
        assert!((l - (0.6f64 * 0.5 + 0.4 * 0.9).ln()).abs() < 1e-15);
    }

    #[test]
    fn random_circuits_are_valid_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let g = random_circuit(&mut rng, &RandomCircuitConfig::default());
            let report = g.validate();
            assert!(report.is_valid(), "{report}");
            assert!(g.num_nodes() <= 200);
            assert!(naive_forward(&g, &vec![None; g.num_vars() as usize]).abs() < 1e-12);
            let ncat = category_counts(&g);
            if ncat.iter().map(|&k| k as f64).product::<f64>() <= 4096.0 {
                let total: f64 = all_assignments(&ncat).iter().map(|x| naive_forward(&g, x).exp()).sum();
                assert!((total - 1.0).abs() < 1e-12, "total {total}");
            }
        }
    }

    #[test]
    fn flows_are_conserved_at_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let g = random_circuit(&mut rng, &RandomCircuitConfig::default());
            let x: Vec<Option<u32>> = category_counts(&g).iter().map(|&k| Some(rng.gen_range(0..k))).collect();
            let f = naive_flows(&g, &x);
            for (i, node) in g.nodes().iter().enumerate() {
                if node.is_sum() {
                    let total: f64 = f.edge[i].iter().sum();
                    assert!((total - f.node[i]).abs() < 1e-12 || naive_forward(&g, &x) == f64::NEG_INFINITY);
                }
            }
        }
    }
}

//! Compilation of a validated circuit into a layered, block-sparse program.
//!
//! Value rows hold the log-probabilities of input and sum nodes and are kept
//! for the whole pass. Products are never stored: each sum layer owns an
//! element stage listing its children in block order, and the runtime
//! recomputes product values into a shared scratch region right before the
//! layer runs (forward) or backpropagates (backward). Inputs that feed a sum
//! directly show up in the stage as single-source elements.
//!
//! The first `reserve_m` value rows and the first `reserve_n` scratch rows are
//! constant `-inf` rows, and the first `zero_len` parameters are zeros; pseudo
//! edges added by group padding point at them.

pub mod blocks;
pub mod cache;
pub mod layering;
pub mod params;
pub mod partition;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, Node};

pub use blocks::{detect_blocks, BlockLayout, BlockReport, LayerAdjacency};
pub use layering::{layerize, Layer, LayerKind};
pub use params::{NormGroup, NormKind, ParamStore, NO_KEY};
pub use partition::{partition_layer, round_child_counts, PartitionPlan};

/// Row or node index marking an absent entry.
pub const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct CompileConfig {
    pub k_m: usize,
    pub k_n: usize,
    pub max_groups: usize,
    pub tol: f64,
    pub round_quantum: u32,
    /// Child counts are rounded when a layer has more unique counts than this.
    pub round_threshold: usize,
    pub tie_writer_threshold: u32,
    /// Layers whose blocks waste more than this fraction of computed edges are
    /// recompiled at half the block size.
    pub min_block_efficiency: f64,
}

impl Default for CompileConfig {
    fn default() -> Self {
        CompileConfig {
            k_m: 32,
            k_n: 32,
            max_groups: 8,
            tol: 0.25,
            round_quantum: 10,
            round_threshold: 256,
            tie_writer_threshold: 4,
            min_block_efficiency: 0.5,
        }
    }
}

impl CompileConfig {
    pub fn with_block_size(k: usize) -> Self {
        CompileConfig { k_m: k, k_n: k, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_m == 0 || self.k_n == 0 {
            return Err(Error::Config("block sizes must be positive".into()));
        }
        if self.max_groups == 0 {
            return Err(Error::Config("at least one group is required".into()));
        }
        if !(self.tol > 0.0 && self.tol <= 1.0) {
            return Err(Error::Config(format!("tolerance {} outside (0, 1]", self.tol)));
        }
        if self.round_quantum == 0 || self.tie_writer_threshold == 0 {
            return Err(Error::Config("rounding quantum and writer threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_block_efficiency) {
            return Err(Error::Config("minimum block efficiency must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Children of one sum layer in scratch order. Element `e` is the sum of the
/// value rows `src[ptr[e]..ptr[e + 1]]`; an element without sources is
/// padding and evaluates to `-inf`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ElementStage {
    pub ptr: Vec<u32>,
    pub src: Vec<u32>,
    /// Product flow row of each element, or [`NONE`] for inputs and padding.
    pub product: Vec<u32>,
    /// Source node of each element, or [`NONE`] for padding.
    pub nodes: Vec<u32>,
}

impl ElementStage {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sources(&self, e: usize) -> &[u32] {
        &self.src[self.ptr[e] as usize..self.ptr[e + 1] as usize]
    }

    fn push(&mut self, node: u32, product: u32, sources: impl IntoIterator<Item = u32>) {
        if self.ptr.is_empty() {
            self.ptr.push(0);
        }
        self.src.extend(sources);
        self.ptr.push(self.src.len() as u32);
        self.product.push(product);
        self.nodes.push(node);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InputIr {
    pub row_start: u32,
    pub nodes: Vec<u32>,
    pub var: Vec<u32>,
    pub ncat: Vec<u32>,
    /// Offset of each input's pmf in `theta`.
    pub theta_offset: Vec<u32>,
}

/// Forward index tensors of one group of sum blocks with equal (padded)
/// child-block count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumGroupIr {
    pub k_m: u32,
    pub k_n: u32,
    pub c_m: u32,
    pub c_n: u32,
    /// First value row of every sum block.
    pub sum_ids: Vec<u32>,
    /// `c_m x c_n` first scratch rows of the child blocks.
    pub prod_ids: Vec<u32>,
    /// `c_m x c_n` offsets of the `k_m x k_n` row-major parameter tiles.
    pub param_ids: Vec<u32>,
}

/// Backward index tensors of one group of child blocks with equal (padded)
/// parent-block count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SumGroupBackIr {
    pub k_n: u32,
    pub k_m: u32,
    pub c_n: u32,
    pub c_m: u32,
    pub ch_ids: Vec<u32>,
    /// `c_n x c_m` first value rows of the parent sum blocks.
    pub par_ids: Vec<u32>,
    pub par_param_ids: Vec<u32>,
}

/// One connected (sum block, child block) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockPair {
    pub sum_row: u32,
    pub child_row: u32,
    pub theta: u32,
    /// Offset of the flow accumulator this pair writes to.
    pub flow: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SumLayerIr {
    pub depth: u32,
    pub k_m: u32,
    pub k_n: u32,
    pub row_start: u32,
    pub num_rows: u32,
    pub num_sums: u32,
    pub num_children: u32,
    pub num_edges: u64,
    /// Node of every value row of this layer, [`NONE`] for padding.
    pub sum_nodes: Vec<u32>,
    pub stage: ElementStage,
    pub groups: Vec<SumGroupIr>,
    pub back_groups: Vec<SumGroupBackIr>,
    pub pairs: Vec<BlockPair>,
    pub report: BlockReport,
    pub forward_plan: PartitionPlan,
    pub backward_plan: PartitionPlan,
}

impl SumLayerIr {
    pub fn num_sum_blocks(&self) -> usize {
        self.num_rows as usize / self.k_m as usize
    }

    pub fn num_child_blocks(&self) -> usize {
        self.stage.len() / self.k_n as usize
    }

    pub fn efficiency(&self) -> f64 {
        self.report.efficiency(self.k_m as usize, self.k_n as usize)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledCircuit {
    pub cfg: CompileConfig,
    pub num_vars: u32,
    pub num_nodes: u32,
    pub reserve_m: u32,
    pub reserve_n: u32,
    pub value_rows: u32,
    pub scratch_rows: u32,
    pub num_products: u32,
    pub inputs: InputIr,
    pub sum_layers: Vec<SumLayerIr>,
    /// Value row of the root, or [`NONE`] when the root is a product.
    pub root_row: u32,
    /// Single-element stage evaluating a product root.
    pub root_stage: Option<ElementStage>,
    /// Value row of every input and sum node.
    pub node_row: Vec<u32>,
    /// Flow row of every product node.
    pub product_row: Vec<u32>,
    pub params: ParamStore,
    pub graph_hash: [u8; 32],
}

fn choose_layout(adj: &LayerAdjacency, cfg: &CompileConfig) -> BlockLayout {
    let (mut km, mut kn) = (cfg.k_m, cfg.k_n);
    loop {
        let layout = detect_blocks(adj, km, kn);
        let good = layout.report.is_block_sparse()
            && layout.report.efficiency(layout.k_m, layout.k_n) >= cfg.min_block_efficiency;
        if good || (layout.k_m == 1 && layout.k_n == 1) {
            return layout;
        }
        km = (layout.k_m / 2).max(1);
        kn = (layout.k_n / 2).max(1);
    }
}

fn plan_counts(counts: &[u32], cfg: &CompileConfig) -> PartitionPlan {
    let mut uniq = counts.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    if uniq.len() > cfg.round_threshold {
        partition_layer(&round_child_counts(counts, cfg.round_quantum), cfg.max_groups, cfg.tol)
    } else {
        partition_layer(counts, cfg.max_groups, cfg.tol)
    }
}

/// Emits the forward tensors of a layer. `block_children[i]` lists the child
/// blocks of sum block `i` with the parameter offset of each pair.
pub fn compile_forward_groups(
    block_children: &[Vec<(u32, u32)>],
    plan: &PartitionPlan,
    k_m: u32,
    k_n: u32,
    row_start: u32,
    reserve_n: u32,
) -> Vec<SumGroupIr> {
    plan.capacities
        .iter()
        .enumerate()
        .map(|(gi, &cap)| {
            let mut ir = SumGroupIr { k_m, k_n, c_m: 0, c_n: cap, sum_ids: vec![], prod_ids: vec![], param_ids: vec![] };
            for (i, children) in block_children.iter().enumerate() {
                if plan.assignment[i] as usize != gi {
                    continue;
                }
                ir.c_m += 1;
                ir.sum_ids.push(row_start + i as u32 * k_m);
                for j in 0..cap as usize {
                    match children.get(j) {
                        Some(&(nb, theta)) => {
                            ir.prod_ids.push(reserve_n + nb * k_n);
                            ir.param_ids.push(theta);
                        }
                        None => {
                            ir.prod_ids.push(0);
                            ir.param_ids.push(0);
                        }
                    }
                }
            }
            ir
        })
        .filter(|ir| ir.c_m > 0)
        .collect()
}

/// Emits the backward tensors of a layer. `block_parents[n]` lists the
/// parent sum blocks of child block `n` with the parameter offset of each
/// pair.
pub fn compile_backward_groups(
    block_parents: &[Vec<(u32, u32)>],
    plan: &PartitionPlan,
    k_m: u32,
    k_n: u32,
    row_start: u32,
    reserve_n: u32,
) -> Vec<SumGroupBackIr> {
    plan.capacities
        .iter()
        .enumerate()
        .map(|(gi, &cap)| {
            let mut ir =
                SumGroupBackIr { k_n, k_m, c_n: 0, c_m: cap, ch_ids: vec![], par_ids: vec![], par_param_ids: vec![] };
            for (n, parents) in block_parents.iter().enumerate() {
                if plan.assignment[n] as usize != gi {
                    continue;
                }
                ir.c_n += 1;
                ir.ch_ids.push(reserve_n + n as u32 * k_n);
                for j in 0..cap as usize {
                    match parents.get(j) {
                        Some(&(m, theta)) => {
                            ir.par_ids.push(row_start + m * k_m);
                            ir.par_param_ids.push(theta);
                        }
                        None => {
                            ir.par_ids.push(0);
                            ir.par_param_ids.push(0);
                        }
                    }
                }
            }
            ir
        })
        .filter(|ir| ir.c_n > 0)
        .collect()
}

struct PendingLayer {
    depth: u32,
    sums: Vec<u32>,
    children: Vec<u32>,
    /// Per local sum: (local child, graph slot), sorted by local child.
    edges: Vec<Vec<(u32, u32)>>,
    layout: BlockLayout,
}

pub fn compile(g: &CircuitGraph, cfg: &CompileConfig) -> Result<CompiledCircuit> {
    cfg.validate()?;
    g.validate().into_result()?;
    let layers = layerize(g)?;
    let (slot_keys, key_values) = params::logical_keys(g);
    let n = g.num_nodes();

    let mut product_row = vec![NONE; n];
    let mut num_products = 0u32;
    for (i, node) in g.nodes().iter().enumerate() {
        if node.is_product() {
            product_row[i] = num_products;
            num_products += 1;
        }
    }

    let mut pending = Vec::new();
    let mut local = vec![NONE; n];
    for layer in layers.iter().filter(|l| l.kind == LayerKind::Sum) {
        let mut children: Vec<u32> =
            layer.nodes.iter().flat_map(|s| g.node(*s).children().iter().map(|c| c.0)).collect();
        children.sort_unstable();
        children.dedup();
        for (i, &c) in children.iter().enumerate() {
            local[c as usize] = i as u32;
        }
        let mut edges = Vec::with_capacity(layer.nodes.len());
        for s in &layer.nodes {
            let Node::Sum { children: ch, slots } = g.node(*s) else { unreachable!("sum layer holds sums") };
            let mut e: Vec<(u32, u32)> = ch.iter().zip(slots).map(|(c, &slot)| (local[c.index()], slot)).collect();
            e.sort_unstable();
            edges.push(e);
        }
        let adj = LayerAdjacency {
            num_children: children.len(),
            children: edges.iter().map(|e| e.iter().map(|&(c, _)| c).collect()).collect(),
        };
        let layout = choose_layout(&adj, cfg);
        pending.push(PendingLayer {
            depth: layer.depth,
            sums: layer.nodes.iter().map(|s| s.0).collect(),
            children,
            edges,
            layout,
        });
    }

    let reserve_m = pending.iter().map(|p| p.layout.k_m).max().unwrap_or(1) as u32;
    let reserve_n = pending.iter().map(|p| p.layout.k_n).max().unwrap_or(1) as u32;
    let zero_len = pending.iter().map(|p| p.layout.k_m * p.layout.k_n).max().unwrap_or(1);

    let mut node_row = vec![NONE; n];
    let mut builder = params::ParamBuilder::new(zero_len, key_values);
    let mut inputs = InputIr { row_start: reserve_m, ..Default::default() };
    let mut row = reserve_m;
    for (i, node) in g.nodes().iter().enumerate() {
        if let Node::Input { var, num_categories, pmf_slot } = node {
            node_row[i] = row;
            row += 1;
            let keys: Vec<u32> = (*pmf_slot..pmf_slot + num_categories).map(|s| slot_keys[s as usize]).collect();
            let range = builder.range(&keys);
            inputs.nodes.push(i as u32);
            inputs.var.push(var.0);
            inputs.ncat.push(*num_categories);
            inputs.theta_offset.push(builder.offset(range));
        }
    }
    let mut row_starts = Vec::with_capacity(pending.len());
    for p in &pending {
        row_starts.push(row);
        for (slot, s) in p.layout.sum_order.iter().enumerate() {
            if let Some(s) = s {
                node_row[p.sums[*s as usize] as usize] = row + slot as u32;
            }
        }
        row += p.layout.sum_order.len() as u32;
    }
    let value_rows = row;

    let make_stage_element = |stage: &mut ElementStage, c: u32| match g.node(crate::graph::NodeId(c)) {
        Node::Product { children } => {
            stage.push(c, product_row[c as usize], children.iter().map(|x| node_row[x.index()]))
        }
        _ => stage.push(c, NONE, [node_row[c as usize]]),
    };

    // (layer, pair index) -> (range, writer ordinal), resolved after finish
    let mut pair_writers: Vec<Vec<(u32, u32)>> = Vec::with_capacity(pending.len());
    let mut sum_layers = Vec::with_capacity(pending.len());
    for (p, &row_start) in pending.iter().zip(&row_starts) {
        let layout = &p.layout;
        let (k_m, k_n) = (layout.k_m as u32, layout.k_n as u32);
        let mut stage = ElementStage::default();
        for c in &layout.child_order {
            match c {
                Some(c) => make_stage_element(&mut stage, p.children[*c as usize]),
                None => stage.push(NONE, NONE, []),
            }
        }

        let mut pairs = Vec::new();
        let mut writers = Vec::new();
        let mut block_children: Vec<Vec<(u32, u32)>> = Vec::with_capacity(layout.num_sum_blocks());
        let mut block_parents: Vec<Vec<(u32, u32)>> = vec![Vec::new(); layout.num_child_blocks()];
        let mut keys = vec![NO_KEY; layout.k_m * layout.k_n];
        for (m, child_blocks) in layout.sum_block_children.iter().enumerate() {
            let mut list = Vec::with_capacity(child_blocks.len());
            for &nb in child_blocks {
                for r in 0..layout.k_m {
                    let sum = layout.sum_order[m * layout.k_m + r];
                    for k in 0..layout.k_n {
                        let child = layout.child_order[nb as usize * layout.k_n + k];
                        keys[r * layout.k_n + k] = match (sum, child) {
                            (Some(s), Some(c)) => {
                                let e = &p.edges[s as usize];
                                match e.binary_search_by_key(&c, |&(c, _)| c) {
                                    Ok(pos) => slot_keys[e[pos].1 as usize],
                                    Err(_) => NO_KEY,
                                }
                            }
                            _ => NO_KEY,
                        };
                    }
                }
                let range = builder.range(&keys);
                let ordinal = builder.add_writer(range);
                let theta = builder.offset(range);
                list.push((nb, theta));
                block_parents[nb as usize].push((m as u32, theta));
                pairs.push(BlockPair {
                    sum_row: row_start + m as u32 * k_m,
                    child_row: reserve_n + nb * k_n,
                    theta,
                    flow: 0,
                });
                writers.push((range, ordinal));
            }
            block_children.push(list);
        }

        let child_counts: Vec<u32> = block_children.iter().map(|c| c.len() as u32).collect();
        let forward_plan = plan_counts(&child_counts, cfg);
        let groups = compile_forward_groups(&block_children, &forward_plan, k_m, k_n, row_start, reserve_n);
        let parent_counts: Vec<u32> = block_parents.iter().map(|c| c.len() as u32).collect();
        let backward_plan = plan_counts(&parent_counts, cfg);
        let back_groups = compile_backward_groups(&block_parents, &backward_plan, k_m, k_n, row_start, reserve_n);

        let sum_nodes = layout.sum_order.iter().map(|s| s.map_or(NONE, |s| p.sums[s as usize])).collect();
        sum_layers.push(SumLayerIr {
            depth: p.depth,
            k_m,
            k_n,
            row_start,
            num_rows: layout.sum_order.len() as u32,
            num_sums: p.sums.len() as u32,
            num_children: p.children.len() as u32,
            num_edges: layout.report.real_edges,
            sum_nodes,
            stage,
            groups,
            back_groups,
            pairs,
            report: layout.report.clone(),
            forward_plan,
            backward_plan,
        });
        pair_writers.push(writers);
    }

    let params = builder.finish(g, slot_keys, cfg.tie_writer_threshold);
    for (layer, writers) in sum_layers.iter_mut().zip(&pair_writers) {
        for (pair, &(range, ordinal)) in layer.pairs.iter_mut().zip(writers) {
            pair.flow = params.flow_offset(range, ordinal);
        }
    }

    let root = g.root();
    let (root_row, root_stage) = match g.node(root) {
        Node::Product { .. } => {
            let mut stage = ElementStage::default();
            make_stage_element(&mut stage, root.0);
            (NONE, Some(stage))
        }
        _ => (node_row[root.index()], None),
    };
    let scratch_rows = reserve_n
        + sum_layers
            .iter()
            .map(|l| l.stage.len() as u32)
            .chain(root_stage.as_ref().map(|s| s.len() as u32))
            .max()
            .unwrap_or(0);

    Ok(CompiledCircuit {
        cfg: cfg.clone(),
        num_vars: g.num_vars(),
        num_nodes: n as u32,
        reserve_m,
        reserve_n,
        value_rows,
        scratch_rows,
        num_products,
        inputs,
        sum_layers,
        root_row,
        root_stage,
        node_row,
        product_row,
        params,
        graph_hash: cache::structure_hash(g, cfg),
    })
}

impl CompiledCircuit {
    pub fn num_edges(&self) -> u64 {
        self.sum_layers.iter().map(|l| l.num_edges).sum()
    }

    /// Refreshes the parameters from a graph with the same structure.
    pub fn sync_params(&mut self, g: &CircuitGraph) {
        self.params.sync_from_graph(g);
    }

    fn layer_rows_to_node(&self, layer: &SumLayerIr, row: u32) -> u32 {
        layer.sum_nodes[(row - layer.row_start) as usize]
    }

    /// `(sum node, child node, key)` of every real edge encoded by the
    /// forward tensors.
    pub fn forward_edges(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::new();
        for layer in &self.sum_layers {
            let (km, kn) = (layer.k_m as usize, layer.k_n as usize);
            for ir in &layer.groups {
                for i in 0..ir.c_m as usize {
                    for j in 0..ir.c_n as usize {
                        let prod = ir.prod_ids[i * ir.c_n as usize + j];
                        if prod < self.reserve_n {
                            continue;
                        }
                        let theta = ir.param_ids[i * ir.c_n as usize + j] as usize;
                        for r in 0..km {
                            let sum = self.layer_rows_to_node(layer, ir.sum_ids[i] + r as u32);
                            for k in 0..kn {
                                let child = layer.stage.nodes[(prod - self.reserve_n) as usize + k];
                                let key = self.params.phys_key[theta + r * kn + k];
                                if sum != NONE && child != NONE && key != NO_KEY {
                                    out.push((sum, child, key));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Same triples recovered from the backward tensors.
    pub fn backward_edges(&self) -> Vec<(u32, u32, u32)> {
        let mut out = Vec::new();
        for layer in &self.sum_layers {
            let (km, kn) = (layer.k_m as usize, layer.k_n as usize);
            for ir in &layer.back_groups {
                for i in 0..ir.c_n as usize {
                    let ch = (ir.ch_ids[i] - self.reserve_n) as usize;
                    for j in 0..ir.c_m as usize {
                        let par = ir.par_ids[i * ir.c_m as usize + j];
                        if par < self.reserve_m {
                            continue;
                        }
                        let theta = ir.par_param_ids[i * ir.c_m as usize + j] as usize;
                        for r in 0..km {
                            let sum = self.layer_rows_to_node(layer, par + r as u32);
                            for k in 0..kn {
                                let child = layer.stage.nodes[ch + k];
                                let key = self.params.phys_key[theta + r * kn + k];
                                if sum != NONE && child != NONE && key != NO_KEY {
                                    out.push((sum, child, key));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Human-readable summary of the layer program.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "circuit: vars={} nodes={} inputs={} products={} sum_layers={} edges={}",
            self.num_vars,
            self.num_nodes,
            self.inputs.nodes.len(),
            self.num_products,
            self.sum_layers.len(),
            self.num_edges()
        );
        let _ = writeln!(
            out,
            "buffers: value_rows={} scratch_rows={} theta={} flow_slots={} replicated_ranges={}",
            self.value_rows,
            self.scratch_rows,
            self.params.theta.len(),
            self.params.flow_len,
            self.params.ranges.iter().filter(|r| !r.replicas.is_empty()).count()
        );
        for (i, l) in self.sum_layers.iter().enumerate() {
            let plan = &l.forward_plan;
            let real: u64 = l.groups.iter().flat_map(|g| g.prod_ids.iter()).filter(|&&p| p >= self.reserve_n).count() as u64;
            let slots: u64 = l.groups.iter().map(|g| (g.c_m * g.c_n) as u64).sum();
            let group_padding = if slots == 0 { 0.0 } else { (slots - real) as f64 / real.max(1) as f64 };
            let block_padding = (l.report.padded_sums + l.report.padded_children) as f64
                / (l.num_rows as f64 + l.stage.len() as f64);
            let _ = writeln!(
                out,
                "layer {i}: depth={} sums={} children={} edges={} K={}x{} blocks={}x{} full={} empty={} efficiency={:.3}",
                l.depth,
                l.num_sums,
                l.num_children,
                l.num_edges,
                l.k_m,
                l.k_n,
                l.num_sum_blocks(),
                l.num_child_blocks(),
                l.report.full_pairs,
                l.report.empty_pairs,
                l.efficiency(),
            );
            let caps: Vec<String> = l.groups.iter().map(|g| format!("{}x{}", g.c_m, g.c_n)).collect();
            let _ = writeln!(
                out,
                "  forward groups={} [{}] overhead={}/{} padding={:.1}% block_padding={:.1}%",
                l.groups.len(),
                caps.join(" "),
                plan.overhead,
                plan.target_overhead,
                100.0 * group_padding,
                100.0 * block_padding
            );
            let caps: Vec<String> = l.back_groups.iter().map(|g| format!("{}x{}", g.c_n, g.c_m)).collect();
            let _ = writeln!(out, "  backward groups={} [{}]", l.back_groups.len(), caps.join(" "));
        }
        out
    }
}

//! Flattened parameter storage.
//!
//! Graph slots are first mapped to logical keys (tied slots share a key).
//! Physical storage `theta` starts with an all-zero block used by pseudo
//! edges, followed by one contiguous range per input pmf and per block pair.
//! Ranges with identical key layouts are stored once. A range written by more
//! than `tie_writer_threshold` block pairs gets extra flow accumulators that
//! are folded back into the primary range after the backward pass.

use std::collections::HashMap;

use crate::graph::{CircuitGraph, Node, NodeId};

/// Key value marking a physical slot that holds no parameter.
pub const NO_KEY: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhysRange {
    pub offset: u32,
    pub len: u32,
    /// Number of block pairs accumulating flows into this range.
    pub writers: u32,
    /// Offsets of extra flow accumulators in the flow buffer.
    pub replicas: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reduction {
    pub from: u32,
    pub to: u32,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormKind {
    Sum,
    Input,
}

/// A set of keys constrained to sum to one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormGroup {
    pub kind: NormKind,
    /// First node owning this set.
    pub node: NodeId,
    /// Keys in edge (or category) order of that node.
    pub keys: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub theta: Vec<f64>,
    pub phys_key: Vec<u32>,
    pub ranges: Vec<PhysRange>,
    pub reductions: Vec<Reduction>,
    /// Length of the flow buffer: physical slots plus replicas.
    pub flow_len: usize,
    pub zero_len: usize,
    pub slot_keys: Vec<u32>,
    pub key_values: Vec<f64>,
    pub norm_groups: Vec<NormGroup>,
    pub tie_writer_threshold: u32,
}

/// Logical keys of every graph slot together with each key's value.
pub fn logical_keys(g: &CircuitGraph) -> (Vec<u32>, Vec<f64>) {
    let slot_keys = g.slot_keys();
    let num_keys = slot_keys.iter().map(|&k| k as usize + 1).max().unwrap_or(0);
    let mut values = vec![f64::NAN; num_keys];
    for (slot, &k) in slot_keys.iter().enumerate() {
        if values[k as usize].is_nan() {
            values[k as usize] = g.params()[slot];
        }
    }
    (slot_keys, values)
}

/// Normalization sets of a graph, deduplicated by key set.
pub fn norm_groups(g: &CircuitGraph, slot_keys: &[u32]) -> Vec<NormGroup> {
    let mut seen: HashMap<Vec<u32>, ()> = HashMap::new();
    let mut out = Vec::new();
    for (i, node) in g.nodes().iter().enumerate() {
        let (kind, keys): (NormKind, Vec<u32>) = match node {
            Node::Input { num_categories, pmf_slot, .. } => (
                NormKind::Input,
                (*pmf_slot..pmf_slot + num_categories).map(|s| slot_keys[s as usize]).collect(),
            ),
            Node::Sum { slots, .. } => (NormKind::Sum, slots.iter().map(|&s| slot_keys[s as usize]).collect()),
            Node::Product { .. } => continue,
        };
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        if seen.insert(sorted, ()).is_none() {
            out.push(NormGroup { kind, node: NodeId(i as u32), keys });
        }
    }
    out
}

/// Incremental builder used by the compiler.
pub(crate) struct ParamBuilder {
    theta: Vec<f64>,
    phys_key: Vec<u32>,
    ranges: Vec<PhysRange>,
    dedup: HashMap<Vec<u32>, u32>,
    key_values: Vec<f64>,
    zero_len: usize,
}

impl ParamBuilder {
    pub fn new(zero_len: usize, key_values: Vec<f64>) -> Self {
        let zero_len = zero_len.max(1);
        ParamBuilder {
            theta: vec![0.0; zero_len],
            phys_key: vec![NO_KEY; zero_len],
            ranges: Vec::new(),
            dedup: HashMap::new(),
            key_values,
            zero_len,
        }
    }

    /// Physical range holding `keys`, allocating it on first use. Returns the
    /// range index.
    pub fn range(&mut self, keys: &[u32]) -> u32 {
        if let Some(&r) = self.dedup.get(keys) {
            return r;
        }
        let offset = self.theta.len() as u32;
        for &k in keys {
            self.phys_key.push(k);
            self.theta.push(if k == NO_KEY { 0.0 } else { self.key_values[k as usize] });
        }
        let idx = self.ranges.len() as u32;
        self.ranges.push(PhysRange { offset, len: keys.len() as u32, writers: 0, replicas: Vec::new() });
        self.dedup.insert(keys.to_vec(), idx);
        idx
    }

    pub fn offset(&self, range: u32) -> u32 {
        self.ranges[range as usize].offset
    }

    /// Registers one more writer of `range` and returns its ordinal.
    pub fn add_writer(&mut self, range: u32) -> u32 {
        let r = &mut self.ranges[range as usize];
        r.writers += 1;
        r.writers - 1
    }

    pub fn finish(self, g: &CircuitGraph, slot_keys: Vec<u32>, threshold: u32) -> ParamStore {
        let threshold = threshold.max(1);
        let mut ranges = self.ranges;
        let mut flow_len = self.theta.len() as u32;
        let mut reductions = Vec::new();
        for r in &mut ranges {
            let copies = r.writers.div_ceil(threshold);
            for _ in 1..copies {
                r.replicas.push(flow_len);
                reductions.push(Reduction { from: flow_len, to: r.offset, len: r.len });
                flow_len += r.len;
            }
        }
        let groups = norm_groups(g, &slot_keys);
        ParamStore {
            theta: self.theta,
            phys_key: self.phys_key,
            ranges,
            reductions,
            flow_len: flow_len as usize,
            zero_len: self.zero_len,
            slot_keys,
            key_values: self.key_values,
            norm_groups: groups,
            tie_writer_threshold: threshold,
        }
    }
}

impl ParamStore {
    pub fn num_keys(&self) -> usize {
        self.key_values.len()
    }

    /// Flow-buffer offset used by the `ordinal`-th writer of `range`.
    pub fn flow_offset(&self, range: u32, ordinal: u32) -> u32 {
        let r = &self.ranges[range as usize];
        match (ordinal / self.tie_writer_threshold) as usize {
            0 => r.offset,
            k => r.replicas[k - 1],
        }
    }

    /// Replaces the logical values and refreshes the physical copy.
    pub fn set_key_values(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.key_values.len(), "key count mismatch");
        self.key_values.copy_from_slice(values);
        for (t, &k) in self.theta.iter_mut().zip(&self.phys_key) {
            *t = if k == NO_KEY { 0.0 } else { values[k as usize] };
        }
    }

    /// Reloads parameter values from a graph with the same structure.
    pub fn sync_from_graph(&mut self, g: &CircuitGraph) {
        let mut values = self.key_values.clone();
        for (slot, &k) in self.slot_keys.iter().enumerate() {
            values[k as usize] = g.params()[slot];
        }
        self.set_key_values(&values);
    }

    /// Writes logical values back into every graph slot.
    pub fn write_to_graph(&self, g: &mut CircuitGraph) {
        for (p, &k) in g.params_mut().iter_mut().zip(&self.slot_keys) {
            *p = self.key_values[k as usize];
        }
    }

    /// Number of distinct physical parameters among the keys listed.
    pub fn num_physical_ranges(&self) -> usize {
        self.ranges.len()
    }
}

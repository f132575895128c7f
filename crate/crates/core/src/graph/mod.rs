//! Probabilistic circuit DAGs with categorical input distributions.
//!
//! A [`CircuitGraph`] is built node by node (children before parents) and is
//! checked as a whole by [`CircuitGraph::validate`]. Parameters live in a flat
//! slot table: an input node owns `num_categories` consecutive slots holding its
//! pmf, and every sum edge references one slot. Two edges may reference the
//! same slot, and distinct slots can additionally be tied through tying groups.

mod text;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use fixedbitset::FixedBitSet;

use crate::error::{Error, Result};

pub use text::{parse_model, write_model};

/// Tolerance used when checking that a parameter vector lies on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl VarId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Input {
        var: VarId,
        num_categories: u32,
        /// First of `num_categories` consecutive parameter slots.
        pmf_slot: u32,
    },
    Product {
        children: Vec<NodeId>,
    },
    Sum {
        children: Vec<NodeId>,
        /// Parameter slot of each edge, aligned with `children`.
        slots: Vec<u32>,
    },
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match self {
            Node::Input { .. } => &[],
            Node::Product { children } | Node::Sum { children, .. } => children,
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, Node::Input { .. })
    }

    pub fn is_sum(&self) -> bool {
        matches!(self, Node::Sum { .. })
    }

    pub fn is_product(&self) -> bool {
        matches!(self, Node::Product { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CircuitGraph {
    num_vars: u32,
    nodes: Vec<Node>,
    params: Vec<f64>,
    tying: BTreeMap<u32, u32>,
    root: Option<NodeId>,
}

fn check_distribution(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidDistribution("empty probability vector".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidDistribution(format!("entry {v} is not a probability")));
    }
    let total: f64 = values.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::InvalidDistribution(format!("entries sum to {total}, expected 1")));
    }
    Ok(())
}

impl CircuitGraph {
    pub fn new(num_vars: u32) -> Self {
        CircuitGraph { num_vars, ..Default::default() }
    }

    /// Assembles a graph from raw parts, checking only that every reference is
    /// in range. Structural properties are left to [`CircuitGraph::validate`].
    pub fn from_parts(
        num_vars: u32,
        nodes: Vec<Node>,
        params: Vec<f64>,
        tying: BTreeMap<u32, u32>,
        root: Option<NodeId>,
    ) -> Result<Self> {
        let n = nodes.len() as u32;
        let slots = params.len() as u64;
        for node in &nodes {
            match node {
                Node::Input { var, num_categories, pmf_slot } => {
                    if var.0 >= num_vars {
                        return Err(Error::VarOutOfRange { var: var.0, num_vars });
                    }
                    if *pmf_slot as u64 + *num_categories as u64 > slots {
                        return Err(Error::Config(format!(
                            "input pmf slots {}..{} exceed parameter table of {slots}",
                            pmf_slot,
                            *pmf_slot as u64 + *num_categories as u64
                        )));
                    }
                }
                Node::Product { children } => {
                    if let Some(c) = children.iter().find(|c| c.0 >= n) {
                        return Err(Error::UnknownNode(c.0));
                    }
                }
                Node::Sum { children, slots: s } => {
                    if let Some(c) = children.iter().find(|c| c.0 >= n) {
                        return Err(Error::UnknownNode(c.0));
                    }
                    if s.len() != children.len() {
                        return Err(Error::ArityMismatch { children: children.len(), params: s.len() });
                    }
                    if let Some(bad) = s.iter().find(|&&s| s as u64 >= slots) {
                        return Err(Error::Config(format!("parameter slot {bad} out of range")));
                    }
                }
            }
        }
        if let Some(r) = root {
            if r.0 >= n {
                return Err(Error::UnknownNode(r.0));
            }
        }
        if let Some((&slot, _)) = tying.iter().find(|(&s, _)| s as u64 >= slots) {
            return Err(Error::Config(format!("tied slot {slot} out of range")));
        }
        Ok(CircuitGraph { num_vars, nodes, params, tying, root })
    }

    pub fn num_vars(&self) -> u32 {
        self.num_vars
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_param_slots(&self) -> usize {
        self.params.len()
    }

    pub fn tying(&self) -> &BTreeMap<u32, u32> {
        &self.tying
    }

    /// Places `slot` into tying group `group`. Slots of one group share a
    /// single physical parameter.
    pub fn tie(&mut self, slot: u32, group: u32) -> Result<()> {
        if slot as usize >= self.params.len() {
            return Err(Error::Config(format!("tied slot {slot} out of range")));
        }
        self.tying.insert(slot, group);
        Ok(())
    }

    /// The explicit root, or the highest-id node when none was set.
    pub fn root(&self) -> NodeId {
        self.root.unwrap_or(NodeId(self.nodes.len().saturating_sub(1) as u32))
    }

    pub fn explicit_root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn set_root(&mut self, root: NodeId) -> Result<()> {
        if root.index() >= self.nodes.len() {
            return Err(Error::UnknownNode(root.0));
        }
        self.root = Some(root);
        Ok(())
    }

    pub fn num_edges(&self) -> usize {
        self.nodes.iter().map(|n| n.children().len()).sum()
    }

    pub fn num_sum_edges(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_sum()).map(|n| n.children().len()).sum()
    }

    /// Appends raw parameter values and returns the first new slot.
    pub fn alloc_params(&mut self, values: &[f64]) -> u32 {
        let start = self.params.len() as u32;
        self.params.extend_from_slice(values);
        start
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() as u32 - 1)
    }

    fn check_child(&self, c: NodeId) -> Result<()> {
        if c.index() >= self.nodes.len() {
            return Err(Error::UnknownNode(c.0));
        }
        Ok(())
    }

    pub fn add_input(&mut self, var: VarId, pmf: &[f64]) -> Result<NodeId> {
        if var.0 >= self.num_vars {
            return Err(Error::VarOutOfRange { var: var.0, num_vars: self.num_vars });
        }
        check_distribution(pmf)?;
        let pmf_slot = self.alloc_params(pmf);
        Ok(self.push(Node::Input { var, num_categories: pmf.len() as u32, pmf_slot }))
    }

    /// Adds an input whose pmf lives in already-allocated slots, e.g. an
    /// emission distribution shared across time steps.
    pub fn add_input_shared(&mut self, var: VarId, num_categories: u32, pmf_slot: u32) -> Result<NodeId> {
        if var.0 >= self.num_vars {
            return Err(Error::VarOutOfRange { var: var.0, num_vars: self.num_vars });
        }
        let end = pmf_slot as usize + num_categories as usize;
        if num_categories == 0 || end > self.params.len() {
            return Err(Error::Config(format!("pmf slots {pmf_slot}..{end} are not allocated")));
        }
        check_distribution(&self.params[pmf_slot as usize..end])?;
        Ok(self.push(Node::Input { var, num_categories, pmf_slot }))
    }

    pub fn add_product(&mut self, children: &[NodeId]) -> Result<NodeId> {
        if children.is_empty() {
            return Err(Error::NoChildren(self.nodes.len() as u32));
        }
        for &c in children {
            self.check_child(c)?;
        }
        Ok(self.push(Node::Product { children: children.to_vec() }))
    }

    pub fn add_sum(&mut self, children: &[NodeId], params: &[f64]) -> Result<NodeId> {
        if children.is_empty() {
            return Err(Error::NoChildren(self.nodes.len() as u32));
        }
        if params.len() != children.len() {
            return Err(Error::ArityMismatch { children: children.len(), params: params.len() });
        }
        for &c in children {
            self.check_child(c)?;
        }
        check_distribution(params)?;
        let start = self.alloc_params(params);
        let slots = (start..start + params.len() as u32).collect();
        Ok(self.push(Node::Sum { children: children.to_vec(), slots }))
    }

    /// Adds a sum node whose edge weights reference existing slots.
    pub fn add_sum_shared(&mut self, children: &[NodeId], slots: &[u32]) -> Result<NodeId> {
        if children.is_empty() {
            return Err(Error::NoChildren(self.nodes.len() as u32));
        }
        if slots.len() != children.len() {
            return Err(Error::ArityMismatch { children: children.len(), params: slots.len() });
        }
        for &c in children {
            self.check_child(c)?;
        }
        if let Some(bad) = slots.iter().find(|&&s| s as usize >= self.params.len()) {
            return Err(Error::Config(format!("parameter slot {bad} is not allocated")));
        }
        Ok(self.push(Node::Sum { children: children.to_vec(), slots: slots.to_vec() }))
    }

    /// Children-first ordering of every node in the graph.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        const NEW: u8 = 0;
        const OPEN: u8 = 1;
        const DONE: u8 = 2;
        let n = self.nodes.len();
        let mut state = vec![NEW; n];
        let mut order = Vec::with_capacity(n);
        let mut stack: Vec<(u32, usize)> = Vec::new();
        for start in 0..n {
            if state[start] != NEW {
                continue;
            }
            stack.push((start as u32, 0));
            state[start] = OPEN;
            while let Some(top) = stack.last_mut() {
                let (id, next) = *top;
                let children = self.nodes[id as usize].children();
                if next < children.len() {
                    top.1 += 1;
                    let c = children[next].index();
                    match state[c] {
                        NEW => {
                            state[c] = OPEN;
                            stack.push((c as u32, 0));
                        }
                        OPEN => return Err(Error::Cycle(c as u32)),
                        _ => {}
                    }
                } else {
                    state[id as usize] = DONE;
                    order.push(NodeId(id));
                    stack.pop();
                }
            }
        }
        Ok(order)
    }

    /// Variable scope of every node.
    pub fn scopes(&self) -> Result<Vec<FixedBitSet>> {
        let order = self.topo_order()?;
        let nv = self.num_vars as usize;
        let mut scopes = vec![FixedBitSet::new(); self.nodes.len()];
        for id in order {
            let mut s = FixedBitSet::with_capacity(nv);
            match &self.nodes[id.index()] {
                Node::Input { var, .. } => s.insert(var.index()),
                node => {
                    for c in node.children() {
                        s.union_with(&scopes[c.index()]);
                    }
                }
            }
            scopes[id.index()] = s;
        }
        Ok(scopes)
    }

    pub fn scope(&self, n: NodeId) -> Result<Vec<VarId>> {
        if n.index() >= self.nodes.len() {
            return Err(Error::UnknownNode(n.0));
        }
        let scopes = self.scopes()?;
        Ok(scopes[n.index()].ones().map(|v| VarId(v as u32)).collect())
    }

    pub fn num_parents(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.nodes.len()];
        for node in &self.nodes {
            for c in node.children() {
                counts[c.index()] += 1;
            }
        }
        counts
    }

    /// Tying key of every slot: slots in the same tying group share a key,
    /// every other slot is its own key.
    pub fn slot_keys(&self) -> Vec<u32> {
        let n = self.params.len();
        let mut keys: Vec<u32> = Vec::with_capacity(n);
        let mut group_key: HashMap<u32, u32> = HashMap::new();
        let mut next = 0u32;
        for slot in 0..n as u32 {
            let key = match self.tying.get(&slot) {
                Some(&g) => *group_key.entry(g).or_insert_with(|| {
                    next += 1;
                    next - 1
                }),
                None => {
                    next += 1;
                    next - 1
                }
            };
            keys.push(key);
        }
        keys
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let scopes = match self.scopes() {
            Ok(s) => s,
            Err(Error::Cycle(n)) => {
                violations.push(Violation::Cycle { node: NodeId(n) });
                return ValidationReport { violations };
            }
            Err(e) => unreachable!("scope computation only fails on cycles: {e}"),
        };
        if self.nodes.is_empty() {
            violations.push(Violation::Empty);
            return ValidationReport { violations };
        }

        let root = self.root();
        let parents = self.num_parents();
        if parents[root.index()] != 0 {
            violations.push(Violation::RootHasParents { root });
        }
        let orphans: Vec<NodeId> = (0..self.nodes.len() as u32)
            .map(NodeId)
            .filter(|&n| n != root && parents[n.index()] == 0)
            .collect();
        if !orphans.is_empty() {
            violations.push(Violation::MultipleRoots { nodes: orphans });
        }
        if scopes[root.index()].count_ones(..) != self.num_vars as usize {
            violations.push(Violation::IncompleteScope { root });
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let id = NodeId(i as u32);
            match node {
                Node::Input { num_categories, pmf_slot, .. } => {
                    let (s, e) = (*pmf_slot as usize, *pmf_slot as usize + *num_categories as usize);
                    if *num_categories == 0 || check_distribution(&self.params[s..e]).is_err() {
                        violations.push(Violation::Simplex { node: id });
                    }
                }
                Node::Product { children } => {
                    if children.is_empty() {
                        violations.push(Violation::NoChildren { node: id });
                        continue;
                    }
                    let mut seen = FixedBitSet::with_capacity(self.num_vars as usize);
                    let mut disjoint = true;
                    for c in children {
                        if self.nodes[c.index()].is_product() {
                            violations.push(Violation::Alternation { parent: id, child: *c });
                        }
                        let sc = &scopes[c.index()];
                        if !seen.is_disjoint(sc) {
                            disjoint = false;
                        }
                        seen.union_with(sc);
                    }
                    if !disjoint {
                        violations.push(Violation::Decomposability { node: id });
                    }
                }
                Node::Sum { children, slots } => {
                    if children.is_empty() {
                        violations.push(Violation::NoChildren { node: id });
                        continue;
                    }
                    let first = &scopes[children[0].index()];
                    if children.iter().any(|c| scopes[c.index()] != *first) {
                        violations.push(Violation::Smoothness { node: id });
                    }
                    for c in children {
                        if self.nodes[c.index()].is_sum() {
                            violations.push(Violation::Alternation { parent: id, child: *c });
                        }
                    }
                    let mut sorted = children.clone();
                    sorted.sort_unstable();
                    if sorted.windows(2).any(|w| w[0] == w[1]) {
                        violations.push(Violation::DuplicateChild { node: id });
                    }
                    let weights: Vec<f64> = slots.iter().map(|&s| self.params[s as usize]).collect();
                    if check_distribution(&weights).is_err() {
                        violations.push(Violation::Simplex { node: id });
                    }
                }
            }
        }
        self.check_tying(&mut violations);
        ValidationReport { violations }
    }

    /// Every tying key must belong to exactly one normalization set and all
    /// slots sharing a key must hold the same value.
    fn check_tying(&self, violations: &mut Vec<Violation>) {
        let keys = self.slot_keys();
        let mut key_value: HashMap<u32, f64> = HashMap::new();
        for (slot, &k) in keys.iter().enumerate() {
            let v = self.params[slot];
            match key_value.get(&k) {
                Some(&w) if (w - v).abs() > 1e-12 => {
                    violations.push(Violation::Tying { slot: slot as u32, reason: "tied slots hold different values" })
                }
                Some(_) => {}
                None => {
                    key_value.insert(k, v);
                }
            }
        }
        let mut owner: HashMap<u32, Vec<u32>> = HashMap::new();
        for node in &self.nodes {
            let slots: Vec<u32> = match node {
                Node::Input { num_categories, pmf_slot, .. } => (*pmf_slot..pmf_slot + num_categories).collect(),
                Node::Sum { slots, .. } => slots.clone(),
                Node::Product { .. } => continue,
            };
            let mut set: Vec<u32> = slots.iter().map(|&s| keys[s as usize]).collect();
            set.sort_unstable();
            if set.windows(2).any(|w| w[0] == w[1]) {
                violations.push(Violation::Tying { slot: slots[0], reason: "one node references a parameter twice" });
                continue;
            }
            for (&s, k) in slots.iter().zip(slots.iter().map(|&s| keys[s as usize])) {
                match owner.get(&k) {
                    Some(existing) if *existing != set => {
                        violations.push(Violation::Tying {
                            slot: s,
                            reason: "parameter shared by nodes with different sibling sets",
                        });
                        break;
                    }
                    Some(_) => {}
                    None => {
                        owner.insert(k, set.clone());
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Empty,
    Cycle { node: NodeId },
    RootHasParents { root: NodeId },
    MultipleRoots { nodes: Vec<NodeId> },
    IncompleteScope { root: NodeId },
    NoChildren { node: NodeId },
    Smoothness { node: NodeId },
    Decomposability { node: NodeId },
    Alternation { parent: NodeId, child: NodeId },
    DuplicateChild { node: NodeId },
    Simplex { node: NodeId },
    Tying { slot: u32, reason: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Empty => write!(f, "circuit has no nodes"),
            Violation::Cycle { node } => write!(f, "cycle through {node}"),
            Violation::RootHasParents { root } => write!(f, "root {root} has parents"),
            Violation::MultipleRoots { nodes } => {
                write!(f, "parentless non-root nodes:")?;
                for n in nodes.iter().take(8) {
                    write!(f, " {n}")?;
                }
                if nodes.len() > 8 {
                    write!(f, " (+{} more)", nodes.len() - 8)?;
                }
                Ok(())
            }
            Violation::IncompleteScope { root } => write!(f, "root {root} does not cover every variable"),
            Violation::NoChildren { node } => write!(f, "{node} has no children"),
            Violation::Smoothness { node } => write!(f, "sum {node} is not smooth"),
            Violation::Decomposability { node } => write!(f, "product {node} is not decomposable"),
            Violation::Alternation { parent, child } => {
                write!(f, "edge {parent} -> {child} joins two nodes of the same kind")
            }
            Violation::DuplicateChild { node } => write!(f, "sum {node} lists a child twice"),
            Violation::Simplex { node } => write!(f, "parameters of {node} are not on the simplex"),
            Violation::Tying { slot, reason } => write!(f, "slot {slot}: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Invalid(self))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

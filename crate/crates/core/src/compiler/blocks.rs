//! Block detection for sum layers.
//!
//! Children sharing an identical parent set are interchangeable, so they are
//! packed into aligned blocks of `k_n` (padding each equivalence class up to a
//! multiple of the block size). Sums are then packed by the set of child
//! blocks they reach. Every (sum block, child block) pair produced this way is
//! either fully connected or unconnected.

use std::collections::HashMap;

/// Adjacency of one sum layer in local indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAdjacency {
    pub num_children: usize,
    /// Local child indices of every sum.
    pub children: Vec<Vec<u32>>,
}

impl LayerAdjacency {
    pub fn num_sums(&self) -> usize {
        self.children.len()
    }

    pub fn num_edges(&self) -> usize {
        self.children.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BlockReport {
    pub full_pairs: u64,
    pub empty_pairs: u64,
    pub partial_pairs: u64,
    pub padded_sums: u64,
    pub padded_children: u64,
    pub real_edges: u64,
}

impl BlockReport {
    /// Fraction of computed edges that are real edges.
    pub fn efficiency(&self, k_m: usize, k_n: usize) -> f64 {
        let computed = self.full_pairs * (k_m * k_n) as u64;
        if computed == 0 {
            1.0
        } else {
            self.real_edges as f64 / computed as f64
        }
    }

    pub fn is_block_sparse(&self) -> bool {
        self.partial_pairs == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub k_m: usize,
    pub k_n: usize,
    /// Local sum index of every compiled sum slot; `None` marks padding.
    pub sum_order: Vec<Option<u32>>,
    /// Local child index of every compiled child slot; `None` marks padding.
    pub child_order: Vec<Option<u32>>,
    /// Connected child blocks of every sum block, ascending.
    pub sum_block_children: Vec<Vec<u32>>,
    pub report: BlockReport,
}

impl BlockLayout {
    pub fn num_sum_blocks(&self) -> usize {
        self.sum_order.len() / self.k_m
    }

    pub fn num_child_blocks(&self) -> usize {
        self.child_order.len() / self.k_n
    }

    /// Parent sum blocks of every child block, ascending.
    pub fn child_block_parents(&self) -> Vec<Vec<u32>> {
        let mut parents = vec![Vec::new(); self.num_child_blocks()];
        for (m, blocks) in self.sum_block_children.iter().enumerate() {
            for &n in blocks {
                parents[n as usize].push(m as u32);
            }
        }
        parents
    }
}

/// Orders `items` into padded blocks of `k` by equal signature. Classes are
/// sorted by (signature, smallest member).
fn pack<S: Ord + Clone + std::hash::Hash>(signatures: &[S], k: usize) -> Vec<Option<u32>> {
    let mut classes: HashMap<&S, Vec<u32>> = HashMap::new();
    for (i, s) in signatures.iter().enumerate() {
        classes.entry(s).or_default().push(i as u32);
    }
    let mut classes: Vec<(&S, Vec<u32>)> = classes.into_iter().collect();
    classes.sort_by(|a, b| a.0.cmp(b.0).then(a.1[0].cmp(&b.1[0])));
    let mut order = Vec::with_capacity(signatures.len() + k * classes.len());
    for (_, members) in classes {
        order.extend(members.into_iter().map(Some));
        while order.len() % k != 0 {
            order.push(None);
        }
    }
    order
}

/// Packs a sum layer into blocks of `k_m` sums and `k_n` children. Block sizes
/// are capped at the number of sums and children respectively.
pub fn detect_blocks(adj: &LayerAdjacency, k_m: usize, k_n: usize) -> BlockLayout {
    let k_m = k_m.clamp(1, adj.num_sums().max(1));
    let k_n = k_n.clamp(1, adj.num_children.max(1));

    let mut parent_sets: Vec<Vec<u32>> = vec![Vec::new(); adj.num_children];
    for (s, children) in adj.children.iter().enumerate() {
        for &c in children {
            parent_sets[c as usize].push(s as u32);
        }
    }
    for p in &mut parent_sets {
        p.sort_unstable();
        p.dedup();
    }
    let child_order = pack(&parent_sets, k_n);
    let mut child_block = vec![0u32; adj.num_children];
    for (slot, c) in child_order.iter().enumerate() {
        if let Some(c) = c {
            child_block[*c as usize] = (slot / k_n) as u32;
        }
    }

    let sum_sigs: Vec<Vec<u32>> = adj
        .children
        .iter()
        .map(|children| {
            let mut blocks: Vec<u32> = children.iter().map(|&c| child_block[c as usize]).collect();
            blocks.sort_unstable();
            blocks.dedup();
            blocks
        })
        .collect();
    let sum_order = pack(&sum_sigs, k_m);
    let num_sum_blocks = sum_order.len() / k_m;
    let num_child_blocks = child_order.len() / k_n;

    let mut sum_block_children = Vec::with_capacity(num_sum_blocks);
    let mut report = BlockReport {
        padded_sums: sum_order.iter().filter(|s| s.is_none()).count() as u64,
        padded_children: child_order.iter().filter(|c| c.is_none()).count() as u64,
        real_edges: adj.num_edges() as u64,
        ..Default::default()
    };
    let real_in_child_block: Vec<u64> = child_order
        .chunks(k_n)
        .map(|b| b.iter().filter(|c| c.is_some()).count() as u64)
        .collect();
    for block in sum_order.chunks(k_m) {
        let real: Vec<u32> = block.iter().flatten().copied().collect();
        // edges from this sum block into each child block
        let mut edges: HashMap<u32, u64> = HashMap::new();
        for &s in &real {
            for &c in &adj.children[s as usize] {
                *edges.entry(child_block[c as usize]).or_default() += 1;
            }
        }
        let mut blocks: Vec<u32> = edges.keys().copied().collect();
        blocks.sort_unstable();
        for b in &blocks {
            if edges[b] == real.len() as u64 * real_in_child_block[*b as usize] {
                report.full_pairs += 1;
            } else {
                report.partial_pairs += 1;
            }
        }
        report.empty_pairs += (num_child_blocks - blocks.len()) as u64;
        sum_block_children.push(blocks);
    }
    BlockLayout { k_m, k_n, sum_order, child_order, sum_block_children, report }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(m: usize, n: usize) -> LayerAdjacency {
        LayerAdjacency { num_children: n, children: vec![(0..n as u32).collect(); m] }
    }

    /// Six sums over six children: {m0,m1} -> {n0,n1}; {m2,m3} -> {n0..n3};
    /// {m4,m5} -> {n4,n5}.
    pub(crate) fn figure_layer() -> LayerAdjacency {
        LayerAdjacency {
            num_children: 6,
            children: vec![vec![0, 1], vec![0, 1], vec![0, 1, 2, 3], vec![0, 1, 2, 3], vec![4, 5], vec![4, 5]],
        }
    }

    #[test]
    fn dense_layer_is_all_full_pairs() {
        let layout = detect_blocks(&dense(6, 6), 2, 2);
        assert_eq!(layout.num_sum_blocks(), 3);
        assert_eq!(layout.num_child_blocks(), 3);
        assert_eq!(layout.report.full_pairs, 9);
        assert_eq!(layout.report.empty_pairs, 0);
        assert!(layout.report.is_block_sparse());
        assert_eq!(layout.report.efficiency(2, 2), 1.0);
    }

    #[test]
    fn figure_layer_blocks() {
        let layout = detect_blocks(&figure_layer(), 2, 2);
        assert_eq!(layout.child_order, vec![Some(0), Some(1), Some(2), Some(3), Some(4), Some(5)]);
        assert_eq!(layout.sum_order, vec![Some(0), Some(1), Some(2), Some(3), Some(4), Some(5)]);
        assert_eq!(layout.sum_block_children, vec![vec![0], vec![0, 1], vec![2]]);
        assert_eq!(layout.report.full_pairs, 4);
        assert_eq!(layout.report.empty_pairs, 5);
        assert!(layout.report.is_block_sparse());
        assert_eq!(layout.child_block_parents(), vec![vec![0, 1], vec![1], vec![2]]);
    }

    #[test]
    fn odd_layer_is_padded() {
        let layout = detect_blocks(&dense(5, 4), 2, 2);
        assert_eq!(layout.num_sum_blocks(), 3);
        assert_eq!(layout.report.padded_sums, 1);
        assert_eq!(layout.sum_order[5], None);
        assert!(layout.report.is_block_sparse());
    }

    #[test]
    fn irregular_children_get_padded_classes() {
        let adj = LayerAdjacency { num_children: 3, children: vec![vec![0], vec![1], vec![2]] };
        let layout = detect_blocks(&adj, 2, 2);
        assert!(layout.report.is_block_sparse());
        assert!(layout.report.efficiency(layout.k_m, layout.k_n) < 0.5);
        let unit = detect_blocks(&adj, 1, 1);
        assert_eq!(unit.report.efficiency(1, 1), 1.0);
    }

    #[test]
    fn block_size_is_capped_at_layer_size() {
        let layout = detect_blocks(&dense(3, 8), 32, 32);
        assert_eq!((layout.k_m, layout.k_n), (3, 8));
        assert_eq!(layout.report.padded_sums, 0);
    }
}

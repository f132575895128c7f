use crate::error::Result;
use crate::graph::{CircuitGraph, Node, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Product,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub depth: u32,
    pub kind: LayerKind,
    pub nodes: Vec<NodeId>,
}

/// Depth of every node such that inputs sit at 0, products at odd and sums
/// at even depths, and each node is one level above its deepest child after
/// rounding up to the parity of its kind.
pub fn node_depths(g: &CircuitGraph) -> Result<Vec<u32>> {
    let order = g.topo_order()?;
    let mut depth = vec![0u32; g.num_nodes()];
    for id in order {
        let node = g.node(id);
        let below = node.children().iter().map(|c| depth[c.index()]).max().unwrap_or(0);
        depth[id.index()] = match node {
            Node::Input { .. } => 0,
            // smallest odd depth above every child
            Node::Product { .. } => (below + 1) | 1,
            // smallest even depth above every child
            Node::Sum { .. } => (below + 2) & !1,
        };
    }
    Ok(depth)
}

/// Groups nodes of equal depth into layers, ordered bottom-up. Empty depths
/// are skipped; node order inside a layer follows node ids.
pub fn layerize(g: &CircuitGraph) -> Result<Vec<Layer>> {
    let depth = node_depths(g)?;
    let max = depth.iter().copied().max().unwrap_or(0) as usize;
    let mut buckets: Vec<Vec<NodeId>> = vec![Vec::new(); max + 1];
    for (i, &d) in depth.iter().enumerate() {
        buckets[d as usize].push(NodeId(i as u32));
    }
    Ok(buckets
        .into_iter()
        .enumerate()
        .filter(|(_, nodes)| !nodes.is_empty())
        .map(|(d, nodes)| {
            let kind = match d {
                0 => LayerKind::Input,
                d if d % 2 == 1 => LayerKind::Product,
                _ => LayerKind::Sum,
            };
            Layer { depth: d as u32, kind, nodes }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::VarId;

    #[test]
    fn chain_gives_three_layers() {
        let mut g = CircuitGraph::new(2);
        let a = g.add_input(VarId(0), &[0.5, 0.5]).unwrap();
        let b = g.add_input(VarId(1), &[0.5, 0.5]).unwrap();
        let p = g.add_product(&[a, b]).unwrap();
        g.add_sum(&[p], &[1.0]).unwrap();
        let layers = layerize(&g).unwrap();
        let kinds: Vec<_> = layers.iter().map(|l| l.kind).collect();
        assert_eq!(kinds, vec![LayerKind::Input, LayerKind::Product, LayerKind::Sum]);
    }

    #[test]
    fn independent_sums_share_a_layer() {
        let mut g = CircuitGraph::new(2);
        let a = g.add_input(VarId(0), &[0.5, 0.5]).unwrap();
        let b = g.add_input(VarId(0), &[0.2, 0.8]).unwrap();
        let c = g.add_input(VarId(1), &[0.5, 0.5]).unwrap();
        let d = g.add_input(VarId(1), &[0.9, 0.1]).unwrap();
        let s1 = g.add_sum(&[a, b], &[0.5, 0.5]).unwrap();
        let s2 = g.add_sum(&[c, d], &[0.5, 0.5]).unwrap();
        g.add_product(&[s1, s2]).unwrap();
        let layers = layerize(&g).unwrap();
        assert_eq!(layers.len(), 3);
        assert_eq!(layers[1].kind, LayerKind::Sum);
        assert_eq!(layers[1].nodes, vec![s1, s2]);
        assert_eq!(layers[2].kind, LayerKind::Product);
    }

    #[test]
    fn layers_alternate_above_inputs() {
        let mut g = CircuitGraph::new(3);
        let x: Vec<_> = (0..3).map(|v| g.add_input(VarId(v), &[0.5, 0.5]).unwrap()).collect();
        let p1 = g.add_product(&[x[0], x[1]]).unwrap();
        let s1 = g.add_sum(&[p1], &[1.0]).unwrap();
        let p2 = g.add_product(&[s1, x[2]]).unwrap();
        let other = g.add_product(&[x[0], x[1], x[2]]).unwrap();
        g.add_sum(&[p2, other], &[0.5, 0.5]).unwrap();
        let layers = layerize(&g).unwrap();
        for w in layers.windows(2).skip(1) {
            assert_ne!(w[0].kind, w[1].kind);
        }
        let depths = node_depths(&g).unwrap();
        assert_eq!(depths[other.index()], 1);
        assert_eq!(depths[p2.index()], 3);
    }
}

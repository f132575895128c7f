//! Line-oriented `pcirc v1` model format.
//!
//! ```text
//! pcirc 1 <num_vars> <num_nodes> <num_param_slots>
//! I <id> <var> <ncat> <slot0>
//! P <id> <k> <c1> .. <ck>
//! S <id> <k> <c1> <slot1> .. <ck> <slotk>
//! ROOT <id>
//! TIE <slot> <group>
//! PARAMS
//! <value> ...
//! ```
//!
//! Parameters are written in shortest round-trip scientific notation so a
//! parse of a written model is bit-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::SplitWhitespace;

use super::{CircuitGraph, Node, NodeId, VarId};
use crate::error::{Error, Result};

pub fn write_model(g: &CircuitGraph) -> String {
    let mut out = String::with_capacity(32 * (g.num_nodes() + g.num_param_slots()));
    let _ = writeln!(out, "pcirc 1 {} {} {}", g.num_vars(), g.num_nodes(), g.num_param_slots());
    for (i, node) in g.nodes().iter().enumerate() {
        match node {
            Node::Input { var, num_categories, pmf_slot } => {
                let _ = writeln!(out, "I {i} {} {num_categories} {pmf_slot}", var.0);
            }
            Node::Product { children } => {
                let _ = write!(out, "P {i} {}", children.len());
                for c in children {
                    let _ = write!(out, " {}", c.0);
                }
                out.push('\n');
            }
            Node::Sum { children, slots } => {
                let _ = write!(out, "S {i} {}", children.len());
                for (c, s) in children.iter().zip(slots) {
                    let _ = write!(out, " {} {s}", c.0);
                }
                out.push('\n');
            }
        }
    }
    if let Some(r) = g.explicit_root() {
        let _ = writeln!(out, "ROOT {}", r.0);
    }
    for (slot, group) in g.tying() {
        let _ = writeln!(out, "TIE {slot} {group}");
    }
    out.push_str("PARAMS\n");
    for v in g.params() {
        let _ = writeln!(out, "{v:e}");
    }
    out
}

struct Fields<'a> {
    line: usize,
    it: SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.it.next().ok_or_else(|| Error::parse(self.line, format!("missing {what}")))?;
        tok.parse().map_err(|_| Error::parse(self.line, format!("bad {what} `{tok}`")))
    }

    fn finish(mut self) -> Result<()> {
        match self.it.next() {
            Some(tok) => Err(Error::parse(self.line, format!("unexpected trailing token `{tok}`"))),
            None => Ok(()),
        }
    }
}

pub fn parse_model(text: &str) -> Result<CircuitGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (hline, header) = lines.next().ok_or_else(|| Error::parse(1, "empty model file"))?;
    let mut h = Fields { line: hline, it: header.split_whitespace() };
    if h.next::<String>("magic")? != "pcirc" {
        return Err(Error::parse(hline, "expected `pcirc` header"));
    }
    let version: u32 = h.next("version")?;
    if version != 1 {
        return Err(Error::parse(hline, format!("unsupported format version {version}")));
    }
    let num_vars: u32 = h.next("num_vars")?;
    let num_nodes: usize = h.next("num_nodes")?;
    let num_slots: usize = h.next("num_param_slots")?;
    h.finish()?;

    let mut nodes: Vec<Option<Node>> = vec![None; num_nodes];
    let mut root = None;
    let mut tying = BTreeMap::new();
    let mut params = Vec::with_capacity(num_slots);
    let mut in_params = false;

    for (line, content) in lines {
        if in_params {
            for tok in content.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::parse(line, format!("bad parameter `{tok}`")))?;
                params.push(v);
            }
            continue;
        }
        let mut f = Fields { line, it: content.split_whitespace() };
        let tag: String = f.next("record tag")?;
        match tag.as_str() {
            "I" | "P" | "S" => {
                let id: usize = f.next("node id")?;
                if id >= num_nodes {
                    return Err(Error::parse(line, format!("node id {id} exceeds declared count {num_nodes}")));
                }
                if nodes[id].is_some() {
                    return Err(Error::parse(line, format!("node {id} defined twice")));
                }
                let node = match tag.as_str() {
                    "I" => Node::Input {
                        var: VarId(f.next("variable")?),
                        num_categories: f.next("category count")?,
                        pmf_slot: f.next("pmf slot")?,
                    },
                    "P" => {
                        let k: usize = f.next("child count")?;
                        let children = (0..k).map(|_| f.next("child id").map(NodeId)).collect::<Result<_>>()?;
                        Node::Product { children }
                    }
                    _ => {
                        let k: usize = f.next("child count")?;
                        let mut children = Vec::with_capacity(k);
                        let mut slots = Vec::with_capacity(k);
                        for _ in 0..k {
                            children.push(NodeId(f.next("child id")?));
                            slots.push(f.next("parameter slot")?);
                        }
                        Node::Sum { children, slots }
                    }
                };
                f.finish()?;
                nodes[id] = Some(node);
            }
            "ROOT" => {
                root = Some(NodeId(f.next("root id")?));
                f.finish()?;
            }
            "TIE" => {
                let slot: u32 = f.next("slot")?;
                let group: u32 = f.next("group")?;
                f.finish()?;
                tying.insert(slot, group);
            }
            "PARAMS" => {
                f.finish()?;
                in_params = true;
            }
            other => return Err(Error::parse(line, format!("unknown record `{other}`"))),
        }
    }
    if params.len() != num_slots {
        return Err(Error::parse(0, format!("expected {num_slots} parameters, found {}", params.len())));
    }
    let nodes = nodes
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| Error::parse(0, format!("node {i} is never defined"))))
        .collect::<Result<Vec<_>>>()?;
    CircuitGraph::from_parts(num_vars, nodes, params, tying, root)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mixture() -> CircuitGraph {
        let mut g = CircuitGraph::new(2);
        let a = g.add_input(VarId(0), &[0.1, 0.9]).unwrap();
        let b = g.add_input(VarId(1), &[1.0 / 3.0, 2.0 / 3.0]).unwrap();
        let c = g.add_input(VarId(0), &[0.5, 0.5]).unwrap();
        let d = g.add_input(VarId(1), &[0.25, 0.75]).unwrap();
        let p1 = g.add_product(&[a, b]).unwrap();
        let p2 = g.add_product(&[c, d]).unwrap();
        g.add_sum(&[p1, p2], &[0.3, 0.7]).unwrap();
        g
    }

    #[test]
    fn written_model_reparses_byte_identical() {
        let g = mixture();
        let text = write_model(&g);
        let back = parse_model(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(write_model(&back), text);
    }

    #[test]
    fn root_and_tie_records() {
        let mut g = mixture();
        g.tie(0, 5).unwrap();
        g.tie(2, 5).unwrap();
        g.set_root(NodeId(6)).unwrap();
        let back = parse_model(&write_model(&g)).unwrap();
        assert_eq!(back.explicit_root(), Some(NodeId(6)));
        assert_eq!(back.tying().get(&2), Some(&5));
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(parse_model("").is_err());
        assert!(parse_model("pcirc 2 1 1 2\n").is_err());
        assert!(parse_model("pcirc 1 1 1 2\nI 0 0 2 0\nPARAMS\n0.5\n").is_err());
        assert!(parse_model("pcirc 1 1 2 2\nI 0 0 2 0\nPARAMS\n0.5 0.5\n").is_err());
        assert!(parse_model("pcirc 1 1 1 2\nI 0 0 2 0\nQ 1\nPARAMS\n0.5 0.5\n").is_err());
        assert!(parse_model("pcirc 1 1 1 2\nI 0 3 2 0\nPARAMS\n0.5 0.5\n").is_err());
        let ok = parse_model("pcirc 1 1 1 2\n# comment\nI 0 0 2 0\nPARAMS\n0.5 0.5\n").unwrap();
        assert!(ok.validate().is_valid());
    }

    proptest! {
        #[test]
        fn parameters_round_trip_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut g = CircuitGraph::new(1);
            g.alloc_params(&values);
            let back = parse_model(&write_model(&g)).unwrap();
            let bits: Vec<u64> = back.params().iter().map(|v| v.to_bits()).collect();
            let expect: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(bits, expect);
        }
    }
}

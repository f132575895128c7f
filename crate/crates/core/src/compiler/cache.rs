//! Binary cache of compiled circuits.
//!
//! Everything is little-endian: index tensors are stored as `u32`, parameters
//! as `f64`. The header carries a SHA-256 of the graph structure and compile
//! settings; parameter values are not hashed and are reloaded from the model
//! when a cache is opened, so a retrained model can reuse its cache.

use std::io::{Cursor, Read};

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::*;
use crate::graph::write_model;

const MAGIC: &[u8; 4] = b"PCCC";
const VERSION: u32 = 1;

pub fn structure_hash(g: &CircuitGraph, cfg: &CompileConfig) -> [u8; 32] {
    let text = write_model(g);
    let structure = text.split("PARAMS\n").next().unwrap_or("");
    let mut h = Sha256::new();
    h.update(structure.as_bytes());
    h.update(format!("{cfg:?}").as_bytes());
    h.finalize().into()
}

struct W(Vec<u8>);

impl W {
    fn u32(&mut self, v: u32) {
        self.0.write_u32::<LE>(v).unwrap();
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).unwrap();
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).unwrap();
    }
    fn u32s(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u32(x);
        }
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn stage(&mut self, s: &ElementStage) {
        self.u32s(&s.ptr);
        self.u32s(&s.src);
        self.u32s(&s.product);
        self.u32s(&s.nodes);
    }
    fn plan(&mut self, p: &PartitionPlan) {
        self.u32s(&p.capacities);
        self.u32s(&p.assignment);
        self.u64(p.overhead);
        self.u64(p.target_overhead);
    }
}

struct R<'a>(Cursor<&'a [u8]>);

fn truncated(_: std::io::Error) -> Error {
    Error::Cache("file is truncated".into())
}

impl R<'_> {
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }
    fn len(&mut self, width: u64) -> Result<usize> {
        let n = self.u64()?;
        let left = self.0.get_ref().len() as u64 - self.0.position();
        if n.saturating_mul(width) > left {
            return Err(Error::Cache("vector length exceeds file size".into()));
        }
        Ok(n as usize)
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn stage(&mut self) -> Result<ElementStage> {
        Ok(ElementStage { ptr: self.u32s()?, src: self.u32s()?, product: self.u32s()?, nodes: self.u32s()? })
    }
    fn plan(&mut self) -> Result<PartitionPlan> {
        Ok(PartitionPlan {
            capacities: self.u32s()?,
            assignment: self.u32s()?,
            overhead: self.u64()?,
            target_overhead: self.u64()?,
        })
    }
}

pub fn to_bytes(c: &CompiledCircuit) -> Vec<u8> {
    let mut w = W(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.0.extend_from_slice(&c.graph_hash);
    let cfg = &c.cfg;
    for v in [cfg.k_m as u64, cfg.k_n as u64, cfg.max_groups as u64, cfg.round_threshold as u64] {
        w.u64(v);
    }
    w.f64(cfg.tol);
    w.u32(cfg.round_quantum);
    w.u32(cfg.tie_writer_threshold);
    w.f64(cfg.min_block_efficiency);
    for v in [c.num_vars, c.num_nodes, c.reserve_m, c.reserve_n, c.value_rows, c.scratch_rows, c.num_products] {
        w.u32(v);
    }
    w.u32(c.inputs.row_start);
    w.u32s(&c.inputs.nodes);
    w.u32s(&c.inputs.var);
    w.u32s(&c.inputs.ncat);
    w.u32s(&c.inputs.theta_offset);

    w.u64(c.sum_layers.len() as u64);
    for l in &c.sum_layers {
        for v in [l.depth, l.k_m, l.k_n, l.row_start, l.num_rows, l.num_sums, l.num_children] {
            w.u32(v);
        }
        w.u64(l.num_edges);
        w.u32s(&l.sum_nodes);
        w.stage(&l.stage);
        w.u64(l.groups.len() as u64);
        for g in &l.groups {
            for v in [g.k_m, g.k_n, g.c_m, g.c_n] {
                w.u32(v);
            }
            w.u32s(&g.sum_ids);
            w.u32s(&g.prod_ids);
            w.u32s(&g.param_ids);
        }
        w.u64(l.back_groups.len() as u64);
        for g in &l.back_groups {
            for v in [g.k_n, g.k_m, g.c_n, g.c_m] {
                w.u32(v);
            }
            w.u32s(&g.ch_ids);
            w.u32s(&g.par_ids);
            w.u32s(&g.par_param_ids);
        }
        w.u64(l.pairs.len() as u64);
        for p in &l.pairs {
            for v in [p.sum_row, p.child_row, p.theta, p.flow] {
                w.u32(v);
            }
        }
        let r = &l.report;
        for v in [r.full_pairs, r.empty_pairs, r.partial_pairs, r.padded_sums, r.padded_children, r.real_edges] {
            w.u64(v);
        }
        w.plan(&l.forward_plan);
        w.plan(&l.backward_plan);
    }
    w.u32(c.root_row);
    match &c.root_stage {
        Some(s) => {
            w.u32(1);
            w.stage(s);
        }
        None => w.u32(0),
    }
    w.u32s(&c.node_row);
    w.u32s(&c.product_row);

    let p = &c.params;
    w.f64s(&p.theta);
    w.u32s(&p.phys_key);
    w.u64(p.ranges.len() as u64);
    for r in &p.ranges {
        w.u32(r.offset);
        w.u32(r.len);
        w.u32(r.writers);
        w.u32s(&r.replicas);
    }
    w.u64(p.reductions.len() as u64);
    for r in &p.reductions {
        w.u32(r.from);
        w.u32(r.to);
        w.u32(r.len);
    }
    w.u64(p.flow_len as u64);
    w.u64(p.zero_len as u64);
    w.u32s(&p.slot_keys);
    w.f64s(&p.key_values);
    w.u64(p.norm_groups.len() as u64);
    for g in &p.norm_groups {
        w.u32(match g.kind {
            NormKind::Sum => 0,
            NormKind::Input => 1,
        });
        w.u32(g.node.0);
        w.u32s(&g.keys);
    }
    w.u32(p.tie_writer_threshold);
    w.0
}

pub fn from_bytes(bytes: &[u8]) -> Result<CompiledCircuit> {
    let mut r = R(Cursor::new(bytes));
    let mut magic = [0u8; 4];
    r.0.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Cache("not a compiled-circuit cache".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Cache(format!("unsupported cache version {version}")));
    }
    let mut graph_hash = [0u8; 32];
    r.0.read_exact(&mut graph_hash).map_err(truncated)?;
    let cfg = CompileConfig {
        k_m: r.u64()? as usize,
        k_n: r.u64()? as usize,
        max_groups: r.u64()? as usize,
        round_threshold: r.u64()? as usize,
        tol: r.f64()?,
        round_quantum: r.u32()?,
        tie_writer_threshold: r.u32()?,
        min_block_efficiency: r.f64()?,
    };
    let (num_vars, num_nodes, reserve_m, reserve_n, value_rows, scratch_rows, num_products) =
        (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let inputs = InputIr {
        row_start: r.u32()?,
        nodes: r.u32s()?,
        var: r.u32s()?,
        ncat: r.u32s()?,
        theta_offset: r.u32s()?,
    };
    let num_layers = r.len(1)?;
    let mut sum_layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let (depth, k_m, k_n, row_start, num_rows, num_sums, num_children) =
            (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let num_edges = r.u64()?;
        let sum_nodes = r.u32s()?;
        let stage = r.stage()?;
        let n = r.len(1)?;
        let mut groups = Vec::with_capacity(n);
        for _ in 0..n {
            groups.push(SumGroupIr {
                k_m: r.u32()?,
                k_n: r.u32()?,
                c_m: r.u32()?,
                c_n: r.u32()?,
                sum_ids: r.u32s()?,
                prod_ids: r.u32s()?,
                param_ids: r.u32s()?,
            });
        }
        let n = r.len(1)?;
        let mut back_groups = Vec::with_capacity(n);
        for _ in 0..n {
            back_groups.push(SumGroupBackIr {
                k_n: r.u32()?,
                k_m: r.u32()?,
                c_n: r.u32()?,
                c_m: r.u32()?,
                ch_ids: r.u32s()?,
                par_ids: r.u32s()?,
                par_param_ids: r.u32s()?,
            });
        }
        let n = r.len(16)?;
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            pairs.push(BlockPair { sum_row: r.u32()?, child_row: r.u32()?, theta: r.u32()?, flow: r.u32()? });
        }
        let report = BlockReport {
            full_pairs: r.u64()?,
            empty_pairs: r.u64()?,
            partial_pairs: r.u64()?,
            padded_sums: r.u64()?,
            padded_children: r.u64()?,
            real_edges: r.u64()?,
        };
        let forward_plan = r.plan()?;
        let backward_plan = r.plan()?;
        sum_layers.push(SumLayerIr {
            depth,
            k_m,
            k_n,
            row_start,
            num_rows,
            num_sums,
            num_children,
            num_edges,
            sum_nodes,
            stage,
            groups,
            back_groups,
            pairs,
            report,
            forward_plan,
            backward_plan,
        });
    }
    let root_row = r.u32()?;
    let root_stage = match r.u32()? {
        0 => None,
        _ => Some(r.stage()?),
    };
    let node_row = r.u32s()?;
    let product_row = r.u32s()?;

    let theta = r.f64s()?;
    let phys_key = r.u32s()?;
    let n = r.len(1)?;
    let mut ranges = Vec::with_capacity(n);
    for _ in 0..n {
        ranges.push(params::PhysRange { offset: r.u32()?, len: r.u32()?, writers: r.u32()?, replicas: r.u32s()? });
    }
    let n = r.len(12)?;
    let mut reductions = Vec::with_capacity(n);
    for _ in 0..n {
        reductions.push(params::Reduction { from: r.u32()?, to: r.u32()?, len: r.u32()? });
    }
    let flow_len = r.u64()? as usize;
    let zero_len = r.u64()? as usize;
    let slot_keys = r.u32s()?;
    let key_values = r.f64s()?;
    let n = r.len(1)?;
    let mut norm_groups = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = match r.u32()? {
            0 => NormKind::Sum,
            1 => NormKind::Input,
            k => return Err(Error::Cache(format!("unknown normalization kind {k}"))),
        };
        norm_groups.push(NormGroup { kind, node: crate::graph::NodeId(r.u32()?), keys: r.u32s()? });
    }
    let tie_writer_threshold = r.u32()?;
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Cache("trailing bytes after cache payload".into()));
    }
    Ok(CompiledCircuit {
        cfg,
        num_vars,
        num_nodes,
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
        params: ParamStore {
            theta,
            phys_key,
            ranges,
            reductions,
            flow_len,
            zero_len,
            slot_keys,
            key_values,
            norm_groups,
            tie_writer_threshold,
        },
        graph_hash,
    })
}

/// Reads a cache and checks that it was built from `g` with `cfg`. Parameter
/// values are taken from `g`.
pub fn load_for(bytes: &[u8], g: &CircuitGraph, cfg: &CompileConfig) -> Result<CompiledCircuit> {
    let mut c = from_bytes(bytes)?;
    if c.graph_hash != structure_hash(g, cfg) {
        return Err(Error::Cache("cache was built from a different circuit or configuration".into()));
    }
    c.sync_params(g);
    Ok(c)
}

pub fn save(c: &CompiledCircuit, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_bytes(c))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeId, VarId};

    fn mixture(w: f64) -> CircuitGraph {
        let mut g = CircuitGraph::new(2);
        let xs: Vec<NodeId> = (0..3).map(|i| g.add_input(VarId(0), &[0.2 * i as f64, 1.0 - 0.2 * i as f64]).unwrap()).collect();
        let ys: Vec<NodeId> = (0..3).map(|_| g.add_input(VarId(1), &[0.3, 0.7]).unwrap()).collect();
        let ps: Vec<NodeId> = (0..3).map(|i| g.add_product(&[xs[i], ys[i]]).unwrap()).collect();
        g.add_sum(&ps, &[w, 0.5 - w, 0.5]).unwrap();
        g
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let g = mixture(0.1);
        let cfg = CompileConfig::with_block_size(2);
        let c = compile(&g, &cfg).unwrap();
        let bytes = to_bytes(&c);
        assert_eq!(from_bytes(&bytes).unwrap(), c);
        assert_eq!(to_bytes(&compile(&g, &cfg).unwrap()), bytes);
    }

    #[test]
    fn parameters_are_reloaded_and_structure_checked() {
        let cfg = CompileConfig::default();
        let bytes = to_bytes(&compile(&mixture(0.1), &cfg).unwrap());
        let retrained = mixture(0.4);
        let loaded = load_for(&bytes, &retrained, &cfg).unwrap();
        assert_eq!(loaded, compile(&retrained, &cfg).unwrap());
        assert!(load_for(&bytes, &retrained, &CompileConfig::with_block_size(1)).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"nope").is_err());
    }
}

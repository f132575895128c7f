//! Batched execution of compiled circuits.
//!
//! A batch is cut into tiles of `kb` samples. Forward and backward work on
//! every tile independently, so tiles are the unit of parallelism; only the
//! parameter-flow reduction reads all tiles at once, and it is parallelized
//! over disjoint destination ranges instead.

pub mod em;
pub mod kernels;
pub mod metrics;

use std::time::{Duration, Instant};

use crate::compiler::{CompiledCircuit, ElementStage, SumLayerIr, NONE, NO_KEY};
use crate::error::{Error, Result};
use crate::graph::NodeId;
use crate::par;

pub use em::{em_step_full, em_step_mini, EmAccumulator};
pub use kernels::Real;
pub use metrics::{log_likelihood_metrics, Metrics};

/// Default number of samples per tile.
pub const DEFAULT_BATCH_TILE: usize = 64;

const MISSING: u32 = u32::MAX;

/// Samples in row-major order; missing entries are marginalized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    num_vars: usize,
    values: Vec<u32>,
}

impl Batch {
    pub fn new(num_vars: usize) -> Self {
        Batch { num_vars, values: Vec::new() }
    }

    pub fn from_rows<'a>(num_vars: usize, rows: impl IntoIterator<Item = &'a [Option<u32>]>) -> Self {
        let mut b = Batch::new(num_vars);
        for r in rows {
            b.push(r);
        }
        b
    }

    pub fn push(&mut self, row: &[Option<u32>]) {
        assert_eq!(row.len(), self.num_vars, "sample width does not match the batch");
        self.values.extend(row.iter().map(|v| v.unwrap_or(MISSING)));
    }

    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.num_vars).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    #[inline]
    pub fn get(&self, sample: usize, var: usize) -> Option<u32> {
        match self.values[sample * self.num_vars + var] {
            MISSING => None,
            v => Some(v),
        }
    }

    pub fn is_missing(&self, sample: usize, var: usize) -> bool {
        self.get(sample, var).is_none()
    }

    pub fn row(&self, sample: usize) -> Vec<Option<u32>> {
        (0..self.num_vars).map(|v| self.get(sample, v)).collect()
    }

    /// Samples `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch { num_vars: self.num_vars, values: self.values[range.start * self.num_vars..range.end * self.num_vars].to_vec() }
    }

    /// Samples at the given indices, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut values = Vec::with_capacity(indices.len() * self.num_vars);
        for &i in indices {
            values.extend_from_slice(&self.values[i * self.num_vars..(i + 1) * self.num_vars]);
        }
        Batch { num_vars: self.num_vars, values }
    }
}

/// Selects one of a tile's buffers.
type BufOf<R> = fn(&Tile<R>) -> &Vec<R>;

/// Buffers of one batch tile.
#[derive(Debug, Clone)]
struct Tile<R> {
    start: usize,
    cols: usize,
    vals: Vec<R>,
    flows: Vec<R>,
    /// `ln(f / p)` of sum rows during backward.
    ratio: Vec<R>,
    /// `exp(ratio - block max)`.
    nf_exp: Vec<R>,
    nf_max: Vec<R>,
    elems: Vec<R>,
    elem_exp: Vec<R>,
    elem_max: Vec<R>,
    elem_flow: Vec<R>,
    prod_flow: Vec<R>,
}

impl<R: Real> Tile<R> {
    fn new(c: &CompiledCircuit, kb: usize, start: usize, cols: usize) -> Self {
        let v = c.value_rows as usize * kb;
        let s = c.scratch_rows as usize * kb;
        let ninf = R::neg_infinity();
        let mut vals = vec![R::zero(); v];
        vals[..c.reserve_m as usize * kb].fill(ninf);
        let mut elems = vec![R::zero(); s];
        elems[..c.reserve_n as usize * kb].fill(ninf);
        Tile {
            start,
            cols,
            vals,
            flows: vec![R::zero(); v],
            ratio: vec![R::zero(); v],
            nf_exp: vec![R::zero(); v],
            nf_max: vec![ninf; v],
            elems,
            elem_exp: vec![R::zero(); s],
            elem_max: vec![ninf; s],
            elem_flow: vec![R::zero(); s],
            prod_flow: vec![R::zero(); c.num_products as usize * kb],
        }
    }
}

/// Parameter-flow work writing one destination range.
#[derive(Debug, Clone)]
struct ParamTask {
    flow: u32,
    pairs: Vec<u32>,
}

/// Executes a compiled circuit on batches. Parameters are held in the
/// engine's float type and can be replaced between batches.
pub struct Engine<'c, R: Real = f64> {
    c: &'c CompiledCircuit,
    theta: Vec<R>,
    log_theta: Vec<R>,
    batch_tile: usize,
    kb: usize,
    tiles: Vec<Tile<R>>,
    batch: Option<Batch>,
    param_flow: Vec<R>,
    key_flows: Vec<f64>,
    tasks: Vec<Vec<ParamTask>>,
    backward_done: bool,
    timings: LayerTimings,
}

/// Per-layer wall times; backward times include the parameter flows.
#[derive(Debug, Clone, Default)]
pub struct LayerTimings {
    pub inputs: Duration,
    pub forward: Vec<Duration>,
    pub backward: Vec<Duration>,
}

impl<'c, R: Real> Engine<'c, R> {
    pub fn new(c: &'c CompiledCircuit) -> Self {
        Self::with_batch_tile(c, DEFAULT_BATCH_TILE)
    }

    pub fn with_batch_tile(c: &'c CompiledCircuit, batch_tile: usize) -> Self {
        let tasks = c
            .sum_layers
            .iter()
            .map(|l| {
                let mut order: Vec<u32> = (0..l.pairs.len() as u32).collect();
                order.sort_by_key(|&p| (l.pairs[p as usize].flow, p));
                let mut tasks: Vec<ParamTask> = Vec::new();
                for p in order {
                    let flow = l.pairs[p as usize].flow;
                    match tasks.last_mut() {
                        Some(t) if t.flow == flow => t.pairs.push(p),
                        _ => tasks.push(ParamTask { flow, pairs: vec![p] }),
                    }
                }
                tasks
            })
            .collect();
        let mut e = Engine {
            c,
            theta: Vec::new(),
            log_theta: Vec::new(),
            batch_tile: batch_tile.max(1),
            kb: 0,
            tiles: Vec::new(),
            batch: None,
            param_flow: vec![R::zero(); c.params.flow_len],
            key_flows: vec![0.0; c.params.num_keys()],
            tasks,
            backward_done: false,
            timings: LayerTimings::default(),
        };
        e.load_theta(&c.params.theta);
        e
    }

    fn load_theta(&mut self, theta: &[f64]) {
        self.theta = theta.iter().map(|&t| R::from_f64(t).unwrap()).collect();
        self.log_theta = self.theta.iter().map(|t| t.ln()).collect();
    }

    pub fn circuit(&self) -> &'c CompiledCircuit {
        self.c
    }

    /// Replaces the parameters by new logical key values.
    pub fn set_key_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.c.params.num_keys() {
            return Err(Error::Config(format!("expected {} parameters, got {}", self.c.params.num_keys(), values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!("parameter {v} is not a finite probability")));
        }
        let theta: Vec<f64> = self
            .c
            .params
            .phys_key
            .iter()
            .map(|&k| if k == NO_KEY { 0.0 } else { values[k as usize] })
            .collect();
        self.load_theta(&theta);
        self.batch = None;
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.num_vars() != self.c.num_vars as usize {
            return Err(Error::Data(format!(
                "batch has {} variables, circuit has {}",
                batch.num_vars(),
                self.c.num_vars
            )));
        }
        if let Some(t) = self.theta.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("non-finite parameter {t:?}")));
        }
        let inputs = &self.c.inputs;
        for (i, &var) in inputs.var.iter().enumerate() {
            for s in 0..batch.len() {
                if let Some(x) = batch.get(s, var as usize) {
                    if x >= inputs.ncat[i] {
                        return Err(Error::Data(format!(
                            "sample {s}: value {x} of variable {var} exceeds {} categories",
                            inputs.ncat[i]
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn prepare_tiles(&mut self, n: usize) {
        let kb = self.batch_tile.min(n.max(1));
        let num_tiles = n.div_ceil(kb).max(1);
        if kb != self.kb || self.tiles.len() != num_tiles {
            self.kb = kb;
            self.tiles = (0..num_tiles).map(|t| Tile::new(self.c, kb, t * kb, 0)).collect();
        }
        for (t, tile) in self.tiles.iter_mut().enumerate() {
            tile.start = t * kb;
            tile.cols = kb.min(n.saturating_sub(t * kb));
        }
    }

    /// Root log-likelihood of every sample.
    pub fn forward(&mut self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        self.prepare_tiles(batch.len());
        let (c, kb) = (self.c, self.kb);
        let theta = &self.theta;
        let log_theta = &self.log_theta;
        let t0 = Instant::now();
        par::for_each_mut(&mut self.tiles, |tile| forward_inputs(c, log_theta, batch, kb, tile));
        self.timings.inputs = t0.elapsed();
        self.timings.forward.clear();
        for layer in &c.sum_layers {
            let t0 = Instant::now();
            par::for_each_mut(&mut self.tiles, |tile| forward_layer(c, layer, theta, kb, tile));
            self.timings.forward.push(t0.elapsed());
        }
        if let Some(stage) = &c.root_stage {
            let rn = c.reserve_n as usize;
            par::for_each_mut(&mut self.tiles, |tile| kernels::eval_stage(stage, &tile.vals, &mut tile.elems, rn, kb));
        }
        self.batch = Some(batch.clone());
        self.backward_done = false;
        Ok(self.root_log_likelihoods())
    }

    fn root_log_likelihoods(&self) -> Vec<f64> {
        let kb = self.kb;
        let (row, buf_of): (usize, BufOf<R>) = if self.c.root_row != NONE {
            (self.c.root_row as usize, |t| &t.vals)
        } else {
            (self.c.reserve_n as usize, |t| &t.elems)
        };
        let mut out = Vec::new();
        for t in &self.tiles {
            let buf = buf_of(t);
            out.extend(buf[row * kb..row * kb + t.cols].iter().map(|v| v.to_f64().unwrap()));
        }
        out
    }

    /// Node and parameter flows of the last forward batch.
    pub fn backward(&mut self) -> Result<()> {
        let batch = self.batch.take().ok_or(Error::BackwardBeforeForward)?;
        let (c, kb) = (self.c, self.kb);
        self.timings.backward = vec![Duration::ZERO; c.sum_layers.len()];
        let theta = &self.theta;
        par::for_each_mut(&mut self.tiles, |tile| backward_root(c, kb, tile));
        self.param_flow.iter_mut().for_each(|f| *f = R::zero());
        for (li, layer) in c.sum_layers.iter().enumerate().rev() {
            let t0 = Instant::now();
            par::for_each_mut(&mut self.tiles, |tile| backward_layer(c, li, theta, kb, tile));
            let (km, kn) = (layer.k_m as usize, layer.k_n as usize);
            let ranges: Vec<(usize, usize)> = self.tasks[li].iter().map(|t| (t.flow as usize, km * kn)).collect();
            let dests = par::split_ranges(&mut self.param_flow, &ranges);
            let mut work: Vec<(&ParamTask, &mut [R])> = self.tasks[li].iter().zip(dests).collect();
            let tiles = &self.tiles;
            par::for_each_mut(&mut work, |(task, dest)| {
                let mut cum = vec![R::zero(); km * kn];
                let mut weights = vec![R::zero(); kn * kb];
                for &p in &task.pairs {
                    let pair = &layer.pairs[p as usize];
                    cum.iter_mut().for_each(|v| *v = R::zero());
                    for t in tiles {
                        kernels::pair_flow_tile(
                            pair.sum_row as usize,
                            pair.child_row as usize,
                            km,
                            kn,
                            kb,
                            t.cols,
                            &t.nf_exp,
                            &t.nf_max,
                            &t.elems,
                            &mut weights,
                            &mut cum,
                        );
                    }
                    let th = &theta[pair.theta as usize..][..km * kn];
                    for ((d, &t), &s) in dest.iter_mut().zip(th).zip(&cum) {
                        *d = *d + t * s;
                    }
                }
            });
            self.timings.backward[li] = t0.elapsed();
        }
        for r in &c.params.reductions {
            for i in 0..r.len as usize {
                let v = self.param_flow[r.from as usize + i];
                self.param_flow[r.to as usize + i] = self.param_flow[r.to as usize + i] + v;
            }
        }
        self.collect_key_flows(&batch);
        self.batch = Some(batch);
        self.backward_done = true;
        Ok(())
    }

    fn collect_key_flows(&mut self, batch: &Batch) {
        let c = self.c;
        let keys = &c.params.phys_key;
        self.key_flows.iter_mut().for_each(|f| *f = 0.0);
        for (i, &k) in keys.iter().enumerate() {
            if k != NO_KEY {
                self.key_flows[k as usize] += self.param_flow[i].to_f64().unwrap();
            }
        }
        let kb = self.kb;
        let inputs = &c.inputs;
        for (i, &node) in inputs.nodes.iter().enumerate() {
            let row = c.node_row[node as usize] as usize;
            let off = inputs.theta_offset[i] as usize;
            let var = inputs.var[i] as usize;
            for t in &self.tiles {
                let flows = &t.flows[row * kb..row * kb + t.cols];
                for (b, &f) in flows.iter().enumerate() {
                    let f = f.to_f64().unwrap();
                    if f == 0.0 {
                        continue;
                    }
                    match batch.get(t.start + b, var) {
                        Some(x) => self.key_flows[keys[off + x as usize] as usize] += f,
                        None => {
                            for k in 0..inputs.ncat[i] as usize {
                                let p = self.theta[off + k].to_f64().unwrap();
                                self.key_flows[keys[off + k] as usize] += f * p;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Wall times of the last forward and backward passes.
    pub fn timings(&self) -> &LayerTimings {
        &self.timings
    }

    fn require_backward(&self) -> Result<()> {
        if self.backward_done {
            Ok(())
        } else {
            Err(Error::BackwardBeforeForward)
        }
    }

    /// Flow of every logical parameter key, summed over the batch.
    pub fn key_flows(&self) -> Result<&[f64]> {
        self.require_backward()?;
        Ok(&self.key_flows)
    }

    /// Physical parameter flows after replica reduction.
    pub fn physical_flows(&self) -> Result<Vec<f64>> {
        self.require_backward()?;
        Ok(self.param_flow[..self.c.params.theta.len()].iter().map(|v| v.to_f64().unwrap()).collect())
    }

    /// Per-sample flow of a node.
    pub fn node_flows(&self, node: NodeId) -> Result<Vec<f64>> {
        self.require_backward()?;
        let kb = self.kb;
        let (buf_of, row): (BufOf<R>, u32) = match self.c.node_row.get(node.index()) {
            None => return Err(Error::UnknownNode(node.0)),
            Some(&r) if r != NONE => (|t| &t.flows, r),
            _ => (|t| &t.prod_flow, self.c.product_row[node.index()]),
        };
        let row = row as usize;
        Ok(self
            .tiles
            .iter()
            .flat_map(|t| buf_of(t)[row * kb..row * kb + t.cols].iter().map(|v| v.to_f64().unwrap()))
            .collect())
    }

    /// Per-sample log-probability of an input or sum node from the last
    /// forward pass; products are not retained and give `None`.
    pub fn node_log_values(&self, node: NodeId) -> Option<Vec<f64>> {
        self.batch.as_ref()?;
        let row = *self.c.node_row.get(node.index())?;
        if row == NONE {
            return None;
        }
        let (row, kb) = (row as usize, self.kb);
        Some(
            self.tiles
                .iter()
                .flat_map(|t| t.vals[row * kb..row * kb + t.cols].iter().map(|v| v.to_f64().unwrap()))
                .collect(),
        )
    }
}

fn forward_inputs<R: Real>(c: &CompiledCircuit, log_theta: &[R], batch: &Batch, kb: usize, tile: &mut Tile<R>) {
    let inputs = &c.inputs;
    for (i, &var) in inputs.var.iter().enumerate() {
        let row = (inputs.row_start as usize + i) * kb;
        let off = inputs.theta_offset[i] as usize;
        let dst = &mut tile.vals[row..row + kb];
        for (b, d) in dst.iter_mut().enumerate() {
            *d = match (b < tile.cols).then(|| batch.get(tile.start + b, var as usize)).flatten() {
                Some(x) => log_theta[off + x as usize],
                None => R::zero(),
            };
        }
    }
}

fn forward_layer<R: Real>(c: &CompiledCircuit, layer: &SumLayerIr, theta: &[R], kb: usize, tile: &mut Tile<R>) {
    let rn = c.reserve_n as usize;
    kernels::eval_stage(&layer.stage, &tile.vals, &mut tile.elems, rn, kb);
    if layer.k_m == 1 && layer.k_n == 1 {
        for g in &layer.groups {
            kernels::forward_group_scalar(g, theta, rn, kb, &tile.elems, &mut tile.vals);
        }
    } else {
        let rows = rn..rn + layer.stage.len();
        kernels::prepare_blocks(&tile.elems, rows, layer.k_n as usize, kb, &mut tile.elem_exp, &mut tile.elem_max);
        for g in &layer.groups {
            kernels::forward_group_blocked(g, theta, rn, kb, &tile.elem_exp, &tile.elem_max, &mut tile.vals);
        }
    }
}

fn seed_row<R: Real>(buf: &mut [R], row: usize, kb: usize, cols: usize) {
    let dst = &mut buf[row * kb..(row + 1) * kb];
    for (b, d) in dst.iter_mut().enumerate() {
        *d = if b < cols { R::one() } else { R::zero() };
    }
}

fn backward_root<R: Real>(c: &CompiledCircuit, kb: usize, tile: &mut Tile<R>) {
    tile.flows.iter_mut().for_each(|f| *f = R::zero());
    tile.prod_flow.iter_mut().for_each(|f| *f = R::zero());
    let rn = c.reserve_n as usize;
    match &c.root_stage {
        None => seed_row(&mut tile.flows, c.root_row as usize, kb, tile.cols),
        Some(stage) => {
            seed_row(&mut tile.elem_flow, rn, kb, tile.cols);
            kernels::push_stage_flows(stage, rn, &tile.elem_flow, &mut tile.flows, &mut tile.prod_flow, kb);
        }
    }
}

fn backward_layer<R: Real>(c: &CompiledCircuit, li: usize, theta: &[R], kb: usize, tile: &mut Tile<R>) {
    let layer = &c.sum_layers[li];
    let stage: &ElementStage = &layer.stage;
    let (rn, rm) = (c.reserve_n as usize, c.reserve_m as usize);
    kernels::eval_stage(stage, &tile.vals, &mut tile.elems, rn, kb);
    let rows = layer.row_start as usize..(layer.row_start + layer.num_rows) as usize;
    kernels::log_flow_ratio(&tile.vals, &tile.flows, rows.clone(), kb, &mut tile.ratio);
    kernels::prepare_blocks(&tile.ratio, rows, layer.k_m as usize, kb, &mut tile.nf_exp, &mut tile.nf_max);
    tile.elem_flow[rn * kb..(rn + stage.len()) * kb].fill(R::zero());
    if layer.k_m == 1 && layer.k_n == 1 {
        for g in &layer.back_groups {
            kernels::backward_group_scalar(g, theta, rm, kb, &tile.ratio, &tile.elems, &mut tile.elem_flow);
        }
    } else {
        for g in &layer.back_groups {
            kernels::backward_group(g, theta, rm, kb, &tile.nf_exp, &tile.nf_max, &tile.elems, &mut tile.elem_flow);
        }
    }
    kernels::push_stage_flows(stage, rn, &tile.elem_flow, &mut tile.flows, &mut tile.prod_flow, kb);
}

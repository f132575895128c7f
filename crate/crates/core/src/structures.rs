//! Generators for common circuit families: hidden Markov models, pyramid
//! decompositions over grids, and randomized region graphs.
//!
//! Every generator is a pure function of its configuration; parameters are
//! drawn from a flat Dirichlet using a stream of the configured seed.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{CircuitGraph, NodeId, VarId};

const PARAM_STREAM: u64 = 0;
const STRUCTURE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructureKind {
    Hmm,
    Pd,
    RatSpn,
}

impl FromStr for StructureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmm" => Ok(StructureKind::Hmm),
            "pd" => Ok(StructureKind::Pd),
            "ratspn" => Ok(StructureKind::RatSpn),
            other => Err(Error::Config(format!("unknown structure kind {other:?}"))),
        }
    }
}

impl fmt::Display for StructureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StructureKind::Hmm => "hmm",
            StructureKind::Pd => "pd",
            StructureKind::RatSpn => "ratspn",
        })
    }
}

/// Generator settings. Fields that do not apply to `kind` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureConfig {
    pub kind: StructureKind,
    /// Variable count of ratspn circuits. HMMs use `seq_len` and PD circuits
    /// the product of `shape`; a nonzero value must agree with those.
    pub num_vars: usize,
    pub hidden_dim: usize,
    /// Categories per variable (pd, ratspn).
    pub num_categories: u32,
    pub seq_len: usize,
    pub vocab_size: u32,
    pub tied: bool,
    pub shape: Vec<usize>,
    pub split_interval: usize,
    pub depth: usize,
    /// Sums per inner region; zero means `hidden_dim`.
    pub num_sums_per_region: usize,
    pub num_input_components: usize,
    pub num_repetitions: usize,
    pub seed: u64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            kind: StructureKind::Hmm,
            num_vars: 0,
            hidden_dim: 4,
            num_categories: 2,
            seq_len: 8,
            vocab_size: 10,
            tied: true,
            shape: Vec::new(),
            split_interval: 2,
            depth: 2,
            num_sums_per_region: 0,
            num_input_components: 2,
            num_repetitions: 1,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| Error::parse(line, format!("invalid value {v:?} for {key}")))
}

impl StructureConfig {
    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = StructureConfig::default();
        let mut saw_kind = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.split('#').next().unwrap().trim();
            if s.is_empty() {
                continue;
            }
            let (k, v) = s.split_once('=').ok_or_else(|| Error::parse(line, "expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "kind" => {
                    cfg.kind = v.parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
                    saw_kind = true;
                }
                "num_vars" => cfg.num_vars = parse_num(k, v, line)?,
                "hidden_dim" => cfg.hidden_dim = parse_num(k, v, line)?,
                "num_categories" => cfg.num_categories = parse_num(k, v, line)?,
                "seq_len" => cfg.seq_len = parse_num(k, v, line)?,
                "vocab_size" => cfg.vocab_size = parse_num(k, v, line)?,
                "tied" => cfg.tied = parse_num(k, v, line)?,
                "shape" => {
                    cfg.shape = v
                        .split(['x', ','])
                        .map(|d| parse_num(k, d.trim(), line))
                        .collect::<Result<_>>()?
                }
                "split_interval" => cfg.split_interval = parse_num(k, v, line)?,
                "depth" => cfg.depth = parse_num(k, v, line)?,
                "num_sums_per_region" => cfg.num_sums_per_region = parse_num(k, v, line)?,
                "num_input_components" => cfg.num_input_components = parse_num(k, v, line)?,
                "num_repetitions" => cfg.num_repetitions = parse_num(k, v, line)?,
                "seed" => cfg.seed = parse_num(k, v, line)?,
                other => return Err(Error::parse(line, format!("unknown key {other:?}"))),
            }
        }
        if !saw_kind {
            return Err(Error::Config("missing `kind`".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1".into());
        }
        match self.kind {
            StructureKind::Hmm => {
                if self.seq_len == 0 {
                    return bad("seq_len must be at least 1".into());
                }
                if self.vocab_size < 2 {
                    return bad("vocab_size must be at least 2".into());
                }
                if self.num_vars != 0 && self.num_vars != self.seq_len {
                    return bad(format!("num_vars {} disagrees with seq_len {}", self.num_vars, self.seq_len));
                }
            }
            StructureKind::Pd => {
                if self.shape.is_empty() || self.shape.contains(&0) {
                    return bad("shape must list positive axis lengths".into());
                }
                if self.split_interval == 0 {
                    return bad("split_interval must be positive".into());
                }
                let n: usize = self.shape.iter().product();
                if self.num_vars != 0 && self.num_vars != n {
                    return bad(format!("num_vars {} disagrees with shape of {n} cells", self.num_vars));
                }
                if self.num_categories == 0 {
                    return bad("num_categories must be positive".into());
                }
            }
            StructureKind::RatSpn => {
                if self.num_vars < 2 {
                    return bad("ratspn needs at least 2 variables".into());
                }
                if self.depth == 0 || self.depth >= usize::BITS as usize || (1usize << self.depth) > self.num_vars {
                    return bad(format!("depth {} needs at least 2^depth variables, have {}", self.depth, self.num_vars));
                }
                if self.num_input_components == 0 || self.num_repetitions == 0 || self.num_categories == 0 {
                    return bad("component, repetition and category counts must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Canonical `key = value` text for this kind.
    pub fn to_text(&self) -> String {
        let mut s = format!("kind = {}\nhidden_dim = {}\nseed = {}\n", self.kind, self.hidden_dim, self.seed);
        match self.kind {
            StructureKind::Hmm => {
                s += &format!("seq_len = {}\nvocab_size = {}\ntied = {}\n", self.seq_len, self.vocab_size, self.tied)
            }
            StructureKind::Pd => {
                let shape: Vec<String> = self.shape.iter().map(|d| d.to_string()).collect();
                s += &format!(
                    "shape = {}\nsplit_interval = {}\nnum_categories = {}\n",
                    shape.join("x"),
                    self.split_interval,
                    self.num_categories
                )
            }
            StructureKind::RatSpn => {
                s += &format!(
                    "num_vars = {}\ndepth = {}\nnum_sums_per_region = {}\nnum_input_components = {}\nnum_repetitions = {}\nnum_categories = {}\n",
                    self.num_vars,
                    self.depth,
                    self.sums_per_region(),
                    self.num_input_components,
                    self.num_repetitions,
                    self.num_categories
                )
            }
        }
        s
    }

    fn sums_per_region(&self) -> usize {
        if self.num_sums_per_region == 0 {
            self.hidden_dim
        } else {
            self.num_sums_per_region
        }
    }
}

/// Builds the circuit described by `cfg`.
pub fn build(cfg: &StructureConfig) -> Result<CircuitGraph> {
    cfg.validate()?;
    match cfg.kind {
        StructureKind::Hmm => build_hmm(cfg),
        StructureKind::Pd => build_pd(cfg),
        StructureKind::RatSpn => build_ratspn(cfg),
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A draw from the flat Dirichlet over `n` outcomes.
pub fn dirichlet(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Parameters of a homogeneous HMM with `k` states over `v` symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmParams {
    pub k: usize,
    pub v: usize,
    pub init: Vec<f64>,
    /// `trans[i * k + j] = P(z_{t+1} = j | z_t = i)`.
    pub trans: Vec<f64>,
    /// `emit[i * v + x] = P(x_t = x | z_t = i)`.
    pub emit: Vec<f64>,
}

impl HmmParams {
    pub fn random(k: usize, v: usize, rng: &mut impl Rng) -> Self {
        let init = dirichlet(rng, k);
        let trans = (0..k).flat_map(|_| dirichlet(rng, k)).collect();
        let emit = (0..k).flat_map(|_| dirichlet(rng, v)).collect();
        HmmParams { k, v, init, trans, emit }
    }
}

pub fn build_hmm(cfg: &StructureConfig) -> Result<CircuitGraph> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, PARAM_STREAM);
    let params = HmmParams::random(cfg.hidden_dim, cfg.vocab_size as usize, &mut rng);
    build_hmm_with_params(cfg.seq_len, &params, cfg.tied)
}

/// HMM circuit over `seq_len` tokens, built from the last step backwards:
/// `b_t(z) = e_z(x_t) * m_{t+1}(z)` with `m_{t+1}(z) = sum_j A[z, j] b_{t+1}(j)`,
/// and the root `sum_z init[z] b_1(z)`. With `tied` every step references
/// one transition block and one emission block.
pub fn build_hmm_with_params(seq_len: usize, p: &HmmParams, tied: bool) -> Result<CircuitGraph> {
    if seq_len == 0 || p.k == 0 || p.v == 0 {
        return Err(Error::Config("HMM needs at least one step, state and symbol".into()));
    }
    if p.init.len() != p.k || p.trans.len() != p.k * p.k || p.emit.len() != p.k * p.v {
        return Err(Error::Config("HMM parameter shapes do not match k and v".into()));
    }
    let (k, v) = (p.k, p.v);
    let mut g = CircuitGraph::new(seq_len as u32);
    let shared = tied.then(|| (g.alloc_params(&p.emit), g.alloc_params(&p.trans)));
    let emission = |g: &mut CircuitGraph, t: usize, z: usize| -> Result<NodeId> {
        match shared {
            Some((emit, _)) => g.add_input_shared(VarId(t as u32), v as u32, emit + (z * v) as u32),
            None => g.add_input(VarId(t as u32), &p.emit[z * v..(z + 1) * v]),
        }
    };
    let mut b: Vec<NodeId> = (0..k).map(|z| emission(&mut g, seq_len - 1, z)).collect::<Result<_>>()?;
    for t in (0..seq_len - 1).rev() {
        let mut next = Vec::with_capacity(k);
        for z in 0..k {
            let m = match shared {
                Some((_, trans)) => {
                    let slots: Vec<u32> = (0..k).map(|j| trans + (z * k + j) as u32).collect();
                    g.add_sum_shared(&b, &slots)?
                }
                None => g.add_sum(&b, &p.trans[z * k..(z + 1) * k])?,
            };
            let e = emission(&mut g, t, z)?;
            next.push(g.add_product(&[e, m])?);
        }
        b = next;
    }
    g.add_sum(&b, &p.init)?;
    Ok(g)
}

type Rect = Vec<(usize, usize)>;

struct PdBuilder<'a> {
    cfg: &'a StructureConfig,
    g: CircuitGraph,
    rng: ChaCha8Rng,
    regions: HashMap<Rect, Vec<NodeId>>,
}

impl PdBuilder<'_> {
    fn var_of(&self, rect: &Rect) -> u32 {
        rect.iter().zip(&self.cfg.shape).fold(0, |acc, (&(lo, _), &n)| acc * n + lo) as u32
    }

    /// Split positions along every axis: multiples of the interval strictly
    /// inside the region, or the midpoint of every splittable axis when
    /// there are none.
    fn splits(&self, rect: &Rect) -> Vec<(usize, usize)> {
        let step = self.cfg.split_interval;
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (axis, &(lo, hi)) in rect.iter().enumerate() {
            let first = (lo / step + 1) * step;
            out.extend((first..hi).step_by(step).map(|p| (axis, p)));
        }
        if out.is_empty() {
            for (axis, &(lo, hi)) in rect.iter().enumerate() {
                if hi - lo > 1 {
                    out.push((axis, lo + (hi - lo) / 2));
                }
            }
        }
        out
    }

    fn region(&mut self, rect: &Rect, is_root: bool) -> Result<Vec<NodeId>> {
        if let Some(nodes) = self.regions.get(rect) {
            return Ok(nodes.clone());
        }
        let h = self.cfg.hidden_dim;
        let nodes = if rect.iter().all(|&(lo, hi)| hi - lo == 1) {
            let var = VarId(self.var_of(rect));
            let mut nodes = Vec::with_capacity(h);
            for _ in 0..h {
                let pmf = dirichlet(&mut self.rng, self.cfg.num_categories as usize);
                nodes.push(self.g.add_input(var, &pmf)?);
            }
            if is_root {
                let w = dirichlet(&mut self.rng, h);
                vec![self.g.add_sum(&nodes, &w)?]
            } else {
                nodes
            }
        } else {
            let mut prods = Vec::new();
            for (axis, p) in self.splits(rect) {
                let mut left = rect.clone();
                let mut right = rect.clone();
                left[axis].1 = p;
                right[axis].0 = p;
                let a = self.region(&left, false)?;
                let b = self.region(&right, false)?;
                for &x in &a {
                    for &y in &b {
                        prods.push(self.g.add_product(&[x, y])?);
                    }
                }
            }
            let n = if is_root { 1 } else { h };
            let mut sums = Vec::with_capacity(n);
            for _ in 0..n {
                let w = dirichlet(&mut self.rng, prods.len());
                sums.push(self.g.add_sum(&prods, &w)?);
            }
            sums
        };
        self.regions.insert(rect.clone(), nodes.clone());
        Ok(nodes)
    }
}

/// Pyramid decomposition: every region holds `hidden_dim` sums fully
/// connected to the products of all sub-region pairs of its splits; single
/// cells hold `hidden_dim` categorical inputs.
pub fn build_pd(cfg: &StructureConfig) -> Result<CircuitGraph> {
    cfg.validate()?;
    let n: usize = cfg.shape.iter().product();
    let mut b = PdBuilder {
        cfg,
        g: CircuitGraph::new(n as u32),
        rng: stream_rng(cfg.seed, PARAM_STREAM),
        regions: HashMap::new(),
    };
    let root: Rect = cfg.shape.iter().map(|&d| (0, d)).collect();
    b.region(&root, true)?;
    Ok(b.g)
}

/// Nodes of one region graph region. Leaf components are factorized
/// products and are kept as their input lists so parents can absorb them.
enum RegionNodes {
    Leaf(Vec<Vec<NodeId>>),
    Inner(Vec<NodeId>),
}

impl RegionNodes {
    fn factors(&self) -> Vec<Vec<NodeId>> {
        match self {
            RegionNodes::Leaf(c) => c.clone(),
            RegionNodes::Inner(s) => s.iter().map(|&n| vec![n]).collect(),
        }
    }
}

struct RatBuilder<'a> {
    cfg: &'a StructureConfig,
    g: CircuitGraph,
    rng: ChaCha8Rng,
}

impl RatBuilder<'_> {
    /// Products over all component pairs of a balanced split of `vars`.
    fn partition(&mut self, vars: &[u32], depth: usize) -> Result<Vec<NodeId>> {
        let (a, b) = vars.split_at(vars.len() / 2);
        let left = self.region(a, depth - 1)?.factors();
        let right = self.region(b, depth - 1)?.factors();
        let mut prods = Vec::with_capacity(left.len() * right.len());
        for x in &left {
            for y in &right {
                let children: Vec<NodeId> = x.iter().chain(y).copied().collect();
                prods.push(self.g.add_product(&children)?);
            }
        }
        Ok(prods)
    }

    fn region(&mut self, vars: &[u32], depth: usize) -> Result<RegionNodes> {
        if depth == 0 {
            let comps = (0..self.cfg.num_input_components)
                .map(|_| {
                    vars.iter()
                        .map(|&v| {
                            let pmf = dirichlet(&mut self.rng, self.cfg.num_categories as usize);
                            self.g.add_input(VarId(v), &pmf)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            return Ok(RegionNodes::Leaf(comps));
        }
        let prods = self.partition(vars, depth)?;
        let mut sums = Vec::with_capacity(self.cfg.sums_per_region());
        for _ in 0..self.cfg.sums_per_region() {
            let w = dirichlet(&mut self.rng, prods.len());
            sums.push(self.g.add_sum(&prods, &w)?);
        }
        Ok(RegionNodes::Inner(sums))
    }
}

/// Randomized region graph: each repetition shuffles the variables and
/// halves them `depth` times. Inner regions hold `num_sums_per_region` sums
/// over all cross products of their two children, leaves hold factorized
/// categorical components, and the root mixes every repetition.
pub fn build_ratspn(cfg: &StructureConfig) -> Result<CircuitGraph> {
    cfg.validate()?;
    let mut shuffle_rng = stream_rng(cfg.seed, STRUCTURE_STREAM);
    let mut b = RatBuilder { cfg, g: CircuitGraph::new(cfg.num_vars as u32), rng: stream_rng(cfg.seed, PARAM_STREAM) };
    let mut prods = Vec::new();
    for _ in 0..cfg.num_repetitions {
        let mut vars: Vec<u32> = (0..cfg.num_vars as u32).collect();
        vars.shuffle(&mut shuffle_rng);
        prods.extend(b.partition(&vars, cfg.depth)?);
    }
    let w = dirichlet(&mut b.rng, prods.len());
    b.g.add_sum(&prods, &w)?;
    Ok(b.g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Node;
    use crate::oracle;

    fn cfg(text: &str) -> StructureConfig {
        StructureConfig::parse(text).unwrap()
    }

    #[test]
    fn parse_and_print_round_trip() {
        let c = cfg("kind = pd # grid\nshape = 4x4\nhidden_dim = 3\nseed = 9\n");
        assert_eq!(c.shape, vec![4, 4]);
        assert_eq!(StructureConfig::parse(&c.to_text()).unwrap(), c);
        assert!(StructureConfig::parse("kind = pd\nshape = 4x0\n").is_err());
        assert!(StructureConfig::parse("kind = tree\n").is_err());
        assert!(StructureConfig::parse("hidden_dim = 3\n").is_err());
        assert!(matches!(StructureConfig::parse("kind = hmm\nbogus = 1\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn degenerate_hmm_is_one_categorical() {
        let g = build(&cfg("kind = hmm\nseq_len = 1\nhidden_dim = 1\nvocab_size = 5\n")).unwrap();
        let pmf = match g.node(g.nodes().iter().position(|n| n.is_input()).map(|i| NodeId(i as u32)).unwrap()) {
            Node::Input { pmf_slot, .. } => g.params()[*pmf_slot as usize..*pmf_slot as usize + 5].to_vec(),
            _ => unreachable!(),
        };
        for (x, p) in pmf.iter().enumerate() {
            assert!((oracle::naive_forward(&g, &[Some(x as u32)]) - p.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn tied_hmm_slot_count_is_independent_of_length() {
        for t in [2, 5, 16] {
            let g = build(&cfg(&format!("kind = hmm\nseq_len = {t}\nhidden_dim = 8\nvocab_size = 10\n"))).unwrap();
            // emissions + transitions + initial weights
            assert_eq!(g.num_param_slots(), 80 + 64 + 8);
            assert!(g.validate().is_valid());
        }
    }

    #[test]
    fn small_pd_is_product_of_two_inputs() {
        let g = build(&cfg("kind = pd\nshape = 2\nsplit_interval = 2\nhidden_dim = 1\n")).unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert!(g.node(g.root()).is_sum());
        assert_eq!(g.node(g.root()).children().len(), 1);
        assert!(g.validate().is_valid());
    }

    #[test]
    fn generators_are_valid_normalized_and_deterministic() {
        for text in [
            "kind = pd\nshape = 3x2\nhidden_dim = 2\nnum_categories = 2\n",
            "kind = ratspn\nnum_vars = 6\ndepth = 2\nhidden_dim = 2\nnum_repetitions = 2\nseed = 4\n",
            "kind = hmm\nseq_len = 3\nhidden_dim = 3\nvocab_size = 3\ntied = false\n",
        ] {
            let c = cfg(text);
            let g = build(&c).unwrap();
            assert!(g.validate().is_valid(), "{text}");
            assert_eq!(crate::graph::write_model(&g), crate::graph::write_model(&build(&c).unwrap()));
            let ncat = oracle::category_counts(&g);
            let total: f64 = oracle::all_assignments(&ncat).iter().map(|x| oracle::naive_forward(&g, x).exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "{text}: {total}");
        }
    }

    #[test]
    fn ratspn_rejects_excessive_depth() {
        assert!(StructureConfig::parse("kind = ratspn\nnum_vars = 4\ndepth = 3\n").is_err());
        let g = build(&cfg("kind = ratspn\nnum_vars = 2\ndepth = 1\nhidden_dim = 1\nnum_input_components = 1\n")).unwrap();
        assert_eq!(g.num_nodes(), 4);
    }
}

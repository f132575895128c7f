//! Timing harness: synthetic single-layer kernels and block-size sweeps of
//! whole models.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compiler::{compile, CompileConfig, SumGroupIr};
use crate::error::{Error, Result};
use crate::graph::CircuitGraph;
use crate::par;
use crate::runtime::{kernels, Batch, Engine};

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Weights of one synthetic sum layer. Connectivity is decided per
/// `mask_block x mask_block` tile: each sum tile keeps the same number of
/// randomly chosen child tiles and is fully connected to them.
#[derive(Debug, Clone)]
pub struct SyntheticWeights {
    pub num_sums: usize,
    pub num_children: usize,
    pub mask_block: usize,
    /// Kept child tiles of every sum tile, ascending.
    pub kept: Vec<Vec<usize>>,
    /// `weights[s][c]` over the kept children of sum `s`, in kept-tile order.
    weights: Vec<Vec<f64>>,
}

impl SyntheticWeights {
    /// `keep` is the fraction of child tiles every sum tile connects to.
    pub fn generate(num_sums: usize, num_children: usize, mask_block: usize, keep: f64, seed: u64) -> Result<Self> {
        if mask_block == 0 || !num_sums.is_multiple_of(mask_block) || !num_children.is_multiple_of(mask_block) {
            return Err(Error::Config(format!(
                "layer {num_sums}x{num_children} is not a multiple of block {mask_block}"
            )));
        }
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Config(format!("kept fraction {keep} outside (0, 1]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nb_n = num_children / mask_block;
        let per = ((nb_n as f64 * keep).round() as usize).clamp(1, nb_n);
        let kept: Vec<Vec<usize>> = (0..num_sums / mask_block)
            .map(|_| {
                let mut v = rand::seq::index::sample(&mut rng, nb_n, per).into_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let weights = (0..num_sums)
            .map(|_| {
                let w: Vec<f64> = (0..per * mask_block).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = w.iter().sum();
                w.into_iter().map(|x| x / total).collect()
            })
            .collect();
        Ok(SyntheticWeights { num_sums, num_children, mask_block, kept, weights })
    }

    pub fn num_edges(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    /// Lays the weights out for execution with `k x k` blocks, where `k`
    /// divides the mask block; `k = 1` selects the scalar kernel.
    pub fn layout(&self, k: usize) -> Result<SyntheticLayer> {
        let mb = self.mask_block;
        if k == 0 || !mb.is_multiple_of(k) {
            return Err(Error::Config(format!("block size {k} does not divide {mb}")));
        }
        let per = self.kept[0].len() * mb;
        // child offsets of sum `s`, in the same order as its weights
        let children = |s: usize| self.kept[s / mb].iter().flat_map(move |&t| t * mb..(t + 1) * mb);
        let mut theta = vec![0.0; k * k];
        let mut group = SumGroupIr {
            k_m: k as u32,
            k_n: k as u32,
            c_m: 1,
            c_n: (per / k) as u32,
            sum_ids: Vec::new(),
            prod_ids: Vec::new(),
            param_ids: Vec::new(),
        };
        for sb in 0..self.num_sums / k {
            let s0 = sb * k;
            group.sum_ids.push((k + s0) as u32);
            let child_blocks: Vec<usize> = children(s0).step_by(k).collect();
            for (j, &c0) in child_blocks.iter().enumerate() {
                group.prod_ids.push((k + c0) as u32);
                group.param_ids.push(theta.len() as u32);
                for r in 0..k {
                    theta.extend_from_slice(&self.weights[s0 + r][j * k..(j + 1) * k]);
                }
            }
        }
        Ok(SyntheticLayer { k, num_sums: self.num_sums, num_children: self.num_children, group, theta })
    }
}

/// A synthetic layer ready to run; rows below `k` are the reserved `-inf`
/// rows of the scratch and output buffers.
#[derive(Debug, Clone)]
pub struct SyntheticLayer {
    pub k: usize,
    pub num_sums: usize,
    pub num_children: usize,
    pub group: SumGroupIr,
    pub theta: Vec<f64>,
}

/// Per-tile buffers of a synthetic layer run.
#[derive(Debug, Clone)]
pub struct LayerTile {
    elems: Vec<f64>,
    exp: Vec<f64>,
    max: Vec<f64>,
    out: Vec<f64>,
}

impl SyntheticLayer {
    /// Tiles of `kb` samples holding seeded child log-values.
    pub fn tiles(&self, batch: usize, kb: usize, seed: u64) -> Vec<LayerTile> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = self.k + self.num_children;
        (0..batch.div_ceil(kb))
            .map(|_| {
                let mut elems = vec![f64::NEG_INFINITY; rows * kb];
                for v in &mut elems[self.k * kb..] {
                    *v = rng.gen_range(-30.0..0.0);
                }
                LayerTile {
                    elems,
                    exp: vec![0.0; rows * kb],
                    max: vec![0.0; rows * kb],
                    out: vec![0.0; (self.k + self.num_sums) * kb],
                }
            })
            .collect()
    }

    pub fn forward(&self, tiles: &mut [LayerTile], kb: usize) {
        let k = self.k;
        par::for_each_mut(tiles, |t| {
            if k == 1 {
                kernels::forward_group_scalar(&self.group, &self.theta, k, kb, &t.elems, &mut t.out);
            } else {
                kernels::prepare_blocks(&t.elems, k..k + self.num_children, k, kb, &mut t.exp, &mut t.max);
                kernels::forward_group_blocked(&self.group, &self.theta, k, kb, &t.exp, &t.max, &mut t.out);
            }
        });
    }

    /// Sum log-values of one tile, `num_sums x kb` row-major.
    pub fn output<'a>(&self, tile: &'a LayerTile, kb: usize) -> &'a [f64] {
        &tile.out[self.k * kb..]
    }

    /// Wall seconds of `repeats` forward passes over `batch` samples.
    pub fn time_forward(&self, batch: usize, kb: usize, repeats: usize) -> Vec<f64> {
        let mut tiles = self.tiles(batch, kb, 0);
        self.forward(&mut tiles, kb);
        (0..repeats)
            .map(|_| {
                let t0 = Instant::now();
                self.forward(&mut tiles, kb);
                t0.elapsed().as_secs_f64()
            })
            .collect()
    }
}

/// Wall time of one layer in one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    pub depth: u32,
    pub sums: u32,
    pub edges: u64,
    pub k_m: u32,
    pub k_n: u32,
    pub groups: usize,
    /// Fraction of computed block edges that are padding.
    pub padding: f64,
    pub forward_secs: f64,
    pub backward_secs: f64,
}

/// Timings of one block size over several repeats.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// Requested block size.
    pub block_size: usize,
    /// Largest block size some layer actually used.
    pub effective: usize,
    pub forward: (f64, f64),
    pub backward: (f64, f64),
    /// Forward plus backward over the whole dataset, as in one EM epoch.
    pub epoch: (f64, f64),
    /// Mean epoch time of the first row divided by this row's.
    pub speedup: f64,
    pub layers: Vec<LayerReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub batch_size: usize,
    pub samples: usize,
    pub repeats: usize,
    pub rows: Vec<SweepRow>,
}

impl BenchReport {
    /// Sweep table followed by the per-layer table, tab separated.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "block_size\teffective\tforward_mean_s\tforward_sd_s\tbackward_mean_s\tbackward_sd_s\tepoch_mean_s\tepoch_sd_s\tspeedup\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
                r.block_size, r.effective, r.forward.0, r.forward.1, r.backward.0, r.backward.1, r.epoch.0, r.epoch.1, r.speedup
            );
        }
        s.push_str("\nblock_size\tlayer\tdepth\tsums\tedges\tk_m\tk_n\tgroups\tpadding\tforward_s\tbackward_s\n");
        for r in &self.rows {
            for l in &r.layers {
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.6}\t{:.6}",
                    r.block_size,
                    l.layer,
                    l.depth,
                    l.sums,
                    l.edges,
                    l.k_m,
                    l.k_n,
                    l.groups,
                    l.padding,
                    l.forward_secs,
                    l.backward_secs
                );
            }
        }
        s
    }
}

/// Compiles `g` at every block size and times forward and backward passes
/// over `data` in batches of `batch_size`. Per-layer times are means over
/// the repeats.
pub fn sweep_block_sizes(
    g: &CircuitGraph,
    base: &CompileConfig,
    data: &Batch,
    batch_size: usize,
    block_sizes: &[usize],
    repeats: usize,
) -> Result<BenchReport> {
    if data.is_empty() || batch_size == 0 || repeats == 0 || block_sizes.is_empty() {
        return Err(Error::Config("bench needs data, a positive batch size, repeats and block sizes".into()));
    }
    let batch_size = batch_size.min(data.len());
    let mut rows: Vec<SweepRow> = Vec::new();
    for &k in block_sizes {
        let cfg = CompileConfig { k_m: k, k_n: k, ..base.clone() };
        let c = compile(g, &cfg)?;
        let mut engine: Engine = Engine::new(&c);
        let nl = c.sum_layers.len();
        let (mut fw, mut bw, mut ep) = (Vec::new(), Vec::new(), Vec::new());
        let mut layer_f = vec![0.0; nl];
        let mut layer_b = vec![0.0; nl];
        for _ in 0..repeats {
            let (mut f, mut b) = (0.0, 0.0);
            let t_epoch = Instant::now();
            let mut start = 0;
            while start < data.len() {
                let end = (start + batch_size).min(data.len());
                let batch = data.slice(start..end);
                let t0 = Instant::now();
                engine.forward(&batch)?;
                f += t0.elapsed().as_secs_f64();
                let t0 = Instant::now();
                engine.backward()?;
                b += t0.elapsed().as_secs_f64();
                let tm = engine.timings();
                for (acc, d) in layer_f.iter_mut().zip(&tm.forward) {
                    *acc += d.as_secs_f64() / repeats as f64;
                }
                for (acc, d) in layer_b.iter_mut().zip(&tm.backward) {
                    *acc += d.as_secs_f64() / repeats as f64;
                }
                start = end;
            }
            ep.push(t_epoch.elapsed().as_secs_f64());
            fw.push(f);
            bw.push(b);
        }
        let layers = c
            .sum_layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerReport {
                layer: i,
                depth: l.depth,
                sums: l.num_sums,
                edges: l.num_edges,
                k_m: l.k_m,
                k_n: l.k_n,
                groups: l.groups.len(),
                padding: 1.0 - l.efficiency(),
                forward_secs: layer_f[i],
                backward_secs: layer_b[i],
            })
            .collect();
        let effective = c.sum_layers.iter().map(|l| l.k_m.max(l.k_n) as usize).max().unwrap_or(1);
        let epoch = mean_sd(&ep);
        let speedup = rows.first().map_or(1.0, |r0| r0.epoch.0 / epoch.0);
        rows.push(SweepRow { block_size: k, effective, forward: mean_sd(&fw), backward: mean_sd(&bw), epoch, speedup, layers });
    }
    Ok(BenchReport { batch_size, samples: data.len(), repeats, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_and_scalar_layouts_agree() {
        let w = SyntheticWeights::generate(16, 24, 4, 0.5, 1).unwrap();
        assert_eq!(w.num_edges(), 16 * 12);
        let (batch, kb) = (5, 4);
        let mut outs = Vec::new();
        for k in [1, 2, 4] {
            let layer = w.layout(k).unwrap();
            let mut tiles = layer.tiles(batch, kb, 3);
            layer.forward(&mut tiles, kb);
            outs.push(tiles.iter().flat_map(|t| layer.output(t, kb).to_vec()).collect::<Vec<_>>());
        }
        for o in &outs[1..] {
            for (a, b) in outs[0].iter().zip(o) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
        assert!(w.layout(3).is_err());
    }

    #[test]
    fn mean_sd_of_constant() {
        assert_eq!(mean_sd(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}

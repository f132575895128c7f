//! EM training loop over a dataset.

use std::time::{Duration, Instant};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compiler::CompiledCircuit;
use crate::error::{Error, Result};
use crate::runtime::{em_step_full, em_step_mini, Batch, EmAccumulator, Engine, DEFAULT_BATCH_TILE};

const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmMode {
    /// One update per epoch from flows over the whole dataset.
    Full,
    /// One blended update per mini-batch.
    Mini,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: EmMode,
    /// Step size of mini-batch updates.
    pub alpha: f64,
    pub pseudocount: f64,
    pub seed: u64,
    pub batch_tile: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 512,
            mode: EmMode::Full,
            alpha: 0.1,
            pseudocount: 1e-6,
            seed: 0,
            batch_tile: DEFAULT_BATCH_TILE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean log-likelihood per sample seen during the epoch, under the
    /// parameters in effect when each batch was evaluated.
    pub mean_ll: f64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub key_values: Vec<f64>,
    pub history: Vec<EpochStats>,
}

fn mean_ll(acc: &EmAccumulator) -> f64 {
    acc.log_likelihood / acc.samples.max(1) as f64
}

/// Runs EM from the circuit's current parameters and returns the trained
/// logical key values; the circuit itself is not modified.
pub fn train(c: &CompiledCircuit, data: &Batch, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let batch_size = if cfg.batch_size > data.len() {
        warn!("batch size {} exceeds the {} samples; using {}", cfg.batch_size, data.len(), data.len());
        data.len()
    } else {
        cfg.batch_size
    };
    let mut engine: Engine = Engine::with_batch_tile(c, cfg.batch_tile);
    let mut values = c.params.key_values.clone();
    let mut acc = EmAccumulator::new(c.params.num_keys());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        acc.reset();
        if cfg.mode == EmMode::Mini {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(batch_size) {
            let batch = match cfg.mode {
                EmMode::Full => data.slice(chunk[0]..chunk[0] + chunk.len()),
                EmMode::Mini => data.select(chunk),
            };
            let lls = engine.forward(&batch)?;
            engine.backward()?;
            match cfg.mode {
                EmMode::Full => acc.add(engine.key_flows()?, &lls),
                EmMode::Mini => {
                    let flows = engine.key_flows()?;
                    values = em_step_mini(&c.params, &values, flows, cfg.pseudocount, cfg.alpha)?;
                    engine.set_key_values(&values)?;
                    acc.log_likelihood += lls.iter().sum::<f64>();
                    acc.samples += lls.len();
                }
            }
        }
        if cfg.mode == EmMode::Full {
            values = em_step_full(&c.params, &values, &acc.flows, cfg.pseudocount)?;
            engine.set_key_values(&values)?;
        }
        let stats = EpochStats { epoch, mean_ll: mean_ll(&acc), elapsed: t0.elapsed() };
        if !stats.mean_ll.is_finite() {
            warn!("epoch {epoch}: log-likelihood is {}", stats.mean_ll);
        }
        info!("epoch {epoch} mean_ll={:.6} time={:.3}s", stats.mean_ll, stats.elapsed.as_secs_f64());
        history.push(stats);
    }
    Ok(TrainOutcome { key_values: values, history })
}

/// Mean log-likelihood of `data` under the given key values.
pub fn evaluate(c: &CompiledCircuit, key_values: &[f64], data: &Batch, batch_size: usize) -> Result<Vec<f64>> {
    let mut engine: Engine = Engine::new(c);
    engine.set_key_values(key_values)?;
    let step = batch_size.max(1);
    let mut out = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + step).min(data.len());
        out.extend(engine.forward(&data.slice(start..end))?);
        start = end;
    }
    Ok(out)
}

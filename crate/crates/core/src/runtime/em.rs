//! Expectation-maximization updates from accumulated parameter flows.

use crate::compiler::ParamStore;
use crate::error::{Error, Result};

/// Sums logical key flows and log-likelihoods over several batches.
#[derive(Debug, Clone, Default)]
pub struct EmAccumulator {
    pub flows: Vec<f64>,
    pub log_likelihood: f64,
    pub samples: usize,
}

impl EmAccumulator {
    pub fn new(num_keys: usize) -> Self {
        EmAccumulator { flows: vec![0.0; num_keys], log_likelihood: 0.0, samples: 0 }
    }

    pub fn add(&mut self, key_flows: &[f64], lls: &[f64]) {
        assert_eq!(key_flows.len(), self.flows.len(), "key count mismatch");
        for (a, &f) in self.flows.iter_mut().zip(key_flows) {
            *a += f;
        }
        self.log_likelihood += lls.iter().sum::<f64>();
        self.samples += lls.len();
    }

    pub fn reset(&mut self) {
        self.flows.iter_mut().for_each(|f| *f = 0.0);
        self.log_likelihood = 0.0;
        self.samples = 0;
    }
}

/// Closed-form maximizer: every normalization set becomes
/// `(F + pseudocount) / sum(F + pseudocount)`. Keys outside any set keep
/// their `current` value.
pub fn em_step_full(store: &ParamStore, current: &[f64], flows: &[f64], pseudocount: f64) -> Result<Vec<f64>> {
    if flows.len() != store.num_keys() || current.len() != store.num_keys() {
        return Err(Error::Config(format!(
            "expected {} values, got {} parameters and {} flows",
            store.num_keys(),
            current.len(),
            flows.len()
        )));
    }
    if !(pseudocount >= 0.0 && pseudocount.is_finite()) {
        return Err(Error::Config(format!("pseudocount must be finite and non-negative, got {pseudocount}")));
    }
    let mut out = current.to_vec();
    for group in &store.norm_groups {
        let total: f64 = group.keys.iter().map(|&k| flows[k as usize] + pseudocount).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::Numeric(format!(
                "parameters of node {} received total flow {total}; add a pseudocount",
                group.node.0
            )));
        }
        for &k in &group.keys {
            out[k as usize] = (flows[k as usize] + pseudocount) / total;
        }
    }
    Ok(out)
}

/// Stochastic update `(1 - alpha) * current + alpha * full_step`.
pub fn em_step_mini(store: &ParamStore, current: &[f64], flows: &[f64], pseudocount: f64, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("step size must lie in (0, 1], got {alpha}")));
    }
    let full = em_step_full(store, current, flows, pseudocount)?;
    Ok(current.iter().zip(full).map(|(&c, f)| (1.0 - alpha) * c + alpha * f).collect())
}

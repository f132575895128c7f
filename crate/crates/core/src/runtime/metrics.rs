//! Likelihood summaries.

use std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean log-likelihood per sample.
    pub mean_ll: f64,
    /// Mean negative log-likelihood per sample, in nats.
    pub nll: f64,
    /// Bits per dimension.
    pub bpd: f64,
    /// Per-token perplexity, `exp(total nll / tokens)`.
    pub perplexity: f64,
}

/// Summarizes per-sample log-likelihoods of samples with `dims` variables
/// each; every variable counts as one token.
pub fn log_likelihood_metrics(lls: &[f64], dims: usize) -> Metrics {
    let n = lls.len().max(1) as f64;
    let total: f64 = lls.iter().sum();
    let nll = -total / n;
    let dims = dims.max(1) as f64;
    Metrics { mean_ll: total / n, nll, bpd: nll / (dims * LN_2), perplexity: (nll / dims).exp() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_bits() {
        // uniform over 2^8 values of 4 binary-coded bytes: 8 bits per dim
        let ll = -(4.0 * 8.0) * LN_2;
        let m = log_likelihood_metrics(&[ll, ll], 4);
        assert!((m.bpd - 8.0).abs() < 1e-12);
        assert!((m.perplexity - 256.0).abs() < 1e-9);
    }
}

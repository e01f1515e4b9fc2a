//! Rank-normalized split R-hat and bulk effective sample size.

use serde::{Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use super::PosteriorDraws;

pub const RHAT_THRESHOLD: f64 = 1.05;
pub const ESS_THRESHOLD: f64 = 100.0;

/// A diagnostic value, or a flag that the parameter never moved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Statistic {
    Value(f64),
    Constant,
}

impl Statistic {
    /// The value, with `NaN` standing in for a constant parameter.
    pub fn value(self) -> f64 {
        match self {
            Statistic::Value(v) => v,
            Statistic::Constant => f64::NAN,
        }
    }

    pub fn is_constant(self) -> bool {
        self == Statistic::Constant
    }
}

impl Serialize for Statistic {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Statistic::Value(v) if v.is_finite() => s.serialize_f64(*v),
            Statistic::Value(v) => s.serialize_str(&v.to_string()),
            Statistic::Constant => s.serialize_str("constant"),
        }
    }
}

fn is_constant(chains: &[&[f64]]) -> bool {
    let Some(&first) = chains.iter().flat_map(|c| c.iter()).next() else {
        return true;
    };
    chains.iter().flat_map(|c| c.iter()).all(|&x| x == first)
}

/// Split every chain into halves, dropping the middle draw of odd chains.
fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    chains
        .iter()
        .flat_map(|c| {
            let half = c.len() / 2;
            [c[..half].to_vec(), c[c.len() - half..].to_vec()]
        })
        .collect()
}

/// Replace values by normal scores of their pooled fractional ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let grand = crate::stats::mean(&means);
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = crate::stats::mean(
        &chains
            .iter()
            .map(|c| crate::stats::sample_variance(c))
            .collect::<Vec<_>>(),
    );
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

fn check_shape(chains: &[&[f64]]) {
    assert!(
        chains.len() >= 2 || chains.first().is_some_and(|c| c.len() >= 4),
        "need at least two chains or four draws"
    );
    assert!(
        chains
            .iter()
            .all(|c| c.len() == chains[0].len() && c.len() >= 4),
        "chains need equal lengths of at least four draws"
    );
}

/// Rank-normalized split R-hat: the larger of the bulk and tail (folded)
/// versions.
pub fn rhat(chains: &[&[f64]]) -> Statistic {
    check_shape(chains);
    if is_constant(chains) {
        return Statistic::Constant;
    }
    let halves = split(chains);
    let bulk = split_rhat(&rank_normalize(&halves));
    let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
    let median = crate::stats::quantile(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|x| (x - median).abs()).collect())
        .collect();
    let tail = split_rhat(&rank_normalize(&folded));
    let r = bulk.max(tail);
    Statistic::Value(if r.is_nan() { f64::INFINITY } else { r })
}

/// Bulk effective sample size of rank-normalized split chains.
pub fn ess(chains: &[&[f64]]) -> Statistic {
    check_shape(chains);
    if is_constant(chains) {
        return Statistic::Constant;
    }
    Statistic::Value(ess_raw(&rank_normalize(&split(chains))))
}

/// Autocovariance at `lag` with the biased (1/n) normalization.
fn autocovariance(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - mean) * (b - mean))
        .sum::<f64>()
        / n as f64
}

/// Geyer initial monotone sequence estimate over several chains.
fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| crate::stats::mean(c)).collect();
    let mean_acov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let nf = n as f64;
    let mean_var = mean_acov(0) * nf / (nf - 1.0);
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if m > 1 {
        var_plus += crate::stats::sample_variance(&means);
    }
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - mean_acov(lag)) / var_plus;

    // rho[k] is the autocorrelation at lag k
    let mut rho = vec![0.0; n + 1];
    rho[0] = 1.0;
    rho[1] = rho_at(1);
    let (mut even, mut odd) = (1.0, rho[1]);
    let mut t = 0;
    while t + 5 < n && even + odd > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    // enforce monotone decrease of the paired sums
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        let prev = rho[t - 2] + rho[t - 1];
        if rho[t] + rho[t + 1] > prev {
            rho[t] = prev / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let total = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t]).max(1.0 / total.log10());
    total / tau
}

#[derive(Debug, Clone, Serialize)]
pub struct ParameterDiagnostic {
    pub name: String,
    pub rhat: Statistic,
    pub ess_bulk: Statistic,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub converged: bool,
    pub rhat_threshold: f64,
    pub ess_threshold: f64,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub divergences: usize,
    pub mean_accept_stat: f64,
    pub step_sizes: Vec<f64>,
    pub failed: Vec<String>,
    pub warnings: Vec<String>,
    pub parameters: Vec<ParameterDiagnostic>,
}

/// Check every parameter against the R-hat and ESS thresholds. Constant
/// parameters fail.
pub fn check_convergence(draws: &PosteriorDraws) -> ConvergenceReport {
    let mut warnings = Vec::new();
    if draws.names.is_empty() {
        warnings.push("no parameters to check; convergence holds vacuously".to_string());
    }
    let parameters: Vec<ParameterDiagnostic> = (0..draws.n_params())
        .map(|idx| {
            let per_chain = draws.parameter(idx);
            let refs: Vec<&[f64]> = per_chain.iter().map(Vec::as_slice).collect();
            let r = rhat(&refs);
            let e = ess(&refs);
            let passed = matches!(r, Statistic::Value(v) if v < RHAT_THRESHOLD)
                && matches!(e, Statistic::Value(v) if v > ESS_THRESHOLD);
            ParameterDiagnostic {
                name: draws.names[idx].clone(),
                rhat: r,
                ess_bulk: e,
                passed,
            }
        })
        .collect();
    let failed: Vec<String> = parameters
        .iter()
        .filter(|p| !p.passed)
        .map(|p| p.name.clone())
        .collect();
    ConvergenceReport {
        converged: failed.is_empty(),
        rhat_threshold: RHAT_THRESHOLD,
        ess_threshold: ESS_THRESHOLD,
        chains: draws.n_chains(),
        draws_per_chain: draws.n_draws(),
        divergences: draws.divergences(),
        mean_accept_stat: draws.mean_accept_stat(),
        step_sizes: draws.chains.iter().map(|c| c.step_size).collect(),
        failed,
        warnings,
        parameters,
    }
}

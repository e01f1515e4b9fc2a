//! Multi-chain No-U-Turn sampling with warm-up adaptation, and the
//! convergence diagnostics used to accept a run.

mod adapt;
mod diagnostics;
mod metric;
mod nuts;

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use diagnostics::{
    check_convergence, ess, rhat, ConvergenceReport, ParameterDiagnostic, Statistic, ESS_THRESHOLD,
    RHAT_THRESHOLD,
};

/// A differentiable log density over an unconstrained space.
///
/// Implementations must be safe to evaluate from several threads at once.
pub trait Target: Sync {
    fn dim(&self) -> usize;

    /// Log density at `position` with its gradient written to `grad`.
    /// Non-finite return values mark the position as outside the support.
    fn log_density_and_gradient(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Names of the constrained parameters emitted per draw.
    fn parameter_names(&self) -> Vec<String> {
        (1..=self.dim()).map(|i| format!("x.{i}")).collect()
    }

    /// Random starting position. The default draws each coordinate
    /// uniformly from `[-1, 1]`.
    fn initial_position(&self, rng: &mut dyn rand::RngCore) -> Vec<f64> {
        (0..self.dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    }

    /// Groups of coordinates whose joint covariance is adapted as a dense
    /// block of the metric. Coordinates outside every block get diagonal
    /// entries only. Ranges must not overlap.
    fn metric_blocks(&self) -> Vec<std::ops::Range<usize>> {
        Vec::new()
    }

    /// Map an unconstrained position to the stored constrained values.
    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        out.copy_from_slice(position);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 3,
            warmup: 1000,
            draws: 4000,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 20240501,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.draws == 0 || self.max_tree_depth == 0 {
            return Err(Error::InvalidArgument(
                "chains, draws and max_tree_depth must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "target_accept {} outside (0, 1)",
                self.target_accept
            )));
        }
        Ok(())
    }
}

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub log_density: f64,
    pub accept_stat: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

/// Post-warmup draws of one chain, stored row-major (draw × parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub values: Vec<f64>,
    pub stats: Vec<IterationStats>,
    pub step_size: f64,
    /// Diagonal of the adapted inverse metric.
    pub inv_metric: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    /// Draws per chain.
    pub fn n_draws(&self) -> usize {
        self.chains
            .first()
            .map_or(0, |c| c.values.len() / self.n_params().max(1))
    }

    pub fn total_draws(&self) -> usize {
        self.n_chains() * self.n_draws()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Draw `d` of chain `c`.
    pub fn draw(&self, chain: usize, d: usize) -> &[f64] {
        let p = self.n_params();
        &self.chains[chain].values[d * p..(d + 1) * p]
    }

    /// All draws pooled in chain order.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> + '_ {
        let p = self.n_params().max(1);
        self.chains.iter().flat_map(move |c| c.values.chunks(p))
    }

    /// Values of parameter `idx` per chain.
    pub fn parameter(&self, idx: usize) -> Vec<Vec<f64>> {
        let p = self.n_params();
        self.chains
            .iter()
            .map(|c| c.values.iter().skip(idx).step_by(p).copied().collect())
            .collect()
    }

    /// Pooled values of parameter `idx`.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        self.parameter(idx).concat()
    }

    pub fn divergences(&self) -> usize {
        self.chains
            .iter()
            .flat_map(|c| &c.stats)
            .filter(|s| s.divergent)
            .count()
    }

    pub fn mean_accept_stat(&self) -> f64 {
        let all: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.stats.iter().map(|s| s.accept_stat))
            .collect();
        crate::stats::mean(&all)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(out, "chain,iteration").map_err(io)?;
        for n in &self.names {
            write!(out, ",{n}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for (c, _) in self.chains.iter().enumerate() {
            for d in 0..self.n_draws() {
                write!(out, "{},{}", c + 1, d + 1).map_err(io)?;
                for v in self.draw(c, d) {
                    write!(out, ",{v}").map_err(io)?;
                }
                writeln!(out).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    /// Read draws written by [`PosteriorDraws::write_csv`]. Sampler statistics
    /// are not stored in the file and come back empty.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.len() < 2 || &headers[0] != "chain" || &headers[1] != "iteration" {
            return Err(Error::Draws(format!(
                "{}: header must start with chain,iteration",
                path.display()
            )));
        }
        let names: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let mut chains: Vec<ChainDraws> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let bad = |m: String| Error::Row {
                file: path.display().to_string(),
                line: line as u64 + 2,
                message: m,
            };
            if record.len() != names.len() + 2 {
                return Err(bad("wrong number of fields".into()));
            }
            let chain: usize = record[0].parse().map_err(|_| bad("bad chain".into()))?;
            if chain == 0 || chain > chains.len() + 1 {
                return Err(bad(format!("chain {chain} out of order")));
            }
            if chain == chains.len() + 1 {
                chains.push(ChainDraws {
                    values: Vec::new(),
                    stats: Vec::new(),
                    step_size: f64::NAN,
                    inv_metric: Vec::new(),
                });
            }
            for field in record.iter().skip(2) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| bad(format!("non-numeric value `{field}`")))?;
                chains[chain - 1].values.push(v);
            }
        }
        let draws = PosteriorDraws { names, chains };
        let n = draws.n_draws() * draws.n_params();
        if draws.chains.iter().any(|c| c.values.len() != n) {
            return Err(Error::Draws("chains have unequal lengths".into()));
        }
        Ok(draws)
    }
}

/// Run `config.chains` independent chains in parallel.
pub fn sample<T: Target>(target: &T, config: &SamplerConfig) -> Result<PosteriorDraws> {
    config.validate()?;
    let chains: Vec<ChainDraws> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(c as u64);
            nuts::run_chain(target, config, &mut rng)
        })
        .collect::<Result<_>>()?;
    let draws = PosteriorDraws {
        names: target.parameter_names(),
        chains,
    };
    let divergent = draws.divergences();
    let total = draws.total_draws();
    if 2 * divergent > total {
        return Err(Error::DivergenceRate { divergent, total });
    }
    Ok(draws)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) struct Gaussian {
        pub dim: usize,
        pub rho: f64,
    }

    impl Target for Gaussian {
        fn dim(&self) -> usize {
            self.dim
        }

        fn log_density_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            if self.dim == 2 && self.rho != 0.0 {
                let r = self.rho;
                let d = 1.0 - r * r;
                g[0] = -(x[0] - r * x[1]) / d;
                g[1] = -(x[1] - r * x[0]) / d;
                return -0.5 * (x[0] * x[0] - 2.0 * r * x[0] * x[1] + x[1] * x[1]) / d;
            }
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi = -xi;
            }
            -0.5 * x.iter().map(|v| v * v).sum::<f64>()
        }
    }

    fn quick() -> SamplerConfig {
        SamplerConfig {
            warmup: 300,
            draws: 500,
            seed: 11,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let t = Gaussian { dim: 3, rho: 0.0 };
        let a = sample(&t, &quick()).unwrap();
        let b = sample(&t, &quick()).unwrap();
        assert_eq!(a, b);
        let c = sample(
            &t,
            &SamplerConfig {
                seed: 12,
                ..quick()
            },
        )
        .unwrap();
        assert_ne!(a.chains[0].values, c.chains[0].values);
        assert_ne!(a.chains[0].values, a.chains[1].values);
    }

    #[test]
    fn correlated_gaussian() {
        let t = Gaussian { dim: 2, rho: 0.9 };
        let d = sample(
            &t,
            &SamplerConfig {
                seed: 5,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        let (x, y) = (d.pooled(0), d.pooled(1));
        let (mx, my) = (crate::stats::mean(&x), crate::stats::mean(&y));
        let cov: f64 = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - mx) * (b - my))
            .sum::<f64>()
            / (x.len() - 1) as f64;
        let r = cov / (crate::stats::sample_sd(&x) * crate::stats::sample_sd(&y));
        assert!((r - 0.9).abs() < 0.05, "correlation {r}");
    }

    struct Nowhere;

    impl Target for Nowhere {
        fn dim(&self) -> usize {
            1
        }

        fn log_density_and_gradient(&self, _: &[f64], _: &mut [f64]) -> f64 {
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn initialization_failure() {
        assert!(matches!(
            sample(&Nowhere, &quick()),
            Err(Error::Initialization { attempts: 100 })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = Gaussian { dim: 2, rho: 0.0 };
        let d = sample(
            &t,
            &SamplerConfig {
                warmup: 50,
                draws: 20,
                ..quick()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("draws.csv");
        d.write_csv(&p).unwrap();
        let back = PosteriorDraws::read_csv(&p).unwrap();
        assert_eq!(back.names, d.names);
        for c in 0..3 {
            assert_eq!(back.chains[c].values, d.chains[c].values);
        }
    }
}

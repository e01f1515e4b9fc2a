//! Permutation variable importance on a fitted model, without refitting.
//!
//! A variable is either a covariate group (all dummy columns of a factor move
//! together) or one latent characteristic of one biomarker. Permuting routes
//! each patient's input to another patient's value; latent values stay
//! per-draw, so within a run the same patient permutation applies to every
//! posterior draw. The score is `WAIC(permuted) - WAIC(observed)`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Cohort;
use crate::evaluation::{self, WaicResult};
use crate::fitted::{FittedModel, InputMap};
use crate::{Error, Result, NUM_BIOMARKERS, NUM_CHARACTERISTICS};

const CHARACTERISTIC_NAMES: [&str; NUM_CHARACTERISTICS] = ["baseline", "growth", "decay"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableKind {
    Covariate {
        columns: Vec<usize>,
    },
    Latent {
        biomarker: usize,
        characteristic: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VIVariable {
    pub name: String,
    pub kind: VariableKind,
}

impl VIVariable {
    pub fn latent(biomarker: usize, characteristic: usize) -> Self {
        VIVariable {
            name: format!("{}.{}", CHARACTERISTIC_NAMES[characteristic], biomarker + 1),
            kind: VariableKind::Latent {
                biomarker,
                characteristic,
            },
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self.kind, VariableKind::Latent { .. })
    }
}

/// Every rankable input: covariate groups, then latent characteristics when
/// the model shares them.
pub fn registry(cohort: &Cohort, shares: bool) -> Vec<VIVariable> {
    let mut vars: Vec<VIVariable> = cohort
        .groups()
        .iter()
        .map(|g| VIVariable {
            name: g.name.clone(),
            kind: VariableKind::Covariate {
                columns: g.columns.clone(),
            },
        })
        .collect();
    if shares {
        for k in 0..NUM_BIOMARKERS {
            for m in 0..NUM_CHARACTERISTICS {
                vars.push(VIVariable::latent(k, m));
            }
        }
    }
    vars
}

pub fn find_variable<'v>(variables: &'v [VIVariable], name: &str) -> Result<&'v VIVariable> {
    variables
        .iter()
        .find(|v| v.name == name)
        .ok_or_else(|| Error::UnknownVariable(name.to_string()))
}

/// Supplier of patient permutations.
pub trait PermutationSource {
    fn permutation(&mut self, n: usize) -> Vec<usize>;
}

/// Uniform random permutations.
pub struct RandomPermutations(pub ChaCha8Rng);

impl RandomPermutations {
    /// Stream `run` of `seed`.
    pub fn for_run(seed: u64, run: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64);
        RandomPermutations(rng)
    }
}

impl PermutationSource for RandomPermutations {
    fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut self.0);
        p
    }
}

/// Always the same permutation; identity when empty.
pub struct FixedPermutation(pub Vec<usize>);

impl PermutationSource for FixedPermutation {
    fn permutation(&mut self, n: usize) -> Vec<usize> {
        if self.0.is_empty() {
            (0..n).collect()
        } else {
            assert_eq!(self.0.len(), n, "fixed permutation length");
            self.0.clone()
        }
    }
}

/// Apply one patient permutation jointly to every slot of `variable`.
pub fn permute_variable(
    map: &InputMap,
    variable: &VIVariable,
    source: &mut dyn PermutationSource,
) -> Result<InputMap> {
    let n = map.latent.first().map_or(0, Vec::len);
    let perm = source.permutation(n);
    let mut out = map.clone();
    let slots: Vec<&mut Vec<usize>> = match &variable.kind {
        VariableKind::Covariate { columns } => {
            if columns.iter().any(|&c| c >= map.covariates.len()) {
                return Err(Error::UnknownVariable(variable.name.clone()));
            }
            out.covariates
                .iter_mut()
                .enumerate()
                .filter(|(c, _)| columns.contains(c))
                .map(|(_, m)| m)
                .collect()
        }
        VariableKind::Latent {
            biomarker,
            characteristic,
        } => {
            let slot = biomarker * NUM_CHARACTERISTICS + characteristic;
            if slot >= out.latent.len() {
                return Err(Error::UnknownVariable(variable.name.clone()));
            }
            vec![&mut out.latent[slot]]
        }
    };
    for m in slots {
        let old = m.clone();
        for (dst, &src) in m.iter_mut().zip(&perm) {
            *dst = old[src];
        }
    }
    Ok(out)
}

/// Baseline WAIC of the fitted model on the observed inputs.
pub fn base_waic(fit: &FittedModel, cohort: &Cohort) -> Result<WaicResult> {
    evaluation::waic(&fit.pointwise_categorical_loglik(cohort, &InputMap::for_cohort(cohort))?)
}

/// `WAIC(permuted) - WAIC(base)` for one permutation of `variable`.
pub fn vi_score(
    fit: &FittedModel,
    cohort: &Cohort,
    variable: &VIVariable,
    base: &WaicResult,
    source: &mut dyn PermutationSource,
) -> Result<f64> {
    if variable.is_latent() && !fit.shares() {
        return Err(Error::UnknownVariable(variable.name.clone()));
    }
    let map = permute_variable(&InputMap::for_cohort(cohort), variable, source)?;
    let permuted = evaluation::waic(&fit.pointwise_categorical_loglik(cohort, &map)?)?;
    Ok(permuted.waic - base.waic)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VIRow {
    pub variable: String,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// 1 = largest mean degradation.
    pub rank: usize,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VIReport {
    pub runs: usize,
    pub base_waic: f64,
    /// In registry order.
    pub rows: Vec<VIRow>,
}

impl VIReport {
    pub fn row(&self, name: &str) -> Option<&VIRow> {
        self.rows.iter().find(|r| r.variable == name)
    }

    /// Rows ordered by rank.
    pub fn ranked(&self) -> Vec<&VIRow> {
        let mut rows: Vec<&VIRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.rank);
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["variable", "mean", "min", "max", "rank"])
            .map_err(|e| Error::csv(path, e))?;
        for r in self.ranked() {
            w.write_record([
                r.variable.clone(),
                r.mean.to_string(),
                r.min.to_string(),
                r.max.to_string(),
                r.rank.to_string(),
            ])
            .map_err(|e| Error::csv(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Repeat the permutation scores `runs` times with run-specific random
/// permutations derived from `seed`.
pub fn vi_ranking(
    fit: &FittedModel,
    cohort: &Cohort,
    variables: &[VIVariable],
    runs: usize,
    seed: u64,
) -> Result<VIReport> {
    vi_ranking_with(fit, cohort, variables, runs, |r| {
        RandomPermutations::for_run(seed, r)
    })
}

/// As [`vi_ranking`], with permutations for run `r` supplied by `source(r)`.
pub fn vi_ranking_with<S, F>(
    fit: &FittedModel,
    cohort: &Cohort,
    variables: &[VIVariable],
    runs: usize,
    source: F,
) -> Result<VIReport>
where
    S: PermutationSource,
    F: Fn(usize) -> S + Sync,
{
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let base = base_waic(fit, cohort)?;
    let per_run: Vec<Vec<f64>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let mut src = source(r);
            variables
                .iter()
                .map(|v| vi_score(fit, cohort, v, &base, &mut src))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<VIRow> = variables
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let scores: Vec<f64> = per_run.iter().map(|r| r[i]).collect();
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = (scores.iter().sum::<f64>() / runs as f64).clamp(min, max);
            VIRow {
                variable: v.name.clone(),
                mean,
                min,
                max,
                rank: 0,
                scores,
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].mean.total_cmp(&rows[a].mean));
    for (rank, &i) in order.iter().enumerate() {
        rows[i].rank = rank + 1;
    }
    Ok(VIReport {
        runs,
        base_waic: base.waic,
        rows,
    })
}

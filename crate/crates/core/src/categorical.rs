//! Multinomial-logit treatment submodel.
//!
//! Each non-reference category `j` has log-odds against the last category
//! `J` of `β_j0 + x·β_j + Σ_k (α_1kj B*_k + α_2kj G*_k + α_3kj D*_k)`. With
//! sharing disabled the latent sum is dropped, which gives the competing
//! covariates-only model.

use std::path::Path;

use serde::Serialize;

use crate::biexp::LatentCharacteristics;
use crate::data::Cohort;
use crate::{stats, Error, Result, NUM_BIOMARKERS, NUM_CHARACTERISTICS};

/// Latent characteristics of every biomarker for one patient.
pub type PatientCharacteristics = [LatentCharacteristics; NUM_BIOMARKERS];

/// Association coefficients of one category: `alpha[k][m]` multiplies
/// characteristic `m` of biomarker `k`.
pub type Association = [[f64; NUM_CHARACTERISTICS]; NUM_BIOMARKERS];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoricalParams {
    /// One row per non-reference category; the intercept comes first.
    pub beta: Vec<Vec<f64>>,
    /// One entry per non-reference category, or empty without sharing.
    pub alpha: Vec<Association>,
}

impl CategoricalParams {
    pub fn zeros(num_categories: usize, num_covariates: usize, share: bool) -> Self {
        CategoricalParams {
            beta: vec![vec![0.0; num_covariates + 1]; num_categories - 1],
            alpha: if share {
                vec![[[0.0; NUM_CHARACTERISTICS]; NUM_BIOMARKERS]; num_categories - 1]
            } else {
                Vec::new()
            },
        }
    }

    pub fn num_categories(&self) -> usize {
        self.beta.len() + 1
    }
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryProbabilities(pub Vec<f64>);

impl CategoryProbabilities {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Log-odds of each non-reference category against the reference.
pub fn linear_predictors(
    x: &[f64],
    chars: Option<&PatientCharacteristics>,
    params: &CategoricalParams,
    share: bool,
) -> Result<Vec<f64>> {
    let mut eta = Vec::with_capacity(params.beta.len());
    for (j, beta) in params.beta.iter().enumerate() {
        if beta.len() != x.len() + 1 {
            return Err(Error::Dimension(format!(
                "category {} has {} coefficients for {} covariates plus intercept",
                j + 1,
                beta.len(),
                x.len()
            )));
        }
        let mut e = beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
        if share {
            let chars = chars.ok_or_else(|| {
                Error::Dimension("sharing requires latent characteristics".into())
            })?;
            let alpha = params.alpha.get(j).ok_or_else(|| {
                Error::Dimension(format!(
                    "no association coefficients for category {}",
                    j + 1
                ))
            })?;
            for (a, c) in alpha.iter().zip(chars) {
                let c = c.to_array();
                e += a[0] * c[0] + a[1] * c[1] + a[2] * c[2];
            }
        }
        eta.push(e);
    }
    Ok(eta)
}

/// Log category probabilities with the reference category's score fixed at 0.
pub fn log_probabilities(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(0.0, f64::max);
    let denom = (-max).exp() + eta.iter().map(|e| (e - max).exp()).sum::<f64>();
    let lse = max + denom.ln();
    eta.iter()
        .chain(std::iter::once(&0.0))
        .map(|e| e - lse)
        .collect()
}

/// Softmax against the reference, shifted by the largest score.
pub fn probabilities(eta: &[f64]) -> CategoryProbabilities {
    let max = eta.iter().copied().fold(0.0, f64::max);
    let mut p: Vec<f64> = eta
        .iter()
        .chain(std::iter::once(&0.0))
        .map(|e| (e - max).exp())
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    CategoryProbabilities(p)
}

/// `Σ_i log φ_{i, z_i}`. May be `-inf` when a probability underflows to zero.
pub fn categorical_loglik(
    cohort: &Cohort,
    params: &CategoricalParams,
    chars: Option<&[PatientCharacteristics]>,
    share: bool,
) -> Result<f64> {
    if params.num_categories() != cohort.num_categories() {
        return Err(Error::Dimension(format!(
            "{} categories in parameters, {} in cohort",
            params.num_categories(),
            cohort.num_categories()
        )));
    }
    if let Some(c) = chars {
        if c.len() != cohort.n_patients() {
            return Err(Error::Dimension(format!(
                "{} characteristic sets for {} patients",
                c.len(),
                cohort.n_patients()
            )));
        }
    }
    let mut total = 0.0;
    for (i, patient) in cohort.patients().iter().enumerate() {
        let eta = linear_predictors(&patient.covariates, chars.map(|c| &c[i]), params, share)?;
        total += log_probabilities(&eta)[patient.treatment];
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RelativeRisk {
    /// Posterior mean of `exp(coef)`.
    pub rr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `exp` of the posterior mean coefficient, the other common convention.
    pub rr_at_mean_coef: f64,
    /// The 95% interval excludes 1.
    pub significant: bool,
}

/// Relative risk summary of one coefficient from its posterior draws.
pub fn relative_risks(draws: &[f64]) -> Result<RelativeRisk> {
    if draws.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "relative risks need at least 2 draws, got {}",
            draws.len()
        )));
    }
    let exp: Vec<f64> = draws.iter().map(|c| c.exp()).collect();
    let (ci_low, ci_high) = stats::central_interval(&exp, 0.95);
    Ok(RelativeRisk {
        rr: stats::mean(&exp),
        ci_low,
        ci_high,
        rr_at_mean_coef: stats::mean(draws).exp(),
        significant: ci_low > 1.0 || ci_high < 1.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreatmentPrediction {
    pub mean: Vec<f64>,
    /// Central 95% interval per category.
    pub interval: Vec<(f64, f64)>,
    /// Zero-based category with the largest posterior mean; ties go to the
    /// smallest index.
    pub class: usize,
}

pub fn predict_treatment(phi_draws: &[Vec<f64>]) -> Result<TreatmentPrediction> {
    let first = phi_draws
        .first()
        .ok_or_else(|| Error::InvalidArgument("no probability draws".into()))?;
    let j = first.len();
    if phi_draws.iter().any(|d| d.len() != j) {
        return Err(Error::Dimension("ragged probability draws".into()));
    }
    let mut mean = Vec::with_capacity(j);
    let mut interval = Vec::with_capacity(j);
    for c in 0..j {
        let col: Vec<f64> = phi_draws.iter().map(|d| d[c]).collect();
        mean.push(stats::mean(&col));
        interval.push(stats::central_interval(&col, 0.95));
    }
    Ok(TreatmentPrediction {
        class: argmax_first(&mean),
        mean,
        interval,
    })
}

/// Index of the maximum, first one on ties.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// One row of the relative-risk table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskRow {
    pub variable: String,
    pub category: String,
    /// "j vs J", one-based.
    pub contrast: String,
    pub vi_rank: Option<usize>,
    pub risk: RelativeRisk,
}

pub const RISK_TABLE_HEADER: [&str; 9] = [
    "variable",
    "category",
    "contrast",
    "vi_rank",
    "rr",
    "ci_low",
    "ci_high",
    "significant",
    "rr_at_mean_coef",
];

pub fn write_risk_table(path: &Path, rows: &[RiskRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(RISK_TABLE_HEADER)
        .map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record([
            r.variable.clone(),
            r.category.clone(),
            r.contrast.clone(),
            r.vi_rank.map(|v| v.to_string()).unwrap_or_default(),
            r.risk.rr.to_string(),
            r.risk.ci_low.to_string(),
            r.risk.ci_high.to_string(),
            r.risk.significant.to_string(),
            r.risk.rr_at_mean_coef.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateGroup, LongitudinalObservation, PatientRecord};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn chars_zero() -> PatientCharacteristics {
        [LatentCharacteristics::new(0.0, 0.0, 0.0); NUM_BIOMARKERS]
    }

    fn cohort(rows: &[(Vec<f64>, usize)]) -> Cohort {
        let p = rows.first().map_or(0, |r| r.0.len());
        let patients = rows
            .iter()
            .enumerate()
            .map(|(i, (x, z))| PatientRecord {
                id: format!("p{i}"),
                covariates: x.clone(),
                treatment: *z,
            })
            .collect();
        let obs = (0..rows.len())
            .map(|i| LongitudinalObservation {
                patient: i,
                biomarker: 0,
                time: 0.0,
                value: 1.0,
            })
            .collect();
        let names = (0..p).map(|c| format!("x{c}")).collect();
        let groups = (0..p)
            .map(|c| CovariateGroup {
                name: format!("x{c}"),
                columns: vec![c],
            })
            .collect();
        Cohort::new(patients, obs, names, groups, 3).unwrap()
    }

    #[test]
    fn zero_coefficients_give_zero_predictors() {
        let params = CategoricalParams::zeros(3, 2, true);
        let eta = linear_predictors(&[0.4, -1.0], Some(&chars_zero()), &params, true).unwrap();
        assert_eq!(eta, vec![0.0, 0.0]);
    }

    #[test]
    fn sharing_disabled_ignores_alpha() {
        let mut params = CategoricalParams::zeros(3, 1, true);
        params.beta[0][1] = 0.5;
        params.alpha[0][0][0] = 3.0;
        params.alpha[1][1][2] = -2.0;
        let chars = [LatentCharacteristics::new(1.0, 2.0, 3.0); 2];
        let eta = linear_predictors(&[2.0], Some(&chars), &params, false).unwrap();
        assert_eq!(eta, vec![1.0, 0.0]);
        let shared = linear_predictors(&[2.0], Some(&chars), &params, true).unwrap();
        assert_eq!(shared, vec![4.0, -6.0]);
    }

    #[test]
    fn coefficient_implied_by_relative_risk() {
        let mut params = CategoricalParams::zeros(3, 1, false);
        params.beta[0][1] = 0.76f64.ln();
        let eta = linear_predictors(&[1.0], None, &params, false).unwrap();
        assert!((eta[0] + 0.27444).abs() < 1e-5);
    }

    #[test]
    fn dimension_mismatch() {
        let params = CategoricalParams::zeros(3, 2, false);
        assert!(linear_predictors(&[1.0], None, &params, false).is_err());
        let params = CategoricalParams::zeros(3, 1, true);
        assert!(linear_predictors(&[1.0], None, &params, true).is_err());
    }

    #[test]
    fn probability_examples() {
        let p = probabilities(&[0.0, 0.0]);
        for x in p.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = probabilities(&[2f64.ln(), 0.0]);
        assert!((p.0[0] - 0.5).abs() < 1e-15);
        assert!((p.0[1] - 0.25).abs() < 1e-15);
        assert!((p.0[2] - 0.25).abs() < 1e-15);
        let p = probabilities(&[1000.0, 0.0]);
        assert!((p.0[0] - 1.0).abs() < 1e-12);
        assert!(p.0.iter().all(|x| x.is_finite()));
    }

    proptest! {
        #[test]
        fn probabilities_live_on_the_simplex(eta in prop::collection::vec(-500.0f64..500.0, 1..6)) {
            let p = probabilities(&eta);
            prop_assert!(p.0.iter().all(|x| *x >= 0.0));
            prop_assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let lp = log_probabilities(&eta);
            prop_assert!((stats::log_sum_exp(&lp)).abs() < 1e-12);
        }

        #[test]
        fn common_shift_leaves_probabilities_unchanged(
            eta in prop::collection::vec(-50.0f64..50.0, 2..5),
            c in -100.0f64..100.0,
        ) {
            // softmax over (eta + c, c) equals softmax over (eta, 0)
            let mut scores: Vec<f64> = eta.iter().map(|e| e + c).collect();
            scores.push(c);
            let shifted: Vec<f64> = scores[..eta.len()].iter().map(|s| s - scores[eta.len()]).collect();
            let a = probabilities(&eta);
            let b = probabilities(&shifted);
            for (x, y) in a.0.iter().zip(&b.0) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert_eq!(argmax_first(&a.0), argmax_first(&b.0));
        }
    }

    #[test]
    fn loglik_examples() {
        let c = cohort(&[(vec![], 2)]);
        let params = CategoricalParams::zeros(3, 0, false);
        let ll = categorical_loglik(&c, &params, None, false).unwrap();
        assert!((ll - (1.0f64 / 3.0).ln()).abs() < 1e-15);

        let mut params = CategoricalParams::zeros(3, 1, false);
        params.beta[0] = vec![0.2, -0.7];
        params.beta[1] = vec![-0.1, 0.4];
        let one = categorical_loglik(&cohort(&[(vec![0.3], 1)]), &params, None, false).unwrap();
        let two = categorical_loglik(
            &cohort(&[(vec![0.3], 1), (vec![0.3], 1)]),
            &params,
            None,
            false,
        )
        .unwrap();
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn loglik_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows: Vec<(Vec<f64>, usize)> = (0..10)
            .map(|_| {
                (
                    vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                    rng.random_range(0..3),
                )
            })
            .collect();
        let c = cohort(&rows);
        let mut params = CategoricalParams::zeros(3, 2, true);
        for b in params.beta.iter_mut().flatten() {
            *b = rng.random_range(-1.0..1.0);
        }
        for a in params.alpha.iter_mut().flatten().flatten() {
            *a = rng.random_range(-1.0..1.0);
        }
        let chars: Vec<PatientCharacteristics> = (0..10)
            .map(|_| {
                [0; 2].map(|_| {
                    LatentCharacteristics::from_array([0; 3].map(|_| rng.random_range(-1.0..1.0)))
                })
            })
            .collect();
        let ll = categorical_loglik(&c, &params, Some(&chars), true).unwrap();
        let mut oracle = 0.0;
        for (i, (x, z)) in rows.iter().enumerate() {
            let mut scores = [0.0; 3];
            for j in 0..2 {
                let b = &params.beta[j];
                scores[j] = b[0] + b[1] * x[0] + b[2] * x[1];
                for k in 0..2 {
                    let ch = chars[i][k].to_array();
                    for m in 0..3 {
                        scores[j] += params.alpha[j][k][m] * ch[m];
                    }
                }
            }
            let denom: f64 = scores.iter().map(|s| s.exp()).sum();
            oracle += (scores[*z].exp() / denom).ln();
        }
        assert!((ll - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_alpha_sharing_equals_no_sharing() {
        let c = cohort(&[(vec![0.5], 0), (vec![-1.5], 2)]);
        let mut params = CategoricalParams::zeros(3, 1, true);
        params.beta[0] = vec![0.3, 0.1];
        let chars = vec![[LatentCharacteristics::new(2.0, -1.0, 0.5); 2]; 2];
        assert_eq!(
            categorical_loglik(&c, &params, Some(&chars), true).unwrap(),
            categorical_loglik(&c, &params, None, false).unwrap()
        );
    }

    #[test]
    fn relative_risk_examples() {
        let r = relative_risks(&[0.0; 5]).unwrap();
        assert_eq!(
            (r.rr, r.ci_low, r.ci_high, r.significant),
            (1.0, 1.0, 1.0, false)
        );
        let r = relative_risks(&[2f64.ln(), 2f64.ln()]).unwrap();
        assert!((r.rr - 2.0).abs() < 1e-15);
        assert!(relative_risks(&[]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let draws: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let r = relative_risks(&draws).unwrap();
        assert!(r.ci_low < 1.0 && r.ci_high > 1.0 && !r.significant);
        // symmetric draws: RR of a coefficient and of its negation multiply to ~1
        let neg: Vec<f64> = draws.iter().map(|d| -d).collect();
        let rn = relative_risks(&neg).unwrap();
        assert!((r.rr * rn.rr - 1.0).abs() < 1e-3);
    }

    #[test]
    fn prediction_examples() {
        let p = predict_treatment(&[vec![0.2, 0.5, 0.3]]).unwrap();
        assert_eq!(p.class, 1);
        let third = 1.0 / 3.0;
        let p = predict_treatment(&[vec![third; 3]]).unwrap();
        assert_eq!(p.class, 0);
        let p = predict_treatment(&[vec![0.6, 0.2, 0.2], vec![0.2, 0.6, 0.2]]).unwrap();
        assert!((p.mean[0] - 0.4).abs() < 1e-15 && (p.mean[1] - 0.4).abs() < 1e-15);
        assert_eq!(p.class, 0);
        assert!(predict_treatment(&[]).is_err());
    }
}

//! Bi-exponential longitudinal submodel.
//!
//! A patient's biomarker follows `B [exp(G t) + exp(-D t) - 1]` plus Normal
//! noise, with `log B = θ1 + b1`, `log G = θ2 + b2`, `log D = θ3 + b3` and
//! `b ~ MVN(0, Ω)`.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::data::Cohort;
use crate::{linalg, stats, Error, Result, NUM_BIOMARKERS};

/// Largest exponent accepted before a trajectory is declared divergent.
pub const MAX_EXPONENT: f64 = 700.0;

/// Log-scale baseline, growth rate and decay rate of one patient's biomarker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentCharacteristics {
    pub log_baseline: f64,
    pub log_growth: f64,
    pub log_decay: f64,
}

impl LatentCharacteristics {
    pub fn new(log_baseline: f64, log_growth: f64, log_decay: f64) -> Self {
        LatentCharacteristics {
            log_baseline,
            log_growth,
            log_decay,
        }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.log_baseline, self.log_growth, self.log_decay]
    }

    /// `θ + b` for population parameters and one random-effect vector.
    pub fn from_effects(theta: &[f64; 3], effects: &[f64; 3]) -> Self {
        Self::new(
            theta[0] + effects[0],
            theta[1] + effects[1],
            theta[2] + effects[2],
        )
    }
}

/// Population-level parameters of one biomarker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiomarkerParams {
    pub theta: [f64; 3],
    /// Residual variance.
    pub sigma2: f64,
    /// Random-effects covariance.
    pub omega: Matrix3<f64>,
}

impl BiomarkerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "residual variance must be positive, got {}",
                self.sigma2
            )));
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite population parameter".into(),
            ));
        }
        linalg::cholesky(&self.omega).map(|_| ())
    }
}

/// Mean biomarker value at time `t`.
pub fn mean_trajectory(chars: &LatentCharacteristics, t: f64) -> Result<f64> {
    trajectory_and_gradient(chars, t).map(|(m, _)| m)
}

/// Mean trajectory and its gradient with respect to `(B*, G*, D*)`.
pub fn trajectory_and_gradient(chars: &LatentCharacteristics, t: f64) -> Result<(f64, [f64; 3])> {
    Rates::new(chars)?.at(t)
}

/// The three rates of one patient, exponentiated once and reused across
/// observation times.
#[derive(Debug, Clone, Copy)]
pub struct Rates {
    baseline: f64,
    growth: f64,
    decay: f64,
}

impl Rates {
    pub fn new(chars: &LatentCharacteristics) -> Result<Self> {
        if chars.log_baseline > MAX_EXPONENT {
            return Err(Error::Divergence {
                exponent: chars.log_baseline,
                limit: MAX_EXPONENT,
            });
        }
        Ok(Rates {
            baseline: chars.log_baseline.exp(),
            growth: chars.log_growth.exp(),
            decay: chars.log_decay.exp(),
        })
    }

    /// Mean and gradient at time `t`.
    pub fn at(&self, t: f64) -> Result<(f64, [f64; 3])> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "time must be finite and >= 0, got {t}"
            )));
        }
        let baseline = self.baseline;
        if t == 0.0 {
            return Ok((baseline, [baseline, 0.0, 0.0]));
        }
        let growth_exponent = self.growth * t;
        if !(growth_exponent <= MAX_EXPONENT) {
            return Err(Error::Divergence {
                exponent: growth_exponent,
                limit: MAX_EXPONENT,
            });
        }
        let growth = growth_exponent.exp();
        let decay = (-self.decay * t).exp();
        let mean = baseline * (growth + decay - 1.0);
        let d_growth = baseline * growth * growth_exponent;
        let d_decay = if decay == 0.0 {
            0.0
        } else {
            -baseline * decay * self.decay * t
        };
        Ok((mean, [mean, d_growth, d_decay]))
    }
}

/// Normal log-likelihood of all observations of one biomarker.
///
/// `effects[i]` is patient `i`'s random-effect vector; every patient must
/// have one.
pub fn longitudinal_loglik(
    cohort: &Cohort,
    biomarker: usize,
    params: &BiomarkerParams,
    effects: &[[f64; 3]],
) -> Result<f64> {
    if biomarker >= NUM_BIOMARKERS {
        return Err(Error::InvalidArgument(format!(
            "biomarker index {biomarker}"
        )));
    }
    if effects.len() != cohort.n_patients() {
        return Err(Error::Dimension(format!(
            "{} random-effect vectors for {} patients",
            effects.len(),
            cohort.n_patients()
        )));
    }
    let sd = params.sigma2.sqrt();
    let mut total = 0.0;
    for o in cohort
        .observations()
        .iter()
        .filter(|o| o.biomarker == biomarker)
    {
        let chars = LatentCharacteristics::from_effects(&params.theta, &effects[o.patient]);
        total += stats::normal_lpdf(o.value, mean_trajectory(&chars, o.time)?, sd);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedResidual {
    pub patient_id: String,
    /// Zero-based biomarker index.
    pub biomarker: usize,
    pub time: f64,
    pub iwres: f64,
}

/// Individual weighted residuals `(y - ŷ) / σ̂`, one per observation.
///
/// `fitted[n]` is the fitted mean for `cohort.observations()[n]`;
/// `sigma_hat[k]` is the residual scale of biomarker `k`.
pub fn iwres(
    cohort: &Cohort,
    fitted: &[f64],
    sigma_hat: [f64; NUM_BIOMARKERS],
) -> Result<Vec<WeightedResidual>> {
    if let Some(s) = sigma_hat.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "sigma_hat must be positive, got {s}"
        )));
    }
    if fitted.len() != cohort.observations().len() {
        return Err(Error::Dimension(format!(
            "{} fitted values for {} observations",
            fitted.len(),
            cohort.observations().len()
        )));
    }
    Ok(cohort
        .observations()
        .iter()
        .zip(fitted)
        .map(|(o, f)| WeightedResidual {
            patient_id: cohort.patients()[o.patient].id.clone(),
            biomarker: o.biomarker,
            time: o.time,
            iwres: (o.value - f) / sigma_hat[o.biomarker],
        })
        .collect())
}

pub fn write_iwres_csv(path: &std::path::Path, residuals: &[WeightedResidual]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(["patient_id", "biomarker", "time", "iwres"])
        .map_err(|e| Error::csv(path, e))?;
    for r in residuals {
        w.write_record([
            r.patient_id.clone(),
            (r.biomarker + 1).to_string(),
            r.time.to_string(),
            r.iwres.to_string(),
        ])
        .map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateGroup, LongitudinalObservation, PatientRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chars(b: f64, g: f64, d: f64) -> LatentCharacteristics {
        LatentCharacteristics::new(b.ln(), g.ln(), d.ln())
    }

    fn cohort(obs: Vec<(usize, usize, f64, f64)>, n: usize) -> Cohort {
        let patients = (0..n)
            .map(|i| PatientRecord {
                id: format!("p{i}"),
                covariates: vec![],
                treatment: 0,
            })
            .collect();
        let obs = obs
            .into_iter()
            .map(
                |(patient, biomarker, time, value)| LongitudinalObservation {
                    patient,
                    biomarker,
                    time,
                    value,
                },
            )
            .collect();
        Cohort::new(patients, obs, vec![], Vec::<CovariateGroup>::new(), 3).unwrap()
    }

    #[test]
    fn value_at_time_zero_is_the_baseline() {
        let m = mean_trajectory(&chars(18.60, 0.24, 4.76), 0.0).unwrap();
        assert!((m - 18.60).abs() < 1e-12);
        let m = mean_trajectory(&LatentCharacteristics::new(0.0, 3.0, -2.0), 0.0).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn scalar_evaluation() {
        let m = mean_trajectory(&chars(2.0, 0.5, 1.0), 1.0).unwrap();
        let oracle = 2.0 * (0.5f64.exp() + (-1.0f64).exp() - 1.0);
        assert!((m - oracle).abs() < 1e-12, "{m}");
        assert!((m - 2.033_201).abs() < 1e-6);
    }

    #[test]
    fn overflow_is_an_error_not_infinity() {
        let err = mean_trajectory(&chars(1.0, 800.0, 1.0), 1.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert!(mean_trajectory(&chars(1.0, 1.0, 1.0), -0.5).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = LatentCharacteristics::new(0.3, -0.4, 0.9);
        let (_, g) = trajectory_and_gradient(&c, 1.7).unwrap();
        let h = 1e-6;
        for m in 0..3 {
            let mut up = c.to_array();
            let mut dn = c.to_array();
            up[m] += h;
            dn[m] -= h;
            let fd = (mean_trajectory(&LatentCharacteristics::from_array(up), 1.7).unwrap()
                - mean_trajectory(&LatentCharacteristics::from_array(dn), 1.7).unwrap())
                / (2.0 * h);
            assert!((fd - g[m]).abs() < 1e-7 * (1.0 + g[m].abs()));
        }
    }

    #[test]
    fn monotone_in_baseline_where_bracket_positive() {
        for &t in &[0.0, 0.5, 1.0, 2.0, 3.0] {
            let lo = mean_trajectory(&LatentCharacteristics::new(0.1, -1.0, 0.5), t).unwrap();
            let hi = mean_trajectory(&LatentCharacteristics::new(0.2, -1.0, 0.5), t).unwrap();
            assert!(hi > lo);
        }
    }

    fn unit_params(sigma2: f64) -> BiomarkerParams {
        BiomarkerParams {
            theta: [0.0; 3],
            sigma2,
            omega: Matrix3::identity(),
        }
    }

    #[test]
    fn observation_at_mean_with_unit_density_scale() {
        let c = cohort(vec![(0, 0, 0.0, 1.0)], 1);
        let ll = longitudinal_loglik(
            &c,
            0,
            &unit_params(1.0 / (2.0 * std::f64::consts::PI)),
            &[[0.0; 3]],
        )
        .unwrap();
        assert!(ll.abs() < 1e-14);
    }

    #[test]
    fn additive_over_observations() {
        let one = cohort(vec![(0, 0, 0.5, 2.0)], 1);
        let two = cohort(vec![(0, 0, 0.5, 2.0), (1, 0, 0.5, 2.0)], 2);
        let p = unit_params(0.3);
        let a = longitudinal_loglik(&one, 0, &p, &[[0.1, 0.2, 0.3]]).unwrap();
        let b = longitudinal_loglik(&two, 0, &p, &[[0.1, 0.2, 0.3]; 2]).unwrap();
        assert_eq!(b, 2.0 * a);
    }

    #[test]
    fn matches_scalar_oracle_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let obs: Vec<_> = (0..5)
                .map(|i| {
                    (
                        i % 2,
                        0,
                        rng.random_range(0.0..3.0),
                        rng.random_range(-2.0..5.0),
                    )
                })
                .collect();
            let c = cohort(obs.clone(), 2);
            let params = BiomarkerParams {
                theta: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..0.0),
                    rng.random_range(0.0..1.0),
                ],
                sigma2: rng.random_range(0.1..2.0),
                omega: Matrix3::identity(),
            };
            let effects: Vec<[f64; 3]> = (0..2)
                .map(|_| [0; 3].map(|_| rng.random_range(-0.5..0.5)))
                .collect();
            let ll = longitudinal_loglik(&c, 0, &params, &effects).unwrap();
            // independent scalar oracle
            let oracle: f64 = obs
                .iter()
                .map(|&(i, _, t, y)| {
                    let b = (params.theta[0] + effects[i][0]).exp();
                    let g = (params.theta[1] + effects[i][1]).exp();
                    let d = (params.theta[2] + effects[i][2]).exp();
                    let mu = b * ((g * t).exp() + (-d * t).exp() - 1.0);
                    -0.5 * (2.0 * std::f64::consts::PI * params.sigma2).ln()
                        - (y - mu).powi(2) / (2.0 * params.sigma2)
                })
                .sum();
            assert!((ll - oracle).abs() <= 1e-10 * oracle.abs());
        }
    }

    #[test]
    fn residual_arithmetic() {
        let c = cohort(vec![(0, 0, 0.0, 1.2), (0, 1, 1.0, 3.0)], 1);
        let r = iwres(&c, &[1.0, 3.0], [0.2, 0.5]).unwrap();
        assert!((r[0].iwres - 1.0).abs() < 1e-12);
        assert_eq!(r[1].iwres, 0.0);
        let half = iwres(&c, &[1.0, 3.0], [0.4, 1.0]).unwrap();
        assert!((half[0].iwres - r[0].iwres / 2.0).abs() < 1e-15);
        assert!(iwres(&c, &[1.0, 3.0], [0.0, 1.0]).is_err());
    }
}

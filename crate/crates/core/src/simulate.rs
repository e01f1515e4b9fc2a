//! Synthetic cohorts drawn from the generative joint model.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::biexp::{self, BiomarkerParams, LatentCharacteristics};
use crate::categorical::{self, CategoricalParams, PatientCharacteristics};
use crate::data::{
    self, BaselineColumns, Cohort, ContinuousTransform, CovariateGroup, CovariateSpec,
    LongitudinalObservation, PatientRecord, Schema,
};
use crate::linalg;
use crate::sampler::{check_convergence, PosteriorDraws};
use crate::{stats, Error, Result, NUM_BIOMARKERS};

/// Observation times of one biomarker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationSchedule {
    /// The same times for every patient.
    Grid { times: Vec<f64> },
    /// A measurement at time 0, then exponential gaps with `rate` per unit
    /// time until `horizon`.
    Renewal { rate: f64, horizon: f64 },
}

impl ObservationSchedule {
    fn times(&self, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        match self {
            ObservationSchedule::Grid { times } => Ok(times.clone()),
            ObservationSchedule::Renewal { rate, horizon } => {
                let gap = Exp::new(*rate)
                    .map_err(|e| Error::InvalidArgument(format!("renewal rate: {e}")))?;
                let mut t = 0.0;
                let mut out = vec![0.0];
                loop {
                    t += gap.sample(rng);
                    if t > *horizon {
                        return Ok(out);
                    }
                    out.push(t);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateGenerator {
    Normal {
        name: String,
        mean: f64,
        sd: f64,
    },
    /// The first level is the reference.
    Factor {
        name: String,
        levels: Vec<String>,
        probabilities: Vec<f64>,
    },
}

impl CovariateGenerator {
    pub fn name(&self) -> &str {
        match self {
            CovariateGenerator::Normal { name, .. } | CovariateGenerator::Factor { name, .. } => {
                name
            }
        }
    }

    fn design_columns(&self) -> Vec<String> {
        match self {
            CovariateGenerator::Normal { name, .. } => vec![name.clone()],
            CovariateGenerator::Factor { name, levels, .. } => {
                levels[1..].iter().map(|l| format!("{name}={l}")).collect()
            }
        }
    }

    fn spec(&self) -> CovariateSpec {
        match self {
            CovariateGenerator::Normal { name, .. } => CovariateSpec::Continuous {
                column: name.clone(),
                transform: ContinuousTransform::Identity,
            },
            CovariateGenerator::Factor { name, levels, .. } => CovariateSpec::Factor {
                column: name.clone(),
                reference: levels[0].clone(),
                levels: Some(levels.clone()),
            },
        }
    }
}

/// True parameters of the generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParameters {
    pub biomarkers: [BiomarkerParams; NUM_BIOMARKERS],
    /// `beta[j]` starts with the intercept; `alpha` must be present.
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<[[f64; 3]; NUM_BIOMARKERS]>,
}

impl TrueParameters {
    pub fn categorical(&self) -> CategoricalParams {
        CategoricalParams {
            beta: self.beta.clone(),
            alpha: self.alpha.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationScenario {
    pub n_patients: usize,
    pub truth: TrueParameters,
    pub schedules: [ObservationSchedule; NUM_BIOMARKERS],
    pub covariates: Vec<CovariateGenerator>,
    pub seed: u64,
}

/// Bi-exponential parameters used as default truth (posterior means of a
/// published application: M-spike and FLC).
pub fn default_biomarkers() -> [BiomarkerParams; NUM_BIOMARKERS] {
    [
        BiomarkerParams {
            theta: [18.60f64.ln(), 0.24f64.ln(), 4.76f64.ln()],
            sigma2: 0.06,
            omega: Matrix3::new(0.79, -0.22, 0.40, -0.22, 0.70, 0.05, 0.40, 0.05, 0.87),
        },
        BiomarkerParams {
            theta: [21.20f64.ln(), 0.18f64.ln(), 3.74f64.ln()],
            sigma2: 0.14,
            omega: Matrix3::new(2.93, -1.37, 1.62, -1.37, 1.60, -0.04, 1.62, -0.04, 2.35),
        },
    ]
}

impl Default for SimulationScenario {
    /// 300 patients; `x1` and M-spike growth drive treatment, `x2` and the
    /// factor `grade` are noise.
    fn default() -> Self {
        let schedule = ObservationSchedule::Renewal {
            rate: 2.0,
            horizon: 2.0,
        };
        let mut alpha = vec![[[0.0; 3]; NUM_BIOMARKERS]; 2];
        alpha[0][0][1] = 1.0;
        alpha[1][0][1] = -0.5;
        SimulationScenario {
            n_patients: 300,
            truth: TrueParameters {
                biomarkers: default_biomarkers(),
                // columns: intercept, x1, x2, grade=II, grade=III
                beta: vec![
                    vec![0.2, 1.0, 0.0, 0.0, 0.0],
                    vec![-0.1, -0.8, 0.0, 0.0, 0.0],
                ],
                alpha,
            },
            schedules: [schedule.clone(), schedule],
            covariates: vec![
                CovariateGenerator::Normal {
                    name: "x1".into(),
                    mean: 0.0,
                    sd: 1.0,
                },
                CovariateGenerator::Normal {
                    name: "x2".into(),
                    mean: 0.0,
                    sd: 1.0,
                },
                CovariateGenerator::Factor {
                    name: "grade".into(),
                    levels: vec!["I".into(), "II".into(), "III".into()],
                    probabilities: vec![0.5, 0.3, 0.2],
                },
            ],
            seed: 1,
        }
    }
}

impl SimulationScenario {
    pub fn n_design_columns(&self) -> usize {
        self.covariates
            .iter()
            .map(|c| c.design_columns().len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for b in &self.truth.biomarkers {
            b.validate()?;
        }
        let p = self.n_design_columns();
        if self.truth.beta.is_empty()
            || self.truth.beta.iter().any(|b| b.len() != p + 1)
            || self.truth.alpha.len() != self.truth.beta.len()
        {
            return Err(Error::Dimension(format!(
                "true coefficients must have {} rows of {} entries plus association blocks",
                self.truth.beta.len(),
                p + 1
            )));
        }
        for c in &self.covariates {
            match c {
                CovariateGenerator::Normal { sd, .. } if !(*sd >= 0.0) => {
                    return Err(Error::InvalidArgument(format!(
                        "covariate `{}`: sd < 0",
                        c.name()
                    )));
                }
                CovariateGenerator::Factor {
                    levels,
                    probabilities,
                    ..
                } if levels.len() < 2 || levels.len() != probabilities.len() => {
                    return Err(Error::InvalidArgument(format!(
                        "factor `{}` needs ≥2 levels with one probability each",
                        c.name()
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.truth.beta.len() + 1
    }

    /// Schema that reads the written files back into the same design.
    pub fn schema(&self) -> Schema {
        Schema {
            baseline: BaselineColumns {
                covariates: self
                    .covariates
                    .iter()
                    .map(CovariateGenerator::spec)
                    .collect(),
                ..BaselineColumns::default()
            },
            num_categories: self.num_categories(),
            ..Schema::default()
        }
    }
}

/// Everything drawn while simulating, for recovery checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationTruth {
    pub parameters: TrueParameters,
    /// `effects[k][i]`.
    pub effects: Vec<Vec<[f64; 3]>>,
    /// `phi[i]`, true treatment probabilities.
    pub phi: Vec<Vec<f64>>,
    /// Raw covariate cells as written to the baseline file.
    #[serde(skip)]
    pub raw_covariates: Vec<Vec<String>>,
}

impl SimulationTruth {
    pub fn characteristics(&self, patient: usize) -> PatientCharacteristics {
        std::array::from_fn(|k| {
            LatentCharacteristics::from_effects(
                &self.parameters.biomarkers[k].theta,
                &self.effects[k][patient],
            )
        })
    }

    /// True population values in constrained layout order (θ, σ², Ω per
    /// biomarker, then β and α), paired with their names.
    pub fn population_values(&self, covariate_names: &[String]) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (k, b) in self.parameters.biomarkers.iter().enumerate() {
            for (m, t) in b.theta.iter().enumerate() {
                out.push((format!("theta.{}.{}", k + 1, m + 1), *t));
            }
            out.push((format!("sigma2.{}", k + 1), b.sigma2));
            for ((r, c), v) in linalg::UPPER_ENTRIES
                .iter()
                .zip(linalg::pack_upper(&b.omega))
            {
                out.push((format!("omega.{}.{}{}", k + 1, r + 1, c + 1), v));
            }
        }
        for (j, beta) in self.parameters.beta.iter().enumerate() {
            out.push((format!("beta.{}.(Intercept)", j + 1), beta[0]));
            for (name, v) in covariate_names.iter().zip(&beta[1..]) {
                out.push((format!("beta.{}.{name}", j + 1), *v));
            }
        }
        for (j, a) in self.parameters.alpha.iter().enumerate() {
            for (k, row) in a.iter().enumerate() {
                for (m, v) in row.iter().enumerate() {
                    out.push((format!("alpha.{}.{}.{}", j + 1, k + 1, m + 1), *v));
                }
            }
        }
        out
    }
}

/// Draw a cohort. Each patient uses its own RNG stream derived from the seed.
pub fn simulate(scenario: &SimulationScenario) -> Result<(Cohort, SimulationTruth)> {
    scenario.validate()?;
    let factors: Vec<Matrix3<f64>> = scenario
        .truth
        .biomarkers
        .iter()
        .map(|b| linalg::cholesky(&b.omega))
        .collect::<Result<_>>()?;
    let categorical_truth = scenario.truth.categorical();
    let j = scenario.num_categories();

    let mut patients = Vec::with_capacity(scenario.n_patients);
    let mut observations = Vec::new();
    let mut effects = vec![Vec::new(); NUM_BIOMARKERS];
    let mut phi = Vec::with_capacity(scenario.n_patients);
    let mut raw_covariates = Vec::with_capacity(scenario.n_patients);
    for i in 0..scenario.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(i as u64);

        let mut x = Vec::new();
        let mut raw = Vec::new();
        for gen in &scenario.covariates {
            match gen {
                CovariateGenerator::Normal { mean, sd, .. } => {
                    let v = mean + sd * rng.sample::<f64, _>(StandardNormal);
                    x.push(v);
                    raw.push(v.to_string());
                }
                CovariateGenerator::Factor {
                    levels,
                    probabilities,
                    ..
                } => {
                    let pick = WeightedIndex::new(probabilities)
                        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", gen.name())))?
                        .sample(&mut rng);
                    x.extend((1..levels.len()).map(|l| if l == pick { 1.0 } else { 0.0 }));
                    raw.push(levels[pick].clone());
                }
            }
        }

        let mut chars: Vec<LatentCharacteristics> = Vec::with_capacity(NUM_BIOMARKERS);
        for (k, params) in scenario.truth.biomarkers.iter().enumerate() {
            let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let b = factors[k] * z;
            let b = [b[0], b[1], b[2]];
            let c = LatentCharacteristics::from_effects(&params.theta, &b);
            let noise = Normal::new(0.0, params.sigma2.sqrt())
                .map_err(|e| Error::InvalidArgument(format!("noise: {e}")))?;
            for t in scenario.schedules[k].times(&mut rng)? {
                let mu = biexp::mean_trajectory(&c, t)?;
                observations.push(LongitudinalObservation {
                    patient: i,
                    biomarker: k,
                    time: t,
                    value: mu + noise.sample(&mut rng),
                });
            }
            effects[k].push(b);
            chars.push(c);
        }
        let chars: PatientCharacteristics = [chars[0], chars[1]];
        let eta = categorical::linear_predictors(&x, Some(&chars), &categorical_truth, true)?;
        let p = categorical::probabilities(&eta).0;
        debug_assert_eq!(p.len(), j);
        let treatment = WeightedIndex::new(&p)
            .map_err(|e| Error::InvalidArgument(format!("treatment probabilities: {e}")))?
            .sample(&mut rng);
        patients.push(PatientRecord {
            id: format!("P{:04}", i + 1),
            covariates: x,
            treatment,
        });
        phi.push(p);
        raw_covariates.push(raw);
    }

    let names: Vec<String> = scenario
        .covariates
        .iter()
        .flat_map(CovariateGenerator::design_columns)
        .collect();
    let mut groups = Vec::new();
    let mut next = 0;
    for gen in &scenario.covariates {
        let width = gen.design_columns().len();
        groups.push(CovariateGroup {
            name: gen.name().to_string(),
            columns: (next..next + width).collect(),
        });
        next += width;
    }
    let cohort = Cohort::new(patients, observations, names, groups, j)?;
    Ok((
        cohort,
        SimulationTruth {
            parameters: scenario.truth.clone(),
            effects,
            phi,
            raw_covariates,
        },
    ))
}

/// Write `longitudinal.csv`, `baseline.csv`, `schema.json` and `truth.json`
/// into `dir`.
pub fn write_simulation(
    dir: &Path,
    scenario: &SimulationScenario,
    cohort: &Cohort,
    truth: &SimulationTruth,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data::write_longitudinal_csv(&dir.join("longitudinal.csv"), cohort)?;
    let path = dir.join("baseline.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    let mut header = vec!["patient_id".to_string()];
    header.extend(scenario.covariates.iter().map(|c| c.name().to_string()));
    header.push("treatment".into());
    w.write_record(&header).map_err(|e| Error::csv(&path, e))?;
    for (p, raw) in cohort.patients().iter().zip(&truth.raw_covariates) {
        let mut row = vec![p.id.clone()];
        row.extend(raw.iter().cloned());
        row.push((p.treatment + 1).to_string());
        w.write_record(&row).map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    data::write_json(&dir.join("schema.json"), &scenario.schema())?;
    data::write_json(&dir.join("truth.json"), truth)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageEntry {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub level: f64,
    pub entries: Vec<CoverageEntry>,
    pub coverage: f64,
}

/// Whether each true value lies in its central credible interval.
/// `truth` pairs parameter names in `draws` with their true values.
pub fn recovery_check(
    truth: &[(String, f64)],
    draws: &PosteriorDraws,
    level: f64,
) -> Result<CoverageReport> {
    let report = check_convergence(draws);
    if !report.converged {
        return Err(Error::NotConverged(format!(
            "{} parameters failed diagnostics (first: {})",
            report.failed.len(),
            report.failed.first().map(String::as_str).unwrap_or("")
        )));
    }
    coverage(truth, draws, level)
}

/// Interval coverage without the convergence gate.
pub fn coverage(
    truth: &[(String, f64)],
    draws: &PosteriorDraws,
    level: f64,
) -> Result<CoverageReport> {
    let mut entries = Vec::with_capacity(truth.len());
    for (name, value) in truth {
        let idx = draws
            .index_of(name)
            .ok_or_else(|| Error::UnknownVariable(name.clone()))?;
        let pooled = draws.pooled(idx);
        let (lo, hi) = stats::central_interval(&pooled, level);
        entries.push(CoverageEntry {
            name: name.clone(),
            truth: *value,
            mean: stats::mean(&pooled),
            ci_low: lo,
            ci_high: hi,
            covered: lo <= *value && *value <= hi,
        });
    }
    let covered = entries.iter().filter(|e| e.covered).count();
    Ok(CoverageReport {
        level,
        coverage: if entries.is_empty() {
            f64::NAN
        } else {
            covered as f64 / entries.len() as f64
        },
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::ChainDraws;

    fn small(n: usize, seed: u64) -> SimulationScenario {
        SimulationScenario {
            n_patients: n,
            seed,
            ..SimulationScenario::default()
        }
    }

    #[test]
    fn true_model_residuals_are_standard() {
        for seed in [5, 6, 7] {
            let (cohort, truth) = simulate(&small(300, seed)).unwrap();
            let means: Vec<f64> = cohort
                .observations()
                .iter()
                .map(|o| {
                    let c = truth.characteristics(o.patient)[o.biomarker];
                    biexp::mean_trajectory(&c, o.time).unwrap()
                })
                .collect();
            let sigma = truth
                .parameters
                .biomarkers
                .each_ref()
                .map(|b| b.sigma2.sqrt());
            let r = biexp::iwres(&cohort, &means, sigma).unwrap();
            for k in 0..NUM_BIOMARKERS {
                let v: Vec<f64> = r
                    .iter()
                    .filter(|r| r.biomarker == k)
                    .map(|r| r.iwres)
                    .collect();
                assert!(v.len() >= 1000);
                assert!(stats::mean(&v).abs() <= 0.1);
                assert!((0.9..=1.1).contains(&stats::sample_sd(&v)));
            }
        }
    }

    #[test]
    fn noiseless_limit_matches_trajectory() {
        let mut s = small(20, 3);
        for b in &mut s.truth.biomarkers {
            b.sigma2 = 1e-12;
        }
        let (cohort, truth) = simulate(&s).unwrap();
        for o in cohort.observations() {
            let c = truth.characteristics(o.patient)[o.biomarker];
            let mu = biexp::mean_trajectory(&c, o.time).unwrap();
            assert!((o.value - mu).abs() < 1e-5);
        }
    }

    #[test]
    fn null_coefficients_give_uniform_treatments() {
        let mut s = small(3000, 4);
        for b in &mut s.truth.beta {
            b.fill(0.0);
        }
        s.truth.alpha = vec![[[0.0; 3]; 2]; 2];
        let (cohort, _) = simulate(&s).unwrap();
        let n = cohort.n_patients() as f64;
        // binomial sd of a 1/3 frequency at n = 3000 is ~0.0086
        for j in 0..3 {
            let f = cohort
                .patients()
                .iter()
                .filter(|p| p.treatment == j)
                .count() as f64
                / n;
            assert!(
                (f - 1.0 / 3.0).abs() < 3.5 * (2.0f64 / 9.0 / n).sqrt(),
                "{f}"
            );
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, ta) = simulate(&small(50, 9)).unwrap();
        let (b, tb) = simulate(&small(50, 9)).unwrap();
        assert_eq!(a.patients(), b.patients());
        assert_eq!(a.observations(), b.observations());
        assert_eq!(ta, tb);
        let (c, _) = simulate(&small(50, 10)).unwrap();
        assert_ne!(a.observations(), c.observations());
    }

    #[test]
    fn renewal_schedule_median() {
        let (cohort, _) = simulate(&small(400, 5)).unwrap();
        let mut counts: Vec<f64> = (0..cohort.n_patients())
            .map(|i| {
                cohort
                    .observations()
                    .iter()
                    .filter(|o| o.patient == i && o.biomarker == 0)
                    .count() as f64
            })
            .collect();
        counts.sort_by(f64::total_cmp);
        assert_eq!(stats::quantile_sorted(&counts, 0.5), 5.0);
    }

    #[test]
    fn random_effect_moments() {
        let (_, truth) = simulate(&small(5000, 6)).unwrap();
        for k in 0..2 {
            let omega = truth.parameters.biomarkers[k].omega;
            let e = &truth.effects[k];
            let n = e.len() as f64;
            for r in 0..3 {
                for c in 0..3 {
                    let prod: Vec<f64> = e.iter().map(|b| b[r] * b[c]).collect();
                    let m = stats::mean(&prod);
                    // var(b_r b_c) = Ω_rr Ω_cc + Ω_rc² for zero-mean normals
                    let se = ((omega[(r, r)] * omega[(c, c)] + omega[(r, c)].powi(2)) / n).sqrt();
                    assert!((m - omega[(r, c)]).abs() < 3.0 * se, "k={k} ({r},{c}) {m}");
                }
            }
        }
    }

    #[test]
    fn baseline_regression_slope() {
        let (cohort, truth) = simulate(&small(5000, 7)).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for o in cohort
            .observations()
            .iter()
            .filter(|o| o.time == 0.0 && o.biomarker == 0)
        {
            xs.push(truth.characteristics(o.patient)[0].log_baseline.exp());
            ys.push(o.value);
        }
        let (mx, my) = (stats::mean(&xs), stats::mean(&ys));
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        assert!((sxy / sxx - 1.0).abs() < 0.05);
    }

    #[test]
    fn written_files_load_back_identically() {
        let s = small(40, 8);
        let (cohort, truth) = simulate(&s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_simulation(dir.path(), &s, &cohort, &truth).unwrap();
        let schema = Schema::from_json_file(&dir.path().join("schema.json")).unwrap();
        let back = data::load_cohort(
            &dir.path().join("longitudinal.csv"),
            &dir.path().join("baseline.csv"),
            &schema,
        )
        .unwrap();
        assert_eq!(back.patients(), cohort.patients());
        assert_eq!(back.observations(), cohort.observations());
        assert_eq!(back.covariate_names(), cohort.covariate_names());
        assert_eq!(back.groups(), cohort.groups());
    }

    #[test]
    fn overflowing_truth_is_rejected() {
        let mut s = small(5, 1);
        s.truth.biomarkers[0].theta[1] = 8.0;
        s.schedules[0] = ObservationSchedule::Grid {
            times: vec![0.0, 1.0],
        };
        assert!(matches!(simulate(&s), Err(Error::Divergence { .. })));
    }

    fn synthetic_draws(center: f64, seed: u64) -> PosteriorDraws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2000;
        let chains = (0..2)
            .map(|_| ChainDraws {
                values: (0..n * 40)
                    .map(|_| center + rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                stats: Vec::new(),
                step_size: 1.0,
                inv_metric: Vec::new(),
            })
            .collect();
        PosteriorDraws {
            names: (0..40).map(|i| format!("p{i}")).collect(),
            chains,
        }
    }

    #[test]
    fn coverage_by_construction() {
        // each true value is itself a draw from the "posterior", so it is
        // covered with probability 0.95
        let draws = synthetic_draws(0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<(String, f64)> = (0..40)
            .map(|i| (format!("p{i}"), rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let r = recovery_check(&truth, &draws, 0.95).unwrap();
        assert!(r.coverage >= 0.8, "{}", r.coverage);

        let far = synthetic_draws(50.0, 3);
        let r = recovery_check(&truth, &far, 0.95).unwrap();
        assert_eq!(r.coverage, 0.0);
    }

    #[test]
    fn unconverged_draws_are_rejected() {
        let mut draws = synthetic_draws(0.0, 4);
        for v in draws.chains[1].values.iter_mut() {
            *v += 10.0;
        }
        let truth = vec![("p0".to_string(), 0.0)];
        assert!(matches!(
            recovery_check(&truth, &draws, 0.95),
            Err(Error::NotConverged(_))
        ));
    }
}

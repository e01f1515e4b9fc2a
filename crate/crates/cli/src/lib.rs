//! Batch pipeline behind the `jmcat` binary: simulate, fit, evaluate, rank
//! variable importance and predict. Every command reads and writes plain
//! CSV/JSON so later stages can run in separate processes.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use jmcat_core::biexp;
use jmcat_core::categorical::{self, RiskRow};
use jmcat_core::data::{self, Cohort, Schema};
use jmcat_core::evaluation::{self, WaicResult, WeightedMetrics};
use jmcat_core::fitted::FittedModel;
use jmcat_core::importance::{self, VIReport};
use jmcat_core::linalg;
use jmcat_core::posterior::{EffectsParameterization, JointPosterior, Layout, Mode, PriorConfig};
use jmcat_core::sampler::{self, ConvergenceReport, PosteriorDraws, SamplerConfig};
use jmcat_core::simulate::{self, SimulationScenario};
use jmcat_core::{stats, NUM_BIOMARKERS, NUM_CHARACTERISTICS};

/// Points on each patient's prediction grid.
pub const PREDICTION_GRID: usize = 200;

pub const SUMMARY_HEADER: [&str; 4] = ["parameter", "mean", "ci_low", "ci_high"];
pub const TRAJECTORY_HEADER: [&str; 6] =
    ["patient_id", "biomarker", "time", "mean", "lower", "upper"];
pub const PROBABILITY_HEADER: [&str; 6] = [
    "patient_id",
    "category",
    "mean",
    "ci_low",
    "ci_high",
    "predicted_class",
];

const FIT_MANIFEST: &str = "fit.json";
const DRAWS: &str = "draws.csv";
const INPUT_LONGITUDINAL: &str = "input_longitudinal.csv";
const INPUT_BASELINE: &str = "input_baseline.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub mode: Mode,
    pub parameterization: EffectsParameterization,
    pub prior: PriorConfig,
    pub vi_runs: usize,
    pub baseline_runs: usize,
    /// Overrides the sampler and simulation seeds when set.
    pub seed: Option<u64>,
    pub simulation: SimulationScenario,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sampler: SamplerConfig::default(),
            mode: Mode::Joint,
            parameterization: EffectsParameterization::default(),
            prior: PriorConfig::default(),
            vi_runs: 50,
            baseline_runs: 1000,
            seed: None,
            simulation: SimulationScenario::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Push `seed` into every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let mut s = self.sampler.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    pub fn scenario(&self) -> SimulationScenario {
        let mut s = self.simulation.clone();
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        s
    }

    /// Seeds of the random baseline and the permutations are offset from the
    /// sampler seed so the streams differ.
    fn baseline_seed(&self) -> u64 {
        self.sampler_config().seed.wrapping_add(1)
    }

    fn vi_seed(&self) -> u64 {
        self.sampler_config().seed.wrapping_add(2)
    }
}

/// Everything a later stage needs to rebuild the fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitManifest {
    pub layout: Layout,
    pub covariate_names: Vec<String>,
    pub schema: Schema,
    pub config: RunConfig,
}

/// A fit read back from its directory.
pub struct LoadedFit {
    pub manifest: FitManifest,
    pub cohort: Cohort,
    pub draws: PosteriorDraws,
}

impl LoadedFit {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(FIT_MANIFEST);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("missing fit artifacts in {}", dir.display()))?;
        let manifest: FitManifest = serde_json::from_str(&text)?;
        let cohort = data::load_cohort(
            &dir.join(INPUT_LONGITUDINAL),
            &dir.join(INPUT_BASELINE),
            &manifest.schema,
        )?;
        let draws = PosteriorDraws::read_csv(&dir.join(DRAWS))?;
        if cohort.covariate_names() != manifest.covariate_names.as_slice() {
            bail!("stored inputs no longer match the fitted design");
        }
        Ok(LoadedFit {
            manifest,
            cohort,
            draws,
        })
    }

    pub fn model(&self) -> Result<FittedModel<'_>> {
        Ok(FittedModel::new(&self.draws, self.manifest.layout.clone())?)
    }
}

pub fn cmd_simulate(config: &RunConfig, out: &Path) -> Result<()> {
    let scenario = config.scenario();
    let (cohort, truth) = simulate::simulate(&scenario)?;
    simulate::write_simulation(out, &scenario, &cohort, &truth)?;
    Ok(())
}

/// Input files of a fit.
#[derive(Debug, Clone)]
pub struct FitInputs {
    pub longitudinal: PathBuf,
    pub baseline: PathBuf,
    /// Defaults to the standard column names.
    pub schema: Option<PathBuf>,
}

impl FitInputs {
    /// The files `simulate` writes into `dir`.
    pub fn simulated(dir: &Path) -> Self {
        FitInputs {
            longitudinal: dir.join("longitudinal.csv"),
            baseline: dir.join("baseline.csv"),
            schema: Some(dir.join("schema.json")),
        }
    }
}

/// Fit the model and write its artifacts. The returned report says whether
/// the run converged; artifacts are written either way.
pub fn cmd_fit(config: &RunConfig, inputs: &FitInputs, out: &Path) -> Result<ConvergenceReport> {
    let schema = match &inputs.schema {
        Some(p) => Schema::from_json_file(p)?,
        None => Schema::default(),
    };
    let cohort = data::load_cohort(&inputs.longitudinal, &inputs.baseline, &schema)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // Later stages reload the cohort from copies so the fit directory is
    // self-contained.
    std::fs::copy(&inputs.longitudinal, out.join(INPUT_LONGITUDINAL))?;
    std::fs::copy(&inputs.baseline, out.join(INPUT_BASELINE))?;

    let posterior = JointPosterior::new(
        &cohort,
        config.mode,
        config.parameterization,
        config.prior.clone(),
    );
    let layout = posterior.layout().clone();
    let manifest = FitManifest {
        layout: layout.clone(),
        covariate_names: cohort.covariate_names().to_vec(),
        schema,
        config: config.clone(),
    };
    data::write_json(&out.join(FIT_MANIFEST), &manifest)?;
    std::fs::write(
        out.join("preprocessing.json"),
        cohort.preprocessing_json()? + "\n",
    )?;

    let draws = sampler::sample(&posterior, &config.sampler_config())?;
    draws.write_csv(&out.join(DRAWS))?;
    let report = sampler::check_convergence(&draws);
    data::write_json(&out.join("diagnostics.json"), &report)?;

    let fit = FittedModel::new(&draws, layout)?;
    if fit.shares() {
        write_biexp_summary(&out.join("biexp_summary.csv"), &draws)?;
    }
    categorical::write_risk_table(&out.join("rr_table.csv"), &risk_rows(&fit, &cohort, None)?)?;
    Ok(report)
}

fn summary_row(name: String, values: &[f64]) -> [String; 4] {
    let (lo, hi) = stats::central_interval(values, 0.95);
    [
        name,
        stats::mean(values).to_string(),
        lo.to_string(),
        hi.to_string(),
    ]
}

/// Posterior mean and 95% interval of θ (log and natural scale), σ² and the
/// upper triangle of Ω for each biomarker.
fn write_biexp_summary(path: &Path, draws: &PosteriorDraws) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    let col = |name: &str| -> Result<Vec<f64>> {
        let idx = draws
            .index_of(name)
            .with_context(|| format!("draws lack `{name}`"))?;
        Ok(draws.pooled(idx))
    };
    for k in 1..=NUM_BIOMARKERS {
        for m in 1..=NUM_CHARACTERISTICS {
            let name = format!("theta.{k}.{m}");
            let v = col(&name)?;
            w.write_record(summary_row(name.clone(), &v))?;
            let e: Vec<f64> = v.iter().map(|x| x.exp()).collect();
            w.write_record(summary_row(format!("exp({name})"), &e))?;
        }
        let name = format!("sigma2.{k}");
        w.write_record(summary_row(name.clone(), &col(&name)?))?;
        for &(r, c) in &linalg::UPPER_ENTRIES {
            let name = format!("omega.{k}.{}{}", r + 1, c + 1);
            w.write_record(summary_row(name.clone(), &col(&name)?))?;
        }
    }
    w.flush()?;
    Ok(())
}

const CHARACTERISTICS: [&str; NUM_CHARACTERISTICS] = ["baseline", "growth", "decay"];

/// Relative risks of every covariate column and, in joint fits, every latent
/// characteristic, for each non-reference category.
pub fn risk_rows(
    fit: &FittedModel,
    cohort: &Cohort,
    vi: Option<&VIReport>,
) -> Result<Vec<RiskRow>> {
    let layout = fit.layout();
    let j_total = layout.n_categories;
    let names = cohort.covariate_names();
    let draws = fit.draws();
    let rank = |variable: &str| vi.and_then(|r| r.row(variable)).map(|r| r.rank);
    let mut rows = Vec::new();
    for j in 0..j_total - 1 {
        let contrast = format!("{} vs {j_total}", j + 1);
        let beta = layout.beta(j);
        for group in cohort.groups() {
            for &c in &group.columns {
                let values = draws.pooled(beta.start + 1 + c);
                let category = names[c]
                    .strip_prefix(&format!("{}=", group.name))
                    .unwrap_or("")
                    .to_string();
                rows.push(RiskRow {
                    variable: group.name.clone(),
                    category,
                    contrast: contrast.clone(),
                    vi_rank: rank(&group.name),
                    risk: categorical::relative_risks(&values)?,
                });
            }
        }
        if fit.shares() {
            for k in 0..NUM_BIOMARKERS {
                let alpha = layout.alpha(j, k);
                for (m, label) in CHARACTERISTICS.iter().enumerate() {
                    let variable = format!("{label}.{}", k + 1);
                    rows.push(RiskRow {
                        vi_rank: rank(&variable),
                        variable,
                        category: String::new(),
                        contrast: contrast.clone(),
                        risk: categorical::relative_risks(&draws.pooled(alpha.start + m))?,
                    });
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub n_patients: usize,
    pub num_categories: usize,
    /// `confusion[predicted][observed]`, zero-based classes.
    pub confusion: Vec<Vec<u64>>,
    pub model: WeightedMetrics,
    pub random_baseline: WeightedMetrics,
    pub baseline_runs: usize,
    /// WAIC of the categorical outcome, one unit per patient.
    pub waic: WaicResult,
    /// IWRES mean and standard deviation per biomarker (joint fits only).
    pub iwres: Vec<ResidualSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualSummary {
    pub biomarker: usize,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
}

/// Class-weighted metrics, the random baseline, WAIC and IWRES.
pub fn cmd_evaluate(config: &RunConfig, fit_dir: &Path, out: &Path) -> Result<EvaluationReport> {
    let loaded = LoadedFit::load(fit_dir)?;
    let fit = loaded.model()?;
    let cohort = &loaded.cohort;
    std::fs::create_dir_all(out)?;

    let observed: Vec<usize> = cohort.patients().iter().map(|p| p.treatment).collect();
    let predicted = fit.predicted_classes(cohort)?;
    let j = cohort.num_categories();
    let cm = evaluation::confusion(&predicted, &observed, j)?;
    let model = evaluation::weighted_metrics(&cm)?;
    let random_baseline = evaluation::random_classifier_baseline(
        &observed,
        j,
        config.baseline_runs,
        config.baseline_seed(),
    )?;
    let waic = importance::base_waic(&fit, cohort)?;

    let mut iwres = Vec::new();
    if fit.shares() {
        let residuals = biexp::iwres(cohort, &fit.fitted_means(cohort)?, fit.sigma_hat()?)?;
        biexp::write_iwres_csv(&out.join("iwres.csv"), &residuals)?;
        for k in 0..NUM_BIOMARKERS {
            let r: Vec<f64> = residuals
                .iter()
                .filter(|r| r.biomarker == k)
                .map(|r| r.iwres)
                .collect();
            iwres.push(ResidualSummary {
                biomarker: k + 1,
                count: r.len(),
                mean: stats::mean(&r),
                sd: stats::sample_sd(&r),
            });
        }
    }

    let report = EvaluationReport {
        n_patients: cohort.n_patients(),
        num_categories: j,
        confusion: cm.counts,
        model,
        random_baseline,
        baseline_runs: config.baseline_runs,
        waic,
        iwres,
    };
    data::write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

/// Permutation importance of every variable the fit can use. Also writes the
/// relative-risk table with VI ranks filled in.
pub fn cmd_vi(config: &RunConfig, fit_dir: &Path, out: &Path) -> Result<VIReport> {
    let loaded = LoadedFit::load(fit_dir)?;
    let fit = loaded.model()?;
    let cohort = &loaded.cohort;
    std::fs::create_dir_all(out)?;
    let variables = importance::registry(cohort, fit.shares());
    let report =
        importance::vi_ranking(&fit, cohort, &variables, config.vi_runs, config.vi_seed())?;
    report.write_csv(&out.join("vi.csv"))?;
    categorical::write_risk_table(
        &out.join("rr_table_ranked.csv"),
        &risk_rows(&fit, cohort, Some(&report))?,
    )?;
    Ok(report)
}

/// Fitted trajectories and treatment probabilities of the listed patients
/// (every patient when `patients` is empty).
pub fn cmd_predict(fit_dir: &Path, patients: &[String], out: &Path) -> Result<()> {
    let loaded = LoadedFit::load(fit_dir)?;
    let fit = loaded.model()?;
    let cohort = &loaded.cohort;
    let indices: Vec<usize> = if patients.is_empty() {
        (0..cohort.n_patients()).collect()
    } else {
        patients
            .iter()
            .map(|id| {
                cohort
                    .patient_index(id)
                    .with_context(|| format!("unknown patient `{id}`"))
            })
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(out)?;

    if fit.shares() {
        let mut w = csv::Writer::from_path(out.join("trajectories.csv"))?;
        w.write_record(TRAJECTORY_HEADER)?;
        for &i in &indices {
            let grid = time_grid(cohort.max_time(i));
            for k in 0..NUM_BIOMARKERS {
                for p in fit.trajectory_band(i, k, &grid)? {
                    w.write_record([
                        cohort.patients()[i].id.clone(),
                        (k + 1).to_string(),
                        p.time.to_string(),
                        p.mean.to_string(),
                        p.lower.to_string(),
                        p.upper.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }

    let mut w = csv::Writer::from_path(out.join("probabilities.csv"))?;
    w.write_record(PROBABILITY_HEADER)?;
    for &i in &indices {
        let pred = categorical::predict_treatment(&fit.probability_draws(cohort, i)?)?;
        for (c, (mean, (lo, hi))) in pred.mean.iter().zip(&pred.interval).enumerate() {
            w.write_record([
                cohort.patients()[i].id.clone(),
                (c + 1).to_string(),
                mean.to_string(),
                lo.to_string(),
                hi.to_string(),
                (pred.class + 1).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Evenly spaced points over `[0, max_time]`.
pub fn time_grid(max_time: f64) -> Vec<f64> {
    let step = max_time / (PREDICTION_GRID - 1) as f64;
    (0..PREDICTION_GRID).map(|i| i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spans_the_observed_range() {
        let g = time_grid(2.5);
        assert_eq!(g.len(), PREDICTION_GRID);
        assert_eq!(g[0], 0.0);
        assert!((g[PREDICTION_GRID - 1] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn defaults_follow_the_reported_protocol() {
        let c = RunConfig::default();
        assert_eq!((c.vi_runs, c.baseline_runs), (50, 1000));
        let s = c.sampler_config();
        assert_eq!((s.chains, s.warmup, s.draws), (3, 1000, 4000));
    }

    #[test]
    fn seed_overrides_every_stage() {
        let c = RunConfig::default().with_seed(11);
        assert_eq!(c.sampler_config().seed, 11);
        assert_eq!(c.scenario().seed, 11);
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(
            r#"{"vi_runs": 3, "mode": "categorical", "simulation": {"n_patients": 12}}"#,
        )
        .unwrap();
        assert_eq!(c.vi_runs, 3);
        assert_eq!(c.simulation.n_patients, 12);
        assert_eq!(c.simulation.covariates.len(), 3);
        assert_eq!(c.mode, Mode::CategoricalOnly);
        assert_eq!(c.baseline_runs, 1000);
    }
}

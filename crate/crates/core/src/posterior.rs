//! Joint log posterior over an unconstrained parameter vector.
//!
//! The vector is laid out as, for each biomarker `k`,
//!
//! ```text
//! θ_k (3) | log σ²_k (1) | packed Cholesky factor of Ω_k, log diagonal (6) | effects (3 per patient)
//! ```
//!
//! followed by `β_j` (intercept first) for every non-reference category and,
//! when sharing, `α_j` (biomarker-major, 3 per biomarker). The
//! covariates-only competing model keeps only the `β` block.
//!
//! Effects are either non-centered standard normals `z` with `b = L z`, or
//! the latent characteristics `c = θ + b` themselves (centered). Both give the
//! same posterior over the constrained parameters; the log density returned
//! here always includes the log-Jacobian of the map to constrained space.
//!
//! The constrained representation used in draw files has the same layout:
//! `θ`, `σ²`, the six unique entries of `Ω` (11, 12, 13, 22, 23, 33), the
//! random effects `b`, then `β` and `α`.

use std::f64::consts::{LN_2, PI};
use std::ops::Range;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::biexp::{self, BiomarkerParams, LatentCharacteristics};
use crate::categorical::{self, Association, CategoricalParams, PatientCharacteristics};
use crate::data::Cohort;
use crate::initial::{self, StageOne};
use crate::linalg::{self, LOWER_ENTRIES};
use crate::stats::{self, LN_2PI};
use crate::{Error, Result, NUM_BIOMARKERS, NUM_CHARACTERISTICS};

const K: usize = NUM_BIOMARKERS;
const P: usize = NUM_CHARACTERISTICS;
/// θ, log σ² and the packed Cholesky factor.
const BIOMARKER_HEADER: usize = P + 1 + 6;
/// Half-widths of the uniform jitter around the data-informed start.
const THETA_JITTER: f64 = 0.2;
const SCALE_JITTER: f64 = 0.3;
/// Effects move by at most one approximate posterior standard deviation,
/// capped at this value.
const EFFECT_JITTER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Longitudinal and categorical submodels with shared characteristics.
    Joint,
    /// Categorical submodel on covariates alone.
    #[serde(alias = "categorical")]
    CategoricalOnly,
}

impl Mode {
    pub fn shares(self) -> bool {
        self == Mode::Joint
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Mode::Joint),
            "categorical" | "categorical_only" => Ok(Mode::CategoricalOnly),
            other => Err(Error::InvalidArgument(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectsParameterization {
    /// Sample the latent characteristics `θ + b` directly. The default: the
    /// characteristics are usually well identified by the data.
    #[default]
    Centered,
    /// Sample `z ~ N(0, I)` with `b = L z`.
    NonCentered,
}

/// Hyperparameters of the weakly informative priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// Standard deviation of the Normal(0, sd²) priors on θ, β and α.
    pub normal_sd: f64,
    /// Scale of the half-Cauchy prior placed on each residual variance σ².
    pub half_cauchy_scale: f64,
    /// Inverse-Wishart degrees of freedom for Ω.
    pub iw_df: f64,
    /// Inverse-Wishart scale matrix for Ω (density ∝ |Ω|^{-(ν+4)/2} exp(-tr(S Ω⁻¹)/2)).
    pub iw_scale: Matrix3<f64>,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            normal_sd: 10.0,
            half_cauchy_scale: 5.0,
            iw_df: 4.0,
            iw_scale: Matrix3::identity(),
        }
    }
}

impl PriorConfig {
    fn iw_log_normalizer(&self) -> f64 {
        let nu = self.iw_df;
        let p = P as f64;
        let ln_multigamma = p * (p - 1.0) / 4.0 * PI.ln()
            + (1..=P)
                .map(|j| ln_gamma(nu / 2.0 + (1.0 - j as f64) / 2.0))
                .sum::<f64>();
        nu / 2.0 * self.iw_scale.determinant().ln() - nu * p / 2.0 * LN_2 - ln_multigamma
    }

    /// Inverse-Wishart log density at `Ω = L Lᵀ`.
    pub fn iw_lpdf(&self, omega: &Matrix3<f64>) -> Result<f64> {
        let l = linalg::cholesky(omega)?;
        Ok(self.iw_log_normalizer() + self.iw_kernel(&l, None))
    }

    /// Unnormalized inverse-Wishart log density from the Cholesky factor,
    /// optionally accumulating its gradient in the lower entries of `L`.
    fn iw_kernel(&self, l: &Matrix3<f64>, grad: Option<&mut Matrix3<f64>>) -> f64 {
        let power = self.iw_df + P as f64 + 1.0;
        let linv = linalg::lower_inverse(l);
        let omega_inv = linv.transpose() * linv;
        let log_diag: f64 = (0..P).map(|i| l[(i, i)].ln()).sum();
        let lp = -power * log_diag - 0.5 * (self.iw_scale * omega_inv).trace();
        if let Some(g) = grad {
            let d = omega_inv * self.iw_scale * omega_inv * l;
            for &(r, c) in &LOWER_ENTRIES {
                g[(r, c)] += d[(r, c)];
            }
            for i in 0..P {
                g[(i, i)] -= power / l[(i, i)];
            }
        }
        lp
    }
}

/// Index map of the unconstrained (and constrained) parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub mode: Mode,
    pub parameterization: EffectsParameterization,
    pub n_patients: usize,
    pub n_covariates: usize,
    pub n_categories: usize,
}

impl Layout {
    pub fn new(
        mode: Mode,
        parameterization: EffectsParameterization,
        n_patients: usize,
        n_covariates: usize,
        n_categories: usize,
    ) -> Self {
        Layout {
            mode,
            parameterization,
            n_patients,
            n_covariates,
            n_categories,
        }
    }

    pub fn for_cohort(
        cohort: &Cohort,
        mode: Mode,
        parameterization: EffectsParameterization,
    ) -> Self {
        Self::new(
            mode,
            parameterization,
            cohort.n_patients(),
            cohort.n_covariates(),
            cohort.num_categories(),
        )
    }

    fn biomarker_len(&self) -> usize {
        BIOMARKER_HEADER + P * self.n_patients
    }

    fn longitudinal_len(&self) -> usize {
        if self.mode.shares() {
            K * self.biomarker_len()
        } else {
            0
        }
    }

    fn beta_len(&self) -> usize {
        (self.n_categories - 1) * (self.n_covariates + 1)
    }

    fn alpha_len(&self) -> usize {
        if self.mode.shares() {
            (self.n_categories - 1) * K * P
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.longitudinal_len() + self.beta_len() + self.alpha_len()
    }

    fn biomarker_start(&self, k: usize) -> usize {
        assert!(
            self.mode.shares(),
            "no longitudinal block in {:?} mode",
            self.mode
        );
        k * self.biomarker_len()
    }

    pub fn theta(&self, k: usize) -> Range<usize> {
        let s = self.biomarker_start(k);
        s..s + P
    }

    pub fn log_sigma2(&self, k: usize) -> usize {
        self.biomarker_start(k) + P
    }

    pub fn cholesky(&self, k: usize) -> Range<usize> {
        let s = self.biomarker_start(k) + P + 1;
        s..s + 6
    }

    pub fn effects(&self, k: usize, patient: usize) -> Range<usize> {
        let s = self.biomarker_start(k) + BIOMARKER_HEADER + P * patient;
        s..s + P
    }

    pub fn beta(&self, j: usize) -> Range<usize> {
        let s = self.longitudinal_len() + j * (self.n_covariates + 1);
        s..s + self.n_covariates + 1
    }

    pub fn alpha(&self, j: usize, k: usize) -> Range<usize> {
        assert!(
            self.mode.shares(),
            "no association block in {:?} mode",
            self.mode
        );
        let s = self.longitudinal_len() + self.beta_len() + (j * K + k) * P;
        s..s + P
    }

    /// Range covering every longitudinal coordinate.
    pub fn longitudinal(&self) -> Range<usize> {
        0..self.longitudinal_len()
    }

    /// Range covering `β` and `α`.
    pub fn categorical(&self) -> Range<usize> {
        self.longitudinal_len()..self.dim()
    }

    /// Whether index `idx` holds a population-level quantity (everything
    /// except per-patient effects).
    pub fn is_population(&self, idx: usize) -> bool {
        if idx >= self.longitudinal_len() {
            return true;
        }
        idx % self.biomarker_len() < BIOMARKER_HEADER
    }

    /// Names of the constrained parameters, in layout order.
    pub fn constrained_names(&self, covariate_names: &[String]) -> Vec<String> {
        assert_eq!(covariate_names.len(), self.n_covariates);
        let mut names = Vec::with_capacity(self.dim());
        if self.mode.shares() {
            for k in 1..=K {
                for m in 1..=P {
                    names.push(format!("theta.{k}.{m}"));
                }
                names.push(format!("sigma2.{k}"));
                for &(r, c) in &linalg::UPPER_ENTRIES {
                    names.push(format!("omega.{k}.{}{}", r + 1, c + 1));
                }
                for i in 1..=self.n_patients {
                    for m in 1..=P {
                        names.push(format!("b.{k}.{i}.{m}"));
                    }
                }
            }
        }
        for j in 1..self.n_categories {
            names.push(format!("beta.{j}.(Intercept)"));
            for c in covariate_names {
                names.push(format!("beta.{j}.{c}"));
            }
        }
        if self.mode.shares() {
            for j in 1..self.n_categories {
                for k in 1..=K {
                    for m in 1..=P {
                        names.push(format!("alpha.{j}.{k}.{m}"));
                    }
                }
            }
        }
        names
    }

    /// Copy the categorical coefficients of a vector laid out by `other` into
    /// this (covariates-only) layout.
    pub fn project_categorical(&self, other: &Layout, u: &[f64]) -> Result<Vec<f64>> {
        if self.mode.shares()
            || self.n_covariates != other.n_covariates
            || self.n_categories != other.n_categories
        {
            return Err(Error::Dimension("incompatible layouts".into()));
        }
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..self.n_categories - 1 {
            out.extend_from_slice(&u[other.beta(j)]);
        }
        Ok(out)
    }
}

/// Random effects and population parameters of one biomarker.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiomarkerState {
    pub params: BiomarkerParams,
    /// `b_ki` per patient.
    pub effects: Vec<[f64; 3]>,
}

impl BiomarkerState {
    pub fn characteristics(&self, patient: usize) -> LatentCharacteristics {
        LatentCharacteristics::from_effects(&self.params.theta, &self.effects[patient])
    }
}

/// All model parameters in constrained space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelParameters {
    /// One per biomarker in joint mode; empty for the covariates-only model.
    pub biomarkers: Vec<BiomarkerState>,
    pub categorical: CategoricalParams,
}

impl ModelParameters {
    /// Latent characteristics of every patient, when biomarkers are present.
    pub fn characteristics(&self) -> Option<Vec<PatientCharacteristics>> {
        if self.biomarkers.len() != K {
            return None;
        }
        let n = self.biomarkers[0].effects.len();
        Some(
            (0..n)
                .map(|i| std::array::from_fn(|k| self.biomarkers[k].characteristics(i)))
                .collect(),
        )
    }

    pub fn validate(&self, layout: &Layout) -> Result<()> {
        let expected = if layout.mode.shares() { K } else { 0 };
        if self.biomarkers.len() != expected {
            return Err(Error::Dimension(format!(
                "{} biomarker blocks, expected {expected}",
                self.biomarkers.len()
            )));
        }
        for b in &self.biomarkers {
            b.params.validate()?;
            if b.effects.len() != layout.n_patients {
                return Err(Error::Dimension("random effects per patient".into()));
            }
        }
        let c = &self.categorical;
        if c.beta.len() != layout.n_categories - 1
            || c.beta.iter().any(|b| b.len() != layout.n_covariates + 1)
            || c.alpha.len()
                != if layout.mode.shares() {
                    layout.n_categories - 1
                } else {
                    0
                }
        {
            return Err(Error::Dimension("categorical coefficient shapes".into()));
        }
        Ok(())
    }

    /// Flatten in constrained layout order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.biomarkers {
            out.extend_from_slice(&b.params.theta);
            out.push(b.params.sigma2);
            out.extend_from_slice(&linalg::pack_upper(&b.params.omega));
            for e in &b.effects {
                out.extend_from_slice(e);
            }
        }
        for beta in &self.categorical.beta {
            out.extend_from_slice(beta);
        }
        for a in &self.categorical.alpha {
            for row in a {
                out.extend_from_slice(row);
            }
        }
        out
    }

    pub fn from_flat(flat: &[f64], layout: &Layout) -> Result<Self> {
        if flat.len() != layout.dim() {
            return Err(Error::Dimension(format!(
                "{} values for a layout of {}",
                flat.len(),
                layout.dim()
            )));
        }
        let mut biomarkers = Vec::new();
        if layout.mode.shares() {
            for k in 0..K {
                let th = layout.theta(k);
                let ch = layout.cholesky(k);
                biomarkers.push(BiomarkerState {
                    params: BiomarkerParams {
                        theta: [flat[th.start], flat[th.start + 1], flat[th.start + 2]],
                        sigma2: flat[layout.log_sigma2(k)],
                        omega: linalg::unpack_symmetric(&flat[ch]),
                    },
                    effects: (0..layout.n_patients)
                        .map(|i| {
                            let r = layout.effects(k, i);
                            [flat[r.start], flat[r.start + 1], flat[r.start + 2]]
                        })
                        .collect(),
                });
            }
        }
        Ok(ModelParameters {
            biomarkers,
            categorical: categorical_from(flat, layout),
        })
    }
}

fn categorical_from(v: &[f64], layout: &Layout) -> CategoricalParams {
    let beta = (0..layout.n_categories - 1)
        .map(|j| v[layout.beta(j)].to_vec())
        .collect();
    let alpha = if layout.mode.shares() {
        (0..layout.n_categories - 1)
            .map(|j| {
                let mut a: Association = [[0.0; P]; K];
                for (k, row) in a.iter_mut().enumerate() {
                    row.copy_from_slice(&v[layout.alpha(j, k)]);
                }
                a
            })
            .collect()
    } else {
        Vec::new()
    };
    CategoricalParams { beta, alpha }
}

fn chol_from_unconstrained(v: &[f64]) -> Matrix3<f64> {
    let mut l = Matrix3::zeros();
    for (&(r, c), &x) in LOWER_ENTRIES.iter().zip(v) {
        l[(r, c)] = if r == c { x.exp() } else { x };
    }
    l
}

fn chol_to_unconstrained(l: &Matrix3<f64>) -> [f64; 6] {
    LOWER_ENTRIES.map(|(r, c)| if r == c { l[(r, c)].ln() } else { l[(r, c)] })
}

/// Log-Jacobian of `u ↦ vech(L Lᵀ)` with `L_ii = exp(u_ii)`.
fn cholesky_log_jacobian(v: &[f64]) -> f64 {
    let diag = [v[0], v[2], v[5]];
    P as f64 * LN_2
        + diag
            .iter()
            .enumerate()
            .map(|(i, d)| (P - i + 1) as f64 * d)
            .sum::<f64>()
}

/// Map constrained parameters to the unconstrained vector.
pub fn unconstrain(params: &ModelParameters, layout: &Layout) -> Result<Vec<f64>> {
    params.validate(layout)?;
    let mut u = vec![0.0; layout.dim()];
    for (k, b) in params.biomarkers.iter().enumerate() {
        let th = layout.theta(k);
        u[th].copy_from_slice(&b.params.theta);
        u[layout.log_sigma2(k)] = b.params.sigma2.ln();
        let l = linalg::cholesky(&b.params.omega)?;
        u[layout.cholesky(k)].copy_from_slice(&chol_to_unconstrained(&l));
        for (i, e) in b.effects.iter().enumerate() {
            let v = match layout.parameterization {
                EffectsParameterization::NonCentered => {
                    linalg::forward_solve(&l, &Vector3::from_column_slice(e))
                }
                EffectsParameterization::Centered => {
                    Vector3::from_fn(|m, _| b.params.theta[m] + e[m])
                }
            };
            u[layout.effects(k, i)].copy_from_slice(v.as_slice());
        }
    }
    for (j, beta) in params.categorical.beta.iter().enumerate() {
        u[layout.beta(j)].copy_from_slice(beta);
    }
    for (j, a) in params.categorical.alpha.iter().enumerate() {
        for (k, row) in a.iter().enumerate() {
            u[layout.alpha(j, k)].copy_from_slice(row);
        }
    }
    Ok(u)
}

/// Map an unconstrained vector to parameters, with the log-Jacobian of the map.
pub fn constrain(u: &[f64], layout: &Layout) -> Result<(ModelParameters, f64)> {
    let mut flat = vec![0.0; layout.dim()];
    let log_jac = constrain_into(u, layout, &mut flat)?;
    Ok((ModelParameters::from_flat(&flat, layout)?, log_jac))
}

/// Constrained flat vector of `u`, returning the log-Jacobian.
pub fn constrain_into(u: &[f64], layout: &Layout, flat: &mut [f64]) -> Result<f64> {
    if u.len() != layout.dim() || flat.len() != layout.dim() {
        return Err(Error::Dimension(format!(
            "vector of {} for a layout of {}",
            u.len(),
            layout.dim()
        )));
    }
    flat.copy_from_slice(u);
    let mut log_jac = 0.0;
    if layout.mode.shares() {
        for k in 0..K {
            let th = layout.theta(k);
            let theta = Vector3::from_column_slice(&u[th]);
            let ls = layout.log_sigma2(k);
            flat[ls] = u[ls].exp();
            log_jac += u[ls];
            let ch = layout.cholesky(k);
            let l = chol_from_unconstrained(&u[ch.clone()]);
            log_jac += cholesky_log_jacobian(&u[ch.clone()]);
            flat[ch].copy_from_slice(&linalg::pack_upper(&(l * l.transpose())));
            let log_det_l: f64 = (0..P).map(|i| l[(i, i)].ln()).sum();
            for i in 0..layout.n_patients {
                let r = layout.effects(k, i);
                let v = Vector3::from_column_slice(&u[r.clone()]);
                let b = match layout.parameterization {
                    EffectsParameterization::NonCentered => {
                        log_jac += log_det_l;
                        l * v
                    }
                    EffectsParameterization::Centered => v - theta,
                };
                flat[r].copy_from_slice(b.as_slice());
            }
        }
    }
    Ok(log_jac)
}

/// Sum of the prior log densities of the constrained parameters present.
pub fn log_prior(params: &ModelParameters, prior: &PriorConfig) -> Result<f64> {
    let sd = prior.normal_sd;
    let mut lp = 0.0;
    for b in &params.biomarkers {
        lp += b
            .params
            .theta
            .iter()
            .map(|t| stats::normal_lpdf(*t, 0.0, sd))
            .sum::<f64>();
        lp += stats::half_cauchy_lpdf(b.params.sigma2, prior.half_cauchy_scale);
        lp += prior.iw_lpdf(&b.params.omega)?;
    }
    let c = &params.categorical;
    lp += c
        .beta
        .iter()
        .flatten()
        .chain(c.alpha.iter().flatten().flatten())
        .map(|x| stats::normal_lpdf(*x, 0.0, sd))
        .sum::<f64>();
    Ok(lp)
}

/// `Σ_i log N(b_i; 0, Ω)`.
pub fn random_effects_lpdf(effects: &[[f64; 3]], omega: &Matrix3<f64>) -> Result<f64> {
    let l = linalg::cholesky(omega)?;
    let log_det_l: f64 = (0..P).map(|i| l[(i, i)].ln()).sum();
    Ok(effects
        .iter()
        .map(|b| {
            let w = linalg::forward_solve(&l, &Vector3::from_column_slice(b));
            -1.5 * LN_2PI - log_det_l - 0.5 * w.norm_squared()
        })
        .sum())
}

/// The joint (or covariates-only) posterior on a fixed cohort.
#[derive(Debug, Clone)]
pub struct JointPosterior<'a> {
    cohort: &'a Cohort,
    layout: Layout,
    prior: PriorConfig,
    /// `(t, y)` pairs per patient and biomarker, indexed `i * K + k`.
    series: Vec<Vec<(f64, f64)>>,
    iw_normalizer: f64,
    /// Rough per-biomarker fits used to start chains; empty unless sharing.
    start: Vec<StageOne>,
}

impl<'a> JointPosterior<'a> {
    pub fn new(
        cohort: &'a Cohort,
        mode: Mode,
        parameterization: EffectsParameterization,
        prior: PriorConfig,
    ) -> Self {
        let layout = Layout::for_cohort(cohort, mode, parameterization);
        let mut series = vec![Vec::new(); cohort.n_patients() * K];
        for o in cohort.observations() {
            series[o.patient * K + o.biomarker].push((o.time, o.value));
        }
        let iw_normalizer = prior.iw_log_normalizer();
        let start = if mode.shares() {
            (0..K)
                .map(|k| {
                    let per_patient: Vec<&[(f64, f64)]> = (0..cohort.n_patients())
                        .map(|i| series[i * K + k].as_slice())
                        .collect();
                    initial::stage_one(&per_patient)
                })
                .collect()
        } else {
            Vec::new()
        };
        JointPosterior {
            cohort,
            layout,
            prior,
            series,
            iw_normalizer,
            start,
        }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn cohort(&self) -> &Cohort {
        self.cohort
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.layout.constrained_names(self.cohort.covariate_names())
    }

    /// A jittered starting point near per-patient least-squares fits of the
    /// trajectories. Categorical coefficients start uniform on `[-1, 1]`.
    pub fn initial_position(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        let lay = &self.layout;
        let mut u: Vec<f64> = (0..lay.dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        for (k, fit) in self.start.iter().enumerate() {
            let mut jitter = |w: f64| {
                if w > 0.0 {
                    rng.random_range(-w..w)
                } else {
                    0.0
                }
            };
            let th = lay.theta(k);
            let theta = fit.mean + Vector3::from_fn(|_, _| jitter(THETA_JITTER));
            u[th].copy_from_slice(theta.as_slice());
            u[lay.log_sigma2(k)] = fit.sigma2.ln() + jitter(SCALE_JITTER);
            let l = linalg::cholesky(&fit.covariance).unwrap_or_else(|_| Matrix3::identity());
            let mut packed = chol_to_unconstrained(&l);
            for (slot, &(r, c)) in LOWER_ENTRIES.iter().enumerate() {
                if r == c {
                    packed[slot] += jitter(SCALE_JITTER);
                }
            }
            let l = chol_from_unconstrained(&packed);
            u[lay.cholesky(k)].copy_from_slice(&packed);
            for (i, (c, sd)) in fit.characteristics.iter().zip(&fit.spreads).enumerate() {
                let c = c + sd.map(|s| jitter(s.min(EFFECT_JITTER)));
                let v = match lay.parameterization {
                    EffectsParameterization::Centered => c,
                    EffectsParameterization::NonCentered => linalg::forward_solve(&l, &(c - theta)),
                };
                u[lay.effects(k, i)].copy_from_slice(v.as_slice());
            }
        }
        u
    }

    /// Unnormalized log posterior; `-inf` where a trajectory diverges.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        let mut grad = vec![0.0; u.len()];
        self.log_posterior_and_gradient(u, &mut grad)
    }

    /// Gradient of the log posterior in unconstrained space.
    pub fn grad_log_posterior(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; u.len()];
        let lp = self.log_posterior_and_gradient(u, &mut grad);
        if lp.is_finite() {
            Ok(grad)
        } else {
            Err(Error::NonFiniteDensity)
        }
    }

    /// Log posterior with its gradient written to `grad`. Returns `-inf`
    /// (gradient unspecified) when the density is not finite.
    pub fn log_posterior_and_gradient(&self, u: &[f64], grad: &mut [f64]) -> f64 {
        let lay = &self.layout;
        assert_eq!(u.len(), lay.dim(), "parameter vector length");
        assert_eq!(grad.len(), lay.dim(), "gradient length");
        grad.fill(0.0);
        if u.iter().any(|x| !x.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let n = lay.n_patients;
        let share = lay.mode.shares();
        let sd = self.prior.normal_sd;
        let var = sd * sd;
        let normal_const = -0.5 * LN_2PI - sd.ln();
        let mut lp = 0.0;

        let mut chars = vec![Vector3::zeros(); if share { n * K } else { 0 }];
        let mut char_grads = vec![Vector3::<f64>::zeros(); chars.len()];
        let mut factors = [Matrix3::zeros(); K];
        let mut factor_grads = [Matrix3::<f64>::zeros(); K];

        if share {
            for k in 0..K {
                let th = lay.theta(k);
                let theta = Vector3::from_column_slice(&u[th.clone()]);
                for m in 0..P {
                    lp += normal_const - 0.5 * theta[m] * theta[m] / var;
                    grad[th.start + m] -= theta[m] / var;
                }

                let ls_idx = lay.log_sigma2(k);
                let log_sigma2 = u[ls_idx];
                let sigma2 = log_sigma2.exp();
                let scale = self.prior.half_cauchy_scale;
                let r2 = (sigma2 / scale).powi(2);
                lp += (2.0 / (PI * scale)).ln() - r2.ln_1p() + log_sigma2;
                grad[ls_idx] += 1.0 - 2.0 * r2 / (1.0 + r2);

                let ch = lay.cholesky(k);
                let l = chol_from_unconstrained(&u[ch.clone()]);
                let mut gl = Matrix3::zeros();
                lp += self.iw_normalizer + self.prior.iw_kernel(&l, Some(&mut gl));
                lp += cholesky_log_jacobian(&u[ch]);

                let log_det_l: f64 = (0..P).map(|i| l[(i, i)].ln()).sum();
                for i in 0..n {
                    let er = lay.effects(k, i);
                    let v = Vector3::from_column_slice(&u[er.clone()]);
                    let c = match lay.parameterization {
                        EffectsParameterization::NonCentered => {
                            lp += -1.5 * LN_2PI - 0.5 * v.norm_squared();
                            for m in 0..P {
                                grad[er.start + m] -= v[m];
                            }
                            theta + l * v
                        }
                        EffectsParameterization::Centered => {
                            let b = v - theta;
                            let w = linalg::forward_solve(&l, &b);
                            lp += -1.5 * LN_2PI - log_det_l - 0.5 * w.norm_squared();
                            let q = linalg::backward_solve(&l, &w);
                            for m in 0..P {
                                grad[er.start + m] -= q[m];
                                grad[th.start + m] += q[m];
                            }
                            let outer = q * w.transpose();
                            for &(r, cc) in &LOWER_ENTRIES {
                                gl[(r, cc)] += outer[(r, cc)];
                            }
                            for d in 0..P {
                                gl[(d, d)] -= 1.0 / l[(d, d)];
                            }
                            v
                        }
                    };

                    let latent = LatentCharacteristics::new(c[0], c[1], c[2]);
                    let mut gc = Vector3::zeros();
                    let Ok(rates) = biexp::Rates::new(&latent) else {
                        return f64::NEG_INFINITY;
                    };
                    let series = &self.series[i * K + k];
                    let mut ss = 0.0;
                    for &(t, y) in series {
                        let Ok((mu, dmu)) = rates.at(t) else {
                            return f64::NEG_INFINITY;
                        };
                        let resid = y - mu;
                        let scaled = resid / sigma2;
                        ss += resid * scaled;
                        gc += Vector3::new(dmu[0], dmu[1], dmu[2]) * scaled;
                    }
                    let m = series.len() as f64;
                    lp += -0.5 * m * (LN_2PI + log_sigma2) - 0.5 * ss;
                    grad[ls_idx] += -0.5 * m + 0.5 * ss;
                    chars[i * K + k] = c;
                    char_grads[i * K + k] = gc;
                }
                factors[k] = l;
                factor_grads[k] = gl;
            }
        }

        // categorical coefficients: priors
        for idx in lay.categorical() {
            lp += normal_const - 0.5 * u[idx] * u[idx] / var;
            grad[idx] -= u[idx] / var;
        }

        // categorical likelihood
        let j_ref = lay.n_categories - 1;
        let mut eta = vec![0.0; j_ref];
        for (i, patient) in self.cohort.patients().iter().enumerate() {
            let x = &patient.covariates;
            for (j, e) in eta.iter_mut().enumerate() {
                let b = &u[lay.beta(j)];
                *e = b[0] + x.iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>();
                if share {
                    for k in 0..K {
                        let a = &u[lay.alpha(j, k)];
                        let c = &chars[i * K + k];
                        *e += a[0] * c[0] + a[1] * c[1] + a[2] * c[2];
                    }
                }
            }
            let log_p = categorical::log_probabilities(&eta);
            lp += log_p[patient.treatment];
            for j in 0..j_ref {
                let d = f64::from(u8::from(patient.treatment == j)) - log_p[j].exp();
                if d == 0.0 {
                    continue;
                }
                let br = lay.beta(j);
                grad[br.start] += d;
                for (c, xv) in x.iter().enumerate() {
                    grad[br.start + 1 + c] += d * xv;
                }
                if share {
                    for k in 0..K {
                        let ar = lay.alpha(j, k);
                        let c = chars[i * K + k];
                        for m in 0..P {
                            grad[ar.start + m] += d * c[m];
                        }
                        let a = &u[ar];
                        char_grads[i * K + k] += Vector3::new(a[0], a[1], a[2]) * d;
                    }
                }
            }
        }

        if share {
            for k in 0..K {
                let l = factors[k];
                let gl = &mut factor_grads[k];
                let th = lay.theta(k);
                for i in 0..n {
                    let g = char_grads[i * K + k];
                    let er = lay.effects(k, i);
                    match lay.parameterization {
                        EffectsParameterization::NonCentered => {
                            let z = Vector3::from_column_slice(&u[er.clone()]);
                            let gz = l.transpose() * g;
                            for m in 0..P {
                                grad[th.start + m] += g[m];
                                grad[er.start + m] += gz[m];
                            }
                            let outer = g * z.transpose();
                            for &(r, c) in &LOWER_ENTRIES {
                                gl[(r, c)] += outer[(r, c)];
                            }
                        }
                        EffectsParameterization::Centered => {
                            for m in 0..P {
                                grad[er.start + m] += g[m];
                            }
                        }
                    }
                }
                let ch = lay.cholesky(k);
                for (slot, &(r, c)) in LOWER_ENTRIES.iter().enumerate() {
                    if r == c {
                        grad[ch.start + slot] += gl[(r, c)] * l[(r, c)] + (P - r + 1) as f64;
                    } else {
                        grad[ch.start + slot] += gl[(r, c)];
                    }
                }
            }
        }

        if lp.is_nan() {
            f64::NEG_INFINITY
        } else {
            lp
        }
    }
}

impl crate::sampler::Target for JointPosterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_and_gradient(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        self.log_posterior_and_gradient(position, grad)
    }

    fn parameter_names(&self) -> Vec<String> {
        JointPosterior::parameter_names(self)
    }

    fn initial_position(&self, rng: &mut dyn RngCore) -> Vec<f64> {
        JointPosterior::initial_position(self, rng)
    }

    /// Population parameters of each biomarker, each patient's effects, and
    /// the categorical coefficients.
    fn metric_blocks(&self) -> Vec<Range<usize>> {
        let lay = &self.layout;
        let mut blocks = Vec::new();
        if lay.mode.shares() {
            for k in 0..K {
                let start = lay.theta(k).start;
                blocks.push(start..start + BIOMARKER_HEADER);
                blocks.extend((0..lay.n_patients).map(|i| lay.effects(k, i)));
            }
        }
        let cat = lay.categorical();
        if !cat.is_empty() {
            blocks.push(cat);
        }
        blocks
    }

    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        constrain_into(position, &self.layout, out).expect("layout-sized vectors");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateGroup, LongitudinalObservation, PatientRecord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cohort(n: usize, with_second: bool) -> Cohort {
        let patients = (0..n)
            .map(|i| PatientRecord {
                id: format!("p{i}"),
                covariates: vec![0.3 * i as f64 - 0.2, if i % 2 == 0 { 1.0 } else { 0.0 }],
                treatment: i % 3,
            })
            .collect();
        let mut obs = Vec::new();
        for i in 0..n {
            for (s, t) in [0.0, 0.4, 1.1].iter().enumerate() {
                obs.push(LongitudinalObservation {
                    patient: i,
                    biomarker: 0,
                    time: *t,
                    value: 2.0 + 0.5 * s as f64 - 0.3 * i as f64,
                });
                if with_second {
                    obs.push(LongitudinalObservation {
                        patient: i,
                        biomarker: 1,
                        time: *t + 0.05,
                        value: 1.0 + 0.2 * s as f64,
                    });
                }
            }
        }
        Cohort::new(
            patients,
            obs,
            vec!["x".into(), "f=1".into()],
            vec![
                CovariateGroup {
                    name: "x".into(),
                    columns: vec![0],
                },
                CovariateGroup {
                    name: "f".into(),
                    columns: vec![1],
                },
            ],
            3,
        )
        .unwrap()
    }

    fn random_u(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let a = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        a * a.transpose() + Matrix3::identity() * 0.3
    }

    fn fd_max_relative_error(post: &JointPosterior, u: &[f64]) -> f64 {
        let g = post.grad_log_posterior(u).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut v = u.to_vec();
        for i in 0..u.len() {
            v[i] = u[i] + h;
            let up = post.log_posterior(&v);
            v[i] = u[i] - h;
            let dn = post.log_posterior(&v);
            v[i] = u[i];
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - g[i]).abs() / g[i].abs().max(fd.abs()).max(1.0));
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences_both_parameterizations() {
        let cohort = toy_cohort(2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for param in [
            EffectsParameterization::NonCentered,
            EffectsParameterization::Centered,
        ] {
            for mode in [Mode::Joint, Mode::CategoricalOnly] {
                let post = JointPosterior::new(&cohort, mode, param, PriorConfig::default());
                for _ in 0..10 {
                    let u = random_u(&mut rng, post.layout().dim());
                    let err = fd_max_relative_error(&post, &u);
                    assert!(err < 1e-5, "{param:?} {mode:?}: {err}");
                }
            }
        }
    }

    #[test]
    fn theta_prior_gradient() {
        let cohort = Cohort::new(vec![], vec![], vec![], vec![], 3).unwrap();
        let post = JointPosterior::new(
            &cohort,
            Mode::Joint,
            EffectsParameterization::NonCentered,
            PriorConfig::default(),
        );
        let mut u = vec![0.0; post.layout().dim()];
        let t = post.layout().theta(0).start;
        u[t] = 10.0;
        let g = post.grad_log_posterior(&u).unwrap();
        assert!((g[t] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn empty_cohort_is_prior_plus_jacobian() {
        let cohort = Cohort::new(vec![], vec![], vec![], vec![], 3).unwrap();
        let post = JointPosterior::new(
            &cohort,
            Mode::Joint,
            EffectsParameterization::NonCentered,
            PriorConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let u = random_u(&mut rng, post.layout().dim());
        let (params, log_jac) = constrain(&u, post.layout()).unwrap();
        let expected = log_prior(&params, post.prior()).unwrap() + log_jac;
        assert!((post.log_posterior(&u) - expected).abs() < 1e-10);
    }

    #[test]
    fn no_second_biomarker_data_means_no_likelihood_gradient_there() {
        let cohort = toy_cohort(2, false);
        let post = JointPosterior::new(
            &cohort,
            Mode::Joint,
            EffectsParameterization::NonCentered,
            PriorConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_u(&mut rng, post.layout().dim());
        let g = post.grad_log_posterior(&u).unwrap();
        let sigma = post.layout().log_sigma2(1);
        let r2 = (u[sigma].exp() / 5.0).powi(2);
        assert!((g[sigma] - (1.0 - 2.0 * r2 / (1.0 + r2))).abs() < 1e-14);
    }

    #[test]
    fn categorical_only_ignores_longitudinal_coordinates() {
        let cohort = toy_cohort(3, true);
        let joint = Layout::for_cohort(&cohort, Mode::Joint, EffectsParameterization::NonCentered);
        let post = JointPosterior::new(
            &cohort,
            Mode::CategoricalOnly,
            EffectsParameterization::NonCentered,
            PriorConfig::default(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut u = random_u(&mut rng, joint.dim());
        let base = post.log_posterior(&post.layout().project_categorical(&joint, &u).unwrap());
        for idx in joint.longitudinal() {
            u[idx] += 0.7;
            let v = post.log_posterior(&post.layout().project_categorical(&joint, &u).unwrap());
            assert_eq!(v, base);
        }
    }

    #[test]
    fn transform_round_trip_and_identity_cases() {
        let cohort = toy_cohort(3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for param in [
            EffectsParameterization::NonCentered,
            EffectsParameterization::Centered,
        ] {
            let layout = Layout::for_cohort(&cohort, Mode::Joint, param);
            let u = random_u(&mut rng, layout.dim());
            let (mut params, _) = constrain(&u, &layout).unwrap();
            params.biomarkers[0].params.omega = random_spd(&mut rng);
            let u2 = unconstrain(&params, &layout).unwrap();
            let (back, _) = constrain(&u2, &layout).unwrap();
            let a = params.to_flat();
            let b = back.to_flat();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            assert_eq!(ModelParameters::from_flat(&a, &layout).unwrap(), params);
        }

        let layout = Layout::for_cohort(&cohort, Mode::Joint, EffectsParameterization::NonCentered);
        let (mut params, _) = constrain(&vec![0.0; layout.dim()], &layout).unwrap();
        params.biomarkers[0].params.omega = Matrix3::identity();
        params.biomarkers[0].params.sigma2 = 1.0;
        let u = unconstrain(&params, &layout).unwrap();
        assert!(u[layout.cholesky(0)].iter().all(|x| *x == 0.0));
        assert_eq!(u[layout.log_sigma2(0)], 0.0);
    }

    #[test]
    fn non_spd_omega_is_rejected() {
        let cohort = toy_cohort(1, true);
        let layout = Layout::for_cohort(&cohort, Mode::Joint, EffectsParameterization::NonCentered);
        let (mut params, _) = constrain(&vec![0.0; layout.dim()], &layout).unwrap();
        params.biomarkers[1].params.omega = -Matrix3::identity();
        assert!(unconstrain(&params, &layout).is_err());
    }

    /// log |det ∂ vech(L Lᵀ) / ∂u| by central differences.
    fn fd_log_det(v: &[f64; 6]) -> f64 {
        let h = 1e-6;
        let f = |w: &[f64; 6]| {
            let l = chol_from_unconstrained(w);
            linalg::pack_upper(&(l * l.transpose()))
        };
        let mut jac = nalgebra::Matrix6::<f64>::zeros();
        for c in 0..6 {
            let mut up = *v;
            let mut dn = *v;
            up[c] += h;
            dn[c] -= h;
            let (a, b) = (f(&up), f(&dn));
            for r in 0..6 {
                jac[(r, c)] = (a[r] - b[r]) / (2.0 * h);
            }
        }
        jac.determinant().abs().ln()
    }

    #[test]
    fn cholesky_log_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let l = linalg::cholesky(&random_spd(&mut rng)).unwrap();
            let v = chol_to_unconstrained(&l);
            assert!((cholesky_log_jacobian(&v) - fd_log_det(&v)).abs() < 1e-6);
        }
    }

    #[test]
    fn prior_scalar_oracles() {
        assert!((stats::normal_lpdf(0.0, 0.0, 10.0) + 3.221_524).abs() < 1e-5);
        let oracle = (2.0 / (PI * 5.0)).ln();
        assert!((stats::half_cauchy_lpdf(0.0, 5.0) - oracle).abs() < 1e-12);
        assert!((oracle + 2.061_021).abs() < 1e-5);
        // textbook inverse-Wishart density
        let prior = PriorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for omega in [
            Matrix3::identity(),
            random_spd(&mut rng),
            random_spd(&mut rng),
        ] {
            let (nu, p) = (4.0, 3.0);
            let psi = Matrix3::<f64>::identity();
            let lmg = p * (p - 1.0) / 4.0 * PI.ln()
                + (1..=3)
                    .map(|j| ln_gamma((nu + 1.0 - j as f64) / 2.0))
                    .sum::<f64>();
            let oracle = nu / 2.0 * psi.determinant().ln()
                - nu * p / 2.0 * 2f64.ln()
                - lmg
                - (nu + p + 1.0) / 2.0 * omega.determinant().ln()
                - 0.5 * (psi * omega.try_inverse().unwrap()).trace();
            assert!((prior.iw_lpdf(&omega).unwrap() - oracle).abs() < 1e-10);
        }
    }

    fn mvn_oracle(b: &[f64; 3], omega: &Matrix3<f64>) -> f64 {
        let v = Vector3::from_column_slice(b);
        let q = (v.transpose() * omega.try_inverse().unwrap() * v)[(0, 0)];
        -1.5 * (2.0 * PI).ln() - 0.5 * omega.determinant().ln() - 0.5 * q
    }

    #[test]
    fn one_patient_equals_sum_of_module_terms() {
        let cohort = toy_cohort(1, true);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for param in [
            EffectsParameterization::NonCentered,
            EffectsParameterization::Centered,
        ] {
            let post = JointPosterior::new(&cohort, Mode::Joint, param, PriorConfig::default());
            let u = random_u(&mut rng, post.layout().dim());
            let (params, log_jac) = constrain(&u, post.layout()).unwrap();
            let chars = params.characteristics().unwrap();
            let mut expected = log_jac + log_prior(&params, post.prior()).unwrap();
            for (k, b) in params.biomarkers.iter().enumerate() {
                expected += biexp::longitudinal_loglik(&cohort, k, &b.params, &b.effects).unwrap();
                expected += b
                    .effects
                    .iter()
                    .map(|e| mvn_oracle(e, &b.params.omega))
                    .sum::<f64>();
            }
            expected +=
                categorical::categorical_loglik(&cohort, &params.categorical, Some(&chars), true)
                    .unwrap();
            assert!(
                (post.log_posterior(&u) - expected).abs() < 1e-9,
                "{param:?}"
            );
        }
    }

    #[test]
    fn divergent_trajectory_gives_negative_infinity() {
        let cohort = toy_cohort(1, true);
        let post = JointPosterior::new(
            &cohort,
            Mode::Joint,
            EffectsParameterization::Centered,
            PriorConfig::default(),
        );
        let mut u = vec![0.0; post.layout().dim()];
        u[post.layout().effects(0, 0).start + 1] = 8.0; // growth rate e^8 at t = 1.1
        assert_eq!(post.log_posterior(&u), f64::NEG_INFINITY);
        assert!(post.grad_log_posterior(&u).is_err());
    }

    #[test]
    fn disjoint_cohorts_add_up() {
        let all = toy_cohort(4, true);
        let split = |idx: &[usize]| {
            let patients: Vec<_> = idx.iter().map(|&i| all.patients()[i].clone()).collect();
            let obs = all
                .observations()
                .iter()
                .filter_map(|o| {
                    idx.iter()
                        .position(|&i| i == o.patient)
                        .map(|p| LongitudinalObservation {
                            patient: p,
                            ..o.clone()
                        })
                })
                .collect();
            Cohort::new(
                patients,
                obs,
                all.covariate_names().to_vec(),
                all.groups().to_vec(),
                3,
            )
            .unwrap()
        };
        let (a, b) = (split(&[0, 1]), split(&[2, 3]));
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let layout = Layout::for_cohort(&all, Mode::Joint, EffectsParameterization::Centered);
        let u = random_u(&mut rng, layout.dim());
        let (params, log_jac) = constrain(&u, &layout).unwrap();
        let eval = |c: &Cohort, idx: &[usize]| {
            let mut p = params.clone();
            for bm in &mut p.biomarkers {
                bm.effects = idx.iter().map(|&i| bm.effects[i]).collect();
            }
            let post = JointPosterior::new(
                c,
                Mode::Joint,
                EffectsParameterization::Centered,
                PriorConfig::default(),
            );
            post.log_posterior(&unconstrain(&p, post.layout()).unwrap())
        };
        // centered effects carry no Jacobian, so the population terms are
        // the only ones counted twice
        let population = log_prior(&params, &PriorConfig::default()).unwrap() + log_jac;
        let merged = eval(&a, &[0, 1]) + eval(&b, &[2, 3]) - population;
        let whole = eval(&all, &[0, 1, 2, 3]);
        assert!(
            (merged - whole).abs() < 1e-9 * whole.abs().max(1.0),
            "{merged} vs {whole}"
        );
    }
}

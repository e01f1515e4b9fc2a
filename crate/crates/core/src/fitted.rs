//! Per-draw access to a fitted model: coefficients, latent characteristics,
//! pointwise likelihoods, treatment probabilities and trajectories.

use rayon::prelude::*;

use crate::biexp::{self, BiomarkerParams, LatentCharacteristics};
use crate::categorical::{self, CategoricalParams, PatientCharacteristics};
use crate::data::Cohort;
use crate::linalg;
use crate::posterior::Layout;
use crate::sampler::PosteriorDraws;
use crate::{stats, Error, Result, NUM_BIOMARKERS, NUM_CHARACTERISTICS};

/// Number of latent input slots (characteristic × biomarker).
pub const LATENT_SLOTS: usize = NUM_BIOMARKERS * NUM_CHARACTERISTICS;

/// Source patient of every categorical input, per patient. The identity map
/// reproduces the observed inputs; permutations produce counterfactual ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputMap {
    /// `covariates[c][i]`: the patient whose column `c` patient `i` reads.
    pub covariates: Vec<Vec<usize>>,
    /// `latent[k * 3 + m][i]`, likewise for characteristic `m` of biomarker `k`.
    pub latent: Vec<Vec<usize>>,
}

impl InputMap {
    pub fn identity(n_patients: usize, n_covariates: usize) -> Self {
        let id: Vec<usize> = (0..n_patients).collect();
        InputMap {
            covariates: vec![id.clone(); n_covariates],
            latent: vec![id; LATENT_SLOTS],
        }
    }

    pub fn for_cohort(cohort: &Cohort) -> Self {
        Self::identity(cohort.n_patients(), cohort.n_covariates())
    }
}

/// A fitted model viewed through its constrained draws.
#[derive(Debug, Clone)]
pub struct FittedModel<'a> {
    draws: &'a PosteriorDraws,
    layout: Layout,
}

impl<'a> FittedModel<'a> {
    pub fn new(draws: &'a PosteriorDraws, layout: Layout) -> Result<Self> {
        if draws.n_params() != layout.dim() {
            return Err(Error::Dimension(format!(
                "draws have {} parameters, layout expects {}",
                draws.n_params(),
                layout.dim()
            )));
        }
        Ok(FittedModel { draws, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn draws(&self) -> &PosteriorDraws {
        self.draws
    }

    pub fn shares(&self) -> bool {
        self.layout.mode.shares()
    }

    /// Pooled number of draws.
    pub fn n_draws(&self) -> usize {
        self.draws.total_draws()
    }

    /// Pooled draw `s` (chain-major).
    pub fn draw(&self, s: usize) -> &[f64] {
        let per = self.draws.n_draws();
        self.draws.draw(s / per, s % per)
    }

    fn check_cohort(&self, cohort: &Cohort) -> Result<()> {
        if cohort.n_covariates() != self.layout.n_covariates
            || cohort.num_categories() != self.layout.n_categories
            || (self.shares() && cohort.n_patients() != self.layout.n_patients)
        {
            return Err(Error::Dimension(
                "cohort does not match the fitted layout".into(),
            ));
        }
        Ok(())
    }

    pub fn categorical(&self, s: usize) -> CategoricalParams {
        let d = self.draw(s);
        let lay = &self.layout;
        let j = lay.n_categories - 1;
        CategoricalParams {
            beta: (0..j).map(|c| d[lay.beta(c)].to_vec()).collect(),
            alpha: if self.shares() {
                (0..j)
                    .map(|c| {
                        std::array::from_fn(|k| {
                            let r = lay.alpha(c, k);
                            [d[r.start], d[r.start + 1], d[r.start + 2]]
                        })
                    })
                    .collect()
            } else {
                Vec::new()
            },
        }
    }

    pub fn biomarker(&self, s: usize, k: usize) -> BiomarkerParams {
        let d = self.draw(s);
        let lay = &self.layout;
        let th = lay.theta(k);
        BiomarkerParams {
            theta: [d[th.start], d[th.start + 1], d[th.start + 2]],
            sigma2: d[lay.log_sigma2(k)],
            omega: linalg::unpack_symmetric(&d[lay.cholesky(k)]),
        }
    }

    fn latent_from(&self, d: &[f64], k: usize, patient: usize) -> LatentCharacteristics {
        let th = self.layout.theta(k).start;
        let e = self.layout.effects(k, patient).start;
        LatentCharacteristics::new(d[th] + d[e], d[th + 1] + d[e + 1], d[th + 2] + d[e + 2])
    }

    /// Latent characteristics of `patient` in draw `s` (joint fits only).
    pub fn characteristics(&self, s: usize, patient: usize) -> PatientCharacteristics {
        let d = self.draw(s);
        std::array::from_fn(|k| self.latent_from(d, k, patient))
    }

    /// `ll[s][i]`: categorical log-likelihood of patient `i` in draw `s`,
    /// with inputs routed through `map`.
    pub fn pointwise_categorical_loglik(
        &self,
        cohort: &Cohort,
        map: &InputMap,
    ) -> Result<Vec<Vec<f64>>> {
        self.check_cohort(cohort)?;
        let n = cohort.n_patients();
        if map.covariates.len() != cohort.n_covariates()
            || map.latent.len() != LATENT_SLOTS
            || map
                .covariates
                .iter()
                .chain(&map.latent)
                .any(|m| m.len() != n || m.iter().any(|&i| i >= n))
        {
            return Err(Error::Dimension(
                "input map does not match the cohort".into(),
            ));
        }
        let lay = &self.layout;
        let j = lay.n_categories - 1;
        let p = lay.n_covariates;
        let share = self.shares();
        Ok((0..self.n_draws())
            .into_par_iter()
            .map(|s| {
                let d = self.draw(s);
                let latent: Vec<[f64; LATENT_SLOTS]> = if share {
                    (0..n)
                        .map(|i| {
                            let mut row = [0.0; LATENT_SLOTS];
                            for k in 0..NUM_BIOMARKERS {
                                let c = self.latent_from(d, k, i).to_array();
                                row[k * 3..k * 3 + 3].copy_from_slice(&c);
                            }
                            row
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                let mut eta = vec![0.0; j];
                let mut x = vec![0.0; p];
                let mut c = [0.0; LATENT_SLOTS];
                (0..n)
                    .map(|i| {
                        for (col, xv) in x.iter_mut().enumerate() {
                            *xv = cohort.patients()[map.covariates[col][i]].covariates[col];
                        }
                        if share {
                            for (slot, cv) in c.iter_mut().enumerate() {
                                *cv = latent[map.latent[slot][i]][slot];
                            }
                        }
                        for (cat, e) in eta.iter_mut().enumerate() {
                            let b = &d[lay.beta(cat)];
                            *e = b[0] + x.iter().zip(&b[1..]).map(|(a, w)| a * w).sum::<f64>();
                            if share {
                                for k in 0..NUM_BIOMARKERS {
                                    let a = &d[lay.alpha(cat, k)];
                                    *e += a
                                        .iter()
                                        .zip(&c[k * 3..k * 3 + 3])
                                        .map(|(a, v)| a * v)
                                        .sum::<f64>();
                                }
                            }
                        }
                        categorical::log_probabilities(&eta)[cohort.patients()[i].treatment]
                    })
                    .collect()
            })
            .collect())
    }

    /// Treatment probability draws of one patient.
    pub fn probability_draws(&self, cohort: &Cohort, patient: usize) -> Result<Vec<Vec<f64>>> {
        self.check_cohort(cohort)?;
        let x = &cohort
            .patients()
            .get(patient)
            .ok_or_else(|| Error::UnknownPatient(patient.to_string()))?
            .covariates;
        (0..self.n_draws())
            .map(|s| {
                let chars = self.shares().then(|| self.characteristics(s, patient));
                let eta = categorical::linear_predictors(
                    x,
                    chars.as_ref(),
                    &self.categorical(s),
                    self.shares(),
                )?;
                Ok(categorical::probabilities(&eta).0)
            })
            .collect()
    }

    /// Posterior mean treatment probabilities of every patient.
    pub fn mean_probabilities(&self, cohort: &Cohort) -> Result<Vec<Vec<f64>>> {
        (0..cohort.n_patients())
            .into_par_iter()
            .map(|i| {
                let draws = self.probability_draws(cohort, i)?;
                let j = cohort.num_categories();
                Ok((0..j)
                    .map(|c| draws.iter().map(|d| d[c]).sum::<f64>() / draws.len() as f64)
                    .collect())
            })
            .collect()
    }

    /// Predicted class per patient: the largest posterior mean probability.
    pub fn predicted_classes(&self, cohort: &Cohort) -> Result<Vec<usize>> {
        Ok(self
            .mean_probabilities(cohort)?
            .iter()
            .map(|p| categorical::argmax_first(p))
            .collect())
    }

    fn require_longitudinal(&self) -> Result<()> {
        if self.shares() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "the covariates-only model has no trajectories".into(),
            ))
        }
    }

    /// Posterior mean of the fitted trajectory at every observation.
    pub fn fitted_means(&self, cohort: &Cohort) -> Result<Vec<f64>> {
        self.require_longitudinal()?;
        self.check_cohort(cohort)?;
        let s_total = self.n_draws();
        cohort
            .observations()
            .par_iter()
            .map(|o| {
                let mut sum = 0.0;
                for s in 0..s_total {
                    let c = self.latent_from(self.draw(s), o.biomarker, o.patient);
                    sum += biexp::mean_trajectory(&c, o.time)?;
                }
                Ok(sum / s_total as f64)
            })
            .collect()
    }

    /// `sqrt` of the posterior mean residual variance per biomarker.
    pub fn sigma_hat(&self) -> Result<[f64; NUM_BIOMARKERS]> {
        self.require_longitudinal()?;
        let mut out = [0.0; NUM_BIOMARKERS];
        for (k, o) in out.iter_mut().enumerate() {
            let idx = self.layout.log_sigma2(k);
            let v: Vec<f64> = (0..self.n_draws()).map(|s| self.draw(s)[idx]).collect();
            *o = stats::mean(&v).sqrt();
        }
        Ok(out)
    }

    /// Posterior mean and central 95% band of one patient's trajectory.
    pub fn trajectory_band(
        &self,
        patient: usize,
        k: usize,
        times: &[f64],
    ) -> Result<Vec<TrajectoryPoint>> {
        self.require_longitudinal()?;
        if patient >= self.layout.n_patients {
            return Err(Error::UnknownPatient(patient.to_string()));
        }
        let chars: Vec<LatentCharacteristics> = (0..self.n_draws())
            .map(|s| self.latent_from(self.draw(s), k, patient))
            .collect();
        times
            .iter()
            .map(|&t| {
                let values = chars
                    .iter()
                    .map(|c| biexp::mean_trajectory(c, t))
                    .collect::<Result<Vec<f64>>>()?;
                let (lo, hi) = stats::central_interval(&values, 0.95);
                Ok(TrajectoryPoint {
                    time: t,
                    mean: stats::mean(&values),
                    lower: lo,
                    upper: hi,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub time: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

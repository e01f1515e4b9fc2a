//! Data-informed starting points for the joint posterior.
//!
//! Each patient's trajectory is fitted on its own: a grid search over the
//! growth and decay rates, with the baseline solved by least squares, then
//! Levenberg-Marquardt refinement. A first pass uses a weak penalty; the
//! second shrinks towards the population mean and covariance of the first. The result is only a guess: chains start
//! near it with random jitter and warm-up does the rest.

use nalgebra::{Matrix3, Vector3};

use crate::biexp::{LatentCharacteristics, Rates};
use crate::linalg;

const GRID_LOW: f64 = -4.0;
const GRID_STEP: f64 = 0.25;
const GRID_POINTS: usize = 29;
const MIN_VARIANCE: f64 = 1e-4;
const LM_ITERATIONS: usize = 100;
const OUTLIER_MADS: f64 = 5.0;
/// Median of a chi-square variable with one degree of freedom.
const CHI2_1_MEDIAN: f64 = 0.454_936_423_119_572_8;
/// Box for the refined `(B*, G*, D*)`.
const BOX_LOW: Vector3<f64> = Vector3::new(-20.0, -10.0, -10.0);
const BOX_HIGH: Vector3<f64> = Vector3::new(30.0, 5.0, 6.0);

/// Rough per-biomarker fit.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    /// Latent characteristics per patient; patients without data get the mean.
    pub characteristics: Vec<Vector3<f64>>,
    /// Approximate posterior standard deviations of each patient's
    /// characteristics from the Gauss-Newton curvature at the fit.
    pub spreads: Vec<Vector3<f64>>,
    pub mean: Vector3<f64>,
    pub covariance: Matrix3<f64>,
    pub sigma2: f64,
}

/// Fit one biomarker; `series[i]` holds patient `i`'s `(t, y)` pairs.
pub fn stage_one(series: &[&[(f64, f64)]]) -> StageOne {
    let weak = Penalty {
        mean: Vector3::zeros(),
        precision: Matrix3::identity() * 0.01,
        sigma2: 1.0,
    };
    let first: Vec<Option<Vector3<f64>>> = series.iter().map(|s| fit_patient(s, &weak)).collect();
    let (mean, covariance) = moments(&first);
    let shrink = Penalty {
        mean,
        precision: covariance.try_inverse().unwrap_or_else(Matrix3::identity),
        sigma2: residual_variance(series, &first),
    };
    let second: Vec<Option<Vector3<f64>>> =
        series.iter().map(|s| fit_patient(s, &shrink)).collect();
    let (mean, covariance) = moments(&second);
    let sigma2 = residual_variance(series, &second);
    let last = Penalty {
        mean,
        precision: covariance.try_inverse().unwrap_or_else(Matrix3::identity),
        sigma2,
    };
    let prior_spread = covariance.diagonal().map(f64::sqrt);
    let spreads = series
        .iter()
        .zip(&second)
        .map(|(s, f)| {
            f.and_then(|c| local_spread(s, &c, &last))
                .unwrap_or(prior_spread)
        })
        .collect();
    StageOne {
        characteristics: second.iter().map(|f| f.unwrap_or(mean)).collect(),
        spreads,
        mean,
        covariance,
        sigma2,
    }
}

/// Robust residual variance: the median squared residual over the median of
/// a chi-square with one degree of freedom. Residuals are inflated by
/// `n / (n - 3)` for the fitted characteristics; series with three or fewer
/// points fit exactly and are skipped.
fn residual_variance(series: &[&[(f64, f64)]], fits: &[Option<Vector3<f64>>]) -> f64 {
    let mut sq: Vec<f64> = Vec::new();
    for (s, c) in series.iter().zip(fits) {
        let Some(c) = c else { continue };
        if s.len() <= 3 {
            continue;
        }
        let Ok(rates) = Rates::new(&LatentCharacteristics::new(c[0], c[1], c[2])) else {
            continue;
        };
        let inflate = s.len() as f64 / (s.len() - 3) as f64;
        sq.extend(
            s.iter()
                .filter_map(|&(t, y)| rates.at(t).ok().map(|(mu, _)| inflate * (y - mu).powi(2))),
        );
    }
    if sq.is_empty() {
        return 1.0;
    }
    (median(sq) / CHI2_1_MEDIAN).max(MIN_VARIANCE)
}

struct Penalty {
    mean: Vector3<f64>,
    precision: Matrix3<f64>,
    sigma2: f64,
}

/// Penalized least-squares `(B*, G*, D*)` for one series, or `None` when
/// there is nothing to fit.
fn fit_patient(series: &[(f64, f64)], penalty: &Penalty) -> Option<Vector3<f64>> {
    if series.is_empty() {
        return None;
    }
    let mut best: Option<(f64, Vector3<f64>)> = None;
    let mut h = vec![0.0; series.len()];
    for gi in 0..GRID_POINTS {
        let log_growth = GRID_LOW + GRID_STEP * gi as f64;
        let growth = log_growth.exp();
        for di in 0..GRID_POINTS {
            let log_decay = GRID_LOW + GRID_STEP * di as f64;
            let decay = log_decay.exp();
            let mut shape_ok = true;
            for (hj, &(t, _)) in h.iter_mut().zip(series) {
                let g = growth * t;
                if g > 50.0 {
                    shape_ok = false;
                    break;
                }
                *hj = g.exp() + (-decay * t).exp() - 1.0;
            }
            if !shape_ok {
                continue;
            }
            let shh: f64 = h.iter().map(|v| v * v).sum();
            let syh: f64 = h.iter().zip(series).map(|(v, (_, y))| v * y).sum();
            if !(shh > 0.0 && syh > 0.0) {
                continue;
            }
            let baseline = syh / shh;
            let sse: f64 = h
                .iter()
                .zip(series)
                .map(|(v, (_, y))| (y - baseline * v).powi(2))
                .sum();
            let c = Vector3::new(baseline.ln(), log_growth, log_decay);
            let d = c - penalty.mean;
            let objective = sse / penalty.sigma2 + (d.transpose() * penalty.precision * d)[0];
            if best.as_ref().is_none_or(|(o, _)| objective < *o) {
                best = Some((objective, c));
            }
        }
    }
    best.map(|(_, c)| refine(series, c, penalty))
}

/// Penalized residuals and their Jacobian at `c`; `None` if the trajectory
/// overflows.
fn residuals(
    series: &[(f64, f64)],
    c: &Vector3<f64>,
    penalty: &Penalty,
    root: &Matrix3<f64>,
) -> Option<(Vec<f64>, Vec<[f64; 3]>)> {
    let rates = Rates::new(&LatentCharacteristics::new(c[0], c[1], c[2])).ok()?;
    let scale = penalty.sigma2.sqrt();
    let mut r = Vec::with_capacity(series.len() + 3);
    let mut jac = Vec::with_capacity(series.len() + 3);
    for &(t, y) in series {
        let (mu, d) = rates.at(t).ok()?;
        r.push((y - mu) / scale);
        jac.push([-d[0] / scale, -d[1] / scale, -d[2] / scale]);
    }
    let pd = root * (c - penalty.mean);
    for m in 0..3 {
        r.push(pd[m]);
        jac.push([root[(m, 0)], root[(m, 1)], root[(m, 2)]]);
    }
    Some((r, jac))
}

fn penalty_root(penalty: &Penalty) -> Matrix3<f64> {
    // precision = L L^T, so the penalty is |L^T d|^2
    linalg::cholesky(&penalty.precision)
        .map(|l| l.transpose())
        .unwrap_or_else(|_| Matrix3::identity() * 0.1)
}

fn gram(jac: &[[f64; 3]]) -> Matrix3<f64> {
    jac.iter()
        .map(|row| {
            let g = Vector3::new(row[0], row[1], row[2]);
            g * g.transpose()
        })
        .sum()
}

fn local_spread(
    series: &[(f64, f64)],
    c: &Vector3<f64>,
    penalty: &Penalty,
) -> Option<Vector3<f64>> {
    let (_, jac) = residuals(series, c, penalty, &penalty_root(penalty))?;
    // the objective is twice the negative log density
    let cov = (gram(&jac) * 0.5).try_inverse()?;
    let sd = cov.diagonal().map(|v| v.max(0.0).sqrt());
    sd.iter().all(|v| v.is_finite()).then_some(sd)
}

/// Levenberg-Marquardt on the penalized residuals, starting from `c`.
fn refine(series: &[(f64, f64)], mut c: Vector3<f64>, penalty: &Penalty) -> Vector3<f64> {
    let root = penalty_root(penalty);
    let Some((mut r, mut jac)) = residuals(series, &c, penalty, &root) else {
        return c;
    };
    let mut objective: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;
    for _ in 0..LM_ITERATIONS {
        let jtj = gram(&jac);
        let jtr: Vector3<f64> = jac
            .iter()
            .zip(&r)
            .map(|(row, rv)| Vector3::new(row[0], row[1], row[2]) * *rv)
            .sum();
        let mut improved = false;
        while lambda < 1e12 {
            let mut a = jtj;
            for m in 0..3 {
                a[(m, m)] += lambda * jtj[(m, m)].max(1e-12);
            }
            let Some(delta) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = (c + delta)
                .zip_map(&BOX_LOW, f64::max)
                .zip_map(&BOX_HIGH, f64::min);
            if let Some((tr, tj)) = residuals(series, &trial, penalty, &root) {
                let obj: f64 = tr.iter().map(|v| v * v).sum();
                if obj < objective {
                    let gain = objective - obj;
                    (c, r, jac, objective) = (trial, tr, tj, obj);
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = gain > 1e-12 * objective.max(1.0);
                    break;
                }
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }
    c
}

/// Mean and covariance of the fits, leaving out those more than
/// `OUTLIER_MADS` median absolute deviations from the median in any
/// coordinate.
fn moments(fits: &[Option<Vector3<f64>>]) -> (Vector3<f64>, Matrix3<f64>) {
    let all: Vec<Vector3<f64>> = fits.iter().flatten().copied().collect();
    if all.len() < 2 {
        let mean = all.first().copied().unwrap_or_else(Vector3::zeros);
        return (mean, Matrix3::identity());
    }
    let centre = Vector3::from_fn(|m, _| median(all.iter().map(|c| c[m]).collect()));
    let spread = Vector3::from_fn(|m, _| {
        median(all.iter().map(|c| (c[m] - centre[m]).abs()).collect()).max(1e-3)
    });
    let mut cs: Vec<Vector3<f64>> = all
        .iter()
        .filter(|c| (0..3).all(|m| (c[m] - centre[m]).abs() <= OUTLIER_MADS * spread[m]))
        .copied()
        .collect();
    if cs.len() < 2 {
        cs = all;
    }
    let n = cs.len() as f64;
    let mean = cs.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for c in &cs {
        let d = c - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    cov += Matrix3::identity() * 0.01;
    if !linalg::is_spd(&cov) {
        cov = Matrix3::identity();
    }
    (mean, cov)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(c: [f64; 3], t: f64) -> f64 {
        c[0].exp() * ((c[1].exp() * t).exp() + (-c[2].exp() * t).exp() - 1.0)
    }

    #[test]
    fn recovers_noiseless_curves() {
        // off-grid values exercise the refinement
        let truths = [[3.0, -1.43, 1.56], [2.5, -1.0, 0.61], [3.5, -2.07, 2.0]];
        let times = [0.0, 0.2, 0.5, 0.9, 1.4, 2.0];
        let data: Vec<Vec<(f64, f64)>> = truths
            .iter()
            .map(|c| times.iter().map(|&t| (t, curve(*c, t))).collect())
            .collect();
        let refs: Vec<&[(f64, f64)]> = data.iter().map(Vec::as_slice).collect();
        let fit = stage_one(&refs);
        for (c, truth) in fit.characteristics.iter().zip(truths) {
            for m in 0..3 {
                assert!((c[m] - truth[m]).abs() < 1e-4, "{c:?} vs {truth:?}");
            }
        }
        assert_eq!(fit.sigma2, MIN_VARIANCE);
    }

    #[test]
    fn empty_patients_take_the_mean() {
        let data = [
            vec![(0.0, 20.0), (1.0, 15.0)],
            vec![],
            vec![(0.0, 10.0), (0.5, 8.0)],
        ];
        let refs: Vec<&[(f64, f64)]> = data.iter().map(Vec::as_slice).collect();
        let fit = stage_one(&refs);
        assert_eq!(fit.characteristics[1], fit.mean);
        assert!(linalg::is_spd(&fit.covariance));
        assert!(fit
            .characteristics
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite())));
    }
}

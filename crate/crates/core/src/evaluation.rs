//! Classification metrics and WAIC.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{stats, Error, Result};

/// Counts with rows = predicted class, columns = observed class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let j = counts.len();
        if j == 0 || counts.iter().any(|r| r.len() != j) {
            return Err(Error::Dimension("confusion counts must be square".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn n_predicted(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn n_observed(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

/// Tally zero-based predicted and observed labels.
pub fn confusion(
    predicted: &[usize],
    observed: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if predicted.is_empty() || predicted.len() != observed.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal, non-empty label vectors (got {} and {})",
            predicted.len(),
            observed.len()
        )));
    }
    let mut counts = vec![vec![0; num_classes]; num_classes];
    for (&p, &o) in predicted.iter().zip(observed) {
        if p >= num_classes || o >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "label outside 1..={num_classes}: predicted {}, observed {}",
                p + 1,
                o + 1
            )));
        }
        counts[p][o] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Accuracy and precision/recall/F1 averaged with observed-class weights.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<WeightedMetrics> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let n = n as f64;
    let (mut tp_sum, mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0, 0.0);
    let mut warnings = Vec::new();
    for c in 0..cm.num_classes() {
        let tp = cm.true_positives(c) as f64;
        let n_pred = cm.n_predicted(c) as f64;
        let n_obs = cm.n_observed(c) as f64;
        let w = n_obs / n;
        tp_sum += tp;
        if n_pred > 0.0 {
            precision += w * tp / n_pred;
        } else if n_obs > 0.0 {
            warnings.push(format!(
                "class {} is never predicted; its precision term is set to 0",
                c + 1
            ));
        }
        if n_obs > 0.0 {
            recall += w * tp / n_obs;
        }
        if n_pred + n_obs > 0.0 {
            f1 += w * 2.0 * tp / (n_pred + n_obs);
        }
    }
    Ok(WeightedMetrics {
        accuracy: tp_sum / n,
        precision,
        recall,
        f1,
        warnings,
    })
}

/// Metrics of a classifier guessing uniformly at random, averaged over
/// `runs` independent runs.
pub fn random_classifier_baseline(
    observed: &[usize],
    num_classes: usize,
    runs: usize,
    seed: u64,
) -> Result<WeightedMetrics> {
    if runs == 0 {
        return Err(Error::InvalidArgument("runs must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = [0.0; 4];
    for _ in 0..runs {
        let guess: Vec<usize> = observed
            .iter()
            .map(|_| rng.random_range(0..num_classes))
            .collect();
        let m = weighted_metrics(&confusion(&guess, observed, num_classes)?)?;
        for (a, v) in acc
            .iter_mut()
            .zip([m.accuracy, m.precision, m.recall, m.f1])
        {
            *a += v;
        }
    }
    let r = runs as f64;
    Ok(WeightedMetrics {
        accuracy: acc[0] / r,
        precision: acc[1] / r,
        recall: acc[2] / r,
        f1: acc[3] / r,
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaicResult {
    pub lppd: f64,
    pub p_waic: f64,
    pub waic: f64,
    /// Per-unit `(lppd_i, p_waic_i)`.
    #[serde(skip)]
    pub pointwise: Vec<(f64, f64)>,
}

/// WAIC from a draws × units log-likelihood matrix.
pub fn waic(loglik: &[Vec<f64>]) -> Result<WaicResult> {
    let s = loglik.len();
    if s < 2 {
        return Err(Error::InvalidArgument(format!(
            "WAIC needs at least 2 draws, got {s}"
        )));
    }
    let n = loglik[0].len();
    if loglik.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("ragged log-likelihood matrix".into()));
    }
    let log_s = (s as f64).ln();
    let mut column = vec![0.0; s];
    let mut pointwise = Vec::with_capacity(n);
    for i in 0..n {
        for (c, row) in column.iter_mut().zip(loglik) {
            *c = row[i];
        }
        let lppd_i = stats::log_sum_exp(&column) - log_s;
        let p_i = stats::sample_variance(&column).max(0.0);
        pointwise.push((lppd_i, p_i));
    }
    let lppd: f64 = pointwise.iter().map(|p| p.0).sum();
    let p_waic: f64 = pointwise.iter().map(|p| p.1).sum();
    Ok(WaicResult {
        lppd,
        p_waic,
        waic: -2.0 * (lppd - p_waic),
        pointwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn worked_example() -> ConfusionMatrix {
        // n_obs = (4, 3, 3), TP = (3, 2, 2), n_pred = (5, 3, 2)
        ConfusionMatrix::from_counts(vec![vec![3, 1, 1], vec![1, 2, 0], vec![0, 0, 2]]).unwrap()
    }

    #[test]
    fn worked_matrix() {
        let cm = worked_example();
        assert_eq!(cm.total(), 10);
        assert_eq!(
            (0..3).map(|c| cm.n_observed(c)).collect::<Vec<_>>(),
            vec![4, 3, 3]
        );
        assert_eq!(
            (0..3).map(|c| cm.n_predicted(c)).collect::<Vec<_>>(),
            vec![5, 3, 2]
        );
        let m = weighted_metrics(&cm).unwrap();
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        let precision = 0.4 * (3.0 / 5.0) + 0.3 * (2.0 / 3.0) + 0.3 * (2.0 / 2.0);
        let f1 = 0.4 * (6.0 / 9.0) + 0.3 * (4.0 / 6.0) + 0.3 * (4.0 / 5.0);
        assert!((m.precision - precision).abs() < 1e-12);
        assert!((m.precision - 0.74).abs() < 1e-12);
        assert!((m.recall - 0.7).abs() < 1e-12);
        assert!((m.f1 - f1).abs() < 1e-12);
        assert!((m.f1 - 0.70667).abs() < 1e-5);
    }

    #[test]
    fn perfect_predictions() {
        let labels = vec![0, 1, 2, 2, 1, 0, 0, 1, 2, 0];
        let cm = confusion(&labels, &labels, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(cm.counts[r][c] > 0, r == c);
            }
        }
        let m = weighted_metrics(&cm).unwrap();
        assert_eq!(
            (m.accuracy, m.precision, m.recall, m.f1),
            (1.0, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn bad_inputs() {
        assert!(confusion(&[], &[], 3).is_err());
        assert!(confusion(&[3], &[0], 3).is_err());
        assert!(
            weighted_metrics(&ConfusionMatrix::from_counts(vec![vec![0; 2]; 2]).unwrap()).is_err()
        );
    }

    #[test]
    fn unpredicted_class_warns() {
        let cm = confusion(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        let m = weighted_metrics(&cm).unwrap();
        assert_eq!(m.warnings.len(), 1);
        assert!((m.precision - (1.0 / 3.0 * 0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn random_baseline() {
        let obs: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let m = random_classifier_baseline(&obs, 3, 1000, 1).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 0.02);
        let single = vec![1; 200];
        let m = random_classifier_baseline(&single, 3, 200, 2).unwrap();
        assert!((m.accuracy - 1.0 / 3.0).abs() < 0.02);
        assert_eq!(
            random_classifier_baseline(&obs, 3, 1, 7).unwrap(),
            random_classifier_baseline(&obs, 3, 1, 7).unwrap()
        );
        assert!(random_classifier_baseline(&obs, 3, 0, 7).is_err());
    }

    #[test]
    fn waic_small_cases() {
        let same = vec![vec![0.2f64.ln(), 0.5f64.ln()]; 4];
        let w = waic(&same).unwrap();
        assert!(w.p_waic.abs() < 1e-15);
        assert!((w.waic + 2.0 * (0.2f64.ln() + 0.5f64.ln())).abs() < 1e-12);

        let w = waic(&[vec![0.2f64.ln()], vec![0.4f64.ln()]]).unwrap();
        let (a, b) = (0.2f64.ln(), 0.4f64.ln());
        let var = (a - b).powi(2) / 2.0;
        assert!((w.lppd - 0.3f64.ln()).abs() < 1e-12);
        assert!((w.p_waic - var).abs() < 1e-12);
        assert!((w.waic - (-2.0 * (0.3f64.ln() - var))).abs() < 1e-12);

        assert!(waic(&[vec![0.0]]).is_err());
    }

    proptest! {
        #[test]
        fn recall_equals_accuracy(counts in prop::collection::vec(0u64..50, 9)) {
            let rows: Vec<Vec<u64>> = counts.chunks(3).map(<[u64]>::to_vec).collect();
            let cm = ConfusionMatrix::from_counts(rows).unwrap();
            prop_assume!(cm.total() > 0);
            let m = weighted_metrics(&cm).unwrap();
            prop_assert!((m.recall - m.accuracy).abs() < 1e-12);
            for v in [m.accuracy, m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn relabeling_invariance(counts in prop::collection::vec(1u64..20, 9)) {
            let rows: Vec<Vec<u64>> = counts.chunks(3).map(<[u64]>::to_vec).collect();
            let perm = [2, 0, 1];
            let relabeled: Vec<Vec<u64>> =
                (0..3).map(|r| (0..3).map(|c| rows[perm[r]][perm[c]]).collect()).collect();
            let a = weighted_metrics(&ConfusionMatrix::from_counts(rows).unwrap()).unwrap();
            let b = weighted_metrics(&ConfusionMatrix::from_counts(relabeled).unwrap()).unwrap();
            prop_assert!((a.precision - b.precision).abs() < 1e-12);
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }

        #[test]
        fn waic_order_invariant_and_additive(
            values in prop::collection::vec(-8.0f64..0.0, 20),
        ) {
            let m: Vec<Vec<f64>> = values.chunks(4).map(<[f64]>::to_vec).collect();
            let w = waic(&m).unwrap();
            prop_assert!(w.p_waic >= 0.0);
            let mut reversed = m.clone();
            reversed.reverse();
            for r in &mut reversed {
                r.reverse();
            }
            prop_assert!((waic(&reversed).unwrap().waic - w.waic).abs() < 1e-9);
            let left: Vec<Vec<f64>> = m.iter().map(|r| r[..2].to_vec()).collect();
            let right: Vec<Vec<f64>> = m.iter().map(|r| r[2..].to_vec()).collect();
            let sum = waic(&left).unwrap().waic + waic(&right).unwrap().waic;
            prop_assert!((sum - w.waic).abs() < 1e-9);
        }
    }
}

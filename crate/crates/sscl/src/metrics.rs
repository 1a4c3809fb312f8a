//! PR-AUC per class, area under time (AUT), and TPR at a fixed FPR.

use crate::error::{Error, Result};

/// Malware probabilities and true labels of one evaluated split.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("scores must lie in [0, 1]".into()));
        }
        Ok(ScoredBatch { scores, labels })
    }

    /// Scores oriented toward `pos_label` (benign uses `1 - score`) and a
    /// positive flag per sample.
    fn oriented(&self, pos_label: u8) -> (Vec<f64>, Vec<bool>) {
        let scores = if pos_label == 0 {
            self.scores.iter().map(|s| 1.0 - s).collect()
        } else {
            self.scores.clone()
        };
        let positive = self.labels.iter().map(|&l| l == pos_label).collect();
        (scores, positive)
    }
}

/// (recall, precision) at every distinct score threshold, highest threshold
/// first, preceded by the (0, 1) anchor point.
pub fn pr_curve(batch: &ScoredBatch, pos_label: u8) -> Result<Vec<(f64, f64)>> {
    let (scores, positive) = batch.oriented(pos_label);
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = vec![(0.0, 1.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Equal scores cross the threshold together.
        while i < order.len() && scores[order[i]] == threshold {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / n_pos as f64, tp as f64 / (tp + fp) as f64));
    }
    Ok(curve)
}

/// Area under a curve of (x, y) points by the trapezoidal rule, in the
/// given order.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Area under the precision-recall curve with `pos_label` as the positive
/// class.
pub fn pr_auc(batch: &ScoredBatch, pos_label: u8) -> Result<f64> {
    Ok(trapezoid(&pr_curve(batch, pos_label)?))
}

/// Trapezoidal mean of a per-task metric series, normalized by `N - 1`.
pub fn aut(series: &[f64]) -> Result<f64> {
    let n = series.len();
    if n < 2 {
        return Err(Error::SeriesTooShort(n));
    }
    let area: f64 = series.windows(2).map(|w| (w[0] + w[1]) / 2.0).sum();
    Ok(area / (n - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// False when no threshold reaches the FPR target and the strictest one
    /// was used instead.
    pub target_met: bool,
}

/// TPR at the lowest score threshold whose FPR stays within `fpr_target`
/// (a score at or above the threshold counts as malware).
pub fn tpr_at_fpr(batch: &ScoredBatch, fpr_target: f64) -> Result<OperatingPoint> {
    let n_pos = batch.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = batch.labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateBatch);
    }
    let mut order: Vec<usize> = (0..batch.scores.len()).collect();
    order.sort_by(|&a, &b| batch.scores[b].total_cmp(&batch.scores[a]));
    let mut best: Option<OperatingPoint> = None;
    let mut strictest: Option<OperatingPoint> = None;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = batch.scores[order[i]];
        while i < order.len() && batch.scores[order[i]] == threshold {
            if batch.labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let point = OperatingPoint {
            threshold,
            tpr: tp as f64 / n_pos as f64,
            fpr: fp as f64 / n_neg as f64,
            target_met: true,
        };
        strictest.get_or_insert(point);
        if point.fpr <= fpr_target {
            best = Some(point);
        }
    }
    Ok(best.unwrap_or_else(|| OperatingPoint {
        target_met: false,
        ..strictest.expect("non-empty batch")
    }))
}

/// Per-class AUTs of one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutPair {
    pub benign: f64,
    pub malware: f64,
}

/// The six-number summary: seen, unseen and overall AUT for both classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutSummary {
    pub seen: AutPair,
    pub unseen: AutPair,
    pub overall: AutPair,
}

pub const AUT_COLUMNS: [&str; 6] = [
    "seen-AUT(B)",
    "seen-AUT(A)",
    "unseen-AUT(B)",
    "unseen-AUT(A)",
    "overall-AUT(B)",
    "overall-AUT(A)",
];

impl AutSummary {
    /// AUTs from per-task (benign, malware) PR-AUC series, the first
    /// `seen` of which are seen tasks. A part with fewer than two tasks is
    /// reported as NaN.
    pub fn from_series(benign: &[f64], malware: &[f64], seen: usize) -> Self {
        let part = |b: &[f64], m: &[f64]| AutPair {
            benign: aut(b).unwrap_or(f64::NAN),
            malware: aut(m).unwrap_or(f64::NAN),
        };
        let seen = seen.min(benign.len());
        AutSummary {
            seen: part(&benign[..seen], &malware[..seen]),
            unseen: part(&benign[seen..], &malware[seen..]),
            overall: part(benign, malware),
        }
    }

    pub fn values(&self) -> [f64; 6] {
        [
            self.seen.benign,
            self.seen.malware,
            self.unseen.benign,
            self.unseen.malware,
            self.overall.benign,
            self.overall.malware,
        ]
    }

    pub fn from_values(v: [f64; 6]) -> Self {
        AutSummary {
            seen: AutPair { benign: v[0], malware: v[1] },
            unseen: AutPair { benign: v[2], malware: v[3] },
            overall: AutPair { benign: v[4], malware: v[5] },
        }
    }
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Exhaustive threshold sweep written independently of `pr_curve`:
    /// for every distinct score t (descending), count TP/FP directly.
    pub(crate) fn brute_pr_auc(scores: &[f64], labels: &[u8], pos: u8) -> f64 {
        let s: Vec<f64> = scores
            .iter()
            .map(|&x| if pos == 0 { 1.0 - x } else { x })
            .collect();
        let n_pos = labels.iter().filter(|&&l| l == pos).count() as f64;
        let mut thresholds = s.clone();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut pts = vec![(0.0, 1.0)];
        for t in thresholds {
            let mut tp = 0.0;
            let mut fp = 0.0;
            for (x, &l) in s.iter().zip(labels) {
                if *x >= t {
                    if l == pos {
                        tp += 1.0
                    } else {
                        fp += 1.0
                    }
                }
            }
            pts.push((tp / n_pos, tp / (tp + fp)));
        }
        let mut area = 0.0;
        for w in pts.windows(2) {
            area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5;
        }
        area
    }

    #[test]
    fn perfect_ranking_scores_one_for_both_classes() {
        let b = ScoredBatch::new(vec![0.9, 0.8, 0.2, 0.1], vec![1, 1, 0, 0]).unwrap();
        assert_abs_diff_eq!(pr_auc(&b, 1).unwrap(), 1.0);
        assert_abs_diff_eq!(pr_auc(&b, 0).unwrap(), 1.0);
    }

    #[test]
    fn interleaved_ranking_matches_oracle() {
        let scores = vec![0.4, 0.3, 0.2, 0.1];
        let labels = vec![1, 0, 1, 0];
        let b = ScoredBatch::new(scores.clone(), labels.clone()).unwrap();
        // Points: (0,1) (0.5,1) (0.5,0.5) (1,2/3) (1,0.5).
        let expected = 0.5 * 1.0 + 0.5 * (0.5 + 2.0 / 3.0) / 2.0;
        assert_abs_diff_eq!(brute_pr_auc(&scores, &labels, 1), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(pr_auc(&b, 1).unwrap(), 0.7916666666666666, epsilon = 1e-12);
    }

    #[test]
    fn pr_auc_needs_a_positive() {
        let b = ScoredBatch::new(vec![0.3, 0.2], vec![0, 0]).unwrap();
        assert!(matches!(pr_auc(&b, 1), Err(Error::NoPositives)));
        assert!(pr_auc(&b, 0).is_ok());
    }

    #[test]
    fn aut_hand_cases() {
        assert_eq!(aut(&[0.3; 5]).unwrap(), 0.3);
        assert_eq!(aut(&[1.0, 0.0]).unwrap(), 0.5);
        assert_abs_diff_eq!(aut(&[0.8, 0.6, 0.7]).unwrap(), 0.675, epsilon = 1e-15);
        assert!(matches!(aut(&[0.5]), Err(Error::SeriesTooShort(1))));
    }

    #[test]
    fn tpr_at_fpr_cases() {
        let sep = ScoredBatch::new(vec![0.9, 0.8, 0.3, 0.1], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(tpr_at_fpr(&sep, 0.0).unwrap().tpr, 1.0);
        assert_eq!(tpr_at_fpr(&sep, 0.5).unwrap().tpr, 1.0);
        let mixed = ScoredBatch::new(vec![0.9, 0.7, 0.6, 0.2], vec![1, 0, 1, 0]).unwrap();
        assert_eq!(tpr_at_fpr(&mixed, 1.0).unwrap().tpr, 1.0);
        let p = tpr_at_fpr(&mixed, 0.0).unwrap();
        assert_eq!((p.tpr, p.threshold, p.target_met), (0.5, 0.9, true));
        let worst = ScoredBatch::new(vec![0.9, 0.1], vec![0, 1]).unwrap();
        let p = tpr_at_fpr(&worst, 0.0).unwrap();
        assert!(!p.target_met);
        assert_eq!(p.threshold, 0.9);
        let one_class = ScoredBatch::new(vec![0.9, 0.1], vec![1, 1]).unwrap();
        assert!(matches!(tpr_at_fpr(&one_class, 0.1), Err(Error::DegenerateBatch)));
    }

    #[test]
    fn summary_splits_seen_and_unseen() {
        let b = [1.0, 0.8, 0.6, 0.4];
        let m = [0.5, 0.5, 0.9, 0.7];
        let s = AutSummary::from_series(&b, &m, 2);
        assert_abs_diff_eq!(s.seen.benign, 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.unseen.malware, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(s.overall.benign, aut(&b).unwrap(), epsilon = 1e-15);
    }

    fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (1usize..=12).prop_flat_map(|n| {
            (
                // Coarse grid so ties are common.
                proptest::collection::vec((0u8..=10).prop_map(|k| k as f64 / 10.0), n),
                proptest::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn pr_auc_matches_brute_force((scores, labels) in batch(), pos in 0u8..=1) {
            prop_assume!(labels.contains(&pos));
            let b = ScoredBatch::new(scores.clone(), labels.clone()).unwrap();
            let got = pr_auc(&b, pos).unwrap();
            let want = brute_pr_auc(&scores, &labels, pos);
            prop_assert!((got - want).abs() <= 1e-9);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
        }

        #[test]
        fn aut_is_linear_and_bounded(
            series in proptest::collection::vec(0.0f64..1.0, 2..20),
            alpha in -3.0f64..3.0,
        ) {
            let a = aut(&series).unwrap();
            let scaled: Vec<f64> = series.iter().map(|v| v * alpha).collect();
            prop_assert!((aut(&scaled).unwrap() - alpha * a).abs() <= 1e-12);
            let lo = series.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        }

        #[test]
        fn tpr_is_monotone_in_fpr((scores, labels) in batch(), f1 in 0.0f64..1.0, f2 in 0.0f64..1.0) {
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let b = ScoredBatch::new(scores, labels).unwrap();
            let (lo, hi) = if f1 <= f2 { (f1, f2) } else { (f2, f1) };
            prop_assert!(tpr_at_fpr(&b, lo).unwrap().tpr <= tpr_at_fpr(&b, hi).unwrap().tpr);
        }
    }
}

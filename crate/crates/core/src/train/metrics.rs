//! Confusion-matrix metrics, micro-averaged ranking metrics and the
//! precision-recall curve.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if c == 0 || counts.iter().any(|r| r.len() != c) {
            return Err(Error::shape("confusion matrix must be square and non-empty"));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(classes: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape(format!("{} labels for {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.record(t, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let c = self.classes();
        if truth >= c || predicted >= c {
            return Err(Error::invalid(format!("class index outside {c} classes")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    /// Adds another matrix of the same size.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::shape("merging confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    fn row_sum(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    fn col_sum(&self, k: usize) -> u64 {
        self.counts.iter().map(|r| r[k]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest precision, recall and F1 per class, with `0/0 = 0`, and their
/// unweighted means.
pub fn compute_metrics(cm: &ConfusionMatrix) -> PrfReport {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|k| {
            let tp = cm.get(k, k) as f64;
            let precision = ratio(tp, cm.col_sum(k) as f64);
            let recall = ratio(tp, cm.row_sum(k) as f64);
            ClassMetrics {
                precision,
                recall,
                f1: ratio(2.0 * precision * recall, precision + recall),
                support: cm.row_sum(k),
            }
        })
        .collect();
    let c = per_class.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c;
    PrfReport {
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
    }
}

/// Matthews correlation. Two classes use the binary formula with class 1 as
/// positive; more classes use the covariance form. A zero denominator gives 0.
pub fn compute_mcc(cm: &ConfusionMatrix) -> f64 {
    if cm.classes() == 2 {
        let tp = cm.get(1, 1) as f64;
        let tn = cm.get(0, 0) as f64;
        let fp = cm.get(0, 1) as f64;
        let fn_ = cm.get(1, 0) as f64;
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        return ratio(tp * tn - fp * fn_, den);
    }
    let s = cm.total() as f64;
    let c: f64 = (0..cm.classes()).map(|k| cm.get(k, k) as f64).sum();
    let t: Vec<f64> = (0..cm.classes()).map(|k| cm.row_sum(k) as f64).collect();
    let p: Vec<f64> = (0..cm.classes()).map(|k| cm.col_sum(k) as f64).collect();
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let tt: f64 = t.iter().map(|a| a * a).sum();
    let pp: f64 = p.iter().map(|a| a * a).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    ratio(c * s - tp, den)
}

fn flatten(scores: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    let c = scores.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(scores.len() * c);
    let mut positive = Vec::with_capacity(scores.len() * c);
    for (row, &y) in scores.iter().zip(labels) {
        if row.len() != c || y >= c {
            return Err(Error::shape("score rows must share a width that covers every label"));
        }
        for (k, &s) in row.iter().enumerate() {
            if s.is_nan() {
                return Err(Error::invalid("NaN score"));
            }
            flat.push(s);
            positive.push(k == y);
        }
    }
    Ok((flat, positive))
}

/// Area under the ROC curve for binary decisions, by average ranks (ties
/// share their mean rank, which counts tied pairs as one half).
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::shape("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("AUC needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Micro one-vs-rest AUC over all `N·C` (sample, class) decisions.
pub fn compute_auc_micro(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let (flat, positive) = flatten(scores, labels)?;
    auc_binary(&flat, &positive)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Micro-averaged precision-recall points. The first point is the
/// `(threshold +inf, precision 1, recall 0)` endpoint; then one point per
/// distinct score, in decreasing threshold order, predicting positive when
/// `score ≥ threshold`.
pub fn pr_curve(scores: &[Vec<f64>], labels: &[usize]) -> Result<Vec<PrPoint>> {
    let (flat, positive) = flatten(scores, labels)?;
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 || total_pos == positive.len() {
        return Err(Error::invalid("PR curve needs at least one positive and one negative"));
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]));
    let mut points = vec![PrPoint { threshold: f64::INFINITY, precision: 1.0, recall: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = flat[order[i]];
        while i < order.len() && flat[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / total_pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoid area under precision as a function of recall.
pub fn pr_area(points: &[PrPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0)
        .sum()
}

pub fn write_pr_csv(points: &[PrPoint], path: &Path) -> Result<()> {
    let mut out = String::from("threshold,precision,recall\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Computes the micro PR curve and writes it as CSV.
pub fn export_pr_curve(scores: &[Vec<f64>], labels: &[usize], path: &Path) -> Result<Vec<PrPoint>> {
    let points = pr_curve(scores, labels)?;
    write_pr_csv(&points, path)?;
    Ok(points)
}

/// Everything reported for one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the labels make AUC undefined.
    pub auc: Option<f64>,
    pub mcc: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn from_scores(scores: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Self> {
        let predicted: Vec<usize> = scores.iter().map(|r| crate::objectives::argmax(r)).collect();
        let cm = ConfusionMatrix::from_predictions(classes, labels, &predicted)?;
        let prf = compute_metrics(&cm);
        let correct: u64 = (0..classes).map(|k| cm.get(k, k)).sum();
        Ok(Self {
            samples: cm.total(),
            accuracy: ratio(correct as f64, cm.total() as f64),
            precision: prf.macro_precision,
            recall: prf.macro_recall,
            f1: prf.macro_f1,
            auc: compute_auc_micro(scores, labels).ok(),
            mcc: compute_mcc(&cm),
            per_class: prf.per_class,
            confusion: cm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::RngStream;
    use proptest::prelude::*;

    fn binary(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(vec![vec![tn, fp], vec![fn_, tp]]).unwrap()
    }

    #[test]
    fn perfect_diagonal() {
        let cm = ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 5, 0], vec![0, 0, 2]]).unwrap();
        let r = compute_metrics(&cm);
        assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0));
        assert_eq!(compute_mcc(&cm), 1.0);
    }

    #[test]
    fn binary_example() {
        let cm = binary(50, 10, 0, 40);
        let r = compute_metrics(&cm);
        let pos = r.per_class[1];
        assert!((pos.precision - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(pos.recall, 1.0);
        assert!((pos.f1 - 10.0 / 11.0).abs() < 1e-15);
        assert!((compute_mcc(&cm) - 0.8164965809277261).abs() < 1e-15);
    }

    #[test]
    fn absent_class_scores_zero() {
        let cm = ConfusionMatrix::from_counts(vec![vec![4, 1, 0], vec![2, 3, 0], vec![0, 0, 0]]).unwrap();
        let r = compute_metrics(&cm);
        assert_eq!(r.per_class[2], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0, support: 0 });
    }

    #[test]
    fn single_predicted_class_has_zero_mcc() {
        assert_eq!(compute_mcc(&binary(30, 20, 0, 0)), 0.0);
        let cm = ConfusionMatrix::from_counts(vec![vec![4, 0, 0], vec![3, 0, 0], vec![2, 0, 0]]).unwrap();
        assert_eq!(compute_mcc(&cm), 0.0);
    }

    #[test]
    fn auc_examples() {
        let pos = [true, true, false, false];
        assert_eq!(auc_binary(&[0.9, 0.8, 0.3, 0.2], &pos).unwrap(), 1.0);
        assert_eq!(auc_binary(&[0.9, 0.3, 0.4, 0.2], &pos).unwrap(), 0.75);
        assert_eq!(auc_binary(&[0.5; 4], &pos).unwrap(), 0.5);
        assert!(auc_binary(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn micro_auc_flattens_decisions() {
        let scores = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1], vec![0.3, 0.3, 0.4]];
        assert_eq!(compute_auc_micro(&scores, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn pr_curve_shape_and_area() {
        let scores = vec![vec![0.9, 0.1], vec![0.4, 0.6], vec![0.7, 0.3]];
        let labels = [0, 1, 0];
        let pts = pr_curve(&scores, &labels).unwrap();
        let distinct = {
            let mut v: Vec<f64> = scores.iter().flatten().copied().collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        };
        assert_eq!(pts.len(), distinct + 1);
        assert!(pts.windows(2).all(|w| w[1].recall >= w[0].recall && w[1].threshold < w[0].threshold));
        assert!(pts.iter().any(|p| p.precision == 1.0 && p.recall == 1.0));
        assert_eq!(pr_area(&pts), 1.0);
    }

    #[test]
    fn pr_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pr.csv");
        let scores = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        export_pr_curve(&scores, &[1, 0], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall");
        assert_eq!(lines[1], "inf,1,0");
        assert_eq!(lines.len(), 1 + 5);
    }

    #[test]
    fn report_from_scores() {
        let scores = vec![vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]];
        let r = MetricsReport::from_scores(&scores, &[0, 1, 1], 2).unwrap();
        assert_eq!(r.samples, 3);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.confusion.get(1, 0), 1);
    }

    fn random_cm(rng: &mut RngStream, c: usize, max: usize) -> ConfusionMatrix {
        let counts = (0..c).map(|_| (0..c).map(|_| rng.below(max + 1) as u64).collect()).collect();
        ConfusionMatrix::from_counts(counts).unwrap()
    }

    proptest! {
        #[test]
        fn auc_ignores_monotone_transforms(seed in 0u64..500) {
            let mut rng = RngStream::new(seed);
            let n = 2 + rng.below(30);
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) / 8.0).collect();
            let mut positive: Vec<bool> = (0..n).map(|_| rng.below(2) == 1).collect();
            positive[0] = true;
            positive[1] = false;
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc_binary(&scores, &positive).unwrap(), auc_binary(&warped, &positive).unwrap());
        }

        #[test]
        fn mcc_is_bounded(seed in 0u64..2000, c in 2usize..6) {
            let mut rng = RngStream::new(seed);
            let m = compute_mcc(&random_cm(&mut rng, c, 9));
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&m));
        }

        #[test]
        fn relabeling_permutes_per_class(seed in 0u64..500, c in 2usize..6) {
            let mut rng = RngStream::new(seed);
            let cm = random_cm(&mut rng, c, 9);
            let mut perm: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut perm);
            let mut counts = vec![vec![0; c]; c];
            for i in 0..c {
                for j in 0..c {
                    counts[perm[i]][perm[j]] = cm.get(i, j);
                }
            }
            let a = compute_metrics(&cm);
            let b = compute_metrics(&ConfusionMatrix::from_counts(counts).unwrap());
            for i in 0..c {
                prop_assert_eq!(a.per_class[i], b.per_class[perm[i]]);
            }
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-15);
        }
    }
}

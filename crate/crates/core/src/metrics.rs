//! Evaluation metrics: average precision, macro cMAP, F1 at 0.5, Top-1,
//! and trade-off report assembly.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Non-interpolated average precision.
///
/// Samples are ranked by descending score with ties kept in original order;
/// AP sums precision-at-k times the recall increment over positive ranks.
pub fn average_precision(scores: ArrayView1<'_, f64>, labels: ArrayView1<'_, u8>) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("scores must be finite".into()));
    }
    let total_pos = labels.iter().filter(|&&l| l != 0).count();
    if total_pos == 0 {
        return Err(Error::Metric("class has no positive labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / total_pos as f64)
}

/// Macro average of per-class AP, skipping classes with no positives.
pub fn cmap(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(Error::Metric("score and label shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..scores.ncols() {
        let col_labels = labels.column(c);
        if col_labels.iter().all(|&l| l == 0) {
            continue;
        }
        sum += average_precision(scores.column(c), col_labels)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Metric("no class has a positive label".into()));
    }
    Ok(sum / n as f64)
}

/// Mean per-class F1 with predictions thresholded at 0.5; a class with an
/// empty denominator contributes 0.
pub fn f1_mean(scores: ArrayView2<'_, f64>, labels: ArrayView2<'_, u8>) -> Result<f64> {
    if scores.shape() != labels.shape() {
        return Err(Error::Metric("score and label shapes differ".into()));
    }
    if scores.ncols() == 0 {
        return Err(Error::Metric("no classes".into()));
    }
    let mut sum = 0.0;
    for c in 0..scores.ncols() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (s, &l) in scores.column(c).iter().zip(labels.column(c).iter()) {
            let pred = *s >= 0.5;
            match (pred, l != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            sum += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(sum / scores.ncols() as f64)
}

/// Fraction of rows whose argmax matches the label.
pub fn top1(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    if scores.nrows() != labels.len() {
        return Err(Error::Metric("scores and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Metric("no samples".into()));
    }
    let mut correct = 0usize;
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        let mut bestv = f64::NEG_INFINITY;
        for (k, &v) in row.iter().enumerate() {
            if v > bestv {
                bestv = v;
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// One method's metric bundle, input to [`build_report`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    /// Top-1 or action cMAP, in [0, 1].
    pub utility: f64,
    pub privacy_cmap: f64,
    pub privacy_f1: f64,
}

/// A [`MetricRow`] with relative drops against the raw-data row, in percent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffReport {
    pub method: String,
    pub utility: f64,
    pub privacy_cmap: f64,
    pub privacy_f1: f64,
    pub utility_drop_pct: f64,
    pub privacy_cmap_drop_pct: f64,
    pub privacy_f1_drop_pct: f64,
}

fn drop_pct(raw: f64, v: f64) -> f64 {
    if raw == 0.0 {
        0.0
    } else {
        (raw - v) / raw * 100.0
    }
}

/// Integer-rounded percentage for display, e.g. `65%`.
pub fn format_drop(pct: f64) -> String {
    format!("{}%", pct.round() as i64)
}

/// Compute relative drops against the row named `raw_row` and emit rows
/// sorted by method name.
pub fn build_report(rows: &[MetricRow], raw_row: &str) -> Result<Vec<TradeoffReport>> {
    let raw = rows
        .iter()
        .find(|r| r.method == raw_row)
        .ok_or_else(|| Error::Metric(format!("no row named {raw_row}")))?
        .clone();
    let mut out: Vec<TradeoffReport> = rows
        .iter()
        .map(|r| TradeoffReport {
            method: r.method.clone(),
            utility: r.utility,
            privacy_cmap: r.privacy_cmap,
            privacy_f1: r.privacy_f1,
            utility_drop_pct: drop_pct(raw.utility, r.utility),
            privacy_cmap_drop_pct: drop_pct(raw.privacy_cmap, r.privacy_cmap),
            privacy_f1_drop_pct: drop_pct(raw.privacy_f1, r.privacy_f1),
        })
        .collect();
    out.sort_by(|a, b| a.method.cmp(&b.method));
    Ok(out)
}

pub fn report_csv(report: &[TradeoffReport]) -> String {
    let mut s = String::from(
        "method,utility,utility_drop,privacy_cmap,privacy_cmap_drop,privacy_f1,privacy_f1_drop\n",
    );
    for r in report {
        s.push_str(&format!(
            "{},{:.4},{},{:.4},{},{:.4},{}\n",
            r.method,
            r.utility,
            format_drop(r.utility_drop_pct),
            r.privacy_cmap,
            format_drop(r.privacy_cmap_drop_pct),
            r.privacy_f1,
            format_drop(r.privacy_f1_drop_pct),
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array1, Array2};
    use proptest::prelude::*;
    use rand::Rng;

    /// Quadratic-time reference: for every prefix length, recount precision
    /// and recall from scratch and sum precision times recall increments.
    fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let n = scores.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        let total_pos = labels.iter().filter(|&&l| l != 0).count();
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for k in 1..=n {
            let prefix: Vec<usize> = order[..k].to_vec();
            let hits = prefix.iter().filter(|&&i| labels[i] != 0).count();
            let precision = hits as f64 / k as f64;
            let recall = hits as f64 / total_pos as f64;
            ap += precision * (recall - prev_recall);
            prev_recall = recall;
        }
        ap
    }

    #[test]
    fn ap_hand_worked_example() {
        let s = arr1(&[0.9, 0.8, 0.7, 0.6]);
        let l = arr1(&[1u8, 0, 1, 0]);
        let ap = average_precision(s.view(), l.view()).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ap_perfect_ranking_is_one() {
        let s = arr1(&[0.9, 0.8, 0.3, 0.2]);
        let l = arr1(&[1u8, 1, 0, 0]);
        assert_eq!(average_precision(s.view(), l.view()).unwrap(), 1.0);
    }

    #[test]
    fn ap_no_positives_is_an_error() {
        let s = arr1(&[0.9, 0.8]);
        let l = arr1(&[0u8, 0]);
        assert!(average_precision(s.view(), l.view()).is_err());
    }

    #[test]
    fn ap_ties_break_by_original_order() {
        // equal scores: stable order keeps the positive first
        let s = arr1(&[0.5, 0.5, 0.5]);
        let l = arr1(&[1u8, 0, 0]);
        assert_eq!(average_precision(s.view(), l.view()).unwrap(), 1.0);
        let l2 = arr1(&[0u8, 0, 1]);
        assert!((average_precision(s.view(), l2.view()).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_exhaustive_small_grid_matches_oracle() {
        // every score vector on the 0.1 grid for 4 samples, every
        // label pattern with at least one positive
        let mut count = 0usize;
        for a in 0..=10u32 {
            for b in 0..=10u32 {
                for c in 0..=10u32 {
                    for d in 0..=10u32 {
                        let scores = [
                            a as f64 / 10.0,
                            b as f64 / 10.0,
                            c as f64 / 10.0,
                            d as f64 / 10.0,
                        ];
                        for mask in 1u8..16 {
                            let labels = [
                                mask & 1,
                                (mask >> 1) & 1,
                                (mask >> 2) & 1,
                                (mask >> 3) & 1,
                            ];
                            let got = average_precision(
                                Array1::from(scores.to_vec()).view(),
                                Array1::from(labels.to_vec()).view(),
                            )
                            .unwrap();
                            let want = ap_oracle(&scores, &labels);
                            assert!(
                                (got - want).abs() < 1e-9,
                                "scores={scores:?} labels={labels:?}: {got} vs {want}"
                            );
                            count += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(count, 11usize.pow(4) * 15);
    }

    #[test]
    fn ap_random_cases_match_oracle() {
        let mut rng = crate::tensor::rng_for(17, "ap-random");
        for _ in 0..500 {
            let n = rng.gen_range(1..12);
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.gen_range(0..=10) as f64) / 10.0)
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            if labels.iter().all(|&l| l == 0) {
                continue;
            }
            let got = average_precision(
                Array1::from(scores.clone()).view(),
                Array1::from(labels.clone()).view(),
            )
            .unwrap();
            let want = ap_oracle(&scores, &labels);
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn cmap_excludes_zero_positive_classes() {
        let scores = arr2(&[[0.9, 0.2, 0.8], [0.1, 0.3, 0.6], [0.5, 0.4, 0.1]]);
        let labels = arr2(&[[1u8, 0, 1], [0, 0, 1], [1, 0, 0]]);
        let full = cmap(scores.view(), labels.view()).unwrap();
        // class 1 has no positives; the result must equal cmap of classes 0 and 2
        let reduced_scores = arr2(&[[0.9, 0.8], [0.1, 0.6], [0.5, 0.1]]);
        let reduced_labels = arr2(&[[1u8, 1], [0, 1], [1, 0]]);
        let reduced = cmap(reduced_scores.view(), reduced_labels.view()).unwrap();
        assert!((full - reduced).abs() < 1e-12);
    }

    #[test]
    fn cmap_single_class_equals_ap() {
        let scores = arr2(&[[0.9], [0.8], [0.7], [0.6]]);
        let labels = arr2(&[[1u8], [0], [1], [0]]);
        let c = cmap(scores.view(), labels.view()).unwrap();
        let a = average_precision(scores.column(0), labels.column(0)).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn cmap_mean_of_two_classes() {
        // class 0 AP = 1.0, class 1 AP = 0.5 -> 0.75
        let scores = arr2(&[[0.9, 0.9], [0.1, 0.8]]);
        let labels = arr2(&[[1u8, 0], [0, 1]]);
        let c = cmap(scores.view(), labels.view()).unwrap();
        assert!((c - 0.75).abs() < 1e-12);
    }

    #[test]
    fn cmap_all_zero_labels_is_error() {
        let scores = arr2(&[[0.9, 0.2]]);
        let labels = arr2(&[[0u8, 0]]);
        assert!(cmap(scores.view(), labels.view()).is_err());
    }

    #[test]
    fn f1_perfect_and_degenerate() {
        let scores = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let labels = arr2(&[[1u8, 0], [0, 1]]);
        assert_eq!(f1_mean(scores.view(), labels.view()).unwrap(), 1.0);
        // all scores zero with positives present: f1 = 0
        let scores = arr2(&[[0.0], [0.0]]);
        let labels = arr2(&[[1u8], [1]]);
        assert_eq!(f1_mean(scores.view(), labels.view()).unwrap(), 0.0);
        // single class, one true positive at threshold
        let scores = arr2(&[[0.6], [0.4]]);
        let labels = arr2(&[[1u8], [0]]);
        assert_eq!(f1_mean(scores.view(), labels.view()).unwrap(), 1.0);
    }

    #[test]
    fn f1_zero_denominator_class_contributes_zero() {
        // class 1: no positives, no predictions -> 0/0 -> 0
        let scores = arr2(&[[0.9, 0.1], [0.8, 0.2]]);
        let labels = arr2(&[[1u8, 0], [1, 0]]);
        let f = f1_mean(scores.view(), labels.view()).unwrap();
        assert!((f - 0.5).abs() < 1e-12);
    }

    #[test]
    fn top1_counts_argmax_matches() {
        let scores = arr2(&[[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]);
        let acc = top1(scores.view(), &[0, 1, 1]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_drop_matches_published_rounding() {
        let rows = vec![
            MetricRow {
                method: "raw".into(),
                utility: 0.62,
                privacy_cmap: 0.6440,
                privacy_f1: 0.55,
            },
            MetricRow {
                method: "learned".into(),
                utility: 0.60,
                privacy_cmap: 0.2281,
                privacy_f1: 0.30,
            },
        ];
        let report = build_report(&rows, "raw").unwrap();
        let learned = report.iter().find(|r| r.method == "learned").unwrap();
        assert!((learned.privacy_cmap_drop_pct - 64.58).abs() < 0.01);
        assert_eq!(format_drop(learned.privacy_cmap_drop_pct), "65%");
        let raw = report.iter().find(|r| r.method == "raw").unwrap();
        assert_eq!(format_drop(raw.utility_drop_pct), "0%");
        // methods sorted by name
        assert_eq!(report[0].method, "learned");
    }

    #[test]
    fn report_requires_raw_row_and_permits_negative_drop() {
        let rows = vec![MetricRow {
            method: "m".into(),
            utility: 0.5,
            privacy_cmap: 0.5,
            privacy_f1: 0.5,
        }];
        assert!(build_report(&rows, "raw").is_err());
        let rows = vec![
            MetricRow {
                method: "raw".into(),
                utility: 0.5,
                privacy_cmap: 0.5,
                privacy_f1: 0.5,
            },
            MetricRow {
                method: "better".into(),
                utility: 0.6,
                privacy_cmap: 0.5,
                privacy_f1: 0.5,
            },
        ];
        let report = build_report(&rows, "raw").unwrap();
        let better = report.iter().find(|r| r.method == "better").unwrap();
        assert!(better.utility_drop_pct < 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ap_invariant_under_monotone_transform(
            raw in proptest::collection::vec((0u32..=10, 0u8..=1), 1..10),
        ) {
            prop_assume!(raw.iter().any(|(_, l)| *l == 1));
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 10.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| *l).collect();
            let a = average_precision(
                Array1::from(scores.clone()).view(),
                Array1::from(labels.clone()).view(),
            ).unwrap();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect();
            let b = average_precision(
                Array1::from(transformed).view(),
                Array1::from(labels).view(),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn cmap_and_f1_invariant_under_permutation(seed in 0u64..500) {
            let mut rng = crate::tensor::rng_for(seed, "perm-metrics");
            let n = rng.gen_range(2..8);
            let c = rng.gen_range(1..4);
            // Distinct scores within each column: ties rank by sample order, so
            // shuffling tied samples legitimately changes AP.
            let cols: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
                    for i in (1..n).rev() {
                        let j = rng.gen_range(0..=i);
                        v.swap(i, j);
                    }
                    v
                })
                .collect();
            let scores = Array2::from_shape_fn((n, c), |(i, j)| cols[j][i]);
            let labels = Array2::from_shape_fn((n, c), |_| rng.gen_range(0..=1u8));
            prop_assume!((0..c).all(|j| labels.column(j).iter().any(|&l| l != 0)));
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let pscores = Array2::from_shape_fn((n, c), |(i, j)| scores[[perm[i], j]]);
            let plabels = Array2::from_shape_fn((n, c), |(i, j)| labels[[perm[i], j]]);
            let c1 = cmap(scores.view(), labels.view()).unwrap();
            let c2 = cmap(pscores.view(), plabels.view()).unwrap();
            prop_assert!((c1 - c2).abs() < 1e-12);
            let f1 = f1_mean(scores.view(), labels.view()).unwrap();
            let f2 = f1_mean(pscores.view(), plabels.view()).unwrap();
            prop_assert!((f1 - f2).abs() < 1e-12);
        }

        #[test]
        fn metrics_stay_in_unit_interval(seed in 0u64..200) {
            let mut rng = crate::tensor::rng_for(seed, "range-metrics");
            let n = rng.gen_range(1..10);
            let c = rng.gen_range(1..4);
            let scores = Array2::from_shape_fn((n, c), |_| rng.gen_range(0.0..1.0));
            let labels = Array2::from_shape_fn((n, c), |_| rng.gen_range(0..=1u8));
            if let Ok(v) = cmap(scores.view(), labels.view()) {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let f = f1_mean(scores.view(), labels.view()).unwrap();
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}

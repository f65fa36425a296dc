//! ROC AUC evaluation, aggregation over independent runs, and the
//! real-vs-synthetic comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classes::{class_name, NUM_ABNORMALITIES};
use crate::error::{Error, Result};

/// Per-class AUC of one run; `None` where the test set lacks positives or
/// negatives for that class.
pub type AucVector = [Option<f64>; NUM_ABNORMALITIES];

/// Area under the ROC curve via the Mann-Whitney statistic with average
/// ranks for ties. O(n log n).
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based, tie-averaged) ranks of the positives, doubled to stay
    // in integers
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share the average (i + 1 + j) / 2
        let avg_x2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_group;
        i = j;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // U = R_pos - p(p+1)/2 ; doubled: 2U = 2R - p(p+1)
    let u_x2 = rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * q) as f64)
}

/// Per-class AUCs for a batch of 14-dim predictions against class indices
/// (No Finding = 14 counts as negative everywhere).
pub fn evaluate_scores(predictions: &[[f32; NUM_ABNORMALITIES]], classes: &[usize]) -> Result<AucVector> {
    if predictions.is_empty() {
        return Err(Error::Input("empty test set".into()));
    }
    if predictions.len() != classes.len() {
        return Err(Error::Input("prediction/label count mismatch".into()));
    }
    let mut out: AucVector = [None; NUM_ABNORMALITIES];
    for (c, slot) in out.iter_mut().enumerate() {
        let scores: Vec<f64> = predictions.iter().map(|p| p[c] as f64).collect();
        let labels: Vec<bool> = classes.iter().map(|&k| k == c).collect();
        *slot = match compute_auc(&scores, &labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc(_)) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAuc {
    pub class: String,
    /// Percent.
    pub mean: f64,
    /// Percent, sample standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub training_set_tag: String,
    /// Defined classes only, in class-index order.
    pub per_class: Vec<ClassAuc>,
    /// Unweighted mean over classes; std is over per-run class means.
    pub mean_auc: (f64, f64),
    pub num_runs: usize,
    /// Set when `num_runs == 1` and the stds are zero by convention.
    pub single_run: bool,
}

impl AucReport {
    pub fn class(&self, name: &str) -> Option<&ClassAuc> {
        self.per_class.iter().find(|c| c.class == name)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_runs(tag: &str, runs: &[AucVector]) -> Result<AucReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Aggregation("no runs to aggregate".into()))?;
    for (i, r) in runs.iter().enumerate() {
        for c in 0..NUM_ABNORMALITIES {
            if r[c].is_some() != first[c].is_some() {
                return Err(Error::Aggregation(format!(
                    "run {i} differs from run 0 in coverage of {}",
                    class_name(c)
                )));
            }
        }
    }
    let defined: Vec<usize> = (0..NUM_ABNORMALITIES).filter(|&c| first[c].is_some()).collect();
    if defined.is_empty() {
        return Err(Error::Aggregation("no class has a defined AUC".into()));
    }
    let per_class = defined
        .iter()
        .map(|&c| {
            let xs: Vec<f64> = runs.iter().map(|r| 100.0 * r[c].expect("checked")).collect();
            let (mean, std) = mean_std(&xs);
            ClassAuc {
                class: class_name(c).to_string(),
                mean,
                std,
            }
        })
        .collect::<Vec<_>>();
    let run_means: Vec<f64> = runs
        .iter()
        .map(|r| defined.iter().map(|&c| 100.0 * r[c].expect("checked")).sum::<f64>() / defined.len() as f64)
        .collect();
    let mean = per_class.iter().map(|c| c.mean).sum::<f64>() / per_class.len() as f64;
    let (_, std) = mean_std(&run_means);
    Ok(AucReport {
        training_set_tag: tag.to_string(),
        per_class,
        mean_auc: (mean, std),
        num_runs: runs.len(),
        single_run: runs.len() == 1,
    })
}

/// Half-up rounding to one decimal for non-negative display values.
pub fn round1(x: f64) -> f64 {
    // the epsilon absorbs binary representation error of decimal halves
    ((x * 10.0) + 1e-9).round() / 10.0
}

pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.1} ± {:.1}", round1(mean), round1(std))
}

/// Rendered comparison: an aligned text table and a CSV with the same cells.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedReport {
    pub text: String,
    pub csv: String,
}

pub fn render_report(reports: &[AucReport]) -> Result<RenderedReport> {
    if reports.is_empty() {
        return Err(Error::Input("no reports to render".into()));
    }
    let mut rows: Vec<String> = Vec::new();
    for c in 0..NUM_ABNORMALITIES {
        let name = class_name(c);
        if reports.iter().any(|r| r.class(name).is_some()) {
            rows.push(name.to_string());
        }
    }
    let mut cells: Vec<Vec<String>> = rows
        .iter()
        .map(|name| {
            reports
                .iter()
                .map(|r| {
                    r.class(name)
                        .map(|c| format_cell(c.mean, c.std))
                        .unwrap_or_else(|| "n/a".into())
                })
                .collect()
        })
        .collect();
    rows.push("Mean".into());
    cells.push(
        reports
            .iter()
            .map(|r| format_cell(r.mean_auc.0, r.mean_auc.1))
            .collect(),
    );

    let header: Vec<String> = std::iter::once("Training set".to_string())
        .chain(reports.iter().map(|r| r.training_set_tag.clone()))
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for (name, row) in rows.iter().zip(&cells) {
        widths[0] = widths[0].max(name.chars().count());
        for (k, cell) in row.iter().enumerate() {
            widths[k + 1] = widths[k + 1].max(cell.chars().count());
        }
    }
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
    let mut text = String::new();
    let line = |cols: &[String]| -> String {
        cols.iter()
            .enumerate()
            .map(|(k, c)| pad(c, widths[k]))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    writeln!(text, "{}", line(&header)).expect("string write");
    writeln!(text, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)))
        .expect("string write");
    for (name, row) in rows.iter().zip(&cells) {
        let cols: Vec<String> = std::iter::once(name.clone()).chain(row.iter().cloned()).collect();
        writeln!(text, "{}", line(&cols)).expect("string write");
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for (name, row) in rows.iter().zip(&cells) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().cloned());
        w.write_record(&rec)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Export(e.to_string()))?)
        .expect("csv output is utf-8");
    Ok(RenderedReport { text, csv })
}

/// Serialized per-run AUC vectors of one training-set tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub training_set_tag: String,
    pub runs: Vec<AucVector>,
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Pairwise O(n^2) oracle: wins count 1, ties 1/2.
    pub(crate) fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut pairs) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn small_fixtures() {
        assert_eq!(compute_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        let s = [0.8, 0.4, 0.6, 0.2];
        let l = [true, true, false, false];
        assert_eq!(brute_force_auc(&s, &l), 0.75);
        assert_eq!(compute_auc(&s, &l).unwrap(), 0.75);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(
            compute_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedAuc(_))
        ));
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..=200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| v as f64 / 4.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle((scores, mut labels) in instance()) {
            labels[0] = true;
            labels[1] = false;
            let fast = compute_auc(&scores, &labels).unwrap();
            prop_assert!((fast - brute_force_auc(&scores, &labels)).abs() <= 1e-12);
        }

        #[test]
        fn invariant_under_monotone_transform((scores, mut labels) in instance()) {
            labels[0] = true;
            labels[1] = false;
            let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(compute_auc(&scores, &labels).unwrap(), compute_auc(&t, &labels).unwrap());
        }

        #[test]
        fn negation_complements_without_ties(n in 2usize..100, seed in any::<u64>()) {
            use rand::{Rng, seq::SliceRandom};
            let mut rng = crate::seeds::rng_from_seed(seed);
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64).collect();
            scores.shuffle(&mut rng);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let sum = compute_auc(&scores, &labels).unwrap() + compute_auc(&neg, &labels).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    fn run(values: &[(usize, f64)]) -> AucVector {
        let mut v: AucVector = [None; NUM_ABNORMALITIES];
        for &(c, a) in values {
            v[c] = Some(a);
        }
        v
    }

    #[test]
    fn two_point_mean_and_std() {
        let r = aggregate_runs("real", &[run(&[(0, 0.80)]), run(&[(0, 0.82)])]).unwrap();
        let c = &r.per_class[0];
        assert!((c.mean - 81.0).abs() < 1e-9);
        assert!((c.std - 2f64.sqrt()).abs() < 1e-9);
        assert!(!r.single_run);
    }

    #[test]
    fn single_run_has_zero_std() {
        let r = aggregate_runs("real", &[run(&[(0, 0.7), (3, 0.9)])]).unwrap();
        assert!(r.single_run);
        assert!(r.per_class.iter().all(|c| c.std == 0.0));
        assert!((r.mean_auc.0 - 80.0).abs() < 1e-9);
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let x = run(&[(1, 0.77), (2, 0.63)]);
        let r = aggregate_runs("syn", &[x, x, x, x]).unwrap();
        assert!(r.per_class.iter().all(|c| c.std == 0.0));
        assert_eq!(r.mean_auc.1, 0.0);
    }

    #[test]
    fn mean_row_is_class_average() {
        let r = aggregate_runs(
            "real",
            &[run(&[(0, 0.6), (1, 0.9)]), run(&[(0, 0.7), (1, 0.8)])],
        )
        .unwrap();
        let avg = r.per_class.iter().map(|c| c.mean).sum::<f64>() / 2.0;
        assert!((r.mean_auc.0 - avg).abs() < 1e-9);
    }

    #[test]
    fn inconsistent_coverage_fails() {
        let res = aggregate_runs("x", &[run(&[(0, 0.6)]), run(&[(0, 0.6), (1, 0.5)])]);
        assert!(matches!(res, Err(Error::Aggregation(_))));
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(format_cell(81.649, 0.351), "81.6 ± 0.4");
        assert_eq!(format_cell(0.35, 0.25), "0.4 ± 0.3");
    }

    #[test]
    fn full_table_shape_and_csv_agreement() {
        let all: Vec<(usize, f64)> = (0..14).map(|c| (c, 0.7 + 0.01 * c as f64)).collect();
        let reports: Vec<AucReport> = ["real", "syn_pggan", "syn_ldm"]
            .iter()
            .map(|t| aggregate_runs(t, &[run(&all), run(&all)]).unwrap())
            .collect();
        let out = render_report(&reports).unwrap();
        let csv_lines: Vec<&str> = out.csv.lines().collect();
        assert_eq!(csv_lines.len(), 16); // header + 14 classes + Mean
        for line in &csv_lines[1..] {
            assert_eq!(line.split(',').count(), 4);
        }
        let text_lines: Vec<&str> = out.text.lines().collect();
        assert_eq!(text_lines.len(), 17); // header + rule + 15 rows
        for line in &csv_lines[1..] {
            let cells: Vec<&str> = line.split(',').collect();
            assert!(out.text.contains(cells[0]));
            for cell in &cells[1..] {
                assert!(out.text.contains(cell));
            }
        }
    }

    #[test]
    fn scores_to_auc_vector() {
        let preds = vec![[0.0f32; 14], [0.0f32; 14]];
        let v = evaluate_scores(&preds, &[4, 9]).unwrap();
        assert_eq!(v.iter().filter(|a| a.is_some()).count(), 2);
        assert_eq!(v[4], Some(0.5));
        assert!(evaluate_scores(&[], &[]).is_err());
    }
}

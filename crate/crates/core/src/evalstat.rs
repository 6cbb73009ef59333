//! Confusion matrices, one-vs-rest metrics, a chi-square comparison of two
//! methods' correctness, and per-frame score export.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};
use crate::mregnet::ModelOutput;

pub const CLASSES: usize = 3;

/// Rows are true grades, columns predicted grades.
pub type Confusion = [[u64; CLASSES]; CLASSES];

/// Published results of the reference model on its private clinical data,
/// kept for comparison in reports; not reproducible here.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedMetrics {
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub specificity: f64,
}

pub const PUBLISHED_MREG: PublishedMetrics = PublishedMetrics {
    accuracy: 89.36,
    recall: 85.93,
    precision: 86.83,
    specificity: 86.36,
};

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<Confusion> {
    if preds.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut m = [[0u64; CLASSES]; CLASSES];
    for (&p, &y) in preds.iter().zip(labels) {
        if p as usize >= CLASSES || y as usize >= CLASSES {
            return Err(Error::invalid(format!("grade out of range: label {y}, prediction {p}")));
        }
        m[y as usize][p as usize] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// One-vs-rest accuracy `(TP + TN) / n`.
    pub accuracy: f64,
    pub recall: f64,
    pub precision: f64,
    pub specificity: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub confusion: Confusion,
    /// `trace / n`, percent.
    pub accuracy: f64,
    pub per_class: [ClassMetrics; CLASSES],
    /// Unweighted mean over classes.
    pub macro_avg: ClassMetrics,
    /// Rates whose denominator was zero and were reported as 0, e.g. `"precision[2]"`.
    pub degenerate: Vec<String>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn ratio(num: u64, den: u64, name: &str, class: Option<usize>, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(match class {
            Some(c) => format!("{name}[{c}]"),
            None => name.to_string(),
        });
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn metrics(m: &Confusion) -> MetricsReport {
    let n: u64 = m.iter().flatten().sum();
    let mut flags = Vec::new();
    let trace: u64 = (0..CLASSES).map(|c| m[c][c]).sum();
    let accuracy = ratio(trace, n, "accuracy", None, &mut flags);
    let mut raw = [ClassMetrics::default(); CLASSES];
    for (c, out) in raw.iter_mut().enumerate() {
        let tp = m[c][c];
        let fn_ = m[c].iter().sum::<u64>() - tp;
        let fp = (0..CLASSES).map(|r| m[r][c]).sum::<u64>() - tp;
        let tn = n - tp - fn_ - fp;
        out.accuracy = ratio(tp + tn, n, "accuracy", Some(c), &mut flags);
        out.recall = ratio(tp, tp + fn_, "recall", Some(c), &mut flags);
        out.precision = ratio(tp, tp + fp, "precision", Some(c), &mut flags);
        out.specificity = ratio(tn, tn + fp, "specificity", Some(c), &mut flags);
        out.f1 = if out.precision + out.recall > 0.0 {
            2.0 * out.precision * out.recall / (out.precision + out.recall)
        } else {
            flags.push(format!("f1[{c}]"));
            0.0
        };
    }
    let mean = |f: fn(&ClassMetrics) -> f64| raw.iter().map(f).sum::<f64>() / CLASSES as f64;
    let macro_avg = ClassMetrics {
        accuracy: round2(mean(|c| c.accuracy)),
        recall: round2(mean(|c| c.recall)),
        precision: round2(mean(|c| c.precision)),
        specificity: round2(mean(|c| c.specificity)),
        f1: round2(mean(|c| c.f1)),
    };
    let per_class = raw.map(|c| ClassMetrics {
        accuracy: round2(c.accuracy),
        recall: round2(c.recall),
        precision: round2(c.precision),
        specificity: round2(c.specificity),
        f1: round2(c.f1),
    });
    MetricsReport {
        n,
        confusion: *m,
        accuracy: round2(accuracy),
        per_class,
        macro_avg,
        degenerate: flags,
    }
}

/// Percent of `preds` equal to `labels`, unrounded.
pub fn accuracy(preds: &[u8], labels: &[u8]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub p_value: f64,
    pub degenerate: bool,
}

/// Upper tail of the 1-dof chi-square distribution.
pub fn chi_square_p(statistic: f64) -> f64 {
    if statistic <= 0.0 {
        1.0
    } else {
        gamma_ur(0.5, statistic / 2.0)
    }
}

/// Pearson chi-square on the 2x2 table of method (a, b) by outcome
/// (correct, incorrect), without continuity correction.
pub fn chi_square_compare(correct_a: &[bool], correct_b: &[bool]) -> Result<ChiSquare> {
    if correct_a.is_empty() || correct_a.len() != correct_b.len() {
        return Err(Error::invalid(format!(
            "correctness vectors of lengths {} and {}",
            correct_a.len(),
            correct_b.len()
        )));
    }
    let count = |v: &[bool]| v.iter().filter(|&&c| c).count() as f64;
    let n = correct_a.len() as f64;
    let table = [
        [count(correct_a), n - count(correct_a)],
        [count(correct_b), n - count(correct_b)],
    ];
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let total = rows[0] + rows[1];
    if rows.contains(&0.0) || cols.contains(&0.0) {
        return Ok(ChiSquare {
            statistic: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let mut statistic = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            let expected = rows[r] * cols[c] / total;
            statistic += (table[r][c] - expected).powi(2) / expected;
        }
    }
    Ok(ChiSquare {
        statistic,
        p_value: chi_square_p(statistic),
        degenerate: false,
    })
}

/// One model output with the identity and label of its video.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredVideo {
    pub id: String,
    pub label: u8,
    pub output: ModelOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScoreRow {
    pub sample_id: String,
    pub instance: usize,
    pub selected: bool,
    pub frame: usize,
    pub mixed_score: f64,
    pub expert0: f64,
    pub expert1: Option<f64>,
    pub expert2: Option<f64>,
    pub label: u8,
    pub prediction: u8,
}

pub fn frame_score_rows(videos: &[ScoredVideo]) -> Vec<FrameScoreRow> {
    let mut rows = Vec::new();
    for v in videos {
        let o = &v.output;
        let (experts, instances, frames) = {
            let s = o.frame_scores_expert.shape();
            (s[0], s[1], s[2])
        };
        let expert = |e: usize, i: usize, t: usize| (e < experts).then(|| o.frame_scores_expert.at(&[e, i, t]));
        for i in 0..instances {
            for t in 0..frames {
                rows.push(FrameScoreRow {
                    sample_id: v.id.clone(),
                    instance: i,
                    selected: i == o.alpha,
                    frame: t,
                    mixed_score: o.frame_scores_mixed.at(&[i, t]),
                    expert0: o.frame_scores_expert.at(&[0, i, t]),
                    expert1: expert(1, i, t),
                    expert2: expert(2, i, t),
                    label: v.label,
                    prediction: o.grade_pred,
                });
            }
        }
    }
    rows
}

/// Writes one CSV row per (video, instance, frame).
pub fn export_frame_scores(videos: &[ScoredVideo], path: &Path) -> Result<usize> {
    let rows = frame_score_rows(videos);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

pub fn read_frame_scores(path: &Path) -> Result<Vec<FrameScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format("frame score csv", format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let m = confusion(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(m, [[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
        assert_eq!(confusion(&[], &[]).unwrap(), [[0; 3]; 3]);
        assert!(confusion(&[0], &[0, 1]).is_err());
        assert!(confusion(&[3], &[0]).is_err());
    }

    #[test]
    fn perfect_predictions_score_full_marks() {
        let r = metrics(&confusion(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap());
        assert_eq!(r.accuracy, 100.0);
        for c in r.per_class.iter().chain([&r.macro_avg]) {
            assert_eq!((c.accuracy, c.recall, c.precision, c.specificity, c.f1), (100.0, 100.0, 100.0, 100.0, 100.0));
        }
        assert!(r.degenerate.is_empty());
    }

    #[test]
    fn two_class_hand_arithmetic() {
        let m = [[50, 10, 0], [5, 35, 0], [0, 0, 0]];
        let r = metrics(&m);
        assert_eq!(r.per_class[1].recall, 87.50);
        assert_eq!(r.per_class[1].precision, 77.78);
        assert_eq!(r.accuracy, 85.0);
        assert!(r.degenerate.contains(&"recall[2]".to_string()));
        assert!(r.degenerate.contains(&"precision[2]".to_string()));
        assert_eq!(r.per_class[2].recall, 0.0);
    }

    #[test]
    fn empty_confusion_flags_everything() {
        let r = metrics(&[[0; 3]; 3]);
        assert_eq!(r.n, 0);
        assert_eq!(r.accuracy, 0.0);
        assert!(r.degenerate.contains(&"accuracy".to_string()));
    }

    #[test]
    fn one_per_grade_all_zero() {
        let r = metrics(&confusion(&[0, 0, 0], &[0, 1, 2]).unwrap());
        assert_eq!(r.accuracy, 33.33);
    }

    proptest! {
        #[test]
        fn metrics_are_order_invariant(pairs in prop::collection::vec((0u8..3, 0u8..3), 1..60), seed in any::<u64>()) {
            let (p, y): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by_key(|&i| (i as u64).wrapping_mul(seed | 1).rotate_left(17));
            let pp: Vec<u8> = idx.iter().map(|&i| p[i]).collect();
            let yy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            let a = metrics(&confusion(&p, &y).unwrap());
            let b = metrics(&confusion(&pp, &yy).unwrap());
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(a.confusion.iter().flatten().sum::<u64>(), a.n);
            for c in &a.per_class {
                for v in [c.accuracy, c.recall, c.precision, c.specificity, c.f1] {
                    prop_assert!((0.0..=100.0).contains(&v));
                }
            }
        }

        #[test]
        fn chi_square_is_symmetric(a in prop::collection::vec(any::<bool>(), 1..80), b_seed in any::<u64>()) {
            let b: Vec<bool> = (0..a.len()).map(|i| (b_seed >> (i % 64)) & 1 == 1).collect();
            let x = chi_square_compare(&a, &b).unwrap();
            let y = chi_square_compare(&b, &a).unwrap();
            prop_assert!((x.statistic - y.statistic).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x.p_value));
        }
    }

    #[test]
    fn chi_square_examples() {
        let v = vec![true, false, true, true];
        let r = chi_square_compare(&v, &v).unwrap();
        assert_eq!((r.statistic, r.p_value), (0.0, 1.0));
        assert!((chi_square_p(3.841459) - 0.05).abs() < 5e-4);
        let all = vec![true; 5];
        assert!(chi_square_compare(&all, &all).unwrap().degenerate);
        assert!(chi_square_compare(&[], &[]).is_err());
        let mut last = 1.0;
        for k in 1..40 {
            let p = chi_square_p(k as f64 * 0.5);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn chi_square_textbook_table() {
        let a: Vec<bool> = (0..100).map(|i| i < 90).collect();
        let b: Vec<bool> = (0..100).map(|i| i < 60).collect();
        let r = chi_square_compare(&a, &b).unwrap();
        // expected counts: correct 75/75, wrong 25/25
        let oracle = (90.0f64 - 75.0).powi(2) / 75.0 + (10.0f64 - 25.0).powi(2) / 25.0 + (60.0f64 - 75.0).powi(2) / 75.0 + (40.0f64 - 25.0).powi(2) / 25.0;
        assert!((r.statistic - oracle).abs() < 1e-9);
        assert!((r.statistic - 24.0).abs() < 1e-9);
    }

    fn scored(id: &str, experts: usize) -> ScoredVideo {
        let fse = Tensor::from_fn(&[experts, 3, 16], |k| (k as f64 * 0.37).sin());
        let fsm = Tensor::from_fn(&[3, 16], |k| (k as f64 * 0.11).cos() / 3.0);
        ScoredVideo {
            id: id.into(),
            label: 2,
            output: ModelOutput {
                probs2: Tensor::filled(&[3, 2], 0.5),
                alpha: 1,
                frame_scores_expert: fse,
                frame_scores_mixed: fsm,
                instance_score_mixed: Tensor::zeros(&[3]),
                instance_scores_expert: Tensor::zeros(&[experts, 3]),
                regression_value: 0.0,
                grade_pred: 0,
                winning_expert: 0,
            },
        }
    }

    #[test]
    fn frame_scores_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.csv");
        let videos = vec![scored("v00001", 3), scored("v00002", 1)];
        assert_eq!(export_frame_scores(&videos[..1], &path).unwrap(), 48);
        let n = export_frame_scores(&videos, &path).unwrap();
        assert_eq!(n, 96);
        let rows = read_frame_scores(&path).unwrap();
        assert_eq!(rows, frame_score_rows(&videos));
        assert_eq!(rows.iter().filter(|r| r.selected).count(), 32);
        assert!(rows[50].expert1.is_none());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,instance,selected,frame,mixed_score,expert0,expert1,expert2,label,prediction\n"));
        assert!(!text.contains('\r'));
    }
}

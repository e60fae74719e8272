//! Shape checks on logged value-matrix projections: eventual growth of
//! `a_k^T W_V a_k`, deceleration, and the label/task memorization ratio.

use serde::{Deserialize, Serialize};

use crate::datagen::SampleKind;
use crate::error::{Error, Result};
use crate::trainer::{LogRow, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryThresholds {
    /// QA training: `max_k |b_k^T W_V b_k|` must end below this multiple of
    /// `min_k a_k^T W_V a_k`.
    pub qa_ratio_max: f64,
    /// ICL-style training: the same ratio must end above this.
    pub icl_ratio_min: f64,
    /// Fewer logged rows than this is an error.
    pub min_rows: usize,
}

impl Default for TrajectoryThresholds {
    fn default() -> Self {
        TrajectoryThresholds {
            qa_ratio_max: 0.1,
            icl_ratio_min: 0.3,
            min_rows: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryCheck {
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub train_dist: SampleKind,
    /// `a_k^T W_V a_k` positive and strictly increasing over the second
    /// half of the log, for every `k`.
    pub eventually_increasing: TrajectoryCheck,
    /// Mean growth per epoch over the last third is below that over the
    /// first third, for every `k`.
    pub decelerating: TrajectoryCheck,
    /// `max_k |b_k^T W_V b_k| / min_k a_k^T W_V a_k` at the final row.
    pub label_task_ratio: f64,
    pub memorization: TrajectoryCheck,
}

impl TrajectoryReport {
    pub fn all_passed(&self) -> bool {
        self.eventually_increasing.passed && self.decelerating.passed && self.memorization.passed
    }
}

fn growth_rate(rows: &[LogRow], k: usize) -> f64 {
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    (last.a_v_a[k] - first.a_v_a[k]) / (last.epoch - first.epoch) as f64
}

/// `max_k |b_k^T W_V b_k| / min_k a_k^T W_V a_k` for one row.
pub fn label_task_ratio(row: &LogRow) -> f64 {
    let b = row.b_v_b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let a = row.a_v_a.iter().copied().fold(f64::INFINITY, f64::min);
    b / a
}

pub fn trajectory_assertions(
    log: &TrainLog,
    train_dist: SampleKind,
    thresholds: &TrajectoryThresholds,
) -> Result<TrajectoryReport> {
    let rows = &log.rows;
    let need = thresholds.min_rows.max(6);
    if rows.len() < need {
        return Err(Error::InsufficientLog(format!(
            "{} logged rows, need at least {need}",
            rows.len()
        )));
    }
    let k = log.num_tasks;
    if rows.iter().any(|r| r.a_v_a.len() != k || r.b_v_b.len() != k) {
        return Err(Error::InsufficientLog("rows disagree on the number of tasks".into()));
    }

    let tail = &rows[rows.len() / 2..];
    let mut bad = Vec::new();
    for t in 0..k {
        let ok = tail.iter().all(|r| r.a_v_a[t] > 0.0) && tail.windows(2).all(|w| w[1].a_v_a[t] > w[0].a_v_a[t]);
        if !ok {
            bad.push(t);
        }
    }
    let eventually_increasing = TrajectoryCheck {
        passed: bad.is_empty(),
        detail: if bad.is_empty() {
            format!("increasing over the last {} rows", tail.len())
        } else {
            format!("not positive and increasing for tasks {bad:?}")
        },
    };

    let third = rows.len() / 3;
    let head = &rows[..=third];
    let end = &rows[rows.len() - 1 - third..];
    let rates: Vec<(f64, f64)> = (0..k).map(|t| (growth_rate(head, t), growth_rate(end, t))).collect();
    let decelerating = TrajectoryCheck {
        passed: rates.iter().all(|&(early, late)| late < early),
        detail: format!("(first third, last third) growth per epoch: {rates:?}"),
    };

    let ratio = label_task_ratio(&rows[rows.len() - 1]);
    let memorization = match train_dist {
        SampleKind::Qa => TrajectoryCheck {
            passed: ratio.is_finite() && ratio >= 0.0 && ratio < thresholds.qa_ratio_max,
            detail: format!("ratio {ratio} against < {}", thresholds.qa_ratio_max),
        },
        SampleKind::Icl | SampleKind::QaIcl => TrajectoryCheck {
            passed: ratio.is_finite() && ratio > thresholds.icl_ratio_min,
            detail: format!("ratio {ratio} against > {}", thresholds.icl_ratio_min),
        },
    };

    Ok(TrajectoryReport {
        train_dist,
        eventually_increasing,
        decelerating,
        label_task_ratio: ratio,
        memorization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, a: f64, b: f64) -> LogRow {
        LogRow {
            epoch,
            train_ce: 1.0,
            test01_icl: None,
            test01_qa: None,
            test01_qaicl: None,
            a_v_a: vec![a, a * 1.1],
            b_v_b: vec![b, -b],
            a_kq_a: vec![0.0, 0.0],
            v_cross_max: 0.0,
            kq_cross_max: 0.0,
            attn_max: 0.1,
            cos_task: 0.0,
            cos_other_max: 0.0,
            cos_b_max: 0.0,
        }
    }

    fn log_of(rows: Vec<LogRow>) -> TrainLog {
        TrainLog {
            num_tasks: 2,
            rows,
            loss_increases: vec![],
            updates: 0,
            stopped_early: false,
        }
    }

    #[test]
    fn constant_log_is_not_increasing() {
        let log = log_of((0..10).map(|t| row(t * 10, 1.0, 0.01)).collect());
        let r = trajectory_assertions(&log, SampleKind::Qa, &TrajectoryThresholds::default()).unwrap();
        assert!(!r.eventually_increasing.passed);
        assert!(!r.decelerating.passed);
        assert!(r.memorization.passed);
    }

    #[test]
    fn concave_growth_passes_qa_checks() {
        let log = log_of((0..12).map(|t| row(t * 10, (1.0 + t as f64).ln() + 0.01, 0.01)).collect());
        let r = trajectory_assertions(&log, SampleKind::Qa, &TrajectoryThresholds::default()).unwrap();
        assert!(r.all_passed(), "{r:?}");
    }

    #[test]
    fn icl_branch_needs_large_label_projection() {
        let rows: Vec<LogRow> = (0..8).map(|t| row(t, 1.0 + t as f64, 0.5 * (1.0 + t as f64))).collect();
        let log = log_of(rows);
        let r = trajectory_assertions(&log, SampleKind::Icl, &TrajectoryThresholds::default()).unwrap();
        assert!(r.memorization.passed);
        assert!((r.label_task_ratio - 0.5 * 8.0 / 8.0).abs() < 1e-12);
        let strict = TrajectoryThresholds {
            icl_ratio_min: 0.6,
            ..Default::default()
        };
        assert!(!trajectory_assertions(&log, SampleKind::Icl, &strict).unwrap().memorization.passed);
    }

    #[test]
    fn short_log_is_an_error() {
        let log = log_of((0..5).map(|t| row(t, 1.0, 0.0)).collect());
        assert!(matches!(
            trajectory_assertions(&log, SampleKind::Qa, &TrajectoryThresholds::default()),
            Err(Error::InsufficientLog(_))
        ));
    }
}

//! Metrics, inference-time rule-strength sweeps and rule-strength selection.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{DeepCtrlModel, TaskKind};
use crate::numerics::{bce_term, Tensor2D};
use crate::rules::{perturb_batch, verification_ratio, RuleSpec};

pub const SWEEP_CSV_HEADER: [&str; 4] = ["alpha", "task_metric", "verification", "split"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mae,
    CrossEntropy,
    Accuracy,
}

impl MetricKind {
    pub fn default_for(task: TaskKind) -> Self {
        match task {
            TaskKind::Regression => MetricKind::Mae,
            TaskKind::BinaryClassification => MetricKind::CrossEntropy,
        }
    }

    pub fn lower_is_better(self) -> bool {
        !matches!(self, MetricKind::Accuracy)
    }

    /// Metric mapped so that smaller is always better.
    pub fn as_error(self, value: f64) -> f64 {
        if self.lower_is_better() {
            value
        } else {
            -value
        }
    }
}

/// MAE, clamped cross-entropy, or accuracy at threshold 0.5.
pub fn task_metric(kind: MetricKind, pred: &Tensor2D, y: &Tensor2D) -> Result<f64> {
    if !pred.same_shape(y) {
        return Err(Error::dim("metric targets", pred.len(), y.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    Ok(match kind {
        MetricKind::Mae => pred.zip_map(y, |p, t| (p - t).abs()).mean(),
        MetricKind::CrossEntropy => pred.zip_map(y, bce_term).mean(),
        MetricKind::Accuracy => pred
            .zip_map(y, |p, t| if (p >= 0.5) == (t >= 0.5) { 1.0 } else { 0.0 })
            .mean(),
    })
}

/// `start, start + step, ..., end` with values rounded to 12 decimals so
/// grid points print cleanly.
pub fn alpha_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start.is_finite() && end.is_finite() && step.is_finite() && step > 0.0 && end >= start) {
        return Err(Error::config("grid", format!("invalid grid {start}..{end} step {step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    Ok((0..=n)
        .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

/// 0.0 to 1.0 in steps of 0.05 (21 points).
pub fn default_grid() -> Vec<f64> {
    alpha_grid(0.0, 1.0, 0.05).expect("static grid")
}

/// -0.2 to 1.4 in steps of 0.05 (33 points).
pub fn extended_grid() -> Vec<f64> {
    alpha_grid(-0.2, 1.4, 0.05).expect("static grid")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub metric: MetricKind,
    pub task_metric: f64,
    pub verification: f64,
    pub split: Split,
}

/// Evaluates a trained model at every `alpha` in `grid` without touching its
/// parameters. Monotonic rules use one perturbation set drawn from
/// `perturb_seed` and shared by all grid points.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    model: &DeepCtrlModel,
    x: &Tensor2D,
    y: &Tensor2D,
    grid: &[f64],
    rule: &RuleSpec,
    metric: MetricKind,
    split: Split,
    perturb_seed: u64,
) -> Result<Vec<SweepRecord>> {
    let perturbation = if rule.needs_perturbation() {
        Some(perturb_batch(x, rule, &mut ChaCha8Rng::seed_from_u64(perturb_seed))?)
    } else {
        None
    };
    grid.iter()
        .map(|&alpha| {
            let pred = model.predict(x, alpha)?;
            let verification = match &perturbation {
                Some(batch) => {
                    let pred_p = model.predict(&batch.x_p, alpha)?;
                    verification_ratio(rule, x, &pred, Some((&pred_p, batch)))?
                }
                None => verification_ratio(rule, x, &pred, None)?,
            };
            Ok(SweepRecord {
                alpha,
                metric,
                task_metric: task_metric(metric, &pred, y)?,
                verification,
                split,
            })
        })
        .collect()
}

/// Writes `alpha,task_metric,verification,split` with a header row.
pub fn write_sweep_csv(records: &[SweepRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER)?;
    for r in records {
        w.write_record([
            r.alpha.to_string(),
            r.task_metric.to_string(),
            r.verification.to_string(),
            r.split.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Objective {
    MinTaskError,
    MinErrorSubjectToVerification { threshold: f64 },
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::MinTaskError => f.write_str("min-error"),
            Objective::MinErrorSubjectToVerification { threshold } => write!(f, "min-error-vr>={threshold}"),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;

    /// `min-error` or `min-error-vr=<threshold>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "min-error" {
            return Ok(Objective::MinTaskError);
        }
        if let Some(t) = s.strip_prefix("min-error-vr=").or_else(|| s.strip_prefix("min-error-vr>=")) {
            let threshold: f64 = t
                .parse()
                .map_err(|_| Error::config("objective", format!("bad threshold `{t}`")))?;
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::config("objective", "verification threshold must lie in [0,1]"));
            }
            return Ok(Objective::MinErrorSubjectToVerification { threshold });
        }
        Err(Error::config("objective", format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSelection {
    pub objective: Objective,
    pub alpha: f64,
    pub validation: SweepRecord,
    pub test: Option<SweepRecord>,
}

impl AlphaSelection {
    /// Attaches the test-split record at the chosen `alpha`.
    pub fn with_test(mut self, test_sweep: &[SweepRecord]) -> Self {
        self.test = test_sweep.iter().find(|r| r.alpha == self.alpha).copied();
        self
    }
}

/// Picks the metric-minimal record meeting the objective; ties go to the
/// smallest `alpha`.
pub fn select_alpha(sweep: &[SweepRecord], objective: Objective) -> Result<AlphaSelection> {
    if sweep.is_empty() {
        return Err(Error::Empty);
    }
    let feasible = |r: &&SweepRecord| match objective {
        Objective::MinTaskError => true,
        Objective::MinErrorSubjectToVerification { threshold } => r.verification >= threshold,
    };
    let best = sweep.iter().filter(feasible).min_by(|a, b| {
        a.metric
            .as_error(a.task_metric)
            .total_cmp(&b.metric.as_error(b.task_metric))
            .then(a.alpha.total_cmp(&b.alpha))
    });
    match best {
        Some(r) => Ok(AlphaSelection { objective, alpha: r.alpha, validation: *r, test: None }),
        None => {
            let threshold = match objective {
                Objective::MinErrorSubjectToVerification { threshold } => threshold,
                Objective::MinTaskError => unreachable!("every record is feasible"),
            };
            let best = sweep.iter().map(|r| r.verification).fold(f64::NEG_INFINITY, f64::max);
            Err(Error::InfeasibleSelection { threshold, best })
        }
    }
}

/// Average ranks (1-based, ties share their mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; NaN when either series is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs equal-length series");
    crate::tabular::pearson(&ranks(a), &ranks(b))
}

/// Largest change in any output between neighbouring grid points.
pub fn max_adjacent_jump(model: &DeepCtrlModel, x: &Tensor2D, grid: &[f64]) -> Result<f64> {
    let mut prev: Option<Tensor2D> = None;
    let mut worst: f64 = 0.0;
    for &a in grid {
        let pred = model.predict(x, a)?;
        if !pred.is_finite() {
            return Err(Error::NonFinite(format!("prediction at alpha={a}")));
        }
        if let Some(p) = &prev {
            worst = worst.max(p.max_abs_diff(&pred));
        }
        prev = Some(pred);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alpha: f64, err: f64, vr: f64) -> SweepRecord {
        SweepRecord { alpha, metric: MetricKind::Mae, task_metric: err, verification: vr, split: Split::Val }
    }

    #[test]
    fn metric_examples() {
        let y = Tensor2D::column(&[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(task_metric(MetricKind::Mae, &y, &y).unwrap(), 0.0);
        let half = Tensor2D::filled(4, 1, 0.5);
        let ce = task_metric(MetricKind::CrossEntropy, &half, &y).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Tensor2D::column(&[0.2, 0.7, 0.4, 0.6]).unwrap();
        assert_eq!(task_metric(MetricKind::Accuracy, &p, &y).unwrap(), 0.5);
        assert!(matches!(task_metric(MetricKind::Mae, &Tensor2D::zeros(0, 1), &Tensor2D::zeros(0, 1)), Err(Error::Empty)));
    }

    #[test]
    fn grids_have_expected_points() {
        let g = default_grid();
        assert_eq!(g.len(), 21);
        assert_eq!(g[7], 0.35);
        assert_eq!(*g.last().unwrap(), 1.0);
        let e = extended_grid();
        assert_eq!(e.len(), 33);
        assert_eq!(e[0], -0.2);
        assert_eq!(*e.last().unwrap(), 1.4);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_alpha(&[rec(0.3, 1.0, 0.1)], Objective::MinTaskError).unwrap().alpha, 0.3);
        let sweep = [rec(0.2, 1.0, 0.5), rec(0.6, 1.2, 0.95)];
        let obj = Objective::MinErrorSubjectToVerification { threshold: 0.9 };
        assert_eq!(select_alpha(&sweep, obj).unwrap().alpha, 0.6);
        let obj = Objective::MinErrorSubjectToVerification { threshold: 0.99 };
        match select_alpha(&sweep, obj) {
            Err(Error::InfeasibleSelection { best, .. }) => assert_eq!(best, 0.95),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn ties_prefer_smaller_alpha() {
        let sweep = [rec(0.8, 0.5, 1.0), rec(0.4, 0.5, 1.0), rec(0.9, 0.7, 1.0)];
        assert_eq!(select_alpha(&sweep, Objective::MinTaskError).unwrap().alpha, 0.4);
    }

    #[test]
    fn accuracy_is_maximised() {
        let mut a = rec(0.1, 0.7, 1.0);
        let mut b = rec(0.5, 0.9, 1.0);
        a.metric = MetricKind::Accuracy;
        b.metric = MetricKind::Accuracy;
        assert_eq!(select_alpha(&[a, b], Objective::MinTaskError).unwrap().alpha, 0.5);
    }

    #[test]
    fn spearman_handles_ties() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn objective_parsing() {
        assert_eq!("min-error".parse::<Objective>().unwrap(), Objective::MinTaskError);
        assert_eq!(
            "min-error-vr=0.9".parse::<Objective>().unwrap(),
            Objective::MinErrorSubjectToVerification { threshold: 0.9 }
        );
        assert!("min-error-vr=2".parse::<Objective>().is_err());
    }
}

//! Synthetic tabular generators with known ground truth.
//!
//! `synth_monotone_regression` produces a time-ordered group whose
//! consecutive differences in a price-like feature and the target have a
//! requested correlation. `synth_shifted_classification` produces labels that
//! either follow ("usual") or invert ("unusual") a threshold rule on one
//! feature, with exact group counts so mixes can emulate distribution shift.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{split_sizes, SplitDataset};
use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::numerics::Tensor2D;

/// Allowed gap between requested and generated group correlation.
pub const CORRELATION_TOLERANCE: f64 = 0.05;
const MAX_GENERATION_ATTEMPTS: usize = 5;
/// Mean and spread of the price-like monotone feature.
pub const PRICE_MEAN: f64 = 10.0;
pub const PRICE_STD: f64 = 1.0;
/// Largest admissible partial effect of the price feature per unit change.
pub const MAX_PRICE_EFFECT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    pub data: SplitDataset,
    pub task: TaskKind,
    /// Generated correlation between consecutive differences of feature `k`
    /// and the target (regression groups only).
    pub measured_correlation: Option<f64>,
    /// Usual/unusual membership per row (classification mixes only).
    pub usual: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrGroupSpec {
    pub n: usize,
    pub d: usize,
    /// Index of the monotone (price-like) feature.
    pub k: usize,
    /// Target correlation between `Δx_k` and `Δy`.
    pub correlation: f64,
    /// Standard deviation of additive target noise.
    pub noise: f64,
    /// When false, the non-monotone part of the target is noise only.
    pub informative_features: bool,
    /// Spread of the row-specific price slope: the target gains
    /// `elasticity_spread * x_a * (x_k - PRICE_MEAN)`, so the monotone rule
    /// fails where `beta + elasticity_spread * x_a` has the wrong sign.
    pub elasticity_spread: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Taken from the experiment seed when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CorrGroupSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 6,
            k: 0,
            correlation: -0.2,
            noise: 0.5,
            informative_features: true,
            elasticity_spread: 0.0,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl CorrGroupSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::config("n", "at least 100 samples required"));
        }
        if self.d == 0 || self.k >= self.d {
            return Err(Error::config("k", format!("feature {} outside dimension {}", self.k, self.d)));
        }
        if !(-1.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation", "must lie in [-1, 1]"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        if !(self.elasticity_spread.is_finite() && self.elasticity_spread >= 0.0) {
            return Err(Error::config("elasticity_spread", "must be non-negative"));
        }
        if self.elasticity_spread > 0.0 && self.d < 2 {
            return Err(Error::config("elasticity_spread", "needs at least one feature besides k"));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.train_fraction + self.val_fraction < 1.0) {
            return Err(Error::config("train_fraction", "train/val fractions must leave a test split"));
        }
        Ok(())
    }
}

/// Centered second moments of two series.
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut s = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        s.0 += dx * dx;
        s.1 += dx * dy;
        s.2 += dy * dy;
    }
    s
}

/// Pearson correlation (NaN when either series is constant).
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (saa, sab, sbb) = moments(a, b);
    sab / (saa * sbb).sqrt()
}

fn diffs(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Correlation between consecutive differences of two series.
pub fn difference_correlation(feature: &[f64], target: &[f64]) -> f64 {
    pearson(&diffs(feature), &diffs(target))
}

/// Coefficient on the monotone feature that makes the difference correlation
/// hit `c`, found by bisection (the correlation is monotone in it). The
/// coefficient is clamped to `±MAX_PRICE_EFFECT`, so strong correlations under
/// heavy noise are unattainable.
fn solve_coefficient(dk: &[f64], dr: &[f64], c: f64) -> f64 {
    let corr = |beta: f64| {
        let dy: Vec<f64> = dk.iter().zip(dr).map(|(k, r)| beta * k + r).collect();
        pearson(dk, &dy)
    };
    let (mut lo, mut hi) = (-MAX_PRICE_EFFECT, MAX_PRICE_EFFECT);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let v = corr(mid);
        if v.is_nan() || v < c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Regression group with a tuned correlation between `Δx_k` and `Δy`.
///
/// `y = (beta + s x_a) (x_k - PRICE_MEAN) + sum_j w_j x_j + 0.5 x_a x_b + noise`,
/// where the sum runs over the other features, `(a, b)` are the first two of
/// them, `s` is the elasticity spread and `beta` is solved for on the generated
/// sample.
pub fn synth_monotone_regression(spec: &CorrGroupSpec) -> Result<TabularDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let others: Vec<usize> = (0..spec.d).filter(|&j| j != spec.k).collect();
    let mut last_err = f64::NAN;
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let weights: Vec<f64> = others
            .iter()
            .map(|_| {
                let mag: f64 = rng.random_range(0.5..1.5);
                if rng.random_bool(0.5) { mag } else { -mag }
            })
            .collect();
        let x = Tensor2D::from_fn(spec.n, spec.d, |_, c| {
            let z: f64 = rng.sample(StandardNormal);
            if c == spec.k { PRICE_MEAN + PRICE_STD * z } else { z }
        });
        let rest: Vec<f64> = (0..spec.n)
            .map(|r| {
                let row = x.row(r);
                let mut v = 0.0;
                if spec.informative_features {
                    v += others.iter().zip(&weights).map(|(&j, w)| w * row[j]).sum::<f64>();
                    if others.len() >= 2 {
                        v += 0.5 * row[others[0]] * row[others[1]];
                    }
                }
                if let Some(&a) = others.first() {
                    v += spec.elasticity_spread * row[a] * (row[spec.k] - PRICE_MEAN);
                }
                let eps: f64 = rng.sample(StandardNormal);
                v + spec.noise * eps
            })
            .collect();
        let price: Vec<f64> = x.col_values(spec.k);
        let beta = solve_coefficient(&diffs(&price), &diffs(&rest), spec.correlation);
        let y: Vec<f64> = price
            .iter()
            .zip(&rest)
            .map(|(p, r)| beta * (p - PRICE_MEAN) + r)
            .collect();
        let measured = difference_correlation(&price, &y);
        if (measured - spec.correlation).abs() <= CORRELATION_TOLERANCE {
            let (n_train, n_val, _) = split_sizes(spec.n, spec.train_fraction, spec.val_fraction);
            let data = SplitDataset::temporal(x, Tensor2D::column(&y)?, n_train, n_val)?;
            return Ok(TabularDataset {
                data,
                task: TaskKind::Regression,
                measured_correlation: Some(measured),
                usual: None,
            });
        }
        last_err = measured;
    }
    Err(Error::Generation(format!(
        "correlation {} unattainable with noise {} (last attempt measured {last_err})",
        spec.correlation, spec.noise
    )))
}

/// Usual/unusual mix for the threshold-rule classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftMixSpec {
    pub n_usual: usize,
    pub n_unusual: usize,
    pub d: usize,
    /// Index of the thresholded (pressure-like) feature.
    pub k: usize,
    pub threshold: f64,
    /// Standard deviation of feature `k` around the threshold.
    pub spread: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for ShiftMixSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl ShiftMixSpec {
    fn with_counts(n_usual: usize, n_unusual: usize) -> Self {
        Self {
            n_usual,
            n_unusual,
            d: 8,
            k: 0,
            threshold: 129.5,
            spread: 15.0,
            train_fraction: 0.7,
            val_fraction: 0.1,
        }
    }

    /// Usual 6,007 / unusual 14,018 (ratio 0.30).
    pub fn source() -> Self {
        Self::with_counts(6_007, 14_018)
    }

    /// Usual 20,000 / unusual 6,009 (ratio 0.77).
    pub fn target1() -> Self {
        Self::with_counts(20_000, 6_009)
    }

    /// Usual 6,000 / unusual 6,009 (ratio 0.50).
    pub fn target2() -> Self {
        Self::with_counts(6_000, 6_009)
    }

    /// Usual 4,000 / unusual 6,009 (ratio 0.40).
    pub fn target3() -> Self {
        Self::with_counts(4_000, 6_009)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "source" => Ok(Self::source()),
            "target1" => Ok(Self::target1()),
            "target2" => Ok(Self::target2()),
            "target3" => Ok(Self::target3()),
            other => Err(Error::config("mix", format!("unknown mix `{other}`"))),
        }
    }

    /// Same mix with both counts multiplied by `factor` (rounded).
    pub fn scaled(mut self, factor: f64) -> Self {
        self.n_usual = (self.n_usual as f64 * factor).round() as usize;
        self.n_unusual = (self.n_unusual as f64 * factor).round() as usize;
        self
    }

    pub fn total(&self) -> usize {
        self.n_usual + self.n_unusual
    }

    /// Fraction of samples that follow the rule.
    pub fn usual_ratio(&self) -> f64 {
        self.n_usual as f64 / self.total() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::config("n_usual", "usual and unusual counts cannot both be zero"));
        }
        if self.d < 2 || self.k >= self.d {
            return Err(Error::config("k", format!("feature {} outside dimension {}", self.k, self.d)));
        }
        if !(self.threshold.is_finite() && self.spread.is_finite() && self.spread > 0.0) {
            return Err(Error::config("spread", "must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return Err(Error::config("train_fraction", "fractions must lie in [0,1] and sum to at most 1"));
        }
        Ok(())
    }
}

/// Whether a labelled sample follows the threshold rule.
pub fn is_usual(x_k: f64, threshold: f64, y: f64) -> bool {
    (x_k < threshold && y == 0.0) || (x_k >= threshold && y == 1.0)
}

/// Binary classification mix with exactly `n_usual` rule-following samples.
///
/// Feature `k` is `threshold + spread * N(0,1)`, the rest are standard
/// normal. Group membership goes to the `n_usual` highest scores of
/// `x_j + N(0,1)` for the first non-`k` feature `j`, so that feature is weakly
/// informative of whether the rule applies.
pub fn synth_shifted_classification(spec: &ShiftMixSpec, seed: u64) -> Result<TabularDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.total();
    let x = Tensor2D::from_fn(n, spec.d, |_, c| {
        let z: f64 = rng.sample(StandardNormal);
        if c == spec.k { spec.threshold + spec.spread * z } else { z }
    });
    let informative = (0..spec.d).find(|&j| j != spec.k).expect("d >= 2");
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|r| {
            let z: f64 = rng.sample(StandardNormal);
            (x.get(r, informative) + z, r)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut usual = vec![false; n];
    for &(_, r) in scored.iter().take(spec.n_usual) {
        usual[r] = true;
    }
    let y: Vec<f64> = (0..n)
        .map(|r| {
            let above = x.get(r, spec.k) >= spec.threshold;
            if above == usual[r] { 1.0 } else { 0.0 }
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (n_train, n_val, _) = split_sizes(n, spec.train_fraction, spec.val_fraction);
    let train = order[..n_train].to_vec();
    let val = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    let data = SplitDataset::new(x, Tensor2D::column(&y)?, train, val, test)?;
    Ok(TabularDataset {
        data,
        task: TaskKind::BinaryClassification,
        measured_correlation: None,
        usual: Some(usual),
    })
}

/// Writes `x0..x{d-1},y,split` with a header row.
pub fn write_tabular_csv(ds: &TabularDataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = ds.data.x.cols();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.push("split".into());
    w.write_record(&header)?;
    for (r, tag) in ds.data.split_of_rows().iter().enumerate() {
        let mut rec: Vec<String> = ds.data.x.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(ds.data.y.get(r, 0).to_string());
        rec.push(tag.map_or("", |s| s.as_str()).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncorrelated_noise_free_group() {
        let spec = CorrGroupSpec {
            correlation: 0.0,
            noise: 0.0,
            ..Default::default()
        };
        let ds = synth_monotone_regression(&spec).unwrap();
        assert!(ds.measured_correlation.unwrap().abs() < 1e-6);
    }

    #[test]
    fn requested_correlations_are_met() {
        for c in [-0.3, -0.2, -0.1, 0.2, 0.3] {
            for seed in 0..3 {
                let spec = CorrGroupSpec { correlation: c, seed, ..Default::default() };
                let ds = synth_monotone_regression(&spec).unwrap();
                let y = ds.data.y.col_values(0);
                let independent = difference_correlation(&ds.data.x.col_values(spec.k), &y);
                assert!((independent - c).abs() <= CORRELATION_TOLERANCE, "c={c} got {independent}");
                assert_eq!(Some(independent), ds.measured_correlation);
            }
        }
    }

    #[test]
    fn unattainable_correlation_errors() {
        let spec = CorrGroupSpec { correlation: 1.0, noise: 5.0, ..Default::default() };
        assert!(matches!(synth_monotone_regression(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn generators_are_pure_in_seed() {
        let spec = CorrGroupSpec { seed: 4, ..Default::default() };
        assert_eq!(synth_monotone_regression(&spec).unwrap(), synth_monotone_regression(&spec).unwrap());
        let mix = ShiftMixSpec::source().scaled(0.05);
        assert_eq!(
            synth_shifted_classification(&mix, 3).unwrap(),
            synth_shifted_classification(&mix, 3).unwrap()
        );
    }

    #[test]
    fn membership_counts_are_exact_and_recomputable() {
        for mix in [ShiftMixSpec::source(), ShiftMixSpec::target1(), ShiftMixSpec::target2(), ShiftMixSpec::target3()] {
            let mix = mix.scaled(0.1);
            let ds = synth_shifted_classification(&mix, 1).unwrap();
            let usual = ds.usual.as_ref().unwrap();
            let recomputed: Vec<bool> = (0..mix.total())
                .map(|r| is_usual(ds.data.x.get(r, mix.k), mix.threshold, ds.data.y.get(r, 0)))
                .collect();
            assert_eq!(&recomputed, usual);
            assert_eq!(usual.iter().filter(|u| **u).count(), mix.n_usual);
            assert!(ds.data.y.data().iter().all(|v| *v == 0.0 || *v == 1.0));
        }
    }

    #[test]
    fn preset_mix_ratios() {
        assert_eq!(ShiftMixSpec::source().total(), 20_025);
        assert!((ShiftMixSpec::source().usual_ratio() - 0.30).abs() < 0.005);
        assert!((ShiftMixSpec::target1().usual_ratio() - 0.77).abs() < 0.005);
        assert!((ShiftMixSpec::target2().usual_ratio() - 0.50).abs() < 0.005);
        assert!((ShiftMixSpec::target3().usual_ratio() - 0.40).abs() < 0.005);
    }

    #[test]
    fn all_usual_mix_follows_rule_everywhere() {
        let mix = ShiftMixSpec { n_usual: 500, n_unusual: 0, ..ShiftMixSpec::source() };
        let ds = synth_shifted_classification(&mix, 0).unwrap();
        for r in 0..500 {
            let expected = if ds.data.x.get(r, 0) >= mix.threshold { 1.0 } else { 0.0 };
            assert_eq!(ds.data.y.get(r, 0), expected);
        }
    }

    #[test]
    fn source_split_fractions() {
        let ds = synth_shifted_classification(&ShiftMixSpec::source(), 0).unwrap();
        assert_eq!(ds.data.train.len(), 14_018);
        assert_eq!(ds.data.val.len(), 2_003);
        assert_eq!(ds.data.test.len(), 4_004);
    }
}

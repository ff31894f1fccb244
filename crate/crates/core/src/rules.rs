//! Rule objectives: threshold rules, the energy-damping rule and
//! perturbation-based monotonicity rules, plus verification accounting.
//!
//! Every rule loss is a one-sided ReLU penalty, so a sample contributes zero
//! loss exactly when it satisfies the rule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor2D};
use crate::pendulum::{energies, EnergyFn, PendulumParams};

/// Default upper bound on the relative perturbation scale.
pub const DEFAULT_PERTURBATION_BOUND: f64 = 0.1;

/// Differentiable quantity constrained by a threshold rule `r(x, y) <= tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum RFunction {
    /// `r = y[index]`
    Output { index: usize },
    /// `r = y[index] - x[index]`
    OutputMinusInput { index: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Output should rise when the feature rises.
    Increase,
    /// Output should fall when the feature rises.
    Decrease,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleSpec {
    Threshold {
        r: RFunction,
        tau: f64,
    },
    EnergyDamping {
        #[serde(default)]
        params: PendulumParams,
    },
    Monotonic {
        feature: usize,
        direction: Direction,
        /// Only pairs crossing this threshold upward (`x_k < a < x_p,k`) count.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        guard: Option<f64>,
        #[serde(default = "default_u")]
        u: f64,
        #[serde(default)]
        output: usize,
    },
}

fn default_u() -> f64 {
    DEFAULT_PERTURBATION_BOUND
}

impl RuleSpec {
    pub fn needs_perturbation(&self) -> bool {
        matches!(self, RuleSpec::Monotonic { .. })
    }

    pub fn validate(&self, input_dim: usize, output_dim: usize) -> Result<()> {
        match self {
            RuleSpec::Threshold { r, tau } => {
                if !tau.is_finite() {
                    return Err(Error::config("rule.tau", "must be finite"));
                }
                let (idx, needs_input) = match r {
                    RFunction::Output { index } => (*index, false),
                    RFunction::OutputMinusInput { index } => (*index, true),
                };
                if idx >= output_dim || (needs_input && idx >= input_dim) {
                    return Err(Error::config("rule.r.index", format!("{idx} out of range")));
                }
            }
            RuleSpec::EnergyDamping { params } => {
                params.validate()?;
                if input_dim != 4 || output_dim != 4 {
                    return Err(Error::config(
                        "rule.kind",
                        "energy_damping needs 4-dimensional pendulum states",
                    ));
                }
            }
            RuleSpec::Monotonic {
                feature,
                u,
                output,
                guard,
                ..
            } => {
                if !(u.is_finite() && *u > 0.0) {
                    return Err(Error::config("rule.u", "must be positive"));
                }
                if *feature >= input_dim {
                    return Err(Error::config(
                        "rule.feature",
                        format!("{feature} outside input dimension {input_dim}"),
                    ));
                }
                if *output >= output_dim {
                    return Err(Error::config("rule.output", format!("{output} out of range")));
                }
                if guard.is_some_and(|a| !a.is_finite()) {
                    return Err(Error::config("rule.guard", "must be finite"));
                }
            }
        }
        Ok(())
    }
}

/// `max(r - tau, 0)`.
pub fn threshold_rule_loss(r_value: f64, tau: f64) -> f64 {
    (r_value - tau).max(0.0)
}

/// Per-sample `ReLU(E(y_hat) - E(x))` for batches of pendulum states.
pub fn energy_rule_loss(x: &Tensor2D, y_hat: &Tensor2D, params: &PendulumParams) -> Vec<f64> {
    energies(y_hat, params)
        .into_iter()
        .zip(energies(x, params))
        .map(|(ey, ex)| (ey - ex).max(0.0))
        .collect()
}

/// Indicator-gated monotonicity penalty for one pair of outputs.
pub fn monotonic_rule_loss(y_hat: f64, y_hat_p: f64, direction: Direction, valid: bool) -> f64 {
    if !valid {
        return 0.0;
    }
    match direction {
        Direction::Decrease => (y_hat_p - y_hat).max(0.0),
        Direction::Increase => (y_hat - y_hat_p).max(0.0),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedPair {
    pub x: Vec<f64>,
    pub x_p: Vec<f64>,
    pub gamma: f64,
    pub valid: bool,
}

/// Raises feature `k` by `gamma * |x_k|` with `gamma ~ U[0, u)`. With a guard
/// `a` the pair is valid only when it crosses the guard upward; otherwise it is
/// valid whenever the perturbation is nonzero.
pub fn perturb_input(x: &[f64], k: usize, u: f64, guard: Option<f64>, rng: &mut impl Rng) -> PerturbedPair {
    let gamma = rng.random_range(0.0..u);
    let mut x_p = x.to_vec();
    x_p[k] = x[k] + gamma * x[k].abs();
    let delta = x_p[k] - x[k];
    let valid = match guard {
        Some(a) => x[k] < a && x_p[k] > a,
        None => delta > 0.0,
    };
    PerturbedPair {
        x: x.to_vec(),
        x_p,
        gamma,
        valid,
    }
}

/// Perturbed copies of a batch with their validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    pub x_p: Tensor2D,
    pub gamma: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PerturbationBatch {
    pub fn mask(&self) -> Tensor2D {
        Tensor2D::from_fn(self.valid.len(), 1, |r, _| if self.valid[r] { 1.0 } else { 0.0 })
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

pub fn perturb_batch(x: &Tensor2D, rule: &RuleSpec, rng: &mut impl Rng) -> Result<PerturbationBatch> {
    let RuleSpec::Monotonic { feature, guard, u, .. } = rule else {
        return Err(Error::Contract("perturbation requested for a non-monotonic rule".into()));
    };
    let mut x_p = x.clone();
    let mut gamma = Vec::with_capacity(x.rows());
    let mut valid = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let pair = perturb_input(x.row(r), *feature, *u, *guard, rng);
        x_p.row_mut(r).copy_from_slice(&pair.x_p);
        gamma.push(pair.gamma);
        valid.push(pair.valid);
    }
    Ok(PerturbationBatch { x_p, gamma, valid })
}

/// Tape inputs needed to build a rule loss.
pub struct RuleInputs<'a> {
    /// Raw (unscaled) model inputs.
    pub x: &'a Tensor2D,
    pub y_hat: NodeId,
    /// Output on the perturbed inputs and the validity mask, for monotonic rules.
    pub perturbed: Option<(NodeId, &'a PerturbationBatch)>,
}

/// Records the batch-mean rule loss on `tape` and returns the scalar node.
pub fn rule_loss_node(tape: &mut Tape, rule: &RuleSpec, inputs: RuleInputs<'_>) -> Result<NodeId> {
    let n = inputs.x.rows();
    let violation = match rule {
        RuleSpec::Threshold { r, tau } => {
            let r_node = match *r {
                RFunction::Output { index } => tape.select_col(inputs.y_hat, index)?,
                RFunction::OutputMinusInput { index } => {
                    let y = tape.select_col(inputs.y_hat, index)?;
                    let x = tape.constant(Tensor2D::from_raw(n, 1, inputs.x.col_values(index)));
                    tape.sub(y, x)?
                }
            };
            let tau_node = tape.constant(Tensor2D::filled(n, 1, *tau));
            tape.sub(r_node, tau_node)?
        }
        RuleSpec::EnergyDamping { params } => {
            let e_pred = tape.row_map(inputs.y_hat, EnergyFn::shared(*params));
            let e_in = tape.constant(Tensor2D::from_raw(n, 1, energies(inputs.x, params)));
            tape.sub(e_pred, e_in)?
        }
        RuleSpec::Monotonic {
            direction, output, ..
        } => {
            let (y_p, batch) = inputs
                .perturbed
                .ok_or_else(|| Error::Contract("monotonic rule needs perturbed outputs".into()))?;
            let y = tape.select_col(inputs.y_hat, *output)?;
            let yp = tape.select_col(y_p, *output)?;
            let diff = match direction {
                Direction::Decrease => tape.sub(yp, y)?,
                Direction::Increase => tape.sub(y, yp)?,
            };
            let hinge = tape.relu(diff);
            let masked = tape.mul_const(hinge, batch.mask())?;
            return Ok(tape.mean(masked));
        }
    };
    let hinge = tape.relu(violation);
    Ok(tape.mean(hinge))
}

/// Per-sample rule satisfaction; `None` marks samples excluded from the
/// verification denominator (invalid perturbation pairs).
pub fn rule_satisfaction(
    rule: &RuleSpec,
    x: &Tensor2D,
    y_hat: &Tensor2D,
    perturbed: Option<(&Tensor2D, &PerturbationBatch)>,
) -> Result<Vec<Option<bool>>> {
    let n = x.rows();
    if y_hat.rows() != n {
        return Err(Error::dim("rule outputs", n, y_hat.rows()));
    }
    Ok(match rule {
        RuleSpec::Threshold { r, tau } => (0..n)
            .map(|i| {
                let value = match *r {
                    RFunction::Output { index } => y_hat.get(i, index),
                    RFunction::OutputMinusInput { index } => y_hat.get(i, index) - x.get(i, index),
                };
                Some(threshold_rule_loss(value, *tau) == 0.0)
            })
            .collect(),
        RuleSpec::EnergyDamping { params } => energy_rule_loss(x, y_hat, params)
            .into_iter()
            .map(|l| Some(l == 0.0))
            .collect(),
        RuleSpec::Monotonic {
            direction, output, ..
        } => {
            let (y_p, batch) =
                perturbed.ok_or_else(|| Error::Contract("monotonic rule needs perturbed outputs".into()))?;
            if y_p.rows() != n || batch.valid.len() != n {
                return Err(Error::dim("perturbed outputs", n, y_p.rows()));
            }
            (0..n)
                .map(|i| {
                    batch.valid[i].then(|| {
                        monotonic_rule_loss(y_hat.get(i, *output), y_p.get(i, *output), *direction, true) == 0.0
                    })
                })
                .collect()
        }
    })
}

/// Fraction of counted samples whose predictions satisfy the rule.
pub fn verification_ratio(
    rule: &RuleSpec,
    x: &Tensor2D,
    y_hat: &Tensor2D,
    perturbed: Option<(&Tensor2D, &PerturbationBatch)>,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::UndefinedRatio("empty evaluation set".into()));
    }
    let flags = rule_satisfaction(rule, x, y_hat, perturbed)?;
    let counted = flags.iter().flatten().count();
    if counted == 0 {
        return Err(Error::UndefinedRatio("no valid perturbation pairs".into()));
    }
    let ok = flags.iter().flatten().filter(|s| **s).count();
    Ok(ok as f64 / counted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::{energy, PendulumState};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, prop_assume, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_rule_loss(2.0, 2.0), 0.0);
        assert_eq!(threshold_rule_loss(1.0, 2.0), 0.0);
        assert!((threshold_rule_loss(2.3, 2.0) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn energy_rule_examples() {
        let p = PendulumParams::default();
        let x = Tensor2D::from_rows(&[vec![1.0, 0.5, -0.3, 1.2], vec![0.2, -2.0, 0.1, 0.3]]).unwrap();
        assert_eq!(energy_rule_loss(&x, &x, &p), vec![0.0, 0.0]);

        let rest = Tensor2D::zeros(2, 4);
        assert_eq!(energy_rule_loss(&x, &rest, &p), vec![0.0, 0.0]);

        // Doubling both angular velocities quadruples kinetic energy, so the
        // loss equals three times the original kinetic energy.
        let doubled = Tensor2D::from_fn(2, 4, |r, c| if c % 2 == 1 { 2.0 * x.get(r, c) } else { x.get(r, c) });
        let loss = energy_rule_loss(&x, &doubled, &p);
        for r in 0..2 {
            let s = PendulumState::from_slice(x.row(r));
            let still = PendulumState { omega1: 0.0, omega2: 0.0, ..s };
            let kinetic = energy(s, &p) - energy(still, &p);
            assert!((loss[r] - 3.0 * kinetic).abs() < 1e-12);
        }
    }

    #[test]
    fn perturbation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let pair = perturb_input(&[3.0, 10.0], 1, 0.1, None, &mut rng);
            assert!(pair.x_p[1] >= 10.0 && pair.x_p[1] < 11.0);
            assert_eq!(pair.x_p[0], 3.0);
        }
        let zero = perturb_input(&[0.0, 5.0], 0, 0.1, None, &mut rng);
        assert_eq!(zero.x_p, zero.x);
        assert!(!zero.valid);
    }

    #[test]
    fn guard_requires_upward_crossing() {
        // x = 100 can reach at most 110 < 129.5 with u = 0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(!perturb_input(&[100.0], 0, 0.1, Some(129.5), &mut rng).valid);
        }
        let crossing = (0..100)
            .map(|_| perturb_input(&[125.0], 0, 0.1, Some(129.5), &mut rng))
            .filter(|p| p.valid)
            .count();
        assert!(crossing > 0);
    }

    #[test]
    fn monotonic_examples() {
        assert_eq!(monotonic_rule_loss(1.0, 0.8, Direction::Decrease, true), 0.0);
        assert!((monotonic_rule_loss(1.0, 1.2, Direction::Decrease, true) - 0.2).abs() < 1e-15);
        assert_eq!(monotonic_rule_loss(1.0, 5.0, Direction::Decrease, false), 0.0);
        assert!((monotonic_rule_loss(1.0, 0.5, Direction::Increase, true) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn verification_counts() {
        let p = PendulumParams::default();
        let rule = RuleSpec::EnergyDamping { params: p };
        let x = Tensor2D::from_fn(4, 4, |r, c| 0.1 * (r + c) as f64);
        assert_eq!(verification_ratio(&rule, &x, &x, None).unwrap(), 1.0);

        // Two rows gain energy, two keep it.
        let y = Tensor2D::from_fn(4, 4, |r, c| if r < 2 && c == 1 { 3.0 } else { x.get(r, c) });
        assert_eq!(verification_ratio(&rule, &x, &y, None).unwrap(), 0.5);

        assert!(matches!(
            verification_ratio(&rule, &Tensor2D::zeros(0, 4), &Tensor2D::zeros(0, 4), None),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn invalid_pairs_are_excluded_from_ratio() {
        let rule = RuleSpec::Monotonic {
            feature: 0,
            direction: Direction::Decrease,
            guard: None,
            u: 0.1,
            output: 0,
        };
        let x = Tensor2D::column(&[1.0, 2.0, 3.0]).unwrap();
        let batch = PerturbationBatch {
            x_p: x.clone(),
            gamma: vec![0.05; 3],
            valid: vec![true, false, true],
        };
        let y = Tensor2D::column(&[1.0, 1.0, 1.0]).unwrap();
        let y_p = Tensor2D::column(&[0.5, 9.0, 1.5]).unwrap();
        assert_eq!(verification_ratio(&rule, &x, &y, Some((&y_p, &batch))).unwrap(), 0.5);

        let none_valid = PerturbationBatch { valid: vec![false; 3], ..batch };
        assert!(matches!(
            verification_ratio(&rule, &x, &y, Some((&y_p, &none_valid))),
            Err(Error::UndefinedRatio(_))
        ));
    }

    #[test]
    fn ratio_matches_brute_force_recount() {
        let p = PendulumParams::default();
        let rule = RuleSpec::EnergyDamping { params: p };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor2D::from_fn(37, 4, |_, _| rng.random_range(-2.0..2.0));
        let y = Tensor2D::from_fn(37, 4, |_, _| rng.random_range(-2.0..2.0));
        let mut ok = 0;
        for r in 0..37 {
            let ex = energy(PendulumState::from_slice(x.row(r)), &p);
            let ey = energy(PendulumState::from_slice(y.row(r)), &p);
            if ey <= ex {
                ok += 1;
            }
        }
        let ratio = verification_ratio(&rule, &x, &y, None).unwrap();
        assert_eq!(ratio, ok as f64 / 37.0);
    }

    fn tape_loss(rule: &RuleSpec, x: &Tensor2D, y: &Tensor2D, pert: Option<(&Tensor2D, &PerturbationBatch)>) -> f64 {
        let mut tape = Tape::new();
        let yn = tape.constant(y.clone());
        let perturbed = pert.map(|(yp, b)| (tape.constant(yp.clone()), b));
        let l = rule_loss_node(&mut tape, rule, RuleInputs { x, y_hat: yn, perturbed }).unwrap();
        tape.value(l).item().unwrap()
    }

    proptest! {
        #[test]
        fn perturbation_touches_only_feature_k(
            row in proptest::collection::vec(-50.0f64..50.0, 1..6),
            k_frac in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let k = ((row.len() as f64) * k_frac) as usize % row.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pair = perturb_input(&row, k, 0.1, None, &mut rng);
            for (j, (a, b)) in row.iter().zip(&pair.x_p).enumerate() {
                if j != k {
                    prop_assert_eq!(a, b);
                }
            }
            prop_assert!((pair.x_p[k] - row[k]).abs() <= 0.1 * row[k].abs());
            prop_assert!(pair.x_p[k] >= row[k]);
        }

        #[test]
        fn energy_loss_zero_iff_fully_verified(
            vals in proptest::collection::vec(-2.0f64..2.0, 8 * 8),
        ) {
            let rule = RuleSpec::EnergyDamping { params: PendulumParams::default() };
            let x = Tensor2D::new(8, 4, vals[..32].to_vec()).unwrap();
            let y = Tensor2D::new(8, 4, vals[32..].to_vec()).unwrap();
            let loss = tape_loss(&rule, &x, &y, None);
            let ratio = verification_ratio(&rule, &x, &y, None).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, ratio == 1.0);
        }

        #[test]
        fn monotonic_loss_zero_iff_fully_verified(
            y in proptest::collection::vec(-1.0f64..1.0, 6),
            yp in proptest::collection::vec(-1.0f64..1.0, 6),
            valid in proptest::collection::vec(any::<bool>(), 6),
        ) {
            prop_assume!(valid.iter().any(|v| *v));
            let rule = RuleSpec::Monotonic { feature: 0, direction: Direction::Increase, guard: None, u: 0.1, output: 0 };
            let x = Tensor2D::filled(6, 1, 1.0);
            let batch = PerturbationBatch { x_p: x.clone(), gamma: vec![0.05; 6], valid };
            let yt = Tensor2D::column(&y).unwrap();
            let ypt = Tensor2D::column(&yp).unwrap();
            let loss = tape_loss(&rule, &x, &yt, Some((&ypt, &batch)));
            let ratio = verification_ratio(&rule, &x, &yt, Some((&ypt, &batch))).unwrap();
            prop_assert!(loss >= 0.0);
            prop_assert_eq!(loss == 0.0, ratio == 1.0);
        }
    }
}

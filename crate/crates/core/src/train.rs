//! Training loops: rule-strength sampling, the `rho` scale, direct and
//! perturbation-based rule objectives, and the fixed-weight baselines.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Split, SplitDataset};
use crate::error::{Error, Result};
use crate::model::{Coupling, DeepCtrlModel, InputScaler, ModelArch, TaskKind};
use crate::numerics::{bce_term, AdamState, NodeId, Tape, Tensor2D};
use crate::rules::{perturb_batch, rule_loss_node, PerturbationBatch, RuleInputs, RuleSpec};

/// Relative tolerance for the reported-total-loss identity.
pub const LOSS_IDENTITY_TOLERANCE: f64 = 1e-12;

/// RNG streams derived from the run seed.
const STREAM_TRAIN: u64 = 1;
const STREAM_RHO: u64 = 2;

/// Draws of `Beta(beta, beta)` as `g1 / (g1 + g2)` with `g_i ~ Gamma(beta, 1)`.
#[derive(Clone, Debug)]
pub struct BetaSampler {
    gamma: Gamma<f64>,
}

impl BetaSampler {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::config("beta", format!("must be positive, got {beta}")));
        }
        let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::config("beta", e.to_string()))?;
        Ok(Self { gamma })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        loop {
            let g1 = self.gamma.sample(rng);
            let g2 = self.gamma.sample(rng);
            let s = g1 + g2;
            // Both draws can underflow to zero for very small shapes.
            if s > 0.0 && s.is_finite() {
                return g1 / s;
            }
        }
    }
}

/// One draw of the rule strength from `Beta(beta, beta)`.
pub fn sample_alpha(beta: f64, rng: &mut impl Rng) -> Result<f64> {
    Ok(BetaSampler::new(beta)?.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainMode {
    /// `alpha * L_rule + rho * (1 - alpha) * L_task` with sampled alpha.
    DeepCtrl,
    /// As `DeepCtrl`, with the rule loss computed on perturbed inputs.
    DeepCtrlPerturb,
    /// Task loss only, single encoder.
    TaskOnly,
    /// `L_task + lambda * L_rule`, single encoder.
    TaskAndRule { lambda: f64 },
    /// Rule loss only, single encoder.
    RuleOnly,
}

impl TrainMode {
    pub fn is_baseline(self) -> bool {
        !matches!(self, TrainMode::DeepCtrl | TrainMode::DeepCtrlPerturb)
    }

    pub fn label(self) -> String {
        match self {
            TrainMode::DeepCtrl => "deepctrl".into(),
            TrainMode::DeepCtrlPerturb => "deepctrl_perturb".into(),
            TrainMode::TaskOnly => "task_only".into(),
            TrainMode::TaskAndRule { lambda } => format!("task_and_rule({lambda})"),
            TrainMode::RuleOnly => "rule_only".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    /// Ratio of initial losses, computed once before training.
    FixedAtInit,
    /// Ratio recomputed after every epoch.
    PerEpochAdaptive,
    /// `rho = 1`: the plain `alpha * L_rule + (1 - alpha) * L_task` mix.
    Unit,
}

impl RhoPolicy {
    /// Default policy for a training mode: perturbation-based rules use the
    /// unscaled mix, since their initial rule loss is often (near) zero.
    pub fn default_for(mode: TrainMode) -> Self {
        match mode {
            TrainMode::DeepCtrlPerturb => RhoPolicy::Unit,
            _ => RhoPolicy::FixedAtInit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub rule: RuleSpec,
    pub mode: TrainMode,
    /// Latent merge for the two-passage modes; baselines always use one encoder.
    pub coupling: Coupling,
    pub rho_policy: RhoPolicy,
    /// Rule strengths whose task losses are averaged for early stopping.
    pub val_alphas: Vec<f64>,
}

impl TrainConfig {
    pub fn new(rule: RuleSpec, mode: TrainMode) -> Self {
        Self {
            beta: 0.1,
            lr: 0.001,
            batch: 32,
            max_epochs: 1000,
            patience: 10,
            seed: 0,
            rule,
            mode,
            coupling: Coupling::ScaledConcat,
            rho_policy: RhoPolicy::default_for(mode),
            val_alphas: vec![0.0, 0.5, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("beta", format!("must be positive, got {}", self.beta)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::config(
                "patience",
                format!("must be below max_epochs ({} >= {})", self.patience, self.max_epochs),
            ));
        }
        if let TrainMode::TaskAndRule { lambda } = self.mode {
            if !(lambda.is_finite() && lambda >= 0.0) {
                return Err(Error::config("lambda", format!("must be non-negative, got {lambda}")));
            }
        }
        match (self.mode, self.rule.needs_perturbation()) {
            (TrainMode::DeepCtrl, true) => {
                return Err(Error::config("mode", "perturbation-based rules need mode deep_ctrl_perturb"))
            }
            (TrainMode::DeepCtrlPerturb, false) => {
                return Err(Error::config("mode", "deep_ctrl_perturb needs a perturbation-based rule"))
            }
            _ => {}
        }
        if !self.mode.is_baseline() && self.coupling == Coupling::Single {
            return Err(Error::config("coupling", "two-passage modes need a coupling other than single"));
        }
        if self.val_alphas.is_empty() || self.val_alphas.iter().any(|a| !a.is_finite()) {
            return Err(Error::config("val_alphas", "must be a non-empty list of finite values"));
        }
        Ok(())
    }

    /// Coupling actually built for this mode.
    pub fn effective_coupling(&self) -> Coupling {
        if self.mode.is_baseline() {
            Coupling::Single
        } else {
            self.coupling
        }
    }
}

/// Mean task loss: MSE for regression, clamped binary cross-entropy for
/// classification.
pub fn task_loss_value(task: TaskKind, pred: &Tensor2D, y: &Tensor2D) -> Result<f64> {
    if !pred.same_shape(y) {
        return Err(Error::dim("task loss targets", pred.len(), y.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty);
    }
    Ok(match task {
        TaskKind::Regression => pred.zip_map(y, |p, t| (p - t) * (p - t)).mean(),
        TaskKind::BinaryClassification => pred.zip_map(y, bce_term).mean(),
    })
}

fn task_loss_node(tape: &mut Tape, task: TaskKind, pred: NodeId, y: &Tensor2D) -> Result<NodeId> {
    match task {
        TaskKind::Regression => tape.mse(pred, y.clone()),
        TaskKind::BinaryClassification => tape.bce(pred, y.clone()),
    }
}

/// Mean rule loss of fixed predictions (no gradients).
pub fn rule_loss_value(
    rule: &RuleSpec,
    x: &Tensor2D,
    y_hat: &Tensor2D,
    perturbed: Option<(&Tensor2D, &PerturbationBatch)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let y = tape.constant(y_hat.clone());
    let p = perturbed.map(|(yp, batch)| (tape.constant(yp.clone()), batch));
    let loss = rule_loss_node(&mut tape, rule, RuleInputs { x, y_hat: y, perturbed: p })?;
    tape.value(loss).item()
}

/// Initial losses and their ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoEstimate {
    pub rho: f64,
    pub task_loss: f64,
    pub rule_loss: f64,
}

/// `rho = L_rule / L_task`, with the task loss taken at `alpha = 0` and the rule
/// loss at `alpha = 1` on the evaluation sample `(x, y)`.
pub fn compute_rho(
    model: &DeepCtrlModel,
    x: &Tensor2D,
    y: &Tensor2D,
    rule: &RuleSpec,
    perturbation: Option<&PerturbationBatch>,
) -> Result<RhoEstimate> {
    let task_loss = task_loss_value(model.task(), &model.predict(x, 0.0)?, y)?;
    let y1 = model.predict(x, 1.0)?;
    let rule_loss = match perturbation {
        Some(batch) => {
            let yp = model.predict(&batch.x_p, 1.0)?;
            rule_loss_value(rule, x, &y1, Some((&yp, batch)))?
        }
        None => rule_loss_value(rule, x, &y1, None)?,
    };
    if !(task_loss.is_finite() && rule_loss.is_finite()) {
        return Err(Error::NonFinite("initial losses for rho".into()));
    }
    if task_loss == 0.0 {
        return Err(Error::config("rho", "initial task loss is zero (degenerate task)"));
    }
    if rule_loss == 0.0 {
        log::warn!("initial rule loss is zero; rule is vacuously satisfied, using rho = 0");
    }
    Ok(RhoEstimate { rho: rule_loss / task_loss, task_loss, rule_loss })
}

/// Loss components of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub alpha: f64,
    pub rho: f64,
    pub task: f64,
    pub rule: f64,
    pub total: f64,
}

impl StepLosses {
    /// Total loss recomputed from the components under `mode`.
    pub fn expected_total(&self, mode: TrainMode) -> f64 {
        match mode {
            TrainMode::DeepCtrl | TrainMode::DeepCtrlPerturb => {
                self.alpha * self.rule + self.rho * (1.0 - self.alpha) * self.task
            }
            TrainMode::TaskOnly => self.task,
            TrainMode::TaskAndRule { lambda } => self.task + lambda * self.rule,
            TrainMode::RuleOnly => self.rule,
        }
    }

    /// Relative gap between the reported and recomputed total.
    pub fn identity_residual(&self, mode: TrainMode) -> f64 {
        let expected = self.expected_total(mode);
        (self.total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE)
    }
}

/// Rule strength the forward pass uses under `mode` for a sampled `alpha`.
fn effective_alpha(mode: TrainMode, sampled: f64) -> f64 {
    match mode {
        TrainMode::DeepCtrl | TrainMode::DeepCtrlPerturb => sampled,
        TrainMode::TaskOnly | TrainMode::TaskAndRule { .. } => 0.0,
        TrainMode::RuleOnly => 1.0,
    }
}

/// One minibatch update. `perturbation` must be given when the rule needs it.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut DeepCtrlModel,
    adam: &mut AdamState,
    x: &Tensor2D,
    y: &Tensor2D,
    alpha: f64,
    mode: TrainMode,
    rho: f64,
    rule: &RuleSpec,
    perturbation: Option<&PerturbationBatch>,
) -> Result<StepLosses> {
    if x.rows() == 0 {
        return Err(Error::Empty);
    }
    let alpha = effective_alpha(mode, alpha);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, x, alpha)?.output;
    let task = task_loss_node(&mut tape, model.task(), out, y)?;
    let perturbed = match (rule.needs_perturbation(), perturbation) {
        (true, Some(batch)) => Some((model.forward(&mut tape, &batch.x_p, alpha)?.output, batch)),
        (true, None) => return Err(Error::Contract("rule needs a perturbation batch".into())),
        (false, _) => None,
    };
    let rule_node = rule_loss_node(&mut tape, rule, RuleInputs { x, y_hat: out, perturbed })?;
    let total = match mode {
        TrainMode::DeepCtrl | TrainMode::DeepCtrlPerturb => {
            let r = tape.scale(rule_node, alpha);
            let t = tape.scale(task, rho * (1.0 - alpha));
            tape.add(r, t)?
        }
        TrainMode::TaskOnly => task,
        TrainMode::TaskAndRule { lambda } => {
            let r = tape.scale(rule_node, lambda);
            tape.add(task, r)?
        }
        TrainMode::RuleOnly => rule_node,
    };
    let losses = StepLosses {
        alpha,
        rho,
        task: tape.value(task).item()?,
        rule: tape.value(rule_node).item()?,
        total: tape.value(total).item()?,
    };
    if !(losses.total.is_finite() && losses.task.is_finite() && losses.rule.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss at alpha={alpha}: task={} rule={} total={} over {} rows",
            losses.task,
            losses.rule,
            losses.total,
            x.rows()
        )));
    }
    let residual = losses.identity_residual(mode);
    if residual > LOSS_IDENTITY_TOLERANCE {
        return Err(Error::Contract(format!("total loss deviates from its components by {residual:e}")));
    }
    let grads = tape.backward(total, model.params())?;
    adam.update(model.params_mut(), &grads)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_task: f64,
    pub train_rule: f64,
    pub train_total: f64,
    pub val_metric: f64,
    pub alpha_mean: f64,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were restored.
    pub best_epoch: usize,
    pub best_val: f64,
    /// Final `rho`.
    pub rho: f64,
    /// Every `(epoch, rho)` assignment; epoch 0 is initialization.
    pub rho_updates: Vec<(usize, f64)>,
    pub initial: Option<(f64, f64)>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn final_epoch(&self) -> usize {
        self.epochs.len()
    }

    /// Writes `epoch,train_task,train_rule,val_metric,alpha_mean`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_task", "train_rule", "val_metric", "alpha_mean"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_task.to_string(),
                e.train_rule.to_string(),
                e.val_metric.to_string(),
                e.alpha_mean.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub model: DeepCtrlModel,
    pub report: TrainReport,
}

/// Early-stopping criterion: task loss averaged over `alphas`.
pub fn validation_metric(model: &DeepCtrlModel, x: &Tensor2D, y: &Tensor2D, alphas: &[f64]) -> Result<f64> {
    if !model.coupling().uses_alpha() {
        return task_loss_value(model.task(), &model.predict(x, alphas[0])?, y);
    }
    let mut total = 0.0;
    for &a in alphas {
        total += task_loss_value(model.task(), &model.predict(x, a)?, y)?;
    }
    Ok(total / alphas.len() as f64)
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains a fresh model for `arch` (coupling overridden by the config) and
/// restores the parameters of the best validation epoch.
pub fn fit(config: &TrainConfig, arch: &ModelArch, data: &SplitDataset) -> Result<FitOutcome> {
    config.validate()?;
    let arch = arch.clone().with_coupling(config.effective_coupling());
    config.rule.validate(arch.input_dim, arch.output_dim)?;
    if data.train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Contract("validation split is empty".into()));
    }
    let start = Instant::now();
    let (x_train, y_train) = data.subset(Split::Train);
    let (x_val, y_val) = data.subset(Split::Val);
    let mut model = DeepCtrlModel::new(arch, InputScaler::fit(&x_train), config.seed)?;
    let mut adam = AdamState::new(model.params(), config.lr);
    let sampler = BetaSampler::new(config.beta)?;
    let mut rng = rng_stream(config.seed, STREAM_TRAIN);

    let uses_rho = !config.mode.is_baseline() && config.rho_policy != RhoPolicy::Unit;
    let rho_perturbation = if uses_rho && config.rule.needs_perturbation() {
        Some(perturb_batch(&x_train, &config.rule, &mut rng_stream(config.seed, STREAM_RHO))?)
    } else {
        None
    };
    let (mut rho, initial) = if uses_rho {
        let est = compute_rho(&model, &x_train, &y_train, &config.rule, rho_perturbation.as_ref())?;
        (est.rho, Some((est.task_loss, est.rule_loss)))
    } else {
        (1.0, None)
    };
    let mut rho_updates = vec![(0, rho)];

    let mut order: Vec<usize> = (0..x_train.rows()).collect();
    let mut epochs = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut stale = 0;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut sum_task, mut sum_rule, mut sum_total, mut sum_alpha) = (0.0, 0.0, 0.0, 0.0);
        let mut n_batches = 0;
        for chunk in order.chunks(config.batch) {
            let xb = x_train.select_rows(chunk);
            let yb = y_train.select_rows(chunk);
            let alpha = sampler.sample(&mut rng);
            let pert = if config.rule.needs_perturbation() {
                Some(perturb_batch(&xb, &config.rule, &mut rng)?)
            } else {
                None
            };
            let step = train_step(
                &mut model,
                &mut adam,
                &xb,
                &yb,
                alpha,
                config.mode,
                rho,
                &config.rule,
                pert.as_ref(),
            )
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch} batch {n_batches}: {msg}")),
                other => other,
            })?;
            sum_task += step.task;
            sum_rule += step.rule;
            sum_total += step.total;
            sum_alpha += step.alpha;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let val_metric = validation_metric(&model, &x_val, &y_val, &config.val_alphas)?;
        if !val_metric.is_finite() {
            return Err(Error::Diverged { step: adam.step() as usize });
        }
        epochs.push(EpochRecord {
            epoch,
            train_task: sum_task / nb,
            train_rule: sum_rule / nb,
            train_total: sum_total / nb,
            val_metric,
            alpha_mean: sum_alpha / nb,
            rho,
        });
        log::debug!("epoch {epoch}: val {val_metric:.6} task {:.6} rule {:.6}", sum_task / nb, sum_rule / nb);
        if val_metric < best.0 {
            best = (val_metric, epoch, model.params().clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
        if uses_rho && config.rho_policy == RhoPolicy::PerEpochAdaptive && epoch < config.max_epochs {
            rho = compute_rho(&model, &x_train, &y_train, &config.rule, rho_perturbation.as_ref())?.rho;
            rho_updates.push((epoch, rho));
        }
    }
    let (best_val, best_epoch, best_params) = best;
    model.params_mut().assign(best_params.tensors().to_vec())?;
    Ok(FitOutcome {
        model,
        report: TrainReport {
            epochs,
            best_epoch,
            best_val,
            rho,
            rho_updates,
            initial,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

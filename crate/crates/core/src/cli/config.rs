//! Experiment configuration: TOML files merged onto task defaults, validated,
//! and echoed back as a fully resolved dump.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::eval::{alpha_grid, MetricKind, Objective};
use crate::model::ModelArch;
use crate::pendulum::PendulumDataConfig;
use crate::rules::{Direction, RuleSpec, DEFAULT_PERTURBATION_BOUND};
use crate::tabular::{CorrGroupSpec, ShiftMixSpec};
use crate::train::{TrainConfig, TrainMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskName {
    Pendulum,
    MonotoneRegression,
    ShiftedClassification,
}

impl TaskName {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskName::Pendulum => "pendulum",
            TaskName::MonotoneRegression => "monotone-regression",
            TaskName::ShiftedClassification => "shifted-classification",
        }
    }
}

impl fmt::Display for TaskName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pendulum" => Ok(TaskName::Pendulum),
            "monotone-regression" => Ok(TaskName::MonotoneRegression),
            "shifted-classification" => Ok(TaskName::ShiftedClassification),
            other => Err(Error::config("task", format!("unknown task `{other}`"))),
        }
    }
}

/// Training mix and shifted evaluation mix for the classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftData {
    pub source: ShiftMixSpec,
    pub target: ShiftMixSpec,
    /// Multiplies both mixes' group counts (desk-scale runs).
    pub scale: f64,
}

impl Default for ShiftData {
    fn default() -> Self {
        Self {
            source: ShiftMixSpec::source(),
            target: ShiftMixSpec::target1(),
            scale: 1.0,
        }
    }
}

impl ShiftData {
    pub fn scaled_source(&self) -> ShiftMixSpec {
        self.source.clone().scaled(self.scale)
    }

    pub fn scaled_target(&self) -> ShiftMixSpec {
        self.target.clone().scaled(self.scale)
    }
}

/// CSV files used instead of the generators.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Evaluation data for the shifted-classification task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub start: f64,
    pub end: f64,
    pub step: f64,
    pub metric: MetricKind,
    pub objective: Objective,
    /// Seed of the fixed perturbation set shared by all grid points.
    pub perturb_seed: u64,
}

impl SweepSpec {
    fn for_metric(metric: MetricKind) -> Self {
        Self {
            start: 0.0,
            end: 1.0,
            step: 0.05,
            metric,
            objective: Objective::MinTaskError,
            perturb_seed: 0,
        }
    }

    pub fn grid(&self) -> Result<Vec<f64>> {
        alpha_grid(self.start, self.end, self.step)
    }

    pub fn extended(mut self) -> Self {
        self.start = -0.2;
        self.end = 1.4;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskName,
    /// Seed for data generation (training uses `train.seed`).
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataFiles,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pendulum: Option<PendulumDataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regression: Option<CorrGroupSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ShiftData>,
    pub model: ModelArch,
    pub train: TrainConfig,
    pub sweep: SweepSpec,
}

fn default_rule(task: TaskName, cfg: &ExperimentConfig) -> RuleSpec {
    match task {
        TaskName::Pendulum => RuleSpec::EnergyDamping {
            params: cfg.pendulum.as_ref().map(|p| p.params).unwrap_or_default(),
        },
        TaskName::MonotoneRegression => RuleSpec::Monotonic {
            feature: cfg.regression.as_ref().map_or(0, |r| r.k),
            direction: Direction::Decrease,
            guard: None,
            u: DEFAULT_PERTURBATION_BOUND,
            output: 0,
        },
        TaskName::ShiftedClassification => {
            let mix = cfg.classification.as_ref().map(|c| c.source.clone()).unwrap_or_default();
            RuleSpec::Monotonic {
                feature: mix.k,
                direction: Direction::Increase,
                guard: Some(mix.threshold),
                u: DEFAULT_PERTURBATION_BOUND,
                output: 0,
            }
        }
    }
}

fn default_arch(task: TaskName, cfg: &ExperimentConfig) -> ModelArch {
    match task {
        TaskName::Pendulum => ModelArch::pendulum(),
        TaskName::MonotoneRegression => {
            ModelArch::tabular_regression(cfg.regression.as_ref().map_or(CorrGroupSpec::default().d, |r| r.d))
        }
        TaskName::ShiftedClassification => ModelArch::tabular_classification(
            cfg.classification.as_ref().map_or(ShiftMixSpec::default().d, |c| c.source.d),
        ),
    }
}

impl ExperimentConfig {
    /// Documented defaults for `task`; data-dependent parts (rule, model
    /// dimensions) follow the data section of `like` when given.
    pub fn defaults(task: TaskName, like: Option<&ExperimentConfig>) -> Self {
        let mode = match (like, task) {
            (Some(l), _) => l.train.mode,
            (None, TaskName::Pendulum) => TrainMode::DeepCtrl,
            (None, _) => TrainMode::DeepCtrlPerturb,
        };
        let metric = match task {
            TaskName::ShiftedClassification => MetricKind::CrossEntropy,
            _ => MetricKind::Mae,
        };
        let mut cfg = Self {
            task,
            seed: 0,
            output_dir: PathBuf::from("runs").join(task.as_str()),
            data: DataFiles::default(),
            pendulum: None,
            regression: None,
            classification: None,
            model: ModelArch::pendulum(),
            train: TrainConfig::new(RuleSpec::EnergyDamping { params: Default::default() }, mode),
            sweep: SweepSpec::for_metric(metric),
        };
        match task {
            TaskName::Pendulum => cfg.pendulum = Some(like.and_then(|l| l.pendulum.clone()).unwrap_or_default()),
            TaskName::MonotoneRegression => {
                cfg.regression = Some(like.and_then(|l| l.regression.clone()).unwrap_or_default())
            }
            TaskName::ShiftedClassification => {
                cfg.classification = Some(like.and_then(|l| l.classification.clone()).unwrap_or_default())
            }
        }
        if let Some(l) = like {
            cfg.train.coupling = l.train.coupling;
        }
        cfg.train.rule = default_rule(task, &cfg);
        cfg.model = default_arch(task, &cfg).with_coupling(cfg.train.effective_coupling());
        cfg
    }

    /// Parses TOML text, merges it onto the task defaults and validates.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse { path: origin.to_path_buf(), message };
        let user: Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        let task: TaskName = match user.get("task") {
            Some(Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("task", "must be a string")),
            None => return Err(Error::config("task", "missing (pendulum, monotone-regression, shifted-classification)")),
        };
        // Two passes: the first settles the data section, the second rebuilds
        // data-dependent defaults (rule, model dimensions) from it.
        let first = merge_onto(Self::defaults(task, None), &user, origin)?;
        let mut cfg = merge_onto(Self::defaults(task, Some(&first)), &user, origin)?;
        let model_coupling_given = user
            .get("model")
            .and_then(Value::as_table)
            .is_some_and(|m| m.contains_key("coupling"));
        if model_coupling_given && cfg.model.coupling != cfg.train.effective_coupling() {
            return Err(Error::config(
                "model.coupling",
                "is derived from train.coupling and the training mode; set train.coupling instead",
            ));
        }
        cfg.model.coupling = cfg.train.effective_coupling();
        // Data paths are relative to the config file.
        let base = origin.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.csv, &mut cfg.data.target_csv].into_iter().flatten() {
            if p.is_relative() {
                let joined = base.join(&*p);
                *p = std::fs::canonicalize(&joined).unwrap_or(joined);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path)
    }

    /// Resolved configuration as TOML; loading it back gives the same config.
    pub fn dump(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let sections = [
            ("pendulum", self.pendulum.is_some(), TaskName::Pendulum),
            ("regression", self.regression.is_some(), TaskName::MonotoneRegression),
            ("classification", self.classification.is_some(), TaskName::ShiftedClassification),
        ];
        for (name, present, owner) in sections {
            if present != (owner == self.task) {
                return Err(Error::config(
                    name,
                    format!("section must be present exactly when task = {}", owner.as_str()),
                ));
            }
        }
        let (input_dim, output_dim) = match self.task {
            TaskName::Pendulum => {
                let p = self.pendulum.as_ref().expect("checked");
                p.validate()?;
                (4, 4)
            }
            TaskName::MonotoneRegression => {
                let r = self.regression.as_ref().expect("checked");
                r.validate()?;
                (r.d, 1)
            }
            TaskName::ShiftedClassification => {
                let c = self.classification.as_ref().expect("checked");
                if !(c.scale.is_finite() && c.scale > 0.0) {
                    return Err(Error::config("classification.scale", "must be positive"));
                }
                c.scaled_source().validate()?;
                c.scaled_target().validate()?;
                if c.source.d != c.target.d {
                    return Err(Error::config("classification.target.d", "must equal source.d"));
                }
                (c.source.d, 1)
            }
        };
        for (field, path) in [("data.csv", &self.data.csv), ("data.target_csv", &self.data.target_csv)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::config(field, format!("file {} does not exist", p.display())));
                }
            }
        }
        if self.data.target_csv.is_some() && self.task != TaskName::ShiftedClassification {
            return Err(Error::config("data.target_csv", "only used by shifted-classification"));
        }
        if self.model.input_dim != input_dim || self.model.output_dim != output_dim {
            return Err(Error::config(
                "model.input_dim",
                format!(
                    "model is {}->{} but the data is {input_dim}->{output_dim}",
                    self.model.input_dim, self.model.output_dim
                ),
            ));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.train.rule.validate(input_dim, output_dim)?;
        self.sweep.grid()?;
        if let Objective::MinErrorSubjectToVerification { threshold } = self.sweep.objective {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Error::config("sweep.objective.threshold", "must lie in [0,1]"));
            }
        }
        Ok(())
    }
}

/// Replaces tagged-enum tables wholesale when the tag changes; merges
/// everything else key by key.
fn merge(base: &mut Value, user: &Value) {
    match (base, user) {
        (Value::Table(b), Value::Table(u)) => {
            let retagged = ["kind", "fn"].iter().any(|tag| {
                matches!((b.get(*tag), u.get(*tag)), (Some(x), Some(y)) if x != y)
            });
            if retagged {
                *b = u.clone();
                return;
            }
            for (k, v) in u {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, u) => *b = u.clone(),
    }
}

fn merge_onto(defaults: ExperimentConfig, user: &Table, origin: &Path) -> Result<ExperimentConfig> {
    let mut base = Value::try_from(&defaults).map_err(|e| Error::Contract(format!("default config: {e}")))?;
    merge(&mut base, &Value::Table(user.clone()));
    let mut cfg: ExperimentConfig = base.try_into().map_err(|e: toml::de::Error| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })?;
    if let Some(r) = cfg.regression.as_mut() {
        r.seed = cfg.seed;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_str(text, Path::new("test.toml"))
    }

    #[test]
    fn minimal_configs_resolve_for_every_task() {
        for task in ["pendulum", "monotone-regression", "shifted-classification"] {
            let cfg = load(&format!("task = \"{task}\"")).unwrap();
            assert_eq!(cfg.train.beta, 0.1);
            assert_eq!(cfg.train.lr, 0.001);
            assert_eq!(cfg.train.batch, 32);
            assert_eq!(cfg.train.patience, 10);
        }
    }

    #[test]
    fn dump_is_idempotent() {
        let cfg = load("task = \"monotone-regression\"\n[regression]\nd = 4\nk = 2\n").unwrap();
        let once = cfg.dump().unwrap();
        let again = load(&once).unwrap().dump().unwrap();
        assert_eq!(once, again);
        assert_eq!(cfg.model.input_dim, 4);
        assert!(matches!(cfg.train.rule, RuleSpec::Monotonic { feature: 2, .. }));
    }

    #[test]
    fn errors_name_the_field() {
        let err = load("task = \"pendulum\"\n[train]\nbeta = -1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "beta"), "{err}");
        let err = load("task = \"pendulum\"\n[train]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = load("task = \"pendulum\"\n[train\n").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        let err = load("[train]\nbeta = 1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "task"));
    }

    #[test]
    fn rule_kind_can_be_replaced() {
        let cfg = load(
            "task = \"pendulum\"\n[train.rule]\nkind = \"threshold\"\ntau = 0.5\nr = { fn = \"output\", index = 1 }\n",
        )
        .unwrap();
        assert!(matches!(cfg.train.rule, RuleSpec::Threshold { tau, .. } if tau == 0.5));
    }

    #[test]
    fn baseline_modes_use_a_single_encoder() {
        let cfg = load("task = \"pendulum\"\n[train.mode]\nkind = \"task_only\"\n").unwrap();
        assert_eq!(cfg.model.coupling, crate::model::Coupling::Single);
    }

    #[test]
    fn rho_policy_follows_the_chosen_mode() {
        let cfg = load("task = \"pendulum\"\n[train.mode]\nkind = \"deep_ctrl_perturb\"\n[train.rule]\nkind = \"monotonic\"\nfeature = 0\ndirection = \"increase\"\n").unwrap();
        assert_eq!(cfg.train.rho_policy, crate::train::RhoPolicy::Unit);
    }

    #[test]
    fn missing_csv_is_rejected() {
        let err = load("task = \"pendulum\"\n[data]\ncsv = \"/nonexistent/file.csv\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "data.csv"));
    }
}

//! Subcommand implementations shared by the binary and the tests.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::{ExperimentConfig, TaskName};
use crate::data::{Split, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{alpha_sweep, select_alpha, write_sweep_csv, AlphaSelection, MetricKind, Objective, SweepRecord};
use crate::model::{Coupling, DeepCtrlModel};
use crate::numerics::Tensor2D;
use crate::pendulum::{build_pendulum_dataset, write_pendulum_csv, PendulumDataConfig};
use crate::tabular::{synth_monotone_regression, synth_shifted_classification, write_tabular_csv, CorrGroupSpec, ShiftMixSpec};
use crate::train::{fit, RhoPolicy, TrainMode};

/// Training data and the data the sweep is evaluated on (the shifted target
/// mix for classification, the training data itself otherwise).
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: SplitDataset,
    pub eval: SplitDataset,
}

/// Data seeds for the two classification mixes, derived from the config seed.
pub fn shift_seeds(seed: u64) -> (u64, u64) {
    (seed.wrapping_mul(10).wrapping_add(1), seed.wrapping_mul(10).wrapping_add(2))
}

fn output_dim(task: TaskName) -> usize {
    match task {
        TaskName::Pendulum => 4,
        _ => 1,
    }
}

/// Reads `inputs..., targets..., split` rows; rows with an empty split tag
/// belong to no split.
pub fn read_split_csv(path: &Path, output_dim: usize) -> Result<SplitDataset> {
    let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path)?;
    let n_cols = reader.headers()?.len();
    if n_cols < output_dim + 2 {
        return Err(parse_err(format!("{n_cols} columns; need inputs, {output_dim} target(s) and split")));
    }
    let input_dim = n_cols - 1 - output_dim;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        for c in 0..n_cols - 1 {
            let v: f64 = rec[c]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("row {}: `{}` is not a number", r + 1, &rec[c])))?;
            if c < input_dim { x.push(v) } else { y.push(v) }
        }
        match rec[n_cols - 1].trim() {
            "" => {}
            tag => match tag.parse::<Split>().map_err(|_| parse_err(format!("row {}: bad split `{tag}`", r + 1)))? {
                Split::Train => train.push(r),
                Split::Val => val.push(r),
                Split::Test => test.push(r),
            },
        }
    }
    let n = x.len() / input_dim;
    SplitDataset::new(Tensor2D::new(n, input_dim, x)?, Tensor2D::new(n, output_dim, y)?, train, val, test)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let out_dim = output_dim(cfg.task);
    let train = match (&cfg.data.csv, cfg.task) {
        (Some(path), _) => read_split_csv(path, out_dim)?,
        (None, TaskName::Pendulum) => build_pendulum_dataset(cfg.pendulum.as_ref().expect("validated"), cfg.seed)?.pairs,
        (None, TaskName::MonotoneRegression) => {
            let spec = CorrGroupSpec { seed: cfg.seed, ..cfg.regression.clone().expect("validated") };
            synth_monotone_regression(&spec)?.data
        }
        (None, TaskName::ShiftedClassification) => {
            let mix = cfg.classification.as_ref().expect("validated").scaled_source();
            synth_shifted_classification(&mix, shift_seeds(cfg.seed).0)?.data
        }
    };
    let eval = match (&cfg.data.target_csv, cfg.task) {
        (Some(path), _) => read_split_csv(path, out_dim)?,
        (None, TaskName::ShiftedClassification) if cfg.data.csv.is_none() => {
            let mix = cfg.classification.as_ref().expect("validated").scaled_target();
            synth_shifted_classification(&mix, shift_seeds(cfg.seed).1)?.data
        }
        _ => train.clone(),
    };
    if train.input_dim() != cfg.model.input_dim || eval.input_dim() != cfg.model.input_dim {
        return Err(Error::config(
            "model.input_dim",
            format!("data has {} inputs, model expects {}", train.input_dim(), cfg.model.input_dim),
        ));
    }
    Ok(ExperimentData { train, eval })
}

/// Sweeps `grid` on the validation and test splits of `data`.
pub fn sweep_model(
    model: &DeepCtrlModel,
    cfg: &ExperimentConfig,
    data: &SplitDataset,
    grid: &[f64],
) -> Result<(Vec<SweepRecord>, Vec<SweepRecord>)> {
    let run = |split| {
        let (x, y) = data.subset(split);
        alpha_sweep(model, &x, &y, grid, &cfg.train.rule, cfg.sweep.metric, split, cfg.sweep.perturb_seed)
    };
    Ok((run(Split::Val)?, run(Split::Test)?))
}

/// One trained model with its sweep and the selected operating point.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub selection: AlphaSelection,
    pub val: Vec<SweepRecord>,
    pub test: Vec<SweepRecord>,
    pub checkpoint: Checkpoint,
}

/// Trains with `train.seed = seed`, then sweeps and selects alpha.
pub fn train_and_evaluate(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<(RunSummary, crate::train::TrainReport)> {
    let mut cfg = cfg.clone();
    cfg.train.seed = seed;
    let outcome = fit(&cfg.train, &cfg.model, &data.train)?;
    log::info!(
        "seed {seed}: best epoch {} of {} (val {:.6}) in {:.1}s",
        outcome.report.best_epoch,
        outcome.report.final_epoch(),
        outcome.report.best_val,
        outcome.report.seconds
    );
    let grid = cfg.sweep.grid()?;
    let (val, test) = sweep_model(&outcome.model, &cfg, &data.eval, &grid)?;
    let selection = select_alpha(&val, cfg.sweep.objective)?.with_test(&test);
    let checkpoint = Checkpoint {
        config: cfg.dump()?,
        model: outcome.model,
        rho: outcome.report.rho,
        seed,
        epoch: outcome.report.best_epoch,
    };
    let summary = RunSummary {
        seed,
        best_epoch: outcome.report.best_epoch,
        best_val: outcome.report.best_val,
        selection,
        val,
        test,
        checkpoint,
    };
    Ok((summary, outcome.report))
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn opt_metric(r: Option<&SweepRecord>) -> (f64, f64) {
    r.map_or((f64::NAN, f64::NAN), |r| (r.task_metric, r.verification))
}

/// `config`: prints the resolved configuration.
pub fn cmd_config(config: Option<&Path>, task: Option<TaskName>) -> Result<String> {
    match (config, task) {
        (Some(path), _) => ExperimentConfig::load(path)?.dump(),
        (None, Some(task)) => ExperimentConfig::defaults(task, None).dump(),
        (None, None) => Err(Error::config("config", "pass --config or --task")),
    }
}

/// `gen-data`: writes a synthetic dataset as CSV.
pub fn cmd_gen_data(
    task: TaskName,
    seed: u64,
    config: Option<&Path>,
    mix: Option<&str>,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = match config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.task != task {
                return Err(Error::config("task", format!("config is for {}, not {task}", cfg.task)));
            }
            cfg
        }
        None => ExperimentConfig::defaults(task, None),
    };
    if mix.is_some() && task != TaskName::ShiftedClassification {
        return Err(Error::config("mix", "only used by shifted-classification"));
    }
    match task {
        TaskName::Pendulum => {
            let p: &PendulumDataConfig = cfg.pendulum.as_ref().expect("validated");
            write_pendulum_csv(&build_pendulum_dataset(p, seed)?, out)
        }
        TaskName::MonotoneRegression => {
            let spec = CorrGroupSpec { seed, ..cfg.regression.clone().expect("validated") };
            write_tabular_csv(&synth_monotone_regression(&spec)?, out)
        }
        TaskName::ShiftedClassification => {
            let shift = cfg.classification.as_ref().expect("validated");
            let spec = match mix {
                None | Some("source") => shift.scaled_source(),
                Some("target") => shift.scaled_target(),
                Some(name) => ShiftMixSpec::preset(name)?.scaled(shift.scale),
            };
            write_tabular_csv(&synth_shifted_classification(&spec, seed)?, out)
        }
    }
}

/// `train`: trains `seeds` models starting at `train.seed` (or `seed`),
/// writing one directory per seed plus `summary.csv`. Returns the summary text.
pub fn cmd_train(config: &Path, seed: Option<u64>, seeds: usize, out_dir: Option<&Path>) -> Result<String> {
    if seeds == 0 {
        return Err(Error::config("seeds", "must be at least 1"));
    }
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let root = out_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    let data = load_data(&cfg)?;
    let mut summary = csv::Writer::from_writer(create(&root.join("summary.csv"))?);
    summary.write_record([
        "seed", "best_epoch", "best_val", "alpha", "val_metric", "val_verification", "test_metric", "test_verification",
    ])?;
    let mut tests = Vec::new();
    let mut alphas = Vec::new();
    for s in (0..seeds as u64).map(|i| cfg.train.seed + i) {
        let (run, report) = train_and_evaluate(&cfg, &data, s)?;
        let dir = root.join(format!("seed-{s}"));
        fs::create_dir_all(&dir)?;
        run.checkpoint.save(&dir.join("checkpoint.bin"))?;
        report.write_csv(create(&dir.join("train_log.csv"))?)?;
        let mut all = run.val.clone();
        all.extend_from_slice(&run.test);
        write_sweep_csv(&all, create(&dir.join("sweep.csv"))?)?;
        fs::write(dir.join("config.toml"), &run.checkpoint.config)?;
        let (test_metric, test_vr) = opt_metric(run.selection.test.as_ref());
        summary.write_record([
            s.to_string(),
            run.best_epoch.to_string(),
            run.best_val.to_string(),
            run.selection.alpha.to_string(),
            run.selection.validation.task_metric.to_string(),
            run.selection.validation.verification.to_string(),
            test_metric.to_string(),
            test_vr.to_string(),
        ])?;
        tests.push(test_metric);
        alphas.push(run.selection.alpha);
    }
    summary.flush()?;
    let (m, sd) = mean_std(&tests);
    let (am, asd) = mean_std(&alphas);
    Ok(format!(
        "runs={seeds} metric={} test_mean={m:.6} test_std={sd:.6} alpha_mean={am:.4} alpha_std={asd:.4} out={}",
        serde_json::to_value(cfg.sweep.metric).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(),
        root.display()
    ))
}

/// `sweep`: evaluates a checkpoint across the alpha grid on val and test.
pub fn cmd_sweep(checkpoint: &Path, extended: bool, out: &mut dyn Write) -> Result<Vec<SweepRecord>> {
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ExperimentConfig::from_toml_str(&ck.config, checkpoint)?;
    if extended {
        cfg.sweep = cfg.sweep.extended();
    }
    let data = load_data(&cfg)?;
    let (mut val, test) = sweep_model(&ck.model, &cfg, &data.eval, &cfg.sweep.grid()?)?;
    val.extend(test);
    write_sweep_csv(&val, out)?;
    Ok(val)
}

/// Reads a sweep CSV written by [`write_sweep_csv`].
pub fn read_sweep_csv(path: &Path, metric: MetricKind) -> Result<Vec<SweepRecord>> {
    let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 4 {
            return Err(parse_err(format!("row {}: expected 4 fields", i + 1)));
        }
        let num = |c: usize| rec[c].parse::<f64>().map_err(|_| parse_err(format!("row {}: bad number `{}`", i + 1, &rec[c])));
        out.push(SweepRecord {
            alpha: num(0)?,
            task_metric: num(1)?,
            verification: num(2)?,
            metric,
            split: rec[3].parse().map_err(|_| parse_err(format!("row {}: bad split", i + 1)))?,
        });
    }
    Ok(out)
}

pub enum SelectSource<'a> {
    SweepCsv { path: &'a Path, metric: MetricKind },
    Checkpoint(&'a Path),
}

/// `select`: picks alpha on validation rows and reports the matching test row.
pub fn cmd_select(source: SelectSource<'_>, objective: Objective) -> Result<String> {
    let records = match source {
        SelectSource::SweepCsv { path, metric } => read_sweep_csv(path, metric)?,
        SelectSource::Checkpoint(path) => cmd_sweep(path, false, &mut std::io::sink())?,
    };
    let (val, test): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.split == Split::Val);
    let test: Vec<_> = test.into_iter().filter(|r| r.split == Split::Test).collect();
    let sel = select_alpha(&val, objective)?.with_test(&test);
    let (tm, tv) = opt_metric(sel.test.as_ref());
    Ok(format!(
        "objective={} alpha={} val_metric={} val_verification={} test_metric={tm} test_verification={tv}",
        sel.objective, sel.alpha, sel.validation.task_metric, sel.validation.verification
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Beta,
    Coupling,
    Lambda,
    RhoPolicy,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(AblationKind::Beta),
            "coupling" => Ok(AblationKind::Coupling),
            "lambda" => Ok(AblationKind::Lambda),
            "rho-policy" => Ok(AblationKind::RhoPolicy),
            other => Err(Error::config("kind", format!("unknown ablation `{other}`"))),
        }
    }
}

pub const BETA_GRID: [f64; 3] = [0.01, 0.1, 1.0];
pub const LAMBDA_GRID: [f64; 3] = [0.01, 0.1, 1.0];

/// Labelled config variants for one ablation axis.
pub fn ablation_variants(cfg: &ExperimentConfig, kind: AblationKind) -> Result<Vec<(String, ExperimentConfig)>> {
    let with = |label: String, f: &dyn Fn(&mut ExperimentConfig)| {
        let mut c = cfg.clone();
        f(&mut c);
        c.model.coupling = c.train.effective_coupling();
        (label, c)
    };
    let variants: Vec<_> = match kind {
        AblationKind::Beta => BETA_GRID
            .iter()
            .map(|&b| with(format!("beta={b}"), &|c| c.train.beta = b))
            .collect(),
        AblationKind::Coupling => [Coupling::ScaledConcat, Coupling::Concat, Coupling::Add, Coupling::InputConcatAlpha]
            .into_iter()
            .map(|cp| with(format!("coupling={cp:?}"), &|c| c.train.coupling = cp))
            .collect(),
        AblationKind::Lambda => LAMBDA_GRID
            .iter()
            .map(|&l| with(format!("lambda={l}"), &|c| c.train.mode = TrainMode::TaskAndRule { lambda: l }))
            .collect(),
        AblationKind::RhoPolicy => [RhoPolicy::FixedAtInit, RhoPolicy::PerEpochAdaptive, RhoPolicy::Unit]
            .into_iter()
            .map(|p| with(format!("rho_policy={p:?}"), &|c| c.train.rho_policy = p))
            .collect(),
    };
    if kind != AblationKind::Lambda && cfg.train.mode.is_baseline() {
        return Err(Error::config("train.mode", "this ablation needs a rule-strength model"));
    }
    for (_, c) in &variants {
        c.validate()?;
    }
    Ok(variants)
}

/// `ablate`: trains every variant for `seeds` seeds; writes `ablation.csv`.
pub fn cmd_ablate(config: &Path, kind: AblationKind, seeds: usize, out_dir: Option<&Path>) -> Result<String> {
    if seeds == 0 {
        return Err(Error::config("seeds", "must be at least 1"));
    }
    let cfg = ExperimentConfig::load(config)?;
    let root: PathBuf = out_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    let data = load_data(&cfg)?;
    let mut w = csv::Writer::from_writer(create(&root.join("ablation.csv"))?);
    w.write_record(["variant", "seed", "alpha", "val_metric", "test_metric", "test_verification"])?;
    let mut lines = Vec::new();
    for (label, variant) in ablation_variants(&cfg, kind)? {
        let mut tests = Vec::new();
        for s in (0..seeds as u64).map(|i| cfg.train.seed + i) {
            let (run, _) = train_and_evaluate(&variant, &data, s)?;
            let (tm, tv) = opt_metric(run.selection.test.as_ref());
            w.write_record([
                label.clone(),
                s.to_string(),
                run.selection.alpha.to_string(),
                run.selection.validation.task_metric.to_string(),
                tm.to_string(),
                tv.to_string(),
            ])?;
            tests.push(tm);
        }
        let (m, sd) = mean_std(&tests);
        lines.push(format!("{label} test_mean={m:.6} test_std={sd:.6}"));
    }
    w.flush()?;
    Ok(lines.join("\n"))
}

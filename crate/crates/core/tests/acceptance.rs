//! End-to-end acceptance checks, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line (visible with `--nocapture`).

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::beta::beta_reg;

use deepctrl::cli::checkpoint::Checkpoint;
use deepctrl::cli::commands::{load_data, sweep_model, train_and_evaluate, ExperimentData};
use deepctrl::cli::config::ExperimentConfig;
use deepctrl::data::Split;
use deepctrl::eval::{alpha_sweep, extended_grid, max_adjacent_jump, select_alpha, spearman, MetricKind, Objective};
use deepctrl::model::{Coupling, DeepCtrlModel, InputScaler, ModelArch};
use deepctrl::numerics::{grad_check_fd, mlp_forward, AdamState, Mlp, MlpSpec, ParamSet, Tape, Tensor2D};
use deepctrl::pendulum::{energy, simulate_clean, PendulumParams, PendulumState, SimConfig};
use deepctrl::rules::{perturb_batch, rule_loss_node, Direction, PerturbationBatch, RuleInputs, RuleSpec};
use deepctrl::train::{compute_rho, fit, BetaSampler, RhoPolicy, TrainMode};

fn report(n: u32, pass: bool, started: Instant, limit: Option<Duration>, detail: String) {
    let elapsed = started.elapsed();
    let in_time = limit.is_none_or(|l| elapsed < l);
    let verdict = if pass && in_time { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} ({:.1}s) {detail}", elapsed.as_secs_f64());
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(in_time, "criterion {n} exceeded its time budget: {elapsed:?}");
}

fn config(name: &str) -> ExperimentConfig {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    ExperimentConfig::load(&path).unwrap()
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

// ---------------------------------------------------------------------------
// 1. gradients

enum LossKind {
    Mse,
    Bce,
    Energy,
    Monotonic,
}

fn random_mlp(rng: &mut ChaCha8Rng, input_dim: usize, output_dim: usize) -> (Mlp, ParamSet) {
    let hidden = rng.random_range(0..=2);
    let mut widths: Vec<usize> = (0..hidden).map(|_| rng.random_range(2..=16)).collect();
    widths.push(output_dim);
    let mut params = ParamSet::new();
    let mlp = Mlp::init("net", MlpSpec::new(input_dim, widths), &mut params, rng);
    (mlp, params)
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor2D {
    Tensor2D::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn criterion_01_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pendulum = PendulumParams::default();
    let mono = RuleSpec::Monotonic { feature: 1, direction: Direction::Decrease, guard: None, u: 0.5, output: 0 };
    let mut worst: f64 = 0.0;
    let mut active_rule_losses = 0;
    for net in 0..20 {
        for kind in [LossKind::Mse, LossKind::Bce, LossKind::Energy, LossKind::Monotonic] {
            let n = 12;
            let (in_dim, out_dim) = match kind {
                LossKind::Energy => (4, 4),
                LossKind::Mse => (3, 2),
                _ => (3, 1),
            };
            let (mlp, params) = random_mlp(&mut rng, in_dim, out_dim);
            // Low-energy inputs keep the energy hinge active for random outputs.
            let x = normal(&mut rng, n, in_dim, if matches!(kind, LossKind::Energy) { 0.3 } else { 1.0 });
            let target = match kind {
                LossKind::Bce => Tensor2D::from_fn(n, 1, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
                _ => normal(&mut rng, n, out_dim, 1.0),
            };
            // Frozen perturbation: drawn once, reused by every evaluation.
            let frozen: PerturbationBatch = perturb_batch(&x.map(f64::abs), &mono, &mut rng).unwrap();
            let x_mono = x.map(f64::abs);
            let build = |p: &ParamSet, tape: &mut Tape| {
                let (inp, raw) = match kind {
                    LossKind::Monotonic => (tape.constant(x_mono.clone()), &x_mono),
                    _ => (tape.constant(x.clone()), &x),
                };
                let out = mlp_forward(&mlp, p, inp, tape).unwrap();
                match kind {
                    LossKind::Mse => tape.mse(out, target.clone()).unwrap(),
                    LossKind::Bce => {
                        let prob = tape.sigmoid(out);
                        tape.bce(prob, target.clone()).unwrap()
                    }
                    LossKind::Energy => {
                        let rule = RuleSpec::EnergyDamping { params: pendulum };
                        rule_loss_node(tape, &rule, RuleInputs { x: raw, y_hat: out, perturbed: None }).unwrap()
                    }
                    LossKind::Monotonic => {
                        let xp = tape.constant(frozen.x_p.clone());
                        let out_p = mlp_forward(&mlp, p, xp, tape).unwrap();
                        let inputs = RuleInputs { x: raw, y_hat: out, perturbed: Some((out_p, &frozen)) };
                        rule_loss_node(tape, &mono, inputs).unwrap()
                    }
                }
            };
            let mut tape = Tape::new();
            let loss = build(&params, &mut tape);
            let grads = tape.backward(loss, &params).unwrap();
            if matches!(kind, LossKind::Energy | LossKind::Monotonic) && tape.value(loss).item().unwrap() > 0.0 {
                active_rule_losses += 1;
            }
            let f = |p: &ParamSet| {
                let mut t = Tape::new();
                let l = build(p, &mut t);
                t.value(l).item().unwrap()
            };
            let rep = grad_check_fd(f, &params, &grads, 1e-5);
            worst = worst.max(rep.max_rel_error);
            if rep.max_rel_error > 1e-4 {
                report(1, false, started, minutes(1), format!("net {net}: {rep:?}"));
            }
        }
    }
    report(
        1,
        worst <= 1e-4 && active_rule_losses >= 30,
        started,
        minutes(1),
        format!("max relative error {worst:.2e} over 80 checks; {active_rule_losses}/40 rule losses active"),
    );
}

// ---------------------------------------------------------------------------
// 2. simulator physics

#[test]
fn criterion_02_simulator_physics() {
    let started = Instant::now();
    let sim = SimConfig { sim_hz: 200, sample_hz: 200, noise_std: 0.0 };
    let frictionless = PendulumParams::default().frictionless();
    let mut worst_drift: f64 = 0.0;
    for s0 in [
        PendulumState::new(1.0, 0.0, 1.0, 0.0),
        PendulumState::new(0.5, -0.5, -1.0, 1.0),
        PendulumState::new(1.5, 0.0, 0.0, 0.0),
        PendulumState::new(-0.8, 1.2, 0.3, -0.7),
    ] {
        let states = simulate_clean(s0, &frictionless, &sim, 10 * 200 + 1).unwrap();
        let e0 = energy(s0, &frictionless);
        for s in &states {
            worst_drift = worst_drift.max(((energy(*s, &frictionless) - e0) / e0).abs());
        }
    }
    let damped = PendulumParams::default();
    let sampled = SimConfig { noise_std: 0.0, ..SimConfig::default() };
    let mut violations = 0;
    let mut pairs = 0;
    for s0 in [PendulumState::new(2.0, 0.0, 2.0, 0.0), PendulumState::new(-1.0, 2.0, 0.5, -1.0)] {
        let states = simulate_clean(s0, &damped, &sampled, 3000).unwrap();
        for w in states.windows(2) {
            pairs += 1;
            if energy(w[1], &damped) > energy(w[0], &damped) {
                violations += 1;
            }
        }
    }
    report(
        2,
        worst_drift < 1e-6 && violations == 0,
        started,
        minutes(1),
        format!("frictionless drift {worst_drift:.2e}; damped pairs with energy gain {violations}/{pairs}"),
    );
}

// ---------------------------------------------------------------------------
// 3. gating

#[test]
fn criterion_03_gating_decoupling() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0;
    let mut leaks = Vec::new();
    for (arch, seed) in [
        (ModelArch::pendulum(), 1),
        (ModelArch::tabular_regression(5), 2),
        (ModelArch::tabular_classification(6), 3),
    ] {
        let d = arch.input_dim;
        let model = DeepCtrlModel::new(arch.clone(), InputScaler::identity(d), seed).unwrap();
        for _ in 0..5 {
            let x = normal(&mut rng, 16, d, 1.0);
            let y = match arch.output_dim {
                1 => Tensor2D::from_fn(16, 1, |_, _| if rng.random_bool(0.5) { 1.0 } else { 0.0 }),
                k => normal(&mut rng, 16, k, 1.0),
            };
            for (alpha, frozen) in [(0.0, model.rule_encoder_params()), (1.0, model.data_encoder_params())] {
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &x, alpha).unwrap().output;
                let loss = match arch.task {
                    deepctrl::model::TaskKind::Regression => tape.mse(out, y.clone()).unwrap(),
                    deepctrl::model::TaskKind::BinaryClassification => tape.bce(out, y.clone()).unwrap(),
                };
                let grads = tape.backward(loss, model.params()).unwrap();
                checks += 1;
                let nonzero = frozen.clone().filter(|&i| grads[i].data().iter().any(|g| *g != 0.0)).count();
                let other_live = grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0));
                if nonzero > 0 || !other_live {
                    leaks.push(format!("alpha={alpha}: {nonzero} tensors"));
                }
            }
        }
    }
    report(3, leaks.is_empty(), started, None, format!("{checks} batches, exact-zero violations: {leaks:?}"));
}

// ---------------------------------------------------------------------------
// 4. loss identity and rho

#[test]
fn criterion_04_loss_identity() {
    let started = Instant::now();
    let cfg = config("pendulum-desk.toml");
    let data = load_data(&cfg).unwrap().train;
    let (x, y) = data.subset(Split::Train);
    let rule = cfg.train.rule.clone();
    let mut model = DeepCtrlModel::new(cfg.model.clone(), InputScaler::fit(&x), 0).unwrap();
    let est = compute_rho(&model, &x, &y, &rule, None).unwrap();
    let init_gap = (est.rho * est.task_loss - est.rule_loss).abs() / est.rule_loss;

    let mut adam = AdamState::new(model.params(), 1e-3);
    let sampler = BetaSampler::new(0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for _epoch in 0..2 {
        for chunk in (0..x.rows()).collect::<Vec<_>>().chunks(32) {
            let (xb, yb) = (x.select_rows(chunk), y.select_rows(chunk));
            let alpha = sampler.sample(&mut rng);
            let s = deepctrl::train::train_step(&mut model, &mut adam, &xb, &yb, alpha, TrainMode::DeepCtrl, est.rho, &rule, None)
                .unwrap();
            let expected = s.alpha * s.rule + s.rho * (1.0 - s.alpha) * s.task;
            worst = worst.max((s.total - expected).abs() / expected.abs());
            steps += 1;
        }
    }
    // Perturbation mode: the identity must hold for monotonic rules too.
    let reg = config("monotone-regression-desk.toml");
    let rdata = load_data(&reg).unwrap().train;
    let (rx, ry) = rdata.subset(Split::Train);
    let mut rmodel = DeepCtrlModel::new(reg.model.clone(), InputScaler::fit(&rx), 0).unwrap();
    let mut radam = AdamState::new(rmodel.params(), 1e-3);
    for chunk in (0..rx.rows()).collect::<Vec<_>>().chunks(32) {
        let (xb, yb) = (rx.select_rows(chunk), ry.select_rows(chunk));
        let pert = perturb_batch(&xb, &reg.train.rule, &mut rng).unwrap();
        let alpha = sampler.sample(&mut rng);
        let s = deepctrl::train::train_step(
            &mut rmodel,
            &mut radam,
            &xb,
            &yb,
            alpha,
            TrainMode::DeepCtrlPerturb,
            0.7,
            &reg.train.rule,
            Some(&pert),
        )
        .unwrap();
        let expected = s.alpha * s.rule + s.rho * (1.0 - s.alpha) * s.task;
        worst = worst.max((s.total - expected).abs() / expected.abs().max(f64::MIN_POSITIVE));
        steps += 1;
    }
    report(
        4,
        worst <= 1e-12 && init_gap <= 1e-12 && est.rule_loss > 0.0,
        started,
        None,
        format!(
            "{steps} steps, worst relative residual {worst:.1e}; rho={:.4e}, |rho*L_task0 - L_rule0|/L_rule0 = {init_gap:.1e}",
            est.rho
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Beta prior

#[test]
fn criterion_05_beta_prior() {
    let started = Instant::now();
    let sampler = BetaSampler::new(0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sampler.sample(&mut rng)).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let tail = draws.iter().filter(|a| **a < 0.05 || **a > 0.95).count() as f64 / n as f64;
    let oracle = beta_reg(0.1, 0.1, 0.05) + (1.0 - beta_reg(0.1, 0.1, 0.95));
    report(
        5,
        (mean - 0.5).abs() <= 0.01 && (tail - oracle).abs() <= 0.02,
        started,
        None,
        format!("mean {mean:.4}, tail mass {tail:.4} vs incomplete-beta {oracle:.4}"),
    );
}

// ---------------------------------------------------------------------------
// 6, 7, 10. pendulum desk runs

fn pendulum_run(cfg: &ExperimentConfig, seed: u64) -> (DeepCtrlModel, ExperimentData) {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    cfg.train.seed = seed;
    let data = load_data(&cfg).unwrap();
    let out = fit(&cfg.train, &cfg.model, &data.train).unwrap();
    (out.model, data)
}

fn test_verification(model: &DeepCtrlModel, cfg: &ExperimentConfig, data: &ExperimentData, grid: &[f64]) -> Vec<f64> {
    let (x, y) = data.eval.subset(Split::Test);
    alpha_sweep(model, &x, &y, grid, &cfg.train.rule, MetricKind::Mae, Split::Test, 0)
        .unwrap()
        .iter()
        .map(|r| r.verification)
        .collect()
}

#[test]
fn criterion_06_controllability_trend() {
    let started = Instant::now();
    let cfg = config("pendulum-desk.toml");
    let grid = cfg.sweep.grid().unwrap();
    assert_eq!(grid.len(), 21);
    let mut ok = true;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (model, data) = pendulum_run(&cfg, seed);
        assert_eq!(data.train.train.len(), 3000);
        let vr = test_verification(&model, &cfg, &data, &grid);
        let gap = vr[20] - vr[0];
        let rho = spearman(&grid, &vr);
        ok &= gap >= 0.20 && rho >= 0.8;
        lines.push(format!("seed {seed}: vr(0)={:.3} vr(1)={:.3} spearman={rho:.3}", vr[0], vr[20]));
    }
    report(6, ok, started, minutes(15), lines.join("; "));
}

#[test]
fn criterion_07_baseline_ordering() {
    let started = Instant::now();
    let with_rule = config("pendulum-task-and-rule.toml");
    assert_eq!(with_rule.train.mode, TrainMode::TaskAndRule { lambda: 1.0 });
    let mut task_only = with_rule.clone();
    task_only.train.mode = TrainMode::TaskOnly;
    let (mut sum_tr, mut sum_to) = (0.0, 0.0);
    for seed in 0..3 {
        let (m, d) = pendulum_run(&with_rule, seed);
        sum_tr += test_verification(&m, &with_rule, &d, &[0.0])[0];
        let (m, d) = pendulum_run(&task_only, seed);
        sum_to += test_verification(&m, &task_only, &d, &[0.0])[0];
    }
    let (tr, to) = (sum_tr / 3.0, sum_to / 3.0);
    report(7, tr > to, started, None, format!("mean verification: task+rule {tr:.3}, task-only {to:.3}"));
}

// ---------------------------------------------------------------------------
// 8. optimal alpha vs correlation strength

#[test]
fn criterion_08_optimal_alpha_monotonicity() {
    let started = Instant::now();
    let base = config("monotone-regression-desk.toml");
    let mut ordered = 0;
    let mut lines = Vec::new();
    let mut means = [0.0; 3];
    for seed in 0..5u64 {
        let mut chosen = Vec::new();
        for c in [-0.1, -0.2, -0.3] {
            let mut cfg = base.clone();
            cfg.seed = seed * 100 + 7;
            cfg.regression.as_mut().unwrap().correlation = c;
            let data = load_data(&cfg).unwrap();
            let (run, _) = train_and_evaluate(&cfg, &data, seed).unwrap();
            chosen.push(run.selection.alpha);
        }
        for (m, a) in means.iter_mut().zip(&chosen) {
            *m += a / 5.0;
        }
        if chosen[0] <= chosen[1] && chosen[1] <= chosen[2] {
            ordered += 1;
        }
        lines.push(format!("{chosen:?}"));
    }
    report(
        8,
        ordered >= 4,
        started,
        minutes(20),
        format!(
            "{ordered}/5 seeds non-decreasing; mean alpha* {:.2} / {:.2} / {:.2}; per seed for c=-0.1,-0.2,-0.3: {}",
            means[0],
            means[1],
            means[2],
            lines.join(" ")
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. distribution shift

#[test]
fn criterion_09_shift_adaptation() {
    let started = Instant::now();
    let base = config("shifted-classification-desk.toml");
    let grid = extended_grid();
    let (mut ce_star, mut ce_zero) = (0.0, 0.0);
    let mut worst_jump: f64 = 0.0;
    let mut finite = true;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.train.seed = seed;
        let data = load_data(&cfg).unwrap();
        let out = fit(&cfg.train, &cfg.model, &data.train).unwrap();
        let (val, test) = sweep_model(&out.model, &cfg, &data.eval, &grid).unwrap();
        finite &= test.iter().chain(&val).all(|r| r.task_metric.is_finite());
        let sel = select_alpha(&val, Objective::MinTaskError).unwrap().with_test(&test);
        let at_zero = test.iter().find(|r| r.alpha == 0.0).unwrap().task_metric;
        let star = sel.test.unwrap().task_metric;
        let (xt, _) = data.eval.subset(Split::Test);
        worst_jump = worst_jump.max(max_adjacent_jump(&out.model, &xt, &grid).unwrap());
        ce_star += star / 3.0;
        ce_zero += at_zero / 3.0;
        lines.push(format!("seed {seed}: alpha*={:.2} ce*={star:.4} ce(0)={at_zero:.4}", sel.alpha));
    }
    // Probabilities live in [0,1]; a 0.05 alpha step moving any of them by
    // more than half the range would be a discontinuity.
    let continuous = worst_jump < 0.5;
    report(
        9,
        ce_star < ce_zero && finite && continuous,
        started,
        None,
        format!("mean CE at alpha* {ce_star:.4} vs alpha=0 {ce_zero:.4}; max adjacent jump {worst_jump:.4}; {}", lines.join("; ")),
    );
}

// ---------------------------------------------------------------------------
// 10. ablation sanity

#[test]
fn criterion_10_ablation_sanity() {
    let started = Instant::now();
    let cfg = config("pendulum-desk.toml");
    let data = load_data(&cfg).unwrap();
    let grid = cfg.sweep.grid().unwrap();
    let mut invariant = true;
    for coupling in [Coupling::Concat, Coupling::Add] {
        let mut c = cfg.clone();
        c.train.coupling = coupling;
        c.train.max_epochs = 5;
        c.train.patience = 4;
        c.model.coupling = c.train.effective_coupling();
        let (run, _) = train_and_evaluate(&c, &data, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        run.checkpoint.save(&path).unwrap();
        let model = Checkpoint::load(&path).unwrap().model;
        let (val, test) = sweep_model(&model, &c, &data.eval, &grid).unwrap();
        for rows in [&val, &test] {
            invariant &= rows.iter().all(|r| {
                r.task_metric.to_bits() == rows[0].task_metric.to_bits()
                    && r.verification.to_bits() == rows[0].verification.to_bits()
            });
        }
        let (x, _) = data.eval.subset(Split::Test);
        invariant &= model.predict(&x, 0.0).unwrap() == model.predict(&x, 1.0).unwrap();
    }
    let mut completed = Vec::new();
    for policy in [RhoPolicy::PerEpochAdaptive, RhoPolicy::FixedAtInit] {
        let mut c = cfg.clone();
        c.train.rho_policy = policy;
        let out = fit(&c.train, &c.model, &data.train).unwrap();
        let finite = out.report.epochs.iter().all(|e| e.val_metric.is_finite() && e.rho.is_finite());
        completed.push((policy, finite, out.report.final_epoch(), out.report.rho_updates.len()));
    }
    let ok = invariant && completed.iter().all(|c| c.1 && c.2 > 0);
    report(10, ok, started, None, format!("bit-identical rows: {invariant}; rho runs (policy, finite, epochs, rho values): {completed:?}"));
}

// ---------------------------------------------------------------------------
// 11. determinism and persistence

#[test]
fn criterion_11_determinism_and_persistence() {
    let started = Instant::now();
    let mut cfg = config("monotone-regression-desk.toml");
    cfg.train.max_epochs = 4;
    cfg.train.patience = 3;
    let data = load_data(&cfg).unwrap();
    let bytes = || train_and_evaluate(&cfg, &data, 9).unwrap().0.checkpoint.to_bytes().unwrap();
    let (a, b) = (bytes(), bytes());
    let identical = a == b;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    std::fs::write(&path, &a).unwrap();
    let loaded = Checkpoint::load(Path::new(&path)).unwrap();
    let original = Checkpoint::from_bytes(&a).unwrap();
    let probe = Tensor2D::from_fn(64, cfg.model.input_dim, |r, c| 9.0 + ((r * 7 + c * 3) % 11) as f64 * 0.2);
    let mut exact = true;
    for alpha in [0.0, 0.35, 1.0, 1.3] {
        let p1 = original.model.predict(&probe, alpha).unwrap();
        let p2 = loaded.model.predict(&probe, alpha).unwrap();
        exact &= p1.data().iter().zip(p2.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    }
    let resaved = loaded.to_bytes().unwrap() == a;
    report(
        11,
        identical && exact && resaved,
        started,
        None,
        format!("identical checkpoints: {identical}; bit-exact predictions after reload: {exact}; re-save identical: {resaved}"),
    );
}

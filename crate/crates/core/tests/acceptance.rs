//! Acceptance criteria 1–11, one PASS/FAIL line each. Limits and runtime
//! budgets are pinned below; run with `--nocapture` to see the report.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use pl_bilevel::diagnostics::{self, Metric, RateMode};
use pl_bilevel::experiment::{self, compare, first_crossing, measured_constants};
use pl_bilevel::problems::{generate_pl_game, AnyInstance, BilevelOracle, PlGameParams};
use pl_bilevel::solvers::{self, MomentumCoeffs, SolverConfig, SolverKind, StepSchedule};
use pl_bilevel::suites::{self, run_suite, Suite};
use pl_bilevel::trace_io::config::{parse_compare_config_in, parse_config};
use pl_bilevel::trace_io::rng;
use pl_bilevel::trace_io::write_trace;
use pl_bilevel::hypergrad;

const SEED: u64 = 1;

struct Outcome {
    passed: bool,
    detail: String,
}

fn suite_outcome(suite: Suite) -> Outcome {
    let report = run_suite(suite, SEED).unwrap();
    let detail = report.checks.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("; ");
    Outcome {
        passed: report.passed(),
        detail,
    }
}

fn at_most(name: &str, measured: f64, limit: f64) -> Outcome {
    Outcome {
        passed: measured <= limit,
        detail: format!("{name} {measured:.4e} <= {limit:.4e}"),
    }
}

// 1: clipped hyper-gradient at y*(x) vs closed form (1e-8) and finite
// differences (1e-4) on ten d = p = 10 quad instances.
fn hypergradient_exactness() -> Outcome {
    suite_outcome(Suite::Hypergrad)
}

// 2: ‖∇̂f − ∇F‖ <= L̂‖y* − y‖(1 + 1e-8), 100 pairs × 10 instances.
fn estimator_error_bound() -> Outcome {
    suite_outcome(Suite::EstimatorBound)
}

// 3: mean ‖𝒢(x_t, ∇F, γ)‖ <= 4√R/√(3Tγη), T = 1000, admissible steps.
fn deterministic_bound() -> Outcome {
    let cfg = suites::admissible_quad_config(SEED, suites::BOUND_HORIZON).unwrap();
    let trace = experiment::execute(&cfg, Path::new("."), None).unwrap();
    let (mean, bound) = suites::mgbio_bound_check(&cfg, &trace).unwrap();
    let mut o = at_most("mean/bound", mean / bound, 1.0);
    o.detail += &format!(" (mean {mean:.4e}, bound {bound:.4e}, T = {})", trace.rows.len());
    o
}

// 4: running-mean log-log slope of MGBiO stationarity over t ∈ [1e2, 1e4].
fn rate_exponent() -> Outcome {
    let cfg = suites::rate_config(SEED);
    let trace = experiment::execute(&cfg, Path::new("."), None).unwrap();
    let fit = diagnostics::fit_rate(&trace.rows, Metric::GradMapNorm, suites::RATE_WINDOW, RateMode::RunningMean)
        .unwrap();
    let mut o = at_most("slope", fit.slope, -0.4);
    o.detail += &format!(" (theory -0.5, r² = {:.4}, {} points)", fit.r2, fit.points);
    o
}

fn max_iterate_gap(a: &[(DVector<f64>, DVector<f64>)], b: &[(DVector<f64>, DVector<f64>)]) -> f64 {
    a.iter()
        .zip(b)
        .map(|((xa, ya), (xb, yb))| {
            let dx = (xa - xb).norm() / xa.norm().max(1.0);
            let dy = (ya - yb).norm() / ya.norm().max(1.0);
            dx.max(dy)
        })
        .fold(0.0, f64::max)
}

fn iterates(game: &AnyInstance<f64>, cfg: &SolverConfig<f64>, kind: SolverKind, steps: usize) -> Vec<(DVector<f64>, DVector<f64>)> {
    let mut mb = rng::substream(cfg.seed, rng::MINIBATCH_STREAM);
    let mut state = solvers::init_state(game, cfg, kind, &mut mb).unwrap();
    let mut out = vec![(state.x.clone(), state.y.clone())];
    for _ in 0..steps {
        state = solvers::step(kind, &state, game, cfg, &mut mb).unwrap();
        out.push((state.x.clone(), state.y.clone()));
    }
    out
}

// 5: with batch = n (and unit weights for MSGBiO) the stochastic solvers
// reproduce MGBiO iterate by iterate over 200 steps on the PL game.
fn estimator_degeneration() -> Outcome {
    let game = AnyInstance::PlGame(generate_pl_game::<f64>(&PlGameParams::experiment_regime(SEED)).unwrap());
    let n = game.upper_samples().max(game.lower_samples());
    let pc = measured_constants(&game, experiment::default_init_radius(&game), &Default::default(), SEED).unwrap();
    let base = SolverConfig {
        gamma: 0.01,
        lambda: 0.01,
        schedule: StepSchedule::Constant(1.0),
        coeffs: MomentumCoeffs::Scheduled([1.0; 5]),
        batch: n,
        init_batch: n,
        horizon: 201,
        seed: SEED,
        clip: pc.clip_spec::<f64>().unwrap(),
        set: hypergrad::FeasibleSet::Unconstrained,
        init_radius: experiment::default_init_radius(&game),
    };
    let reference = iterates(&game, &base, SolverKind::Mgbio, 200);
    let fixed = SolverConfig {
        coeffs: MomentumCoeffs::Fixed([1.0; 5]),
        ..base.clone()
    };
    let ms = max_iterate_gap(&reference, &iterates(&game, &fixed, SolverKind::Msgbio, 200));
    let vr = max_iterate_gap(&reference, &iterates(&game, &base, SolverKind::VrMsgbio, 200));
    let mut o = at_most("max relative iterate gap", ms.max(vr), 1e-10);
    o.detail += &format!(" (MSGBiO {ms:.3e}, VR-MSGBiO {vr:.3e}, n = {n})");
    o
}

// 6: clamp idempotence, eigenvalue range, symmetry, non-expansiveness and
// clamped-inverse consistency on 100 random matrices each.
fn spectral_suite() -> Outcome {
    suite_outcome(Suite::Spectral)
}

// 7: analytic derivatives vs central differences (rel. err 1e-5) at 20
// points per family; sensing with d = 20, r = 3.
fn derivative_certification() -> Outcome {
    suite_outcome(Suite::Derivatives)
}

// 8: VR-MSGBiO reaches trailing-mean stationarity 1e-2 with fewer samples
// than MSGBiO on at least 8 of 10 seeds (PL game d = 50, l = 48, n = 2500,
// batch 10, lr 0.01).
fn variance_reduction_direction() -> Outcome {
    let text = r#"{"problem": {"generate": {"family": "plgame", "d": 50, "l": 48, "n": 2500, "seed": 7}},
        "solvers": [
            {"name": "msgbio", "gamma": 0.01, "lambda": 0.01, "batch": 10, "horizon": 10000},
            {"name": "vr-msgbio", "gamma": 0.01, "lambda": 0.01, "batch": 10, "horizon": 10000}],
        "seeds": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
        "threshold": 0.01,
        "threshold_window": 100,
        "diagnostics": {"diag_stride": 1, "oracle": false}}"#;
    let cfg = parse_compare_config_in(text, Path::new(".")).unwrap();
    let inst = experiment::load_problem(&cfg.problem, Path::new(".")).unwrap();
    let (report, traces) = compare(&inst, &cfg).unwrap();
    let seeds = cfg.seeds.len();
    let cumulative = cfg
        .seeds
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            let [a, b] = [&traces[i], &traces[seeds + i]]
                .map(|t| first_crossing(&t.rows, cfg.threshold, 0, t.header.init_samples).map(|c| c.samples));
            match (a, b) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b < a,
            }
        })
        .count();
    let reached = |e: usize| report.summaries[e].reached;
    Outcome {
        passed: report.second_wins >= 8,
        detail: format!(
            "VR-MSGBiO wins {}/{seeds} >= 8 (window 100; reached: MSGBiO {}, VR-MSGBiO {}; cumulative mean: {cumulative}/{seeds})",
            report.second_wins,
            reached(0),
            reached(1)
        ),
    }
}

// 9: MGBiO on sensing d = 50, lr 0.008, T = 5000 reduces
// ‖UUᵀ − H*‖²_F/‖H*‖²_F at least tenfold.
fn sensing_recovery() -> Outcome {
    let cfg = parse_config(
        r#"{"seed": 1, "problem": {"generate": {"family": "sensing", "d": 50}},
            "solver": {"name": "mgbio", "horizon": 5000, "gamma": 0.008, "lambda": 0.008},
            "diagnostics": {"diag_stride": 1000000, "oracle": false}}"#,
    )
    .unwrap();
    let inst = experiment::load_problem(&cfg.problem, Path::new(".")).unwrap();
    let AnyInstance::Sensing(s) = &inst else {
        unreachable!("sensing config")
    };
    let radius = experiment::default_init_radius(&inst);
    let pc = measured_constants(&inst, radius, &cfg.solver.set, cfg.seed).unwrap();
    let clip = experiment::clip_from_constants(&pc);
    let sc = experiment::solver_config(&cfg.solver, cfg.seed, &inst, &clip).unwrap();
    let out = solvers::run(&inst, &sc, SolverKind::Mgbio, &experiment::diag_options(&cfg.diagnostics), None, None)
        .unwrap();
    let (x1, y1) = solvers::initial_point(s, &sc);
    let before = s.recovery_ratio(&x1, &y1);
    let after = s.recovery_ratio(&out.final_state.x, &out.final_state.y);
    let mut o = at_most("final/initial recovery error", after / before, 0.1);
    o.detail += &format!(" ({before:.4e} -> {after:.4e}, {} iterates)", out.records.len());
    o
}

// 10: Ω_t nonincreasing (slack 1e-12) along MGBiO with admissible steps.
fn lyapunov_monotone() -> Outcome {
    let cfg = suites::admissible_quad_config(SEED, suites::BOUND_HORIZON).unwrap();
    let trace = experiment::execute(&cfg, Path::new("."), None).unwrap();
    let mut o = at_most("max Ω_{t+1} − Ω_t", suites::omega_increase(&trace.rows).unwrap(), 0.0);
    o.detail += &format!(" ({} iterates)", trace.rows.len());
    o
}

// 11: the same config and seed give byte-identical trace files.
fn determinism() -> Outcome {
    let cfg = parse_config(
        r#"{"seed": 11, "problem": {"generate": {"family": "plgame", "d": 20, "l": 18, "n": 300}},
            "solver": {"name": "vr-msgbio", "horizon": 300, "batch": 5},
            "diagnostics": {"diag_stride": 1}, "output": {"formats": ["csv", "json"]}}"#,
    )
    .unwrap();
    let files: Vec<Vec<Vec<u8>>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let trace = experiment::execute(&cfg, Path::new("."), None).unwrap();
            write_trace(&dir.path().join("trace.csv"), &trace).unwrap();
            write_trace(&dir.path().join("trace.json"), &trace).unwrap();
            ["trace.csv", "trace.header.json", "trace.json"]
                .iter()
                .map(|f| fs::read(dir.path().join(f)).unwrap())
                .collect()
        })
        .collect();
    let bytes: usize = files[0].iter().map(Vec::len).sum();
    Outcome {
        passed: files[0] == files[1],
        detail: format!("csv, header and json traces identical across two runs ({bytes} bytes)"),
    }
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, Duration, fn() -> Outcome); 11] = [
        ("hyper-gradient exactness", Duration::from_secs(1), hypergradient_exactness),
        ("clipped estimator error bound", Duration::from_secs(5), estimator_error_bound),
        ("deterministic stationarity bound", Duration::from_secs(10), deterministic_bound),
        ("rate exponent", Duration::from_secs(60), rate_exponent),
        ("estimator degeneration", Duration::MAX, estimator_degeneration),
        ("spectral suite", Duration::from_secs(5), spectral_suite),
        ("derivative certification", Duration::from_secs(30), derivative_certification),
        ("variance reduction saves samples", Duration::from_secs(600), variance_reduction_direction),
        ("sensing recovery", Duration::from_secs(600), sensing_recovery),
        ("Lyapunov monotonicity", Duration::MAX, lyapunov_monotone),
        ("determinism", Duration::MAX, determinism),
    ];
    let mut failed = Vec::new();
    for (i, (name, budget, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= budget;
        let passed = outcome.passed && in_time;
        let budget_note = if budget == Duration::MAX {
            String::new()
        } else {
            format!(" <= {:.0?}", budget)
        };
        println!(
            "{} {:>2} {name}: {} [{:.2?}{budget_note}]",
            if passed { "PASS" } else { "FAIL" },
            i + 1,
            outcome.detail,
            elapsed
        );
        if !passed {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}


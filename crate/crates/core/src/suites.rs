//! Property suites behind `plbilevel verify`. Every check reports the
//! measured quantity next to the limit it is held to.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, ConstantsReport, Metric, RateMode};
use crate::experiment;
use crate::finite_diff;
use crate::hypergrad::{self, InnerSolve};
use crate::problems::{
    generate_matrix_sensing, generate_pl_game, generate_quad_oracle, quad_oracle_truth, AnyInstance, Batch,
    BilevelOracle, PlGameParams, QuadOracleInstance, QuadParams, SensingParams,
};
use crate::solvers::{self, MomentumCoeffs, SolverConfig, SolverKind};
use crate::spectral;
use crate::trace_io::config::{
    ClipSection, DiagnosticsSection, OutputSection, ProblemSource, ProblemSpec, RunConfigFile, ScheduleSpec,
    SolverSection,
};
use crate::trace_io::rng::{self, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Spectral,
    Derivatives,
    Hypergrad,
    EstimatorBound,
    Lyapunov,
    Bounds,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Spectral,
        Suite::Derivatives,
        Suite::Hypergrad,
        Suite::EstimatorBound,
        Suite::Lyapunov,
        Suite::Bounds,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Spectral => "spectral",
            Suite::Derivatives => "derivatives",
            Suite::Hypergrad => "hypergrad",
            Suite::EstimatorBound => "lemma3",
            Suite::Lyapunov => "lyapunov",
            Suite::Bounds => "bounds",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|k| k.name()).collect();
            Error::config(format!("unknown suite `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// One property: passes when `measured <= limit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub limit: f64,
    pub passed: bool,
    pub note: String,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, limit: f64, note: impl Into<String>) -> Self {
        Check {
            name: name.to_string(),
            measured,
            limit,
            passed: measured <= limit,
            note: note.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {:.3e} <= {:.3e}", self.name, self.measured, self.limit)?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Spectral => spectral_suite(seed)?,
        Suite::Derivatives => derivative_suite(seed)?,
        Suite::Hypergrad => hypergrad_suite(seed)?,
        Suite::EstimatorBound => estimator_bound_suite(seed)?,
        Suite::Lyapunov => lyapunov_suite(seed)?,
        Suite::Bounds => bounds_suite(seed)?,
    };
    Ok(SuiteReport { suite, seed, checks })
}

fn stream(seed: u64, suite: Suite) -> StreamRng {
    rng::substream(seed, &format!("verify-{suite}"))
}

fn gaussian_matrix(rng: &mut StreamRng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_vec(rows, cols, rng::normals(rng, rows * cols))
}

fn gaussian_vector(rng: &mut StreamRng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_vec(rng::normals(rng, n)) * scale
}

fn random_symmetric(rng: &mut StreamRng, n: usize) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, n, n);
    (&a + a.transpose()) * 0.5
}

fn max_of(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// spectral

/// Matrices per property.
pub const SPECTRAL_TRIALS: usize = 100;
const SPECTRAL_WINDOW: (f64, f64) = (0.5, 2.0);

fn spectral_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Suite::Spectral);
    let (lo, hi) = SPECTRAL_WINDOW;
    let mut idem = Vec::new();
    let mut range = Vec::new();
    let mut sym = Vec::new();
    let mut expand = Vec::new();
    let mut inverse = Vec::new();
    let mut norm_idem = Vec::new();
    let mut norm_radius = Vec::new();
    let mut ball = Vec::new();
    for trial in 0..SPECTRAL_TRIALS {
        let n = 2 + trial % 9;
        let a = random_symmetric(&mut rng, n) * 2.0;
        let b = random_symmetric(&mut rng, n) * 2.0;
        let pa = spectral::clamp_spectrum(&a, lo, hi)?;
        let ra = pa.reconstruct();
        let again = spectral::clamp_spectrum(&ra, lo, hi)?.reconstruct();
        idem.push((&again - &ra).norm() / ra.norm());
        let theta = spectral::sym_eig(&ra)?;
        range.push(max_of(theta.eigenvalues().iter().map(|t| (lo - t).max(t - hi))) / hi);
        sym.push(spectral::max_asymmetry(&ra) / ra.norm());
        let rb = spectral::clamp_spectrum(&b, lo, hi)?.reconstruct();
        expand.push(((&ra - &rb).norm() - (&a - &b).norm()) / (&a - &b).norm());

        let rhs = gaussian_vector(&mut rng, n, 1.0);
        let solved = spectral::apply_clamped_inverse(&pa, &rhs)?;
        let lu = ra.clone().lu().solve(&rhs).ok_or_else(|| Error::invalid("clamped matrix is singular"))?;
        inverse.push(((&ra * &solved - &rhs).norm() / rhs.norm()).max((&solved - &lu).norm() / lu.norm()));

        let m = gaussian_matrix(&mut rng, n, 1 + trial % 5) * 2.0;
        let c = 1.0 + (trial % 3) as f64;
        let pm = spectral::project_spectral_norm(&m, c)?;
        norm_idem.push((spectral::project_spectral_norm(&pm, c)? - &pm).norm() / pm.norm());
        norm_radius.push(spectral::spectral_norm(&pm) / c - 1.0);
        let m2 = gaussian_matrix(&mut rng, n, 1 + trial % 5) * 2.0;
        let pm2 = spectral::project_spectral_norm(&m2, c)?;
        expand.push(((&pm - &pm2).norm() - (&m - &m2).norm()) / (&m - &m2).norm());

        let v = gaussian_vector(&mut rng, n, 2.0);
        let w = gaussian_vector(&mut rng, n, 2.0);
        let pv = spectral::project_ball(&v, c)?;
        let pw = spectral::project_ball(&w, c)?;
        ball.push(((spectral::project_ball(&pv, c)? - &pv).norm()).max(pv.norm() / c - 1.0));
        expand.push(((&pv - &pw).norm() - (&v - &w).norm()) / (&v - &w).norm());
    }
    let note = format!("{SPECTRAL_TRIALS} matrices, worst case");
    Ok(vec![
        Check::at_most("clamp idempotence (relative)", max_of(idem), 1e-10, &note),
        Check::at_most("clamped eigenvalues outside window (relative)", max_of(range), 1e-10, &note),
        Check::at_most("clamp symmetry (relative asymmetry)", max_of(sym), 1e-12, &note),
        Check::at_most("non-expansiveness excess (clamp, norm, ball)", max_of(expand), 1e-10, &note),
        Check::at_most("clamped inverse consistency (relative)", max_of(inverse), 1e-10, &note),
        Check::at_most("spectral-norm projection idempotence", max_of(norm_idem), 1e-10, &note),
        Check::at_most("spectral-norm projection radius excess", max_of(norm_radius), 1e-10, &note),
        Check::at_most("ball projection idempotence and radius", max_of(ball), 1e-12, &note),
    ])
}

// ---------------------------------------------------------------------------
// derivatives

/// Points per family.
pub const DERIVATIVE_POINTS: usize = 20;
const FD_STEP: f64 = 1e-5;

/// Largest relative error of each analytic derivative block against central
/// differences of the oracle's own values and gradients.
pub fn derivative_errors<O: BilevelOracle<f64> + ?Sized>(
    oracle: &O,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<[f64; 5]> {
    let f_of_x = |v: &DVector<f64>| oracle.f(v, y, Batch::Full).expect("point checked");
    let f_of_y = |v: &DVector<f64>| oracle.f(x, v, Batch::Full).expect("point checked");
    let g_of_y = |v: &DVector<f64>| oracle.g(x, v, Batch::Full).expect("point checked");
    let gy_of_x = |v: &DVector<f64>| oracle.grad_y_g(v, y, Batch::Full).expect("point checked");
    let gy_of_y = |v: &DVector<f64>| oracle.grad_y_g(x, v, Batch::Full).expect("point checked");
    let up = oracle.upper_derivs(x, y, Batch::Full)?;
    let lo = oracle.lower_derivs(x, y, Batch::Full)?;
    Ok([
        finite_diff::rel_err_vec(&up.grad_x, &finite_diff::gradient(f_of_x, x, FD_STEP)),
        finite_diff::rel_err_vec(&up.grad_y, &finite_diff::gradient(f_of_y, y, FD_STEP)),
        finite_diff::rel_err_vec(&lo.grad_y, &finite_diff::gradient(g_of_y, y, FD_STEP)),
        finite_diff::rel_err(&lo.jac_xy, &finite_diff::jacobian_rows(gy_of_x, x, FD_STEP)),
        finite_diff::rel_err(&lo.hess_yy, &finite_diff::jacobian_rows(gy_of_y, y, FD_STEP)),
    ])
}

const BLOCKS: [&str; 5] = ["grad_x f", "grad_y f", "grad_y g", "jac_xy g", "hess_yy g"];

fn derivative_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Suite::Derivatives);
    let small_game = AnyInstance::PlGame(generate_pl_game::<f64>(&PlGameParams {
        d: 20,
        l: 18,
        n: 200,
        ..PlGameParams::experiment_regime(seed)
    })?);
    let sensing = AnyInstance::Sensing(generate_matrix_sensing::<f64>(&SensingParams::new(20, 3, seed))?);
    let quad = AnyInstance::Quad(generate_quad_oracle::<f64>(&QuadParams::new(10, 10, (1.0, 4.0), seed))?);
    let mut checks = Vec::new();
    for inst in [&small_game, &sensing, &quad] {
        let scale = experiment::default_init_radius(inst);
        let mut worst = [0.0f64; 5];
        for _ in 0..DERIVATIVE_POINTS {
            let x = gaussian_vector(&mut rng, inst.upper_dim(), scale);
            let y = gaussian_vector(&mut rng, inst.lower_dim(), scale);
            for (w, e) in worst.iter_mut().zip(derivative_errors(inst, &x, &y)?) {
                *w = w.max(e);
            }
        }
        for (block, err) in BLOCKS.iter().zip(worst) {
            checks.push(Check::at_most(
                &format!("{} {block} vs central differences", inst.family()),
                err,
                1e-5,
                format!("{DERIVATIVE_POINTS} points, d = {}", inst.upper_dim() + inst.lower_dim()),
            ));
        }
    }
    Ok(checks)
}

// ---------------------------------------------------------------------------
// hypergrad

/// Instances swept by the hypergrad and estimator-bound suites.
pub const QUAD_INSTANCES: usize = 10;

fn quad_instance(seed: u64, k: usize) -> Result<QuadOracleInstance<f64>> {
    generate_quad_oracle(&QuadParams::new(10, 10, (1.0, 4.0), seed.wrapping_mul(1000).wrapping_add(k as u64)))
}

/// Constants of a quad instance under the default unit initial scale.
pub fn quad_constants(q: &QuadOracleInstance<f64>) -> Result<diagnostics::ProblemConstants> {
    experiment::measured_constants(&AnyInstance::Quad(q.clone()), 1.0, &Default::default(), 0)
}

fn hypergrad_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Suite::Hypergrad);
    let mut exact = 0.0f64;
    let mut fd = 0.0f64;
    let mut clip_active = 0.0f64;
    let inner = InnerSolve {
        tol: 1e-12,
        ..InnerSolve::default()
    };
    for k in 0..QUAD_INSTANCES {
        let q = quad_instance(seed, k)?;
        let clip = quad_constants(&q)?.clip_spec::<f64>()?;
        let x = gaussian_vector(&mut rng, q.params.d, 1.0);
        let truth = quad_oracle_truth(&q, &x)?;
        let parts = hypergrad::clipped_hypergradient(&q, &x, &truth.y_star, &clip)?;
        clip_active = clip_active.max(parts.clip_violation(&clip));
        let raw = q.upper_derivs(&x, &truth.y_star, Batch::Full)?;
        clip_active = clip_active.max((raw.grad_y.norm() - clip.c_fy).max(0.0));
        exact = exact.max((&parts.w - &truth.grad_f_true).norm() / truth.grad_f_true.norm());
        let reference = hypergrad::fd_hypergradient(&q, &x, &inner, 1e-4)?;
        fd = fd.max((&parts.w - &reference).norm() / reference.norm());
    }
    let note = format!("{QUAD_INSTANCES} quad instances, d = p = 10");
    Ok(vec![
        Check::at_most("projections inactive at y*", clip_active, 0.0, &note),
        Check::at_most("clipped vs closed-form hyper-gradient (relative)", exact, 1e-8, &note),
        Check::at_most("clipped vs finite-difference hyper-gradient (relative)", fd, 1e-4, &note),
    ])
}

// ---------------------------------------------------------------------------
// estimator error bound

/// Random `(x, y)` pairs per instance.
pub const BOUND_PAIRS: usize = 100;

/// `max ‖∇̂f(x, y) − ∇F(x)‖ / (L̂‖y*(x) − y‖)` over random pairs, with `x`
/// inside the region the constants cover, and the number of pairs within
/// `1 + 1e-8` of the bound.
pub fn estimator_bound_ratio(q: &QuadOracleInstance<f64>, report: &ConstantsReport, rng: &mut StreamRng) -> Result<(f64, usize)> {
    let clip = report.constants.clip_spec::<f64>()?;
    let mut worst = 0.0f64;
    let mut within = 0;
    for _ in 0..BOUND_PAIRS {
        let x = gaussian_vector(rng, q.params.d, 1.0);
        let truth = quad_oracle_truth(q, &x)?;
        let spread = 10f64.powf(rng.random_range(-3.0..1.0));
        let y = &truth.y_star + gaussian_vector(rng, q.params.p, spread);
        let w = hypergrad::clipped_hypergradient(q, &x, &y, &clip)?.w;
        let ratio = (&w - &truth.grad_f_true).norm() / (report.l_hat * (&truth.y_star - &y).norm());
        worst = worst.max(ratio);
        if ratio <= 1.0 + 1e-8 {
            within += 1;
        }
    }
    Ok((worst, within))
}

fn estimator_bound_suite(seed: u64) -> Result<Vec<Check>> {
    let mut rng = stream(seed, Suite::EstimatorBound);
    let mut worst = 0.0f64;
    let mut within = 0;
    for k in 0..QUAD_INSTANCES {
        let q = quad_instance(seed, k)?;
        let report = diagnostics::constants_report(&quad_constants(&q)?, 1.0, 1.0, 1.0)?;
        let (r, n) = estimator_bound_ratio(&q, &report, &mut rng)?;
        worst = worst.max(r);
        within += n;
    }
    let total = QUAD_INSTANCES * BOUND_PAIRS;
    Ok(vec![
        Check::at_most(
            "max ‖∇̂f − ∇F‖ / (L̂‖y* − y‖)",
            worst,
            1.0 + 1e-8,
            format!("{within}/{total} pairs within the bound"),
        ),
    ])
}

// ---------------------------------------------------------------------------
// lyapunov and bounds

/// MGBiO on a `d = p = 10` quad instance with the largest step sizes the
/// deterministic theorem admits at `η = 1`: `λ = 1/(2L_g)` and `γ` the
/// smaller of the theorem cap and the PL-residual descent cap.
pub fn admissible_quad_config(seed: u64, horizon: usize) -> Result<RunConfigFile> {
    let problem = ProblemSpec::Quad {
        d: 10,
        p: 10,
        mu: 1.0,
        lg: 4.0,
        coupling: 0.2,
        upper_spectrum: (0.5, 1.0),
        seed: Some(seed),
    };
    let inst = experiment::generate_instance(&problem)?;
    let pc = experiment::measured_constants(&inst, 1.0, &Default::default(), seed)?;
    let report = diagnostics::constants_report(&pc, 1.0, 1.0, 1.0)?;
    let lambda = report.mgbio.lambda_max;
    let gamma = report.mgbio.gamma_max.min(report.mgbio.gamma_max_residual);
    Ok(RunConfigFile {
        seed,
        problem: ProblemSource {
            generate: Some(problem),
            load: None,
        },
        solver: SolverSection {
            name: SolverKind::Mgbio,
            horizon: Some(horizon),
            gamma,
            lambda,
            schedule: Some(ScheduleSpec::Constant { eta: 1.0 }),
            coeffs: None,
            batch: 1,
            init_batch: 1,
            init_radius: Some(1.0),
            set: Default::default(),
            clip: Some(experiment::clip_from_constants(&pc)),
        },
        diagnostics: DiagnosticsSection {
            diag_stride: 1,
            ..DiagnosticsSection::default()
        },
        output: OutputSection::default(),
        constants: Some(pc),
    })
}

/// Largest step increase `Ω_{t+1} − Ω_t − 1e-12·max(1, |Ω_t|)` along a
/// trace's `lyapunov` column (nonpositive when monotone).
pub fn omega_increase(rows: &[diagnostics::TraceRecord]) -> Result<f64> {
    let omega: Vec<f64> = rows
        .iter()
        .map(|r| r.lyapunov.ok_or_else(|| Error::invalid(format!("row t = {} has no Lyapunov value", r.t))))
        .collect::<Result<_>>()?;
    Ok(omega
        .windows(2)
        .map(|w| w[1] - w[0] - 1e-12 * w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean of `‖𝒢(x_t, ∇F(x_t), γ)‖`, the deterministic bound `4√R/√(3Tγη)`
/// with `R = F(x_1) − F* + g(x_1, y_1) − G(x_1)` (`F* = 0` for quad
/// instances), for an MGBiO quad run.
pub fn mgbio_bound_check(cfg: &RunConfigFile, trace: &crate::trace_io::TraceFile) -> Result<(f64, f64)> {
    let inst = experiment::load_problem(&cfg.problem, std::path::Path::new("."))?;
    let AnyInstance::Quad(q) = &inst else {
        return Err(Error::config("the deterministic bound check needs a quad instance"));
    };
    let solver_cfg = experiment::solver_config(&cfg.solver, cfg.seed, &inst, &trace.header.clip)?;
    let (x1, y1) = solvers::initial_point(q, &solver_cfg);
    let truth = quad_oracle_truth(q, &x1)?;
    let r = q.hyper_objective(&x1) + q.g(&x1, &y1, Batch::Full)? - truth.g_min;
    let mean = trace
        .rows
        .iter()
        .map(|row| row.true_grad_norm.ok_or_else(|| Error::invalid("trace lacks true_grad_norm")))
        .sum::<Result<f64>>()?
        / trace.rows.len() as f64;
    let eta = match solver_cfg.schedule {
        solvers::StepSchedule::Constant(eta) => eta,
        _ => return Err(Error::config("the deterministic bound needs a constant eta")),
    };
    Ok((mean, diagnostics::mgbio_bound(r, trace.rows.len(), solver_cfg.gamma, eta)))
}

/// Worst ratios `lhs/rhs` of the estimator-bias decomposition (PL game) and
/// of the full hyper-gradient error bound (quad), over MSGBiO iterates.
pub fn decomposition_ratios(seed: u64, steps: usize) -> Result<(f64, f64)> {
    let game = generate_pl_game::<f64>(&PlGameParams {
        d: 20,
        l: 18,
        n: 200,
        ..PlGameParams::experiment_regime(seed)
    })?;
    let game = AnyInstance::PlGame(game);
    let pc = experiment::measured_constants(&game, 1.0, &Default::default(), seed)?;
    let cfg = msgbio_config(seed, &pc, 5)?;
    let mut mb = rng::substream(seed, rng::MINIBATCH_STREAM);
    let mut state = solvers::init_state(&game, &cfg, SolverKind::Msgbio, &mut mb)?;
    let mut bias = 0.0f64;
    for _ in 0..steps {
        let c = diagnostics::estimator_bias_check(&game, &state, &cfg.clip)?;
        bias = bias.max(c.lhs / c.rhs.max(f64::MIN_POSITIVE));
        state = solvers::step(SolverKind::Msgbio, &state, &game, &cfg, &mut mb)?;
    }

    let q = quad_instance(seed, 0)?;
    let pc = quad_constants(&q)?;
    let report = diagnostics::constants_report(&pc, 1.0, 1.0, 1.0)?;
    let cfg = msgbio_config(seed, &pc, 1)?;
    let mut mb = rng::substream(seed, rng::MINIBATCH_STREAM);
    let mut state = solvers::init_state(&q, &cfg, SolverKind::Msgbio, &mut mb)?;
    let mut full = 0.0f64;
    for _ in 0..steps {
        let (lhs, rhs) = diagnostics::hypergrad_error_bound(&q, &state, &cfg.clip, report.l_hat)?
            .ok_or_else(|| Error::OracleUnavailable("quad instance lost its closed form".into()))?;
        full = full.max(lhs / rhs.max(f64::MIN_POSITIVE));
        state = solvers::step(SolverKind::Msgbio, &state, &q, &cfg, &mut mb)?;
    }
    Ok((bias, full))
}

fn msgbio_config(seed: u64, pc: &diagnostics::ProblemConstants, batch: usize) -> Result<SolverConfig<f64>> {
    let ClipSection { c_fy, c_gxy, mu, l_g } = experiment::clip_from_constants(pc);
    Ok(SolverConfig {
        gamma: 0.01,
        lambda: 0.01,
        schedule: experiment::schedule(&SolverSection::default_schedule(SolverKind::Msgbio)),
        coeffs: MomentumCoeffs::Scheduled([1.0; 5]),
        batch,
        init_batch: 1,
        horizon: 1,
        seed,
        clip: spectral::ClipSpec::new(c_fy, c_gxy, mu, l_g)?,
        set: hypergrad::FeasibleSet::Unconstrained,
        init_radius: 1.0,
    })
}

/// Smallest PL residual `g(x, y) − Ĝ(x)` over random points of a
/// range-compatible PL game, with `Ĝ` from converged gradient descent.
pub fn min_pl_residual(seed: u64, points: usize) -> Result<f64> {
    let game = generate_pl_game::<f64>(&PlGameParams {
        d: 20,
        l: 18,
        n: 200,
        range_compatible: true,
        ..PlGameParams::experiment_regime(seed)
    })?;
    let mut rng = stream(seed, Suite::Lyapunov);
    let inner = InnerSolve {
        tol: 1e-9,
        ..InnerSolve::default()
    };
    let mut lowest = f64::INFINITY;
    for _ in 0..points {
        let x = gaussian_vector(&mut rng, game.upper_dim(), 1.0);
        let y = gaussian_vector(&mut rng, game.lower_dim(), 1.0);
        lowest = lowest.min(diagnostics::pl_residual(&game, &x, &y, &inner)?);
    }
    Ok(lowest)
}

/// Horizon of the Lyapunov and deterministic-bound runs.
pub const BOUND_HORIZON: usize = 1000;

fn lyapunov_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = admissible_quad_config(seed, BOUND_HORIZON)?;
    let trace = experiment::execute(&cfg, std::path::Path::new("."), None)?;
    let increase = omega_increase(&trace.rows)?;
    let (bias, full) = decomposition_ratios(seed, 50)?;
    let lowest = min_pl_residual(seed, 20)?;
    Ok(vec![
        Check::at_most(
            "MGBiO Ω_{t+1} − Ω_t (slack 1e-12 relative)",
            increase,
            0.0,
            format!(
                "quad d = p = 10, T = {BOUND_HORIZON}, γ = {:.3e}, λ = {:.3e}",
                cfg.solver.gamma, cfg.solver.lambda
            ),
        ),
        Check::at_most("estimator-bias decomposition lhs/rhs", bias, 1.0 + 1e-10, "MSGBiO on PL game d = 20, 50 steps"),
        Check::at_most("hyper-gradient error bound lhs/rhs", full, 1.0 + 1e-10, "MSGBiO on quad d = p = 10, 50 steps"),
        Check::at_most("negated PL residual", -lowest, 1e-9, "range-compatible PL game, 20 points"),
    ])
}

/// Horizon and fitting window of the rate check.
pub const RATE_HORIZON: usize = 10_000;
pub const RATE_WINDOW: (u64, u64) = (100, 10_000);

/// MGBiO on a quad instance with the default steps (`γ = λ = 0.01`, `η = 1`).
pub fn rate_config(seed: u64) -> RunConfigFile {
    let text = format!(
        r#"{{"seed": {seed},
            "problem": {{"generate": {{"family": "quad", "d": 10, "p": 10}}}},
            "solver": {{"name": "mgbio", "horizon": {RATE_HORIZON}}},
            "diagnostics": {{"diag_stride": 100}}}}"#
    );
    crate::trace_io::parse_config(&text).expect("built-in config parses")
}

fn bounds_suite(seed: u64) -> Result<Vec<Check>> {
    let cfg = admissible_quad_config(seed, BOUND_HORIZON)?;
    let trace = experiment::execute(&cfg, std::path::Path::new("."), None)?;
    let (mean, bound) = mgbio_bound_check(&cfg, &trace)?;
    let rate_cfg = rate_config(seed);
    let rate_trace = experiment::execute(&rate_cfg, std::path::Path::new("."), None)?;
    let fit = diagnostics::fit_rate(&rate_trace.rows, Metric::GradMapNorm, RATE_WINDOW, RateMode::RunningMean)?;
    Ok(vec![
        Check::at_most(
            "MGBiO mean ‖𝒢(x_t, ∇F, γ)‖ vs 4√R/√(3Tγη)",
            mean / bound,
            1.0,
            format!("mean {mean:.4e}, bound {bound:.4e}, T = {BOUND_HORIZON}"),
        ),
        Check::at_most(
            "MGBiO running-mean log-log slope",
            fit.slope,
            -0.4,
            format!("theory −0.5, window t ∈ [100, 10000], r² = {:.4}", fit.r2),
        ),
    ])
}

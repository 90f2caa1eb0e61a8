//! Turns parsed configs into instances, solver settings and trace files.

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, DiagOptions, ProblemConstants, TraceRecord};
use crate::hypergrad::{FeasibleSet, InnerSolve};
use crate::problems::{
    generate_matrix_sensing, generate_pl_game, generate_quad_oracle, AnyInstance, BilevelOracle, PlGameParams,
    QuadParams, SensingParams,
};
use crate::solvers::{self, MomentumCoeffs, RunStatus, SolverConfig, SolverKind, StepSchedule};
use crate::spectral::{self, ClipSpec};
use crate::trace_io::config::{
    ClipSection, CoeffSpec, CompareConfigFile, DiagnosticsSection, ProblemSource, ProblemSpec, RunConfigFile,
    ScheduleSpec, SetSpec, SolverSection,
};
use crate::trace_io::instance::load_instance;
use crate::trace_io::rng;
use crate::trace_io::trace::{TraceFile, TraceHeader, TraceStatus, COLUMNS, TRACE_FORMAT, TRACE_VERSION};
use crate::{Error, Result};

/// Random pairs used to sample constants of non-quadratic problems.
const SAMPLED_PAIRS: usize = 10;

pub fn generate_instance(spec: &ProblemSpec) -> Result<AnyInstance<f64>> {
    let seed = spec
        .seed()
        .ok_or_else(|| Error::config("problem seed is unset; resolve the config first"))?;
    Ok(match spec {
        ProblemSpec::Plgame {
            d,
            l,
            n,
            interval,
            range_compatible,
            range_map_scale,
            ..
        } => AnyInstance::PlGame(generate_pl_game(&PlGameParams {
            d: *d,
            l: *l,
            n: *n,
            interval: *interval,
            range_compatible: *range_compatible,
            range_map_scale: *range_map_scale,
            seed,
        })?),
        ProblemSpec::Sensing { d, r, .. } => {
            AnyInstance::Sensing(generate_matrix_sensing(&SensingParams::new(*d, *r, seed))?)
        }
        ProblemSpec::Quad {
            d,
            p,
            mu,
            lg,
            coupling,
            upper_spectrum,
            ..
        } => AnyInstance::Quad(generate_quad_oracle(&QuadParams {
            d: *d,
            p: *p,
            spectrum: (*mu, *lg),
            coupling: *coupling,
            upper_spectrum: *upper_spectrum,
            seed,
        })?),
    })
}

/// Generates or loads the problem of a config; `base` anchors relative paths.
pub fn load_problem(source: &ProblemSource, base: &Path) -> Result<AnyInstance<f64>> {
    match (&source.generate, &source.load) {
        (Some(spec), None) => generate_instance(spec),
        (None, Some(path)) => load_instance(&base.join(path)),
        _ => Err(Error::config("exactly one of problem.generate and problem.load must be given")),
    }
}

/// `1/√d` for matrix sensing (the scale of the ground-truth factor), `1`
/// otherwise.
pub fn default_init_radius(inst: &AnyInstance<f64>) -> f64 {
    match inst {
        AnyInstance::Sensing(s) => 1.0 / (s.params.d as f64).sqrt(),
        _ => 1.0,
    }
}

/// Radius of the region `x` is expected to stay in: four times the typical
/// norm of the initial draw, or the feasible set's extent.
fn x_radius(dim: usize, init_radius: f64, set: &SetSpec) -> f64 {
    let typical = 4.0 * init_radius * (dim as f64).sqrt();
    match set {
        SetSpec::Unconstrained => typical.max(1.0),
        SetSpec::Ball { center, radius } => {
            let c = center.as_ref().map_or(0.0, |c| c.iter().map(|v| v * v).sum::<f64>().sqrt());
            c + radius
        }
        SetSpec::Box { lower, upper } => lower
            .iter()
            .zip(upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Constants from matrix norms (quadratic families) or sampling (sensing).
pub fn measured_constants(inst: &AnyInstance<f64>, init_radius: f64, set: &SetSpec, seed: u64) -> Result<ProblemConstants> {
    let radius = x_radius(inst.upper_dim(), init_radius, set);
    match inst {
        AnyInstance::Quad(q) => {
            let mu = spectral::sym_eig(&q.q_mat)?.min_eigenvalue();
            Ok(diagnostics::quadratic_constants(&q.p_mat, &q.r1_mat, &q.q_mat, &q.r2_mat, radius, mu))
        }
        AnyInstance::PlGame(g) => Ok(diagnostics::quadratic_constants(
            &g.p_mat,
            &g.r1_mat,
            &g.q_mat,
            &g.r2_mat,
            radius,
            g.effective_mu(),
        )),
        AnyInstance::Sensing(s) => {
            let mut rng = rng::substream(seed, "constants");
            let (x0, y0) = (DVector::zeros(inst.upper_dim()), DVector::zeros(inst.lower_dim()));
            // A sensing lower Hessian is indefinite away from solutions. At the
            // ground truth its Gauss-Newton part is 2(‖y*‖²I + y*y*ᵀ) in
            // expectation; half of that smallest eigenvalue is the floor.
            let r = s.params.r;
            let floor = s.u_star.column(r - 1).norm_squared();
            diagnostics::sampled_constants(inst, &x0, &y0, 2.0 * init_radius, SAMPLED_PAIRS, floor, &mut rng)
        }
    }
}

pub fn clip_from_constants(pc: &ProblemConstants) -> ClipSection {
    ClipSection {
        c_fy: pc.c_fy,
        c_gxy: pc.c_gxy,
        mu: pc.mu,
        l_g: pc.l_g,
    }
}

pub fn schedule(spec: &ScheduleSpec) -> StepSchedule<f64> {
    match *spec {
        ScheduleSpec::Constant { eta } => StepSchedule::Constant(eta),
        ScheduleSpec::Polynomial { k, m, exponent } => StepSchedule::Polynomial { k, m, exponent },
    }
}

fn feasible_set(spec: &SetSpec, dim: usize) -> FeasibleSet<f64> {
    match spec {
        SetSpec::Unconstrained => FeasibleSet::Unconstrained,
        SetSpec::Ball { center, radius } => FeasibleSet::Ball {
            center: center.as_ref().map_or_else(|| DVector::zeros(dim), |c| DVector::from_vec(c.clone())),
            radius: *radius,
        },
        SetSpec::Box { lower, upper } => FeasibleSet::Box {
            lower: DVector::from_vec(lower.clone()),
            upper: DVector::from_vec(upper.clone()),
        },
    }
}

/// `(η, k, m)` for the constants report: `η_0` and the polynomial
/// parameters, or the constant `η` with `k = m = 1`.
fn report_schedule(s: &StepSchedule<f64>) -> (f64, f64, f64) {
    match *s {
        StepSchedule::Constant(eta) => (eta, 1.0, 1.0),
        StepSchedule::Polynomial { k, m, .. } => (s.eta_at(0).min(1.0), k, m),
    }
}

pub fn solver_config(
    section: &SolverSection,
    seed: u64,
    inst: &AnyInstance<f64>,
    clip: &ClipSection,
) -> Result<SolverConfig<f64>> {
    let kind = section.name;
    let sched = schedule(&section.schedule.unwrap_or_else(|| SolverSection::default_schedule(kind)));
    let coeffs = match section.coeffs.unwrap_or_else(SolverSection::default_coeffs) {
        CoeffSpec::Scheduled { c } => MomentumCoeffs::Scheduled(c),
        CoeffSpec::Fixed { weights } => MomentumCoeffs::Fixed(weights),
    };
    let cfg = SolverConfig {
        gamma: section.gamma,
        lambda: section.lambda,
        schedule: sched,
        coeffs,
        batch: section.batch,
        init_batch: section.init_batch,
        horizon: section
            .horizon
            .ok_or_else(|| Error::config("solver horizon is unset; resolve the config first"))?,
        seed,
        clip: ClipSpec::new(clip.c_fy, clip.c_gxy, clip.mu, clip.l_g)?,
        set: feasible_set(&section.set, inst.upper_dim()),
        init_radius: section.init_radius.unwrap_or_else(|| default_init_radius(inst)),
    };
    cfg.validate(kind, inst.upper_dim())?;
    Ok(cfg)
}

pub fn diag_options(section: &DiagnosticsSection) -> DiagOptions<f64> {
    DiagOptions {
        diag_stride: section.diag_stride.max(1),
        reference: section.reference,
        inner: InnerSolve::default(),
        record_wall_time: section.wall_time,
        oracle: section.oracle,
    }
}

/// Runs one configured solver on a prepared instance.
pub fn execute_on(
    inst: &AnyInstance<f64>,
    cfg: &RunConfigFile,
    callback: Option<solvers::Callback<'_>>,
) -> Result<TraceFile> {
    let section = &cfg.solver;
    let init_radius = section.init_radius.unwrap_or_else(|| default_init_radius(inst));
    let constants = match cfg.constants {
        Some(pc) => pc,
        None => measured_constants(inst, init_radius, &section.set, cfg.seed)?,
    };
    let clip = section.clip.unwrap_or_else(|| clip_from_constants(&constants));
    let solver_cfg = solver_config(section, cfg.seed, inst, &clip)?;
    let (eta, k, m) = report_schedule(&solver_cfg.schedule);
    let mut warnings = Vec::new();
    let report = match diagnostics::constants_report(&constants, eta, k, m) {
        Ok(r) => Some(r),
        Err(e) => {
            warnings.push(format!("constants report unavailable: {e}"));
            None
        }
    };
    if constants.sampled {
        warnings.push("problem constants are sampled lower bounds".into());
    }
    let out = solvers::run(inst, &solver_cfg, section.name, &diag_options(&cfg.diagnostics), report.as_ref(), callback)?;
    warnings.extend(out.warnings);
    let (status, failed_at) = match out.status {
        RunStatus::Completed => (TraceStatus::Completed, None),
        RunStatus::NonFinite { t } => (TraceStatus::NonFinite, Some(t as u64)),
    };
    let header = TraceHeader {
        format: TRACE_FORMAT.to_string(),
        version: TRACE_VERSION,
        solver: section.name,
        seed: cfg.seed,
        config: cfg.clone(),
        clip,
        constants: report,
        warnings,
        init_samples: out.init_samples,
        full_batch_evals: out.final_state.full_batch_evals,
        output_index: out.output_index as u64,
        output_x: out.output_x.iter().copied().collect(),
        status,
        failed_at,
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows: out.records.len(),
    };
    Ok(TraceFile {
        header,
        rows: out.records,
    })
}

/// Loads the problem and runs a config.
pub fn execute(cfg: &RunConfigFile, base: &Path, callback: Option<solvers::Callback<'_>>) -> Result<TraceFile> {
    let inst = load_problem(&cfg.problem, base)?;
    execute_on(&inst, cfg, callback)
}

// ---------------------------------------------------------------------------
// Comparisons

/// First row at which the mean of `grad_map_norm` drops to `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub t: u64,
    /// Per-row samples plus initialization samples.
    pub samples: u64,
}

/// Mean over the trailing `window` rows (no crossing before `window` rows
/// exist), or over all rows so far when `window` is 0.
pub fn first_crossing(rows: &[TraceRecord], threshold: f64, window: usize, init_samples: u64) -> Option<Crossing> {
    let mut sum = 0.0;
    for (i, r) in rows.iter().enumerate() {
        sum += r.grad_map_norm;
        let count = if window == 0 {
            i + 1
        } else {
            if i >= window {
                sum -= rows[i - window].grad_map_norm;
            }
            if i + 1 < window {
                continue;
            }
            window
        };
        if sum / count as f64 <= threshold {
            return Some(Crossing {
                t: r.t,
                samples: r.samples_used + init_samples,
            });
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub solver: SolverKind,
    /// Position of the solver entry in the compare config.
    pub entry: usize,
    pub seed: u64,
    /// `None` when the threshold is never reached (censored).
    pub crossing: Option<Crossing>,
    /// Running mean of `grad_map_norm` at the last row.
    pub final_metric: f64,
    pub status: TraceStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub solver: SolverKind,
    pub entry: usize,
    pub runs: usize,
    pub reached: usize,
    /// Median samples-to-threshold over runs that reached it.
    pub median_samples: Option<f64>,
    pub final_mean: f64,
    /// Sample standard deviation; absent for a single seed.
    pub final_sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub threshold: f64,
    pub threshold_window: usize,
    pub outcomes: Vec<SeedOutcome>,
    pub summaries: Vec<SolverSummary>,
    /// Seeds on which entry 1 reached the threshold with fewer samples than
    /// entry 0 (a censored run counts as never reaching it).
    pub second_wins: usize,
}

/// Config for `solvers[entry]` at `seed` on the shared instance.
pub fn compare_run_config(cfg: &CompareConfigFile, entry: usize, seed: u64) -> RunConfigFile {
    RunConfigFile {
        seed,
        problem: cfg.problem.clone(),
        solver: cfg.solvers[entry].clone(),
        diagnostics: cfg.diagnostics.clone(),
        output: cfg.output.clone(),
        constants: cfg.constants,
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs every (solver entry, seed) pair in parallel and summarizes; traces
/// are returned in (entry, seed) order.
pub fn compare(inst: &AnyInstance<f64>, cfg: &CompareConfigFile) -> Result<(CompareReport, Vec<TraceFile>)> {
    let jobs: Vec<(usize, u64)> = (0..cfg.solvers.len())
        .flat_map(|e| cfg.seeds.iter().map(move |&s| (e, s)))
        .collect();
    let traces = jobs
        .par_iter()
        .map(|&(entry, seed)| execute_on(inst, &compare_run_config(cfg, entry, seed), None))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<SeedOutcome> = jobs
        .iter()
        .zip(&traces)
        .map(|(&(entry, seed), tr)| {
            let n = tr.rows.len() as f64;
            SeedOutcome {
                solver: tr.header.solver,
                entry,
                seed,
                crossing: first_crossing(&tr.rows, cfg.threshold, cfg.threshold_window, tr.header.init_samples),
                final_metric: tr.rows.iter().map(|r| r.grad_map_norm).sum::<f64>() / n,
                status: tr.header.status,
            }
        })
        .collect();
    let summaries = (0..cfg.solvers.len())
        .map(|entry| {
            let mine: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.entry == entry).collect();
            let finals: Vec<f64> = mine.iter().map(|o| o.final_metric).collect();
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let sd = (finals.len() > 1)
                .then(|| (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            SolverSummary {
                solver: cfg.solvers[entry].name,
                entry,
                runs: mine.len(),
                reached: mine.iter().filter(|o| o.crossing.is_some()).count(),
                median_samples: median(mine.iter().filter_map(|o| o.crossing.map(|c| c.samples as f64)).collect()),
                final_mean: mean,
                final_sd: sd,
            }
        })
        .collect();
    let samples_of = |entry: usize, seed: u64| {
        outcomes
            .iter()
            .find(|o| o.entry == entry && o.seed == seed)
            .and_then(|o| o.crossing)
            .map(|c| c.samples)
    };
    let second_wins = cfg
        .seeds
        .iter()
        .filter(|&&s| match (samples_of(0, s), samples_of(1, s)) {
            (_, None) => false,
            (None, Some(_)) => true,
            (Some(a), Some(b)) => b < a,
        })
        .count();
    Ok((
        CompareReport {
            threshold: cfg.threshold,
            threshold_window: cfg.threshold_window,
            outcomes,
            summaries,
            second_wins,
        },
        traces,
    ))
}

/// Summary table as CSV; empty cells for absent values.
pub fn summary_csv(report: &CompareReport) -> String {
    let mut out = String::from("entry,solver,runs,reached,median_samples,final_mean,final_sd\n");
    for s in &report.summaries {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{:.16e},{}\n",
            s.entry,
            s.solver,
            s.runs,
            s.reached,
            opt(s.median_samples),
            s.final_mean,
            opt(s.final_sd)
        ));
    }
    out
}

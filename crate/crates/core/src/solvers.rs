//! MGBiO, MSGBiO and VR-MSGBiO.
//!
//! All three share the update
//!
//! ```text
//! x̃ = P_X(x_t − γ w_t)        x_{t+1} = x_t + η_t (x̃ − x_t)
//! ỹ = y_t − λ v_t             y_{t+1} = y_t + η_t (ỹ − y_t)
//! ```
//!
//! and differ in how the estimators `(u, h, v, G, H, w)` are refreshed at
//! `(x_{t+1}, y_{t+1})`: exactly from the full-batch oracle (MGBiO), by a
//! momentum average of minibatch derivatives (MSGBiO), or by a momentum
//! average with a same-minibatch two-point correction (VR-MSGBiO).
//!
//! An [`IterateState`] always carries estimators evaluated at its own
//! `(x_t, y_t)`, so a step consumes the stored `w_t`, `v_t` and produces the
//! next point together with its estimators.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ConstantsReport, DiagOptions, Probe, TraceRecord};
use crate::hypergrad::{self, FeasibleSet, HyperGradParts};
use crate::problems::{Batch, BilevelOracle};
use crate::spectral::{self, ClipSpec, SymEig};
use crate::trace_io::rng::{self, StreamRng, INIT_STREAM, MINIBATCH_STREAM, OUTPUT_INDEX_STREAM};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SolverKind {
    #[serde(rename = "mgbio")]
    Mgbio,
    #[serde(rename = "msgbio")]
    Msgbio,
    #[serde(rename = "vr-msgbio")]
    VrMsgbio,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Mgbio, SolverKind::Msgbio, SolverKind::VrMsgbio];

    pub fn as_str(self) -> &'static str {
        match self {
            SolverKind::Mgbio => "mgbio",
            SolverKind::Msgbio => "msgbio",
            SolverKind::VrMsgbio => "vr-msgbio",
        }
    }

    pub fn is_stochastic(self) -> bool {
        self != SolverKind::Mgbio
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown solver `{s}` (expected mgbio, msgbio or vr-msgbio)")))
    }
}

/// Exponent of a polynomially decaying schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecayExponent {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "1/3")]
    Third,
}

impl DecayExponent {
    pub fn value<T: Real>(self) -> T {
        match self {
            DecayExponent::Half => T::lit(0.5),
            DecayExponent::Third => T::one() / T::lit(3.0),
        }
    }
}

/// `η_t`, either constant or `k/(m+t)^e`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule<T> {
    Constant(T),
    Polynomial { k: T, m: T, exponent: DecayExponent },
}

impl<T: Real> StepSchedule<T> {
    pub fn eta_at(&self, t: usize) -> T {
        match *self {
            StepSchedule::Constant(eta) => eta,
            StepSchedule::Polynomial { k, m, exponent } => {
                let base = m + T::lit(t as f64);
                match exponent {
                    DecayExponent::Half => k / base.sqrt(),
                    DecayExponent::Third => k / base.cbrt(),
                }
            }
        }
    }

    /// Checks that every `η_t`, `t ≥ 0`, lies in `(0, 1]`. The schedule is
    /// nonincreasing, so `η_0` decides.
    pub fn validate(&self) -> Result<()> {
        if let StepSchedule::Polynomial { k, m, .. } = *self {
            if !(k > T::zero() && m > T::zero()) {
                return Err(Error::config("polynomial schedule requires k > 0 and m > 0"));
            }
        }
        let eta0 = self.eta_at(0);
        if !(eta0 > T::zero() && eta0 <= T::one()) {
            return Err(Error::config(format!("step schedule must satisfy 0 < eta_t <= 1 (eta_0 = {eta0})")));
        }
        Ok(())
    }
}

/// Momentum coefficients `(β, β̂, α, α̂, α̃)`, in the order they weight
/// `u, h, v, G, H`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentumCoeffs<T> {
    /// `c_i · η_t` for MSGBiO, `c_i · η_t²` for VR-MSGBiO.
    Scheduled([T; 5]),
    /// The listed weights at every iteration.
    Fixed([T; 5]),
}

impl<T: Real> MomentumCoeffs<T> {
    pub fn weights(&self, kind: SolverKind, eta: T) -> [T; 5] {
        match *self {
            MomentumCoeffs::Fixed(w) => w,
            MomentumCoeffs::Scheduled(c) => {
                let scale = if kind == SolverKind::VrMsgbio { eta * eta } else { eta };
                c.map(|ci| ci * scale)
            }
        }
    }

    /// Every weight must lie in `(0, 1]` over the whole schedule. Weights are
    /// nonincreasing in `t`, so `t = 0` decides.
    pub fn validate(&self, kind: SolverKind, schedule: &StepSchedule<T>) -> Result<()> {
        let raw = match self {
            MomentumCoeffs::Scheduled(c) | MomentumCoeffs::Fixed(c) => c,
        };
        if raw.iter().any(|c| !(*c > T::zero())) {
            return Err(Error::config("momentum coefficients must be positive"));
        }
        let w = self.weights(kind, schedule.eta_at(0));
        if let Some((i, wi)) = w.iter().enumerate().find(|(_, wi)| **wi > T::one()) {
            return Err(Error::config(format!(
                "momentum weight {} = {wi} exceeds 1 at t = 0 (coefficient c{})",
                COEFF_NAMES[i],
                i + 1
            )));
        }
        Ok(())
    }
}

const COEFF_NAMES: [&str; 5] = ["beta", "beta_hat", "alpha", "alpha_hat", "alpha_tilde"];

/// Everything a run needs besides the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig<T: Real> {
    /// Upper step `γ`.
    pub gamma: T,
    /// Lower step `λ`.
    pub lambda: T,
    pub schedule: StepSchedule<T>,
    /// Ignored by MGBiO.
    pub coeffs: MomentumCoeffs<T>,
    /// Minibatch size for each of `ξ` and `ζ`.
    pub batch: usize,
    /// Samples averaged into the initial stochastic estimators.
    pub init_batch: usize,
    /// Number of recorded iterates `T`.
    pub horizon: usize,
    pub seed: u64,
    pub clip: ClipSpec<T>,
    pub set: FeasibleSet<T>,
    /// `x_1`, `y_1` are standard normal scaled by this radius.
    pub init_radius: T,
}

impl<T: Real> SolverConfig<T> {
    pub fn validate(&self, kind: SolverKind, upper_dim: usize) -> Result<()> {
        if !(self.gamma > T::zero() && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be positive"));
        }
        if !(self.lambda > T::zero() && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be positive"));
        }
        if self.batch == 0 || self.init_batch == 0 {
            return Err(Error::config("batch and init_batch must be at least 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon T must be at least 1"));
        }
        if !(self.init_radius >= T::zero() && self.init_radius.is_finite()) {
            return Err(Error::config("init_radius must be nonnegative"));
        }
        self.schedule.validate()?;
        if kind.is_stochastic() {
            self.coeffs.validate(kind, &self.schedule)?;
        }
        self.clip.validate()?;
        self.set.validate(upper_dim)
    }
}

/// Solver state at iterate `t`, with estimators evaluated at `(x_t, y_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState<T: Real> {
    pub t: usize,
    pub x: DVector<T>,
    pub y: DVector<T>,
    pub u: DVector<T>,
    pub h: DVector<T>,
    pub v: DVector<T>,
    pub g_jac: DMatrix<T>,
    pub h_hess: SymEig<T>,
    pub w: DVector<T>,
    /// Per-sample stochastic oracle evaluations charged to the steps.
    pub samples_used: u64,
    /// Full-batch oracle evaluations (one per derivative block family).
    pub full_batch_evals: u64,
}

impl<T: Real> IterateState<T> {
    fn from_parts(t: usize, x: DVector<T>, y: DVector<T>, v: DVector<T>, parts: HyperGradParts<T>) -> Self {
        IterateState {
            t,
            x,
            y,
            u: parts.u,
            h: parts.h,
            v,
            g_jac: parts.g_jac,
            h_hess: parts.h_hess,
            w: parts.w,
            samples_used: 0,
            full_batch_evals: 0,
        }
    }

    /// Largest violation of the clipping window and feasibility, or zero.
    pub fn invariant_violation(&self, clip: &ClipSpec<T>, set: &FeasibleSet<T>) -> T {
        let tol = T::lit(1e-10);
        let mut worst = (self.h.norm() - clip.c_fy * (T::one() + tol)).max(T::zero());
        if !self.g_jac.is_empty() {
            worst = worst.max(spectral::spectral_norm(&self.g_jac) - clip.c_gxy * (T::one() + tol));
        }
        for theta in self.h_hess.eigenvalues().iter() {
            worst = worst.max(clip.mu - *theta).max(*theta - clip.l_g);
        }
        let feasible_tol = T::symmetry_tol() * T::one().max(self.x.norm());
        worst.max(set.violation(&self.x) - feasible_tol)
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.y.iter()).chain(self.w.iter()).chain(self.v.iter()).all(|v| v.is_finite())
    }
}

fn draw_point<T: Real>(rng: &mut StreamRng, n: usize, radius: T) -> DVector<T> {
    DVector::from_iterator(n, rng::normals(rng, n).into_iter().map(|z| T::lit(z) * radius))
}

/// Initial point `(x_1, y_1)` from the `init` substream; `x_1` is projected
/// onto the feasible set.
pub fn initial_point<T: Real, O: BilevelOracle<T> + ?Sized>(oracle: &O, cfg: &SolverConfig<T>) -> (DVector<T>, DVector<T>) {
    let mut rng = rng::substream(cfg.seed, INIT_STREAM);
    let x = draw_point(&mut rng, oracle.upper_dim(), cfg.init_radius);
    let y = draw_point(&mut rng, oracle.lower_dim(), cfg.init_radius);
    (cfg.set.project(&x), y)
}

/// Full-batch estimators at `(x, y)`.
fn exact_state<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    t: usize,
    x: DVector<T>,
    y: DVector<T>,
    clip: &ClipSpec<T>,
) -> Result<IterateState<T>> {
    let up = oracle.upper_derivs(&x, &y, Batch::Full)?;
    let lo = oracle.lower_derivs(&x, &y, Batch::Full)?;
    let parts = HyperGradParts::from_raw(up.grad_x, &up.grad_y, &lo.jac_xy, &lo.hess_yy, clip)?;
    Ok(IterateState::from_parts(t, x, y, lo.grad_y, parts))
}

/// State at `t = 1`. MGBiO starts from exact estimators; the stochastic
/// solvers average `init_batch` fresh samples per level. The minibatch
/// generator is advanced by the initial draw.
pub fn init_state<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig<T>,
    kind: SolverKind,
    minibatch_rng: &mut StreamRng,
) -> Result<IterateState<T>> {
    let (x, y) = initial_point(oracle, cfg);
    if kind == SolverKind::Mgbio {
        let mut state = exact_state(oracle, 1, x, y, &cfg.clip)?;
        state.full_batch_evals = 2;
        return Ok(state);
    }
    let xi = rng::minibatch(minibatch_rng, oracle.upper_samples(), cfg.init_batch);
    let zeta = rng::minibatch(minibatch_rng, oracle.lower_samples(), cfg.init_batch);
    let up = oracle.upper_derivs(&x, &y, Batch::Indices(&xi))?;
    let lo = oracle.lower_derivs(&x, &y, Batch::Indices(&zeta))?;
    let parts = HyperGradParts::from_raw(up.grad_x, &up.grad_y, &lo.jac_xy, &lo.hess_yy, &cfg.clip)?;
    Ok(IterateState::from_parts(1, x, y, lo.grad_y, parts))
}

/// Samples charged by [`init_state`] (reported outside the per-row counter).
pub fn init_samples<T: Real, O: BilevelOracle<T> + ?Sized>(oracle: &O, cfg: &SolverConfig<T>, kind: SolverKind) -> u64 {
    if kind == SolverKind::Mgbio {
        return 0;
    }
    (cfg.init_batch.min(oracle.upper_samples()) + cfg.init_batch.min(oracle.lower_samples())) as u64
}

/// Lines 6–7 of every solver: the relaxed proximal step in `x` and the
/// relaxed gradient step in `y`.
fn advance<T: Real>(state: &IterateState<T>, cfg: &SolverConfig<T>, eta: T) -> Result<(DVector<T>, DVector<T>)> {
    let x_tilde = hypergrad::prox_step(&state.x, &state.w, cfg.gamma, &cfg.set)?;
    let x_next = &state.x + (x_tilde - &state.x) * eta;
    let y_tilde = &state.y - &state.v * cfg.lambda;
    let y_next = &state.y + (y_tilde - &state.y) * eta;
    Ok((x_next, y_next))
}

/// One MGBiO step from `state` (estimators exact at `(x_t, y_t)`).
pub fn mgbio_step<T: Real, O: BilevelOracle<T> + ?Sized>(
    state: &IterateState<T>,
    oracle: &O,
    cfg: &SolverConfig<T>,
) -> Result<IterateState<T>> {
    let eta = cfg.schedule.eta_at(state.t);
    let (x, y) = advance(state, cfg, eta)?;
    let mut next = exact_state(oracle, state.t + 1, x, y, &cfg.clip)?;
    next.samples_used = state.samples_used;
    next.full_batch_evals = state.full_batch_evals + 2;
    Ok(next)
}

fn combine_vec<T: Real>(weight: T, fresh: &DVector<T>, old: &DVector<T>) -> DVector<T> {
    fresh * weight + old * (T::one() - weight)
}

fn combine_mat<T: Real>(weight: T, fresh: &DMatrix<T>, old: &DMatrix<T>) -> DMatrix<T> {
    fresh * weight + old * (T::one() - weight)
}

fn draw_batches<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig<T>,
    rng: &mut StreamRng,
) -> (Vec<usize>, Vec<usize>) {
    let xi = rng::minibatch(rng, oracle.upper_samples(), cfg.batch);
    let zeta = rng::minibatch(rng, oracle.lower_samples(), cfg.batch);
    (xi, zeta)
}

/// One MSGBiO step: momentum averages of fresh minibatch derivatives at the
/// new point, with projections applied after each combination.
pub fn msgbio_step<T: Real, O: BilevelOracle<T> + ?Sized>(
    state: &IterateState<T>,
    oracle: &O,
    cfg: &SolverConfig<T>,
    rng: &mut StreamRng,
) -> Result<IterateState<T>> {
    let eta = cfg.schedule.eta_at(state.t);
    let [beta, beta_hat, alpha, alpha_hat, alpha_tilde] = cfg.coeffs.weights(SolverKind::Msgbio, eta);
    let (x, y) = advance(state, cfg, eta)?;
    let (xi, zeta) = draw_batches(oracle, cfg, rng);
    let up = oracle.upper_derivs(&x, &y, Batch::Indices(&xi))?;
    let lo = oracle.lower_derivs(&x, &y, Batch::Indices(&zeta))?;

    let u = combine_vec(beta, &up.grad_x, &state.u);
    let h = spectral::project_ball(&combine_vec(beta_hat, &up.grad_y, &state.h), cfg.clip.c_fy)?;
    let v = combine_vec(alpha, &lo.grad_y, &state.v);
    let g_jac = spectral::project_spectral_norm(&combine_mat(alpha_hat, &lo.jac_xy, &state.g_jac), cfg.clip.c_gxy)?;
    let h_mix = combine_mat(alpha_tilde, &lo.hess_yy, &state.h_hess.reconstruct());
    let h_hess = spectral::clamp_spectrum(&h_mix, cfg.clip.mu, cfg.clip.l_g)?;
    let parts = HyperGradParts::assemble(u, h, g_jac, h_hess)?;

    let mut next = IterateState::from_parts(state.t + 1, x, y, v, parts);
    next.samples_used = state.samples_used + (xi.len() + zeta.len()) as u64;
    next.full_batch_evals = state.full_batch_evals;
    Ok(next)
}

/// One VR-MSGBiO step: each estimator is the fresh minibatch derivative at
/// the new point plus `(1 − weight)` times its previous value minus the same
/// minibatch derivative at the old point.
pub fn vr_msgbio_step<T: Real, O: BilevelOracle<T> + ?Sized>(
    state: &IterateState<T>,
    oracle: &O,
    cfg: &SolverConfig<T>,
    rng: &mut StreamRng,
) -> Result<IterateState<T>> {
    let eta = cfg.schedule.eta_at(state.t);
    let [beta, beta_hat, alpha, alpha_hat, alpha_tilde] = cfg.coeffs.weights(SolverKind::VrMsgbio, eta);
    let (x, y) = advance(state, cfg, eta)?;
    let (xi, zeta) = draw_batches(oracle, cfg, rng);
    let up_new = oracle.upper_derivs(&x, &y, Batch::Indices(&xi))?;
    let lo_new = oracle.lower_derivs(&x, &y, Batch::Indices(&zeta))?;
    let up_old = oracle.upper_derivs(&state.x, &state.y, Batch::Indices(&xi))?;
    let lo_old = oracle.lower_derivs(&state.x, &state.y, Batch::Indices(&zeta))?;
    let one = T::one();

    let u = &up_new.grad_x + (&state.u - &up_old.grad_x) * (one - beta);
    let h_raw = &up_new.grad_y + (&state.h - &up_old.grad_y) * (one - beta_hat);
    let h = spectral::project_ball(&h_raw, cfg.clip.c_fy)?;
    let v = &lo_new.grad_y + (&state.v - &lo_old.grad_y) * (one - alpha);
    let g_raw = &lo_new.jac_xy + (&state.g_jac - &lo_old.jac_xy) * (one - alpha_hat);
    let g_jac = spectral::project_spectral_norm(&g_raw, cfg.clip.c_gxy)?;
    let h_raw = &lo_new.hess_yy + (state.h_hess.reconstruct() - &lo_old.hess_yy) * (one - alpha_tilde);
    let h_hess = spectral::clamp_spectrum(&h_raw, cfg.clip.mu, cfg.clip.l_g)?;
    let parts = HyperGradParts::assemble(u, h, g_jac, h_hess)?;

    let mut next = IterateState::from_parts(state.t + 1, x, y, v, parts);
    next.samples_used = state.samples_used + 2 * (xi.len() + zeta.len()) as u64;
    next.full_batch_evals = state.full_batch_evals;
    Ok(next)
}

/// Dispatches one step of `kind`.
pub fn step<T: Real, O: BilevelOracle<T> + ?Sized>(
    kind: SolverKind,
    state: &IterateState<T>,
    oracle: &O,
    cfg: &SolverConfig<T>,
    rng: &mut StreamRng,
) -> Result<IterateState<T>> {
    match kind {
        SolverKind::Mgbio => mgbio_step(state, oracle, cfg),
        SolverKind::Msgbio => msgbio_step(state, oracle, cfg, rng),
        SolverKind::VrMsgbio => vr_msgbio_step(state, oracle, cfg, rng),
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    /// The iterate at `t` became non-finite; rows stop at `t − 1`.
    NonFinite { t: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput<T: Real> {
    pub solver: SolverKind,
    pub records: Vec<TraceRecord>,
    pub final_state: IterateState<T>,
    /// Uniformly random output index in `1..=T` drawn from the run's seed.
    pub output_index: usize,
    /// `x_{output_index}`.
    pub output_x: DVector<T>,
    pub warnings: Vec<String>,
    pub init_samples: u64,
    pub status: RunStatus,
}

/// Progress hook: called after every recorded row.
pub type Callback<'a> = &'a mut dyn FnMut(&TraceRecord);

/// Runs `kind` for `cfg.horizon` recorded iterates `t = 1..=T` (so `T − 1`
/// steps), computing one [`TraceRecord`] per iterate.
///
/// Step-size admissibility against `constants` only produces warnings.
pub fn run<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig<T>,
    kind: SolverKind,
    diag: &DiagOptions<T>,
    constants: Option<&ConstantsReport>,
    mut callback: Option<Callback<'_>>,
) -> Result<RunOutput<T>> {
    cfg.validate(kind, oracle.upper_dim())?;
    let mut warnings = Vec::new();
    if let Some(report) = constants {
        warnings.extend(report.admissibility_warnings(kind, cfg.gamma.to_f64_lossy(), cfg.lambda.to_f64_lossy()));
    }
    if kind.is_stochastic() && cfg.batch > oracle.upper_samples().min(oracle.lower_samples()) {
        warnings.push(format!(
            "batch {} exceeds a sample pool (upper {}, lower {}); the whole pool is used",
            cfg.batch,
            oracle.upper_samples(),
            oracle.lower_samples()
        ));
    }

    let mut out_rng = rng::substream(cfg.seed, OUTPUT_INDEX_STREAM);
    let output_index = out_rng.random_range(1..=cfg.horizon);
    let mut mb_rng = rng::substream(cfg.seed, MINIBATCH_STREAM);
    let mut probe = Probe::new(diag.clone());

    let mut state = init_state(oracle, cfg, kind, &mut mb_rng)?;
    let mut records = Vec::with_capacity(cfg.horizon);
    let mut output_x = state.x.clone();
    let mut status = RunStatus::Completed;
    if !state.is_finite() {
        return Err(Error::NonFinite { t: 1 });
    }

    loop {
        let record = probe.record(oracle, &state, cfg, kind)?;
        if let Some(cb) = callback.as_mut() {
            cb(&record);
        }
        records.push(record);
        if state.t == output_index {
            output_x = state.x.clone();
        }
        if state.t >= cfg.horizon {
            break;
        }
        let next = step(kind, &state, oracle, cfg, &mut mb_rng);
        match next {
            Ok(next) if next.is_finite() => state = next,
            Ok(_) => {
                status = RunStatus::NonFinite { t: state.t + 1 };
                break;
            }
            Err(e) if e.is_non_finite() => {
                status = RunStatus::NonFinite { t: state.t + 1 };
                break;
            }
            Err(e) => return Err(e),
        }
    }
    warnings.extend(probe.take_warnings());

    Ok(RunOutput {
        solver: kind,
        records,
        final_state: state,
        output_index,
        output_x,
        warnings,
        init_samples: init_samples(oracle, cfg, kind),
        status,
    })
}

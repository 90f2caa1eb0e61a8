//! Constants calculator, per-iteration metrics, Lyapunov functions, PL
//! residual and convergence-rate fitting.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hypergrad::{self, InnerOutcome, InnerSolve};
use crate::problems::{Batch, BilevelOracle};
use crate::solvers::{self, IterateState, SolverConfig, SolverKind};
use crate::spectral::{self, ClipSpec};
use crate::trace_io::rng;
use rand::Rng;
use crate::{Error, Real, Result};

// ---------------------------------------------------------------------------
// Constants

/// Problem constants the convergence theory is stated in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConstants {
    /// Bound on `‖∇_y f‖` at lower solutions.
    pub c_fy: f64,
    /// Bound on `‖∇²_xy g‖`.
    pub c_gxy: f64,
    /// Bound on `‖∇_y g‖` at lower solutions; see [`ProblemConstants::c_gy_or_default`].
    #[serde(default)]
    pub c_gy: Option<f64>,
    /// PL constant.
    pub mu: f64,
    /// Smoothness of `f`.
    pub l_f: f64,
    /// Smoothness of `g`.
    pub l_g: f64,
    /// Lipschitz constant of `∇²_xy g` (zero for quadratics).
    pub l_gxy: f64,
    /// Lipschitz constant of `∇²_yy g` (zero for quadratics).
    pub l_gyy: f64,
    /// True when the values are sampled lower bounds rather than exact.
    #[serde(default)]
    pub sampled: bool,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("c_fy", self.c_fy),
            ("c_gxy", self.c_gxy),
            ("mu", self.mu),
            ("l_f", self.l_f),
            ("l_g", self.l_g),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("constant {name} must be positive and finite (got {v})")));
            }
        }
        for (name, v) in [("l_gxy", self.l_gxy), ("l_gyy", self.l_gyy)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("constant {name} must be nonnegative and finite (got {v})")));
            }
        }
        if let Some(c) = self.c_gy {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::config("constant c_gy must be nonnegative and finite"));
            }
        }
        if self.mu > self.l_g {
            return Err(Error::config(format!("mu = {} exceeds l_g = {}", self.mu, self.l_g)));
        }
        Ok(())
    }

    /// `C_gy`, defaulting to `C_fy·L_g/L_f` (heuristic) when unspecified.
    pub fn c_gy_or_default(&self) -> (f64, bool) {
        match self.c_gy {
            Some(c) => (c, false),
            None => (self.c_fy * self.l_g / self.l_f, true),
        }
    }

    /// Clip spec with the same radii and spectral window.
    pub fn clip_spec<T: Real>(&self) -> Result<ClipSpec<T>> {
        ClipSpec::new(T::lit(self.c_fy), T::lit(self.c_gxy), T::lit(self.mu), T::lit(self.l_g))
    }
}

/// Admissible interval `[lo, hi]` for one momentum coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoeffWindow {
    pub lo: f64,
    pub hi: f64,
    pub empty: bool,
}

impl CoeffWindow {
    fn new(lo: f64, hi: f64) -> Self {
        CoeffWindow { lo, hi, empty: lo > hi }
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.lo && c <= self.hi
    }
}

/// Step-size conditions of the deterministic theorem (constant `η`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicBounds {
    pub eta: f64,
    /// `1/(2 L_g η)`.
    pub lambda_max: f64,
    /// `min(1/(2 L_F η), λ μ²/(16 L̂²))` at `λ = lambda_max`.
    pub gamma_max: f64,
    /// `λ μ/(8 L_G)` at `λ = lambda_max`, required by the PL-residual
    /// descent lemma the proof relies on; reported separately.
    pub gamma_max_residual: f64,
}

/// Step-size and coefficient conditions of a stochastic theorem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticBounds {
    pub k: f64,
    pub m: f64,
    pub lambda_max: f64,
    /// Smallest `γ` cap evaluated at `λ = lambda_max`.
    pub gamma_max: f64,
    /// Windows for `c1..c5`.
    pub windows: [CoeffWindow; 5],
    /// `m` is large enough that `η_0 ≤ 1`.
    pub m_admissible: bool,
}

/// Derived constants and admissible parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub constants: ProblemConstants,
    pub kappa: f64,
    pub l_y: f64,
    pub l_f_upper: f64,
    pub l_g_upper: f64,
    pub l_hat: f64,
    pub l_breve: f64,
    pub l_check: f64,
    pub c_gy: f64,
    pub c_gy_heuristic: bool,
    pub mgbio: DeterministicBounds,
    pub msgbio: StochasticBounds,
    pub vr_msgbio: StochasticBounds,
}

/// Constants of the smoothness lemma, the estimator-bias lemma and the
/// step-size conditions of all three convergence theorems.
///
/// `eta` is the constant step of MGBiO; `(k, m)` parametrize the decaying
/// schedules `k/(m+t)^{1/2}` (MSGBiO) and `k/(m+t)^{1/3}` (VR-MSGBiO).
pub fn constants_report(pc: &ProblemConstants, eta: f64, k: f64, m: f64) -> Result<ConstantsReport> {
    pc.validate()?;
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(Error::config(format!("eta must lie in (0, 1], got {eta}")));
    }
    if !(k > 0.0 && m > 0.0) {
        return Err(Error::config("schedule parameters k and m must be positive"));
    }
    let ProblemConstants {
        c_fy,
        c_gxy,
        mu,
        l_f,
        l_g,
        l_gxy,
        l_gyy,
        ..
    } = *pc;
    let (c_gy, c_gy_heuristic) = pc.c_gy_or_default();
    let kappa = c_gxy / mu;
    let lip_inner = c_gxy * l_gyy / (mu * mu) + l_gxy / mu;
    let l_y = lip_inner * (1.0 + kappa);
    let l_f_upper = (l_f + l_f * kappa + c_fy * lip_inner) * (1.0 + kappa);
    let l_g_upper = (l_g + l_g * kappa + c_gy * lip_inner) * (1.0 + kappa);
    let l_hat_sq = 4.0
        * (l_f * l_f
            + l_gxy * l_gxy * c_fy * c_fy / (mu * mu)
            + l_gyy * l_gyy * c_gxy * c_gxy * c_fy * c_fy / mu.powi(4)
            + l_f * l_f * c_gxy * c_gxy / (mu * mu));
    let l_breve_sq = l_f * l_f
        + l_f * l_f / (kappa * kappa)
        + mu * mu * l_gxy * l_gxy / (c_fy * c_fy)
        + mu * mu * l_gyy * l_gyy / (c_fy * c_fy * kappa * kappa);
    let l_check_sq = 2.0 * l_f * l_f + l_gxy * l_gxy + l_gyy * l_gyy;

    let base = ConstantsReport {
        constants: *pc,
        kappa,
        l_y,
        l_f_upper,
        l_g_upper,
        l_hat: l_hat_sq.sqrt(),
        l_breve: l_breve_sq.sqrt(),
        l_check: l_check_sq.sqrt(),
        c_gy,
        c_gy_heuristic,
        mgbio: DeterministicBounds {
            eta,
            lambda_max: 0.0,
            gamma_max: 0.0,
            gamma_max_residual: 0.0,
        },
        msgbio: StochasticBounds {
            k,
            m,
            lambda_max: 0.0,
            gamma_max: 0.0,
            windows: [CoeffWindow::new(0.0, 0.0); 5],
            m_admissible: false,
        },
        vr_msgbio: StochasticBounds {
            k,
            m,
            lambda_max: 0.0,
            gamma_max: 0.0,
            windows: [CoeffWindow::new(0.0, 0.0); 5],
            m_admissible: false,
        },
    };
    let mut report = base;

    let lambda1 = 1.0 / (2.0 * l_g * eta);
    report.mgbio = DeterministicBounds {
        eta,
        lambda_max: lambda1,
        gamma_max: report.gamma_max(SolverKind::Mgbio, lambda1),
        gamma_max_residual: lambda1 * mu / (8.0 * l_g_upper),
    };

    let sqrt_m = m.sqrt();
    let hi2 = sqrt_m / k;
    let c_ratio = 10.0 * c_fy * c_fy / (mu * mu);
    let lows2 = [10.0, 10.0 * kappa * kappa, 1.0, c_ratio, c_ratio * kappa * kappa];
    let lambda2 = (sqrt_m / (2.0 * l_g * k)).min(1.0 / (4.0 * l_g));
    report.msgbio = StochasticBounds {
        k,
        m,
        lambda_max: lambda2,
        gamma_max: report.gamma_max(SolverKind::Msgbio, lambda2),
        windows: lows2.map(|lo| CoeffWindow::new(lo, hi2)),
        m_admissible: m >= k * k,
    };

    let cbrt_m = m.cbrt();
    let hi3 = cbrt_m / k;
    let shift = 2.0 / (3.0 * k.powi(3));
    let lows3 = lows2.map(|lo| lo + shift);
    let lambda3 = (1.0 / (4.0 * 2f64.sqrt() * l_g)).min(cbrt_m / (2.0 * l_g * k));
    report.vr_msgbio = StochasticBounds {
        k,
        m,
        lambda_max: lambda3,
        gamma_max: report.gamma_max(SolverKind::VrMsgbio, lambda3),
        windows: lows3.map(|lo| CoeffWindow::new(lo, hi3)),
        m_admissible: m >= 2.0 && m >= k.powi(3),
    };
    Ok(report)
}

impl ConstantsReport {
    /// Largest admissible `γ` for `kind` at lower step `λ`.
    pub fn gamma_max(&self, kind: SolverKind, lambda: f64) -> f64 {
        let pc = &self.constants;
        let (mu, l_g) = (pc.mu, pc.l_g);
        let common = lambda * mu * mu / (16.0 * self.l_hat * self.l_hat);
        match kind {
            SolverKind::Mgbio => (1.0 / (2.0 * self.l_f_upper * self.mgbio.eta)).min(common),
            SolverKind::Msgbio => {
                let (k, m) = (self.msgbio.k, self.msgbio.m);
                let lb2 = self.l_breve * self.l_breve;
                [
                    m.sqrt() / (2.0 * self.l_f_upper * k),
                    common,
                    5f64.sqrt() / (4.0 * self.l_breve),
                    1.0 / (32.0 * l_g * l_g * lambda),
                    5.0 / (8.0 * lb2 * lambda),
                ]
                .into_iter()
                .fold(f64::INFINITY, f64::min)
            }
            SolverKind::VrMsgbio => {
                let (k, m) = (self.vr_msgbio.k, self.vr_msgbio.m);
                let lc2 = self.l_check * self.l_check;
                [
                    m.cbrt() / (2.0 * self.l_f_upper * k),
                    common,
                    1.0 / (8.0 * self.l_check),
                    1.0 / (64.0 * l_g * l_g * lambda),
                    1.0 / (32.0 * lc2 * lambda),
                    lambda * mu / (8.0 * self.l_g_upper),
                ]
                .into_iter()
                .fold(f64::INFINITY, f64::min)
            }
        }
    }

    pub fn lambda_max(&self, kind: SolverKind) -> f64 {
        match kind {
            SolverKind::Mgbio => self.mgbio.lambda_max,
            SolverKind::Msgbio => self.msgbio.lambda_max,
            SolverKind::VrMsgbio => self.vr_msgbio.lambda_max,
        }
    }

    /// Human-readable notes for every violated step-size condition.
    pub fn admissibility_warnings(&self, kind: SolverKind, gamma: f64, lambda: f64) -> Vec<String> {
        let mut out = Vec::new();
        let lambda_max = self.lambda_max(kind);
        if lambda > lambda_max {
            out.push(format!("{kind}: lambda = {lambda:e} exceeds the admissible bound {lambda_max:e}"));
        }
        let gamma_max = self.gamma_max(kind, lambda);
        if gamma > gamma_max {
            out.push(format!("{kind}: gamma = {gamma:e} exceeds the admissible bound {gamma_max:e} at this lambda"));
        }
        if let Some(bounds) = match kind {
            SolverKind::Mgbio => None,
            SolverKind::Msgbio => Some(&self.msgbio),
            SolverKind::VrMsgbio => Some(&self.vr_msgbio),
        } {
            for (i, w) in bounds.windows.iter().enumerate() {
                if w.empty {
                    out.push(format!("{kind}: coefficient window for c{} is empty ([{:e}, {:e}])", i + 1, w.lo, w.hi));
                }
            }
        }
        out
    }
}

/// `4√R/√(3Tγη)`: bound on the mean gradient-mapping norm of MGBiO.
pub fn mgbio_bound(r: f64, horizon: usize, gamma: f64, eta: f64) -> f64 {
    4.0 * r.sqrt() / (3.0 * horizon as f64 * gamma * eta).sqrt()
}

/// `M` of the MSGBiO theorem.
#[allow(clippy::too_many_arguments)]
pub fn msgbio_m(r: f64, k: f64, m: f64, gamma: f64, lambda: f64, sigma2: f64, horizon: usize) -> f64 {
    let log = (m + horizon as f64).ln();
    4.0 * r / (k * gamma)
        + 16.0 * sigma2 / k
        + 4.0 * lambda * sigma2 / (gamma * k)
        + 16.0 * m * sigma2 * log / k
        + 4.0 * m * lambda * sigma2 * log / (k * gamma)
}

/// `√(2M) m^{1/4}/√T + √(2M)/T^{1/4}`.
pub fn msgbio_bound(big_m: f64, m: f64, horizon: usize) -> f64 {
    let t = horizon as f64;
    let s = (2.0 * big_m).sqrt();
    s * m.powf(0.25) / t.sqrt() + s / t.powf(0.25)
}

/// `M̆` of the VR-MSGBiO theorem; `c` holds `c1..c5`.
#[allow(clippy::too_many_arguments)]
pub fn vr_msgbio_m(r: f64, k: f64, m: f64, gamma: f64, lambda: f64, sigma2: f64, c: [f64; 5], horizon: usize) -> f64 {
    let c_hat_sq = c[0] * c[0] + c[1] * c[1] + c[3] * c[3] + c[4] * c[4];
    let m3 = m.cbrt();
    4.0 * r / (k * gamma)
        + 16.0 * sigma2 * m3 / (k * k)
        + 4.0 * lambda * sigma2 * m3 / (gamma * k * k)
        + (2.0 * k * k * c_hat_sq * sigma2 + 2.0 * k * k * c[2] * c[2] * lambda * sigma2 / gamma) * (m + horizon as f64).ln()
}

/// `√(2M̆) m^{1/6}/√T + √(2M̆)/T^{1/3}`.
pub fn vr_msgbio_bound(big_m: f64, m: f64, horizon: usize) -> f64 {
    let t = horizon as f64;
    let s = (2.0 * big_m).sqrt();
    s * m.powf(1.0 / 6.0) / t.sqrt() + s / t.cbrt()
}

// ---------------------------------------------------------------------------
// Measured constants

fn block_norm(top_left: &DMatrix<f64>, top_right: &DMatrix<f64>, bottom_right: &DMatrix<f64>) -> f64 {
    let (d, p) = top_right.shape();
    let mut m = DMatrix::zeros(d + p, d + p);
    m.view_mut((0, 0), (d, d)).copy_from(top_left);
    m.view_mut((0, d), (d, p)).copy_from(top_right);
    m.view_mut((d, 0), (p, d)).copy_from(&top_right.transpose());
    m.view_mut((d, d), (p, p)).copy_from(bottom_right);
    spectral::spectral_norm(&m)
}

/// Constants of `f = ½xᵀPx + xᵀR¹y`, `g = ½yᵀQy + xᵀR²y` restricted to
/// `‖x‖ ≤ x_radius`, with PL constant `mu`.
///
/// `L_f` and `L_g` are the spectral norms of the joint Hessians, `C_gxy =
/// ‖R²‖`, `C_fy = ‖R¹‖·x_radius`, and the Hessians are constant so
/// `L_gxy = L_gyy = 0`.
pub fn quadratic_constants(
    p: &DMatrix<f64>,
    r1: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r2: &DMatrix<f64>,
    x_radius: f64,
    mu: f64,
) -> ProblemConstants {
    let (d, dim_p) = r1.shape();
    let zero_pp = DMatrix::zeros(dim_p, dim_p);
    let zero_dd = DMatrix::zeros(d, d);
    let c_gxy = spectral::spectral_norm(r2).max(f64::MIN_POSITIVE);
    let l_g = block_norm(&zero_dd, r2, q).max(mu);
    ProblemConstants {
        c_fy: (spectral::spectral_norm(r1) * x_radius).max(f64::MIN_POSITIVE),
        c_gxy,
        c_gy: Some(0.0),
        mu,
        l_f: block_norm(p, r1, &zero_pp),
        l_g,
        l_gxy: 0.0,
        l_gyy: 0.0,
        sampled: false,
    }
}

/// Sampled lower bounds on the constants of a general oracle over a box of
/// half-width `radius` around `(x0, y0)`: Lipschitz ratios over random
/// pairs, derivative norms at random points, and the smallest Hessian
/// eigenvalue (floored at `mu_floor`) for `μ`.
pub fn sampled_constants<T: Real, O: BilevelOracle<T> + ?Sized, R: Rng + ?Sized>(
    oracle: &O,
    x0: &DVector<T>,
    y0: &DVector<T>,
    radius: f64,
    pairs: usize,
    mu_floor: f64,
    rng: &mut R,
) -> Result<ProblemConstants> {
    let (d, p) = (oracle.upper_dim(), oracle.lower_dim());
    let mut perturb = |base: &DVector<T>, n: usize| -> DVector<T> {
        base + DVector::from_iterator(n, (0..n).map(|_| T::lit(rng::uniform(rng, -radius, radius))))
    };
    let mut pts = Vec::with_capacity(2 * pairs);
    for _ in 0..2 * pairs {
        let x = perturb(x0, d);
        let y = perturb(y0, p);
        pts.push((x, y));
    }
    struct Eval {
        joint: DVector<f64>,
        grad_f_joint: DVector<f64>,
        grad_g_joint_y: DVector<f64>,
        grad_g_x: DVector<f64>,
        jac: DMatrix<f64>,
        hess: DMatrix<f64>,
    }
    let to64 = |v: &DVector<T>| v.map(|a| a.to_f64_lossy());
    let to64m = |m: &DMatrix<T>| m.map(|a| a.to_f64_lossy());
    let mut evals = Vec::with_capacity(pts.len());
    for (x, y) in &pts {
        let up = oracle.upper_derivs(x, y, Batch::Full)?;
        let lo = oracle.lower_derivs(x, y, Batch::Full)?;
        let mut joint = to64(x).as_slice().to_vec();
        joint.extend(to64(y).iter());
        let mut gf = to64(&up.grad_x).as_slice().to_vec();
        gf.extend(to64(&up.grad_y).iter());
        evals.push(Eval {
            joint: DVector::from_vec(joint),
            grad_f_joint: DVector::from_vec(gf),
            grad_g_joint_y: to64(&lo.grad_y),
            grad_g_x: to64(&up.grad_y),
            jac: to64m(&lo.jac_xy),
            hess: to64m(&lo.hess_yy),
        });
    }
    let (mut l_f, mut l_g, mut l_gxy, mut l_gyy) = (0f64, 0f64, 0f64, 0f64);
    for pair in evals.chunks(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dist = (&a.joint - &b.joint).norm();
        if dist == 0.0 {
            continue;
        }
        l_f = l_f.max((&a.grad_f_joint - &b.grad_f_joint).norm() / dist);
        // ∇_y g varies with both blocks; its joint Jacobian is [∇²_xy g; ∇²_yy g].
        l_g = l_g.max((&a.grad_g_joint_y - &b.grad_g_joint_y).norm() / dist);
        l_gxy = l_gxy.max(spectral::spectral_norm(&(&a.jac - &b.jac)) / dist);
        l_gyy = l_gyy.max(spectral::spectral_norm(&(&a.hess - &b.hess)) / dist);
    }
    let mut c_fy = 0f64;
    let mut c_gxy = 0f64;
    let mut mu = f64::INFINITY;
    let mut l_g_spec = 0f64;
    for e in &evals {
        c_fy = c_fy.max(e.grad_g_x.norm());
        c_gxy = c_gxy.max(spectral::spectral_norm(&e.jac));
        let eig = spectral::sym_eig(&e.hess)?;
        mu = mu.min(eig.min_eigenvalue());
        l_g_spec = l_g_spec.max(eig.max_eigenvalue().abs()).max(c_gxy);
    }
    let mu = mu.max(mu_floor);
    let tiny = f64::MIN_POSITIVE;
    Ok(ProblemConstants {
        c_fy: c_fy.max(tiny),
        c_gxy: c_gxy.max(tiny),
        c_gy: None,
        mu,
        l_f: l_f.max(tiny),
        l_g: l_g.max(l_g_spec).max(mu),
        l_gxy,
        l_gyy,
        sampled: true,
    })
}

// ---------------------------------------------------------------------------
// Trace rows

/// One row of a solver trace; metrics refer to the iterate `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: u64,
    /// `η_t`, the relaxation used by the step leaving `x_t`.
    pub eta: f64,
    /// `‖𝒢(x_t, w_t, γ)‖`.
    pub grad_map_norm: f64,
    /// `‖𝒢(x_t, ∇F(x_t), γ)‖` (equal to `‖∇F(x_t)‖` when unconstrained).
    pub true_grad_norm: Option<f64>,
    /// `‖w_t − ∇F(x_t)‖`.
    pub hyper_err: Option<f64>,
    /// `f(x_t, y_t)` over all upper samples.
    pub f_val: f64,
    /// `g(x_t, y_t) − min_y g(x_t, y)`.
    pub g_gap: Option<f64>,
    /// `Ω_t` (MGBiO), `Φ_t` (MSGBiO) or `Γ_t` (VR-MSGBiO).
    pub lyapunov: Option<f64>,
    pub samples_used: u64,
    pub wall_nanos: Option<u64>,
}

/// Trace metrics addressable by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Eta,
    GradMapNorm,
    TrueGradNorm,
    HyperErr,
    FVal,
    GGap,
    Lyapunov,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Eta,
        Metric::GradMapNorm,
        Metric::TrueGradNorm,
        Metric::HyperErr,
        Metric::FVal,
        Metric::GGap,
        Metric::Lyapunov,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Eta => "eta",
            Metric::GradMapNorm => "grad_map_norm",
            Metric::TrueGradNorm => "true_grad_norm",
            Metric::HyperErr => "hyper_err",
            Metric::FVal => "f_val",
            Metric::GGap => "g_gap",
            Metric::Lyapunov => "lyapunov",
        }
    }

    pub fn of(self, r: &TraceRecord) -> Option<f64> {
        match self {
            Metric::Eta => Some(r.eta),
            Metric::GradMapNorm => Some(r.grad_map_norm),
            Metric::TrueGradNorm => r.true_grad_norm,
            Metric::HyperErr => r.hyper_err,
            Metric::FVal => Some(r.f_val),
            Metric::GGap => r.g_gap,
            Metric::Lyapunov => r.lyapunov,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Metric::ALL.iter().map(|m| m.name()).collect();
            Error::config(format!("unknown metric `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// Where lower-level minima for `g_gap` and the Lyapunov functions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Closed form when the oracle has one, otherwise omitted.
    Auto,
    /// Closed form, else gradient descent on the lower level.
    InnerSolve,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagOptions<T> {
    /// Rows between evaluations of the estimator-error terms of `Φ`/`Γ`.
    pub diag_stride: usize,
    pub reference: ReferenceMode,
    pub inner: InnerSolve<T>,
    /// Fill `wall_nanos`; off by default so traces are reproducible.
    pub record_wall_time: bool,
    /// Record closed-form hyper-gradient metrics when the oracle has them.
    pub oracle: bool,
}

impl<T: Real> Default for DiagOptions<T> {
    fn default() -> Self {
        DiagOptions {
            diag_stride: 10,
            reference: ReferenceMode::Auto,
            inner: InnerSolve::default(),
            record_wall_time: false,
            oracle: true,
        }
    }
}

/// Lower-level minimizer and minimum at `x`, if a reference is available.
pub fn lower_reference<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    warm: &DVector<T>,
    mode: ReferenceMode,
    inner: &InnerSolve<T>,
) -> Result<Option<(DVector<T>, T)>> {
    if mode == ReferenceMode::Off {
        return Ok(None);
    }
    if let Some(y_star) = oracle.exact_lower(x) {
        let y_star = y_star?;
        let g_min = oracle.g(x, &y_star, Batch::Full)?;
        return Ok(Some((y_star, g_min)));
    }
    if mode == ReferenceMode::Auto {
        return Ok(None);
    }
    match hypergrad::inner_solve(oracle, x, warm, inner)? {
        InnerOutcome::Converged { y, value, .. } => Ok(Some((y, value))),
        InnerOutcome::BudgetExhausted { grad_norm, .. } => Err(Error::OracleUnavailable(format!(
            "lower solve stopped at ‖∇_y g‖ = {grad_norm:e}"
        ))),
        InnerOutcome::Diverged { iterations } => Err(Error::UnboundedBelow(format!(
            "gradient descent on the lower level diverged after {iterations} iterations"
        ))),
    }
}

/// `g(x, y) − Ĝ(x)`, with `Ĝ` exact when the oracle has a closed form and
/// otherwise the value reached by gradient descent from `y`.
pub fn pl_residual<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y: &DVector<T>,
    inner: &InnerSolve<T>,
) -> Result<T> {
    let g = oracle.g(x, y, Batch::Full)?;
    let (_, g_min) = lower_reference(oracle, x, y, ReferenceMode::InnerSolve, inner)?
        .expect("inner-solve mode always yields a reference or an error");
    Ok(g - g_min)
}

/// Squared errors of the five estimators against full-batch clipped
/// references at `(x_t, y_t)`. Matrix errors use the Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorErrors<T> {
    pub u: T,
    pub h: T,
    pub g_jac: T,
    pub h_hess: T,
    pub v: T,
}

impl<T: Real> EstimatorErrors<T> {
    pub fn upper_sum(&self) -> T {
        self.u + self.h + self.g_jac + self.h_hess
    }
}

pub fn estimator_errors<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    state: &IterateState<T>,
    clip: &ClipSpec<T>,
) -> Result<EstimatorErrors<T>> {
    let up = oracle.upper_derivs(&state.x, &state.y, Batch::Full)?;
    let lo = oracle.lower_derivs(&state.x, &state.y, Batch::Full)?;
    let h_ref = spectral::project_ball(&up.grad_y, clip.c_fy)?;
    let g_ref = spectral::project_spectral_norm(&lo.jac_xy, clip.c_gxy)?;
    let hh_ref = spectral::clamp_spectrum(&lo.hess_yy, clip.mu, clip.l_g)?.reconstruct();
    Ok(EstimatorErrors {
        u: (&up.grad_x - &state.u).norm_squared(),
        h: (h_ref - &state.h).norm_squared(),
        g_jac: (g_ref - &state.g_jac).norm_squared(),
        h_hess: (hh_ref - state.h_hess.reconstruct()).norm_squared(),
        v: (&lo.grad_y - &state.v).norm_squared(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LyapunovKind {
    /// `Ω_t = F(x_t) + g(x_t, y_t) − G(x_t)`.
    Omega,
    /// `Ω_t + γ·(u, h, G, H errors) + λ·(v error)`.
    Phi,
    /// As `Φ_t` with weights `γ/η_{t−1}` and `λ/η_{t−1}`.
    GammaFn,
}

impl LyapunovKind {
    pub fn for_solver(kind: SolverKind) -> Self {
        match kind {
            SolverKind::Mgbio => LyapunovKind::Omega,
            SolverKind::Msgbio => LyapunovKind::Phi,
            SolverKind::VrMsgbio => LyapunovKind::GammaFn,
        }
    }
}

fn lyapunov_from<T: Real>(
    which: LyapunovKind,
    omega: T,
    errors: Option<&EstimatorErrors<T>>,
    cfg: &SolverConfig<T>,
    t: usize,
) -> T {
    let Some(e) = errors else {
        return omega;
    };
    let (wg, wl) = match which {
        LyapunovKind::Omega => return omega,
        LyapunovKind::Phi => (cfg.gamma, cfg.lambda),
        LyapunovKind::GammaFn => {
            let eta_prev = cfg.schedule.eta_at(t.saturating_sub(1));
            (cfg.gamma / eta_prev, cfg.lambda / eta_prev)
        }
    };
    omega + wg * e.upper_sum() + wl * e.v
}

/// Evaluates `Ω_t`, `Φ_t` or `Γ_t` at `state`. The lower minimum comes from
/// the closed form or gradient descent (`inner`).
pub fn lyapunov<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    state: &IterateState<T>,
    cfg: &SolverConfig<T>,
    which: LyapunovKind,
    inner: &InnerSolve<T>,
) -> Result<T> {
    let (y_star, g_min) = lower_reference(oracle, &state.x, &state.y, ReferenceMode::InnerSolve, inner)?
        .expect("inner-solve mode always yields a reference or an error");
    let big_f = oracle.f(&state.x, &y_star, Batch::Full)?;
    let omega = big_f + oracle.g(&state.x, &state.y, Batch::Full)? - g_min;
    let errors = match which {
        LyapunovKind::Omega => None,
        _ => Some(estimator_errors(oracle, state, &cfg.clip)?),
    };
    Ok(lyapunov_from(which, omega, errors.as_ref(), cfg, state.t))
}

/// Estimator-error decomposition of `‖w − ∇̂f(x, y)‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorBiasCheck<T> {
    /// `‖w − ∇̂f(x, y)‖²`.
    pub lhs: T,
    /// `4‖Δu‖² + 4C_fy²/μ²‖ΔG‖² + 4κ²‖Δh‖² + 4κ²C_fy²/μ²‖ΔH‖²`.
    pub rhs: T,
}

/// Bounds the distance from the estimator `w` to the full-batch clipped
/// hyper-gradient by its four component errors.
pub fn estimator_bias_check<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    state: &IterateState<T>,
    clip: &ClipSpec<T>,
) -> Result<EstimatorBiasCheck<T>> {
    let reference = hypergrad::clipped_hypergradient(oracle, &state.x, &state.y, clip)?;
    let e = estimator_errors(oracle, state, clip)?;
    let four = T::lit(4.0);
    let ratio = clip.c_fy * clip.c_fy / (clip.mu * clip.mu);
    let kappa2 = clip.c_gxy * clip.c_gxy / (clip.mu * clip.mu);
    Ok(EstimatorBiasCheck {
        lhs: (&state.w - &reference.w).norm_squared(),
        rhs: four * (e.u + ratio * e.g_jac + kappa2 * e.h + kappa2 * ratio * e.h_hess),
    })
}

/// The full bound including the lower-level residual:
/// `‖w − ∇F‖² ≤ 2·rhs + (4L̂²/μ)(g − G)`. Needs a closed-form `∇F`.
pub fn hypergrad_error_bound<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    state: &IterateState<T>,
    clip: &ClipSpec<T>,
    l_hat: T,
) -> Result<Option<(T, T)>> {
    let Some(grad) = oracle.exact_hypergrad(&state.x) else {
        return Ok(None);
    };
    let grad = grad?;
    let Some((_, g_min)) = lower_reference(oracle, &state.x, &state.y, ReferenceMode::Auto, &InnerSolve::default())? else {
        return Ok(None);
    };
    let check = estimator_bias_check(oracle, state, clip)?;
    let gap = oracle.g(&state.x, &state.y, Batch::Full)? - g_min;
    let lhs = (&state.w - grad).norm_squared();
    let rhs = T::lit(2.0) * check.rhs + T::lit(4.0) * l_hat * l_hat / clip.mu * gap.max(T::zero());
    Ok(Some((lhs, rhs)))
}

/// Per-run metric evaluator. Each row evaluates the lower reference once and
/// reuses it for `g_gap` and the Lyapunov value.
pub struct Probe<T: Real> {
    opts: DiagOptions<T>,
    warm: Option<DVector<T>>,
    start: Instant,
    reference_disabled: bool,
    warnings: Vec<String>,
}

impl<T: Real> Probe<T> {
    pub fn new(opts: DiagOptions<T>) -> Self {
        Probe {
            opts,
            warm: None,
            start: Instant::now(),
            reference_disabled: false,
            warnings: Vec::new(),
        }
    }

    pub fn take_warnings(&mut self) -> Vec<String> {
        std::mem::take(&mut self.warnings)
    }

    fn reference<O: BilevelOracle<T> + ?Sized>(&mut self, oracle: &O, state: &IterateState<T>) -> Result<Option<(DVector<T>, T)>> {
        if self.reference_disabled {
            return Ok(None);
        }
        let warm = self.warm.clone().unwrap_or_else(|| state.y.clone());
        match lower_reference(oracle, &state.x, &warm, self.opts.reference, &self.opts.inner) {
            Ok(Some((y, g))) => {
                self.warm = Some(y.clone());
                Ok(Some((y, g)))
            }
            Ok(None) => Ok(None),
            Err(e @ (Error::UnboundedBelow(_) | Error::OracleUnavailable(_))) => {
                self.reference_disabled = true;
                self.warnings.push(format!("lower-level reference disabled at t = {}: {e}", state.t));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    pub fn record<O: BilevelOracle<T> + ?Sized>(
        &mut self,
        oracle: &O,
        state: &IterateState<T>,
        cfg: &SolverConfig<T>,
        kind: SolverKind,
    ) -> Result<TraceRecord> {
        let grad_map = hypergrad::gradient_mapping(&state.x, &state.w, cfg.gamma, &cfg.set)?;
        let f_val = oracle.f(&state.x, &state.y, Batch::Full)?;
        let truth = if self.opts.oracle { oracle.exact_hypergrad(&state.x) } else { None };
        let (true_grad_norm, hyper_err) = match truth {
            Some(grad) => {
                let grad = grad?;
                let mapped = hypergrad::gradient_mapping(&state.x, &grad, cfg.gamma, &cfg.set)?;
                (Some(mapped.norm().to_f64_lossy()), Some((&state.w - grad).norm().to_f64_lossy()))
            }
            None => (None, None),
        };
        let (g_gap, lyapunov) = match self.reference(oracle, state)? {
            Some((y_star, g_min)) => {
                let gap = oracle.g(&state.x, &state.y, Batch::Full)? - g_min;
                let omega = oracle.f(&state.x, &y_star, Batch::Full)? + gap;
                let which = LyapunovKind::for_solver(kind);
                let at_stride = state.t == 1 || state.t % self.opts.diag_stride.max(1) == 0;
                let lyap = match which {
                    LyapunovKind::Omega => Some(omega),
                    _ if at_stride => {
                        let errors = estimator_errors(oracle, state, &cfg.clip)?;
                        Some(lyapunov_from(which, omega, Some(&errors), cfg, state.t))
                    }
                    _ => None,
                };
                (Some(gap.to_f64_lossy()), lyap.map(|v| v.to_f64_lossy()))
            }
            None => (None, None),
        };
        Ok(TraceRecord {
            t: state.t as u64,
            eta: cfg.schedule.eta_at(state.t).to_f64_lossy(),
            grad_map_norm: grad_map.norm().to_f64_lossy(),
            true_grad_norm,
            hyper_err,
            f_val: f_val.to_f64_lossy(),
            g_gap,
            lyapunov,
            samples_used: state.samples_used,
            wall_nanos: self
                .opts
                .record_wall_time
                .then(|| self.start.elapsed().as_nanos().min(u64::MAX as u128) as u64),
        })
    }
}

// ---------------------------------------------------------------------------
// Rates

/// What [`fit_rate`] regresses against `log t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Running mean `(1/t)Σ_{s≤t} metric_s`, the quantity the theorems bound.
    #[default]
    RunningMean,
    /// The metric itself.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

/// Least-squares fit of `log(series)` against `log t` for `t` in the
/// inclusive `window`. In running-mean mode the mean accumulates from the
/// first sample, not from the window start.
pub fn fit_rate_series(ts: &[u64], values: &[f64], window: (u64, u64), mode: RateMode) -> Result<RateFit> {
    if ts.len() != values.len() {
        return Err(Error::invalid("t and value series differ in length"));
    }
    let (lo, hi) = window;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut sum = 0.0;
    for (i, (&t, &v)) in ts.iter().zip(values).enumerate() {
        sum += v;
        if t < lo || t > hi {
            continue;
        }
        if !(v > 0.0 && v.is_finite()) && mode == RateMode::Raw || !v.is_finite() {
            return Err(Error::invalid(format!("metric must be positive and finite in the window (t = {t}: {v})")));
        }
        let y = match mode {
            RateMode::Raw => v,
            RateMode::RunningMean => sum / (i + 1) as f64,
        };
        if !(y > 0.0) {
            return Err(Error::invalid(format!("fitted quantity must be positive (t = {t}: {y})")));
        }
        xs.push((t as f64).ln());
        ys.push(y.ln());
    }
    if xs.len() < 10 {
        let range = match (ts.first(), ts.last()) {
            (Some(a), Some(b)) => format!("{a}..={b}"),
            _ => "empty".to_string(),
        };
        return Err(Error::InsufficientData(format!(
            "window [{lo}, {hi}] holds {} points, need at least 10 (trace covers t = {range})",
            xs.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("window holds a single distinct t".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(RateFit {
        slope,
        intercept,
        r2,
        points: xs.len(),
    })
}

/// [`fit_rate_series`] on one metric of a trace; rows where the metric is
/// absent are skipped.
pub fn fit_rate(records: &[TraceRecord], metric: Metric, window: (u64, u64), mode: RateMode) -> Result<RateFit> {
    let (ts, vals): (Vec<u64>, Vec<f64>) = records.iter().filter_map(|r| metric.of(r).map(|v| (r.t, v))).unzip();
    fit_rate_series(&ts, &vals, window, mode)
}

// ---------------------------------------------------------------------------
// Noise and reference runs

/// Largest mean squared deviation, over the six stochastic derivative
/// blocks, of `batch`-sample averages from the full-batch value at `(x, y)`,
/// estimated from `draws` minibatches.
pub fn estimate_sigma2<T: Real, O: BilevelOracle<T> + ?Sized, R: Rng + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y: &DVector<T>,
    batch: usize,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::invalid("need at least one minibatch draw"));
    }
    let up = oracle.upper_derivs(x, y, Batch::Full)?;
    let lo = oracle.lower_derivs(x, y, Batch::Full)?;
    let mut acc = [0f64; 5];
    for _ in 0..draws {
        let xi = rng::minibatch(rng, oracle.upper_samples(), batch);
        let zeta = rng::minibatch(rng, oracle.lower_samples(), batch);
        let su = oracle.upper_derivs(x, y, Batch::Indices(&xi))?;
        let sl = oracle.lower_derivs(x, y, Batch::Indices(&zeta))?;
        acc[0] += (&su.grad_x - &up.grad_x).norm_squared().to_f64_lossy();
        acc[1] += (&su.grad_y - &up.grad_y).norm_squared().to_f64_lossy();
        acc[2] += (&sl.grad_y - &lo.grad_y).norm_squared().to_f64_lossy();
        acc[3] += (&sl.jac_xy - &lo.jac_xy).norm_squared().to_f64_lossy();
        acc[4] += (&sl.hess_yy - &lo.hess_yy).norm_squared().to_f64_lossy();
    }
    Ok(acc.iter().fold(0f64, |a, b| a.max(*b)) / draws as f64)
}

/// `F* ≈ min_t F(x_t)` along an MGBiO run `factor` times longer than
/// `cfg.horizon`, starting from the same initial point. Requires a lower
/// reference (closed form or inner solve).
pub fn estimate_f_star<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    cfg: &SolverConfig<T>,
    factor: usize,
    mode: ReferenceMode,
    inner: &InnerSolve<T>,
) -> Result<T> {
    let long = SolverConfig {
        horizon: cfg.horizon * factor.max(1),
        ..cfg.clone()
    };
    long.validate(SolverKind::Mgbio, oracle.upper_dim())?;
    let mut unused = rng::substream(cfg.seed, rng::MINIBATCH_STREAM);
    let mut state = solvers::init_state(oracle, &long, SolverKind::Mgbio, &mut unused)?;
    let mut best: Option<T> = None;
    let mut warm = state.y.clone();
    loop {
        let (y_star, _) = lower_reference(oracle, &state.x, &warm, mode, inner)?
            .ok_or_else(|| Error::OracleUnavailable("no lower-level reference for F".into()))?;
        let value = oracle.f(&state.x, &y_star, Batch::Full)?;
        best = Some(best.map_or(value, |b: T| b.min(value)));
        warm = y_star;
        if state.t >= long.horizon {
            break;
        }
        state = solvers::mgbio_step(&state, oracle, &long)?;
        if !state.is_finite() {
            return Err(Error::NonFinite { t: state.t });
        }
    }
    Ok(best.expect("at least one iterate"))
}

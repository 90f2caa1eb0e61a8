//! Clipped hyper-gradient, gradient mapping and reference oracles.
//!
//! The estimator is
//!
//! ```text
//! w = ∇_x f − Π̂_{C_gxy}[∇²_xy g] · (S_[μ,L_g][∇²_yy g])⁻¹ · Π_{C_fy}[∇_y f]
//! ```
//!
//! where the inverse is applied through the clamped eigensystem and never
//! formed.

use nalgebra::{DMatrix, DVector};

use crate::problems::{Batch, BilevelOracle, LowerDerivs, UpperDerivs};
use crate::spectral::{self, ClipSpec, SymEig};
use crate::{Error, Real, Result};

/// The four clipped pieces of a hyper-gradient estimate and their assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradParts<T: Real> {
    /// `∇_x f` or its estimate.
    pub u: DVector<T>,
    /// Ball-projected `∇_y f` estimate.
    pub h: DVector<T>,
    /// Spectral-norm-projected `∇²_xy g` estimate, `d × p`.
    pub g_jac: DMatrix<T>,
    /// Spectrum-clamped `∇²_yy g` estimate.
    pub h_hess: SymEig<T>,
    /// `u − g_jac · h_hess⁻¹ · h`.
    pub w: DVector<T>,
}

impl<T: Real> HyperGradParts<T> {
    /// Assembles `w` from already-clipped pieces.
    pub fn assemble(u: DVector<T>, h: DVector<T>, g_jac: DMatrix<T>, h_hess: SymEig<T>) -> Result<Self> {
        let w = assemble_w(&u, &h, &g_jac, &h_hess)?;
        Ok(HyperGradParts { u, h, g_jac, h_hess, w })
    }

    /// Clips raw derivative blocks and assembles `w`.
    pub fn from_raw(
        grad_x_f: DVector<T>,
        grad_y_f: &DVector<T>,
        jac_xy: &DMatrix<T>,
        hess_yy: &DMatrix<T>,
        spec: &ClipSpec<T>,
    ) -> Result<Self> {
        let h = spectral::project_ball(grad_y_f, spec.c_fy)?;
        let g_jac = spectral::project_spectral_norm(jac_xy, spec.c_gxy)?;
        let h_hess = spectral::clamp_spectrum(hess_yy, spec.mu, spec.l_g)?;
        Self::assemble(grad_x_f, h, g_jac, h_hess)
    }

    /// Largest violation of the clipping invariants under `spec`, or zero.
    pub fn clip_violation(&self, spec: &ClipSpec<T>) -> T {
        let tol = T::lit(1e-10);
        let mut worst = T::zero();
        let h_excess = self.h.norm() - spec.c_fy * (T::one() + tol);
        worst = worst.max(h_excess);
        if !self.g_jac.is_empty() {
            let g_excess = spectral::spectral_norm(&self.g_jac) - spec.c_gxy * (T::one() + tol);
            worst = worst.max(g_excess);
        }
        for theta in self.h_hess.eigenvalues().iter() {
            worst = worst.max(spec.mu - *theta).max(*theta - spec.l_g);
        }
        worst
    }
}

/// `w = u − g_jac · apply_clamped_inverse(h_hess, h)`.
pub fn assemble_w<T: Real>(u: &DVector<T>, h: &DVector<T>, g_jac: &DMatrix<T>, h_hess: &SymEig<T>) -> Result<DVector<T>> {
    if g_jac.nrows() != u.len() || g_jac.ncols() != h.len() {
        return Err(Error::invalid(format!(
            "Jacobian is {}x{}, expected {}x{}",
            g_jac.nrows(),
            g_jac.ncols(),
            u.len(),
            h.len()
        )));
    }
    let solved = spectral::apply_clamped_inverse(h_hess, h)?;
    Ok(u - g_jac * solved)
}

/// Deterministic clipped hyper-gradient at `(x, y)`.
pub fn clipped_hypergradient<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y: &DVector<T>,
    spec: &ClipSpec<T>,
) -> Result<HyperGradParts<T>> {
    clipped_hypergradient_batch(oracle, x, y, spec, Batch::Full, Batch::Full)
}

/// Clipped hyper-gradient with upper derivatives averaged over `upper` and
/// lower derivatives over `lower`.
pub fn clipped_hypergradient_batch<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y: &DVector<T>,
    spec: &ClipSpec<T>,
    upper: Batch<'_>,
    lower: Batch<'_>,
) -> Result<HyperGradParts<T>> {
    let UpperDerivs { grad_x, grad_y } = oracle.upper_derivs(x, y, upper)?;
    let LowerDerivs { jac_xy, hess_yy, .. } = oracle.lower_derivs(x, y, lower)?;
    HyperGradParts::from_raw(grad_x, &grad_y, &jac_xy, &hess_yy, spec)
}

/// Closed convex feasible set with a closed-form projection.
#[derive(Debug, Clone, PartialEq)]
pub enum FeasibleSet<T: Real> {
    Unconstrained,
    Ball { center: DVector<T>, radius: T },
    Box { lower: DVector<T>, upper: DVector<T> },
}

impl<T: Real> FeasibleSet<T> {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            FeasibleSet::Unconstrained => Ok(()),
            FeasibleSet::Ball { center, radius } => {
                if center.len() != dim {
                    return Err(Error::config(format!("ball center has length {}, expected {dim}", center.len())));
                }
                if !(*radius > T::zero() && radius.is_finite()) {
                    return Err(Error::config("ball radius must be positive and finite"));
                }
                Ok(())
            }
            FeasibleSet::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(Error::config(format!("box bounds must have length {dim}")));
                }
                if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
                    return Err(Error::config("box requires lower <= upper in every coordinate"));
                }
                Ok(())
            }
        }
    }

    /// Euclidean projection onto the set.
    pub fn project(&self, v: &DVector<T>) -> DVector<T> {
        match self {
            FeasibleSet::Unconstrained => v.clone(),
            FeasibleSet::Ball { center, radius } => {
                let offset = v - center;
                let norm = offset.norm();
                if norm <= *radius {
                    v.clone()
                } else {
                    center + offset * (*radius / norm)
                }
            }
            FeasibleSet::Box { lower, upper } => {
                DVector::from_fn(v.len(), |i, _| v[i].max(lower[i]).min(upper[i]))
            }
        }
    }

    /// Euclidean distance from `v` to the set.
    pub fn violation(&self, v: &DVector<T>) -> T {
        match self {
            FeasibleSet::Unconstrained => T::zero(),
            _ => (v - self.project(v)).norm(),
        }
    }

    /// Membership with an absolute tolerance scaled by `max(1, ‖v‖)`.
    pub fn contains(&self, v: &DVector<T>) -> bool {
        self.violation(v) <= feasibility_tol(v)
    }

    pub fn is_unconstrained(&self) -> bool {
        matches!(self, FeasibleSet::Unconstrained)
    }
}

fn feasibility_tol<T: Real>(v: &DVector<T>) -> T {
    T::symmetry_tol() * T::one().max(v.norm())
}

fn ensure_feasible<T: Real>(x: &DVector<T>, set: &FeasibleSet<T>) -> Result<()> {
    let violation = set.violation(x);
    if violation > feasibility_tol(x) {
        return Err(Error::Infeasible {
            violation: violation.to_f64_lossy(),
        });
    }
    Ok(())
}

fn ensure_gamma<T: Real>(gamma: T) -> Result<()> {
    if !(gamma > T::zero() && gamma.is_finite()) {
        return Err(Error::invalid(format!("step size gamma must be positive, got {gamma}")));
    }
    Ok(())
}

/// `argmin_{z ∈ set} ⟨w, z⟩ + ‖z − x‖²/(2γ) = P_set(x − γw)`.
pub fn prox_step<T: Real>(x: &DVector<T>, w: &DVector<T>, gamma: T, set: &FeasibleSet<T>) -> Result<DVector<T>> {
    ensure_gamma(gamma)?;
    if x.len() != w.len() {
        return Err(Error::invalid("x and w have different lengths"));
    }
    ensure_feasible(x, set)?;
    Ok(set.project(&(x - w * gamma)))
}

/// `𝒢(x, d, γ) = (x − P_set(x − γd))/γ`; exactly `d` when unconstrained.
pub fn gradient_mapping<T: Real>(
    x: &DVector<T>,
    direction: &DVector<T>,
    gamma: T,
    set: &FeasibleSet<T>,
) -> Result<DVector<T>> {
    ensure_gamma(gamma)?;
    if x.len() != direction.len() {
        return Err(Error::invalid("x and direction have different lengths"));
    }
    ensure_feasible(x, set)?;
    if set.is_unconstrained() {
        return Ok(direction.clone());
    }
    Ok((x - set.project(&(x - direction * gamma))) / gamma)
}

/// Settings for the gradient-descent lower-level solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSolve<T> {
    /// Stop once `‖∇_y g‖ ≤ tol`.
    pub tol: T,
    /// Iteration cap.
    pub budget: usize,
    /// Step `1/l_g`; estimated from `‖∇²_yy g‖` at the start point when absent.
    pub l_g: Option<T>,
}

impl<T: Real> Default for InnerSolve<T> {
    fn default() -> Self {
        InnerSolve {
            tol: T::lit(1e-10),
            budget: 100_000,
            l_g: None,
        }
    }
}

/// Result of a lower-level solve.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerOutcome<T: Real> {
    Converged { y: DVector<T>, value: T, iterations: usize },
    BudgetExhausted { y: DVector<T>, value: T, grad_norm: T },
    Diverged { iterations: usize },
}

/// Gradient descent on `y ↦ g(x, y)` from `y0` with step `1/L_g`.
pub fn inner_solve<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y0: &DVector<T>,
    opts: &InnerSolve<T>,
) -> Result<InnerOutcome<T>> {
    let l_g = match opts.l_g {
        Some(l) => l,
        None => spectral::spectral_norm(&oracle.hess_yy_g(x, y0, Batch::Full)?),
    };
    if !(l_g > T::zero() && l_g.is_finite()) {
        return Err(Error::invalid("inner solve needs a positive smoothness constant"));
    }
    let step = T::one() / l_g;
    let mut y = y0.clone();
    let start = oracle.g(x, &y, Batch::Full)?;
    let blowup = T::lit(1e12) * (T::one() + start.abs());
    for it in 0..=opts.budget {
        let grad = oracle.grad_y_g(x, &y, Batch::Full)?;
        let grad_norm = grad.norm();
        if !grad_norm.is_finite() {
            return Ok(InnerOutcome::Diverged { iterations: it });
        }
        if grad_norm <= opts.tol {
            let value = oracle.g(x, &y, Batch::Full)?;
            return Ok(InnerOutcome::Converged { y, value, iterations: it });
        }
        if it == opts.budget {
            let value = oracle.g(x, &y, Batch::Full)?;
            if !value.is_finite() || value < -blowup {
                return Ok(InnerOutcome::Diverged { iterations: it });
            }
            return Ok(InnerOutcome::BudgetExhausted { y, value, grad_norm });
        }
        y.axpy(-step, &grad, T::one());
        if !y.iter().all(|v| v.is_finite()) || y.norm() > blowup {
            return Ok(InnerOutcome::Diverged { iterations: it + 1 });
        }
    }
    unreachable!("loop returns at it == budget")
}

fn solve_or_unavailable<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y0: &DVector<T>,
    opts: &InnerSolve<T>,
) -> Result<DVector<T>> {
    match inner_solve(oracle, x, y0, opts)? {
        InnerOutcome::Converged { y, .. } => Ok(y),
        InnerOutcome::BudgetExhausted { grad_norm, .. } => Err(Error::OracleUnavailable(format!(
            "inner solve stopped at ‖∇_y g‖ = {grad_norm:e} after {} iterations",
            opts.budget
        ))),
        InnerOutcome::Diverged { iterations } => Err(Error::OracleUnavailable(format!(
            "inner solve diverged after {iterations} iterations"
        ))),
    }
}

/// Central finite difference of `x ↦ f(x, ŷ*(x))` with `ŷ*` from
/// [`inner_solve`] (warm-started at `ŷ*(x)`). Accuracy is
/// `O(fd_step² + tol/fd_step)`.
pub fn fd_hypergradient<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    opts: &InnerSolve<T>,
    fd_step: T,
) -> Result<DVector<T>> {
    if !(fd_step > T::zero()) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let p = oracle.lower_dim();
    let y_center = solve_or_unavailable(oracle, x, &DVector::zeros(p), opts)?;
    let opts = InnerSolve {
        l_g: Some(match opts.l_g {
            Some(l) => l,
            None => spectral::spectral_norm(&oracle.hess_yy_g(x, &y_center, Batch::Full)?),
        }),
        ..*opts
    };
    let two_h = fd_step + fd_step;
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp[i] += fd_step;
        let mut xm = x.clone();
        xm[i] -= fd_step;
        let yp = solve_or_unavailable(oracle, &xp, &y_center, &opts)?;
        let ym = solve_or_unavailable(oracle, &xm, &y_center, &opts)?;
        let fp = oracle.f(&xp, &yp, Batch::Full)?;
        let fm = oracle.f(&xm, &ym, Batch::Full)?;
        grad[i] = (fp - fm) / two_h;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{generate_quad_oracle, quad_oracle_truth, QuadOracleInstance, QuadParams};

    fn quad(seed: u64) -> QuadOracleInstance<f64> {
        generate_quad_oracle(&QuadParams::new(5, 4, (1.0, 3.0), seed)).unwrap()
    }

    fn wide_spec() -> ClipSpec<f64> {
        ClipSpec::new(1e6, 1e6, 1.0, 3.0).unwrap()
    }

    fn point(n: usize, k: u64) -> DVector<f64> {
        DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * (k as f64 + 0.3)).sin())
    }

    #[test]
    fn matches_closed_form_at_lower_solution() {
        for seed in 0..5 {
            let q = quad(seed);
            let x = point(5, seed);
            let truth = quad_oracle_truth(&q, &x).unwrap();
            let parts = clipped_hypergradient(&q, &x, &truth.y_star, &wide_spec()).unwrap();
            let err = (&parts.w - &truth.grad_f_true).norm() / truth.grad_f_true.norm().max(1.0);
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn uncoupled_problem_gives_partial_gradient() {
        let base = quad(1);
        let zero = DMatrix::zeros(5, 4);
        let q = QuadOracleInstance::from_matrices(base.params.clone(), base.p_mat.clone(), base.q_mat.clone(), zero.clone(), zero)
            .unwrap();
        let (x, y) = (point(5, 2), point(4, 3));
        let parts = clipped_hypergradient(&q, &x, &y, &wide_spec()).unwrap();
        assert_eq!(parts.w, q.grad_x_f(&x, &y, Batch::Full).unwrap());
    }

    #[test]
    fn assembly_is_homogeneous() {
        let q = quad(3);
        let (x, y) = (point(5, 1), point(4, 2));
        let parts = clipped_hypergradient(&q, &x, &y, &wide_spec()).unwrap();
        let w2 = assemble_w(&parts.u, &(&parts.h * 2.0), &parts.g_jac, &parts.h_hess.scale_spectrum(2.0)).unwrap();
        assert!((w2 - &parts.w).norm() < 1e-12);
    }

    #[test]
    fn clipping_invariants_hold_under_tight_spec() {
        let q = quad(4);
        let spec = ClipSpec::new(0.01, 0.01, 2.0, 2.5).unwrap();
        let parts = clipped_hypergradient(&q, &point(5, 4), &point(4, 5), &spec).unwrap();
        assert!(parts.clip_violation(&spec) <= 0.0);
        assert!(parts.h.norm() <= 0.01 * (1.0 + 1e-12));
    }

    #[test]
    fn gradient_mapping_examples() {
        let ball = FeasibleSet::Ball {
            center: DVector::zeros(2),
            radius: 1.0,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let g = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(gradient_mapping(&x, &g, 0.5, &ball).unwrap(), g);
        let back = DVector::from_vec(vec![-4.0, 0.0]);
        assert!(gradient_mapping(&x, &back, 0.5, &ball).unwrap().norm() < 1e-15);
        let any = DVector::from_vec(vec![3.0, -7.0]);
        assert_eq!(gradient_mapping(&x, &any, 0.7, &FeasibleSet::Unconstrained).unwrap(), any);
        let outside = DVector::from_vec(vec![2.0, 0.0]);
        assert!(matches!(gradient_mapping(&outside, &g, 0.5, &ball), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn interior_small_step_returns_direction() {
        let ball = FeasibleSet::Ball {
            center: DVector::zeros(3),
            radius: 2.0,
        };
        let x = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let g = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let m = gradient_mapping(&x, &g, 1e-3, &ball).unwrap();
        assert!((m - g).norm() < 1e-12);
    }

    #[test]
    fn box_prox_matches_grid_search() {
        let set = FeasibleSet::Box {
            lower: DVector::from_vec(vec![-1.0, 0.0]),
            upper: DVector::from_vec(vec![1.0, 2.0]),
        };
        let x = DVector::from_vec(vec![0.5, 1.5]);
        let w = DVector::from_vec(vec![-3.0, 1.0]);
        let gamma = 0.4;
        let z = prox_step(&x, &w, gamma, &set).unwrap();
        let objective = |a: f64, b: f64| w[0] * a + w[1] * b + ((a - x[0]).powi(2) + (b - x[1]).powi(2)) / (2.0 * gamma);
        let steps = 400;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            for j in 0..=steps {
                let a = -1.0 + 2.0 * i as f64 / steps as f64;
                let b = 2.0 * j as f64 / steps as f64;
                let v = objective(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert_eq!(z[0], 1.0);
        assert!((z[0] - best.1).abs() <= 0.005 && (z[1] - best.2).abs() <= 0.005);
        assert!(objective(z[0], z[1]) <= best.0 + 1e-12);
    }

    #[test]
    fn prox_of_zero_direction_is_identity() {
        let x = DVector::from_vec(vec![0.3, -0.2]);
        let set = FeasibleSet::Ball {
            center: DVector::zeros(2),
            radius: 1.0,
        };
        assert_eq!(prox_step(&x, &DVector::zeros(2), 0.9, &set).unwrap(), x);
        let w = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(prox_step(&x, &w, 0.1, &FeasibleSet::Unconstrained).unwrap(), &x - &w * 0.1);
    }

    #[test]
    fn fixed_points_have_zero_mapping() {
        // x on the boundary with the direction pointing outward is a fixed point.
        let ball = FeasibleSet::Ball {
            center: DVector::zeros(2),
            radius: 1.0,
        };
        let x = DVector::from_vec(vec![0.6, 0.8]);
        let outward = &x * -3.0;
        assert!(gradient_mapping(&x, &outward, 0.2, &ball).unwrap().norm() < 1e-15);
        assert!((prox_step(&x, &outward, 0.2, &ball).unwrap() - &x).norm() < 1e-15);
        let inward = &x * 3.0;
        assert!(gradient_mapping(&x, &inward, 0.2, &ball).unwrap().norm() > 0.1);
    }

    #[test]
    fn fd_hypergradient_agrees_with_closed_form() {
        let q = quad(8);
        let x = point(5, 8);
        let truth = quad_oracle_truth(&q, &x).unwrap();
        let fd = fd_hypergradient(&q, &x, &InnerSolve::default(), 1e-4).unwrap();
        assert!((fd - truth.grad_f_true).norm() < 1e-6);
    }

    #[test]
    fn fd_reports_exhausted_budget() {
        let q = quad(9);
        let opts = InnerSolve {
            budget: 2,
            ..InnerSolve::default()
        };
        assert!(matches!(
            fd_hypergradient(&q, &point(5, 1), &opts, 1e-4),
            Err(Error::OracleUnavailable(_))
        ));
    }
}

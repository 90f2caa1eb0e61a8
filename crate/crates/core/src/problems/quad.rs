//! Strongly convex quadratic bilevel problem with a closed-form hyper-gradient:
//!
//! ```text
//! f(x, y) = ½xᵀPx + xᵀR¹y,    g(x, y) = ½yᵀQy + xᵀR²y
//! ```
//!
//! `Q` has eigenvalues in `[μ_gen, L_gen]`, so `y*(x) = −Q⁻¹(R²)ᵀx` is
//! unique. `P` is built so that `F(x) = f(x, y*(x))` is a positive definite
//! quadratic, which gives `F* = 0` at `x = 0`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{batch_weight, check_point, column_orthogonal, lift, Batch, BilevelOracle, UpperDerivs};
use crate::trace_io::rng::{self, INSTANCE_STREAM};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    pub d: usize,
    pub p: usize,
    /// Spectrum interval `[μ_gen, L_gen]` of `Q`.
    pub spectrum: (f64, f64),
    /// Spectral norm given to `R¹` and `R²`.
    #[serde(default = "default_coupling")]
    pub coupling: f64,
    /// Spectrum interval of the hyper-objective Hessian `∇²F`.
    #[serde(default = "default_upper_spectrum")]
    pub upper_spectrum: (f64, f64),
    pub seed: u64,
}

fn default_coupling() -> f64 {
    0.2
}

fn default_upper_spectrum() -> (f64, f64) {
    (0.5, 1.0)
}

impl QuadParams {
    pub fn new(d: usize, p: usize, spectrum: (f64, f64), seed: u64) -> Self {
        QuadParams {
            d,
            p,
            spectrum,
            coupling: default_coupling(),
            upper_spectrum: default_upper_spectrum(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.p == 0 {
            return Err(Error::config("quad requires d >= 1 and p >= 1"));
        }
        let (mu, lg) = self.spectrum;
        if !(mu > 0.0 && mu <= lg && lg.is_finite()) {
            return Err(Error::config(format!("quad spectrum requires 0 < mu <= L (got ({mu}, {lg}))")));
        }
        if !(self.coupling >= 0.0 && self.coupling.is_finite()) {
            return Err(Error::config("quad coupling must be finite and nonnegative"));
        }
        let (lo, hi) = self.upper_spectrum;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("quad upper_spectrum requires 0 < lo <= hi"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QuadOracleInstance<T: Real> {
    pub params: QuadParams,
    pub p_mat: DMatrix<T>,
    pub q_mat: DMatrix<T>,
    pub r1_mat: DMatrix<T>,
    pub r2_mat: DMatrix<T>,
    q_chol: nalgebra::Cholesky<T, nalgebra::Dyn>,
}

impl<T: Real> PartialEq for QuadOracleInstance<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.p_mat == other.p_mat
            && self.q_mat == other.q_mat
            && self.r1_mat == other.r1_mat
            && self.r2_mat == other.r2_mat
    }
}

/// Closed-form lower solution and hyper-gradient at one `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadTruth<T: Real> {
    pub y_star: DVector<T>,
    pub grad_f_true: DVector<T>,
    pub g_min: T,
}

fn scaled_to_norm(m: DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let norm = crate::spectral::spectral_norm(&m);
    if norm > 0.0 {
        m * (target / norm)
    } else {
        m
    }
}

/// Draws a quadratic oracle instance. Deterministic in `params.seed`.
pub fn generate_quad_oracle<T: Real>(params: &QuadParams) -> Result<QuadOracleInstance<T>> {
    params.validate()?;
    let (d, p) = (params.d, params.p);
    let mut rng = rng::substream(params.seed, INSTANCE_STREAM);

    let w = column_orthogonal(DMatrix::from_vec(p, p, rng::normals(&mut rng, p * p)));
    let (mu, lg) = params.spectrum;
    let eig = DVector::from_fn(p, |_, _| rng::uniform(&mut rng, mu, lg));
    let q = symmetric_from(&w, &eig);

    let r1 = scaled_to_norm(DMatrix::from_vec(d, p, rng::normals(&mut rng, d * p)), params.coupling);
    let r2 = scaled_to_norm(DMatrix::from_vec(d, p, rng::normals(&mut rng, d * p)), params.coupling);

    // ∇²F = P − R¹Q⁻¹(R²)ᵀ − R²Q⁻¹(R¹)ᵀ; choose P so that ∇²F = W_F diag(s) W_Fᵀ.
    let wf = column_orthogonal(DMatrix::from_vec(d, d, rng::normals(&mut rng, d * d)));
    let (lo, hi) = params.upper_spectrum;
    let s = DVector::from_fn(d, |_, _| rng::uniform(&mut rng, lo, hi));
    let chol = q.clone().cholesky().ok_or_else(|| Error::config("generated Q is not positive definite"))?;
    let coupling_term = &r1 * chol.solve(&r2.transpose());
    let p_mat = symmetric_from(&wf, &s) + &coupling_term + coupling_term.transpose();

    QuadOracleInstance::from_matrices(params.clone(), lift(&p_mat), lift(&q), lift(&r1), lift(&r2))
}

fn symmetric_from(basis: &DMatrix<f64>, eig: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = basis.clone();
    for (j, v) in eig.iter().enumerate() {
        scaled.column_mut(j).scale_mut(*v);
    }
    let m = scaled * basis.transpose();
    (&m + m.transpose()) * 0.5
}

impl<T: Real> QuadOracleInstance<T> {
    pub fn from_matrices(
        params: QuadParams,
        p_mat: DMatrix<T>,
        q_mat: DMatrix<T>,
        r1_mat: DMatrix<T>,
        r2_mat: DMatrix<T>,
    ) -> Result<Self> {
        let (d, p) = (params.d, params.p);
        if p_mat.shape() != (d, d) || q_mat.shape() != (p, p) || r1_mat.shape() != (d, p) || r2_mat.shape() != (d, p) {
            return Err(Error::invalid("quad matrices have inconsistent shapes"));
        }
        let q_chol = q_mat
            .clone()
            .cholesky()
            .ok_or_else(|| Error::invalid("Q is not positive definite"))?;
        Ok(QuadOracleInstance {
            params,
            p_mat,
            q_mat,
            r1_mat,
            r2_mat,
            q_chol,
        })
    }

    /// `y*(x) = −Q⁻¹(R²)ᵀx`.
    pub fn y_star(&self, x: &DVector<T>) -> DVector<T> {
        -self.q_chol.solve(&self.r2_mat.tr_mul(x))
    }

    /// Hessian of `F(x) = f(x, y*(x))`.
    pub fn hyper_hessian(&self) -> DMatrix<T> {
        let coupling = &self.r1_mat * self.q_chol.solve(&self.r2_mat.transpose());
        &self.p_mat - &coupling - coupling.transpose()
    }

    /// `F(x) = f(x, y*(x))`.
    pub fn hyper_objective(&self, x: &DVector<T>) -> T {
        let y = self.y_star(x);
        self.f(x, &y, Batch::Full).expect("dimensions checked by caller")
    }
}

/// Closed-form `y*(x)`, `∇F(x)` and `G(x) = g(x, y*(x))`.
pub fn quad_oracle_truth<T: Real>(inst: &QuadOracleInstance<T>, x: &DVector<T>) -> Result<QuadTruth<T>> {
    if x.len() != inst.params.d {
        return Err(Error::invalid(format!("x must have length {}", inst.params.d)));
    }
    let y_star = inst.y_star(x);
    let correction = &inst.r2_mat * inst.q_chol.solve(&inst.r1_mat.tr_mul(x));
    let grad_f_true = &inst.p_mat * x + &inst.r1_mat * &y_star - correction;
    let g_min = inst.g(x, &y_star, Batch::Full)?;
    Ok(QuadTruth {
        y_star,
        grad_f_true,
        g_min,
    })
}

// A single sample: the stochastic forms coincide with the deterministic ones.
impl<T: Real> BilevelOracle<T> for QuadOracleInstance<T> {
    fn name(&self) -> &'static str {
        "quad"
    }

    fn upper_dim(&self) -> usize {
        self.params.d
    }

    fn lower_dim(&self) -> usize {
        self.params.p
    }

    fn upper_samples(&self) -> usize {
        1
    }

    fn lower_samples(&self) -> usize {
        1
    }

    fn f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(T::lit(0.5) * x.dot(&(&self.p_mat * x)) + x.dot(&(&self.r1_mat * y)))
    }

    fn g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(T::lit(0.5) * y.dot(&(&self.q_mat * y)) + x.dot(&(&self.r2_mat * y)))
    }

    fn grad_x_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(&self.p_mat * x + &self.r1_mat * y)
    }

    fn grad_y_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(self.r1_mat.tr_mul(x))
    }

    fn grad_y_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(&self.q_mat * y + self.r2_mat.tr_mul(x))
    }

    fn jac_xy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(self.r2_mat.clone())
    }

    fn hess_yy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        check_point(self, x, y)?;
        check_batch(batch)?;
        Ok(self.q_mat.clone())
    }

    fn upper_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<UpperDerivs<T>> {
        Ok(UpperDerivs {
            grad_x: self.grad_x_f(x, y, batch)?,
            grad_y: self.grad_y_f(x, y, batch)?,
        })
    }

    fn exact_lower(&self, x: &DVector<T>) -> Option<Result<DVector<T>>> {
        Some(quad_oracle_truth(self, x).map(|t| t.y_star))
    }

    fn exact_hypergrad(&self, x: &DVector<T>) -> Option<Result<DVector<T>>> {
        Some(quad_oracle_truth(self, x).map(|t| t.grad_f_true))
    }
}

fn check_batch(batch: Batch<'_>) -> Result<()> {
    if let Batch::Indices(idx) = batch {
        batch_weight::<f64>(idx, 1)?;
    }
    Ok(())
}

//! Spectral projection operators.
//!
//! Three projections appear in every hyper-gradient evaluation:
//!
//! - [`project_ball`]: Euclidean projection onto `{v : ‖v‖ ≤ c}`.
//! - [`project_spectral_norm`]: projection onto `{X : ‖X‖₂ ≤ c}`, computed by
//!   thresholding singular values.
//! - [`clamp_spectrum`]: projection of a symmetric matrix onto the set whose
//!   eigenvalues lie in `[lo, hi]`, returned in factored form so that the
//!   inverse can be applied with [`apply_clamped_inverse`] without ever being
//!   formed.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Projection radii and spectral window of the clipped estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec<T> {
    /// Radius of the ball `∇_y f` is projected onto.
    pub c_fy: T,
    /// Spectral-norm radius for the Jacobian `∇²_xy g`.
    pub c_gxy: T,
    /// Spectral floor (PL constant).
    pub mu: T,
    /// Spectral ceiling (smoothness of g).
    pub l_g: T,
}

impl<T: Real> ClipSpec<T> {
    pub fn new(c_fy: T, c_gxy: T, mu: T, l_g: T) -> Result<Self> {
        let spec = ClipSpec { c_fy, c_gxy, mu, l_g };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.c_fy, self.c_gxy, self.mu, self.l_g];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("clip spec entries must be finite"));
        }
        if self.c_fy <= T::zero() || self.c_gxy <= T::zero() {
            return Err(Error::config("clip radii c_fy and c_gxy must be positive"));
        }
        if self.mu <= T::zero() || self.mu > self.l_g {
            return Err(Error::config(format!(
                "spectral window requires 0 < mu <= l_g (got mu = {}, l_g = {})",
                self.mu, self.l_g
            )));
        }
        Ok(())
    }
}

/// Symmetric matrix in eigen-factored form `U·diag(θ)·Uᵀ`.
///
/// No ordering is guaranteed on the eigenpairs; under repeated eigenvalues
/// the basis is not unique. Compare reconstructions, not bases.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEig<T: Real> {
    basis: DMatrix<T>,
    eigenvalues: DVector<T>,
}

impl<T: Real> SymEig<T> {
    /// Builds a factorization from an orthogonal basis and eigenvalues.
    pub fn from_parts(basis: DMatrix<T>, eigenvalues: DVector<T>) -> Result<Self> {
        if !basis.is_square() || basis.nrows() != eigenvalues.len() {
            return Err(Error::invalid(format!(
                "basis {}x{} does not match {} eigenvalues",
                basis.nrows(),
                basis.ncols(),
                eigenvalues.len()
            )));
        }
        Ok(SymEig { basis, eigenvalues })
    }

    /// `θ·I` in factored form.
    pub fn scaled_identity(p: usize, theta: T) -> Self {
        SymEig {
            basis: DMatrix::identity(p, p),
            eigenvalues: DVector::from_element(p, theta),
        }
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U·diag(θ)·Uᵀ`, symmetrized so the result is exactly symmetric.
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut scaled = self.basis.clone();
        for (j, theta) in self.eigenvalues.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*theta);
        }
        let m = &scaled * self.basis.transpose();
        symmetrize(&m)
    }

    /// Multiplies every eigenvalue by `s`.
    pub fn scale_spectrum(&self, s: T) -> Self {
        SymEig {
            basis: self.basis.clone(),
            eigenvalues: &self.eigenvalues * s,
        }
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |a, b| a.min(b))
    }

    pub fn max_eigenvalue(&self) -> T {
        self.eigenvalues.iter().copied().fold(T::min_value().unwrap(), |a, b| a.max(b))
    }
}

pub(crate) fn ensure_finite_matrix<T: Real>(m: &DMatrix<T>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite_input(what))
    }
}

pub(crate) fn ensure_finite_vector<T: Real>(v: &DVector<T>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite_input(what))
    }
}

/// `(M + Mᵀ)/2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    let half = T::lit(0.5);
    (m + m.transpose()) * half
}

/// Largest absolute entry of `M − Mᵀ`.
pub fn max_asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let n = m.nrows();
    let mut worst = T::zero();
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Symmetrizes `m` when its asymmetry is within tolerance (relative to the
/// largest entry, floored at 1), and rejects it otherwise.
pub fn symmetrize_checked<T: Real>(m: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "expected a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    ensure_finite_matrix(m, "matrix")?;
    let scale = m.amax().max(T::one());
    let tolerance = T::symmetry_tol() * scale;
    let asymmetry = max_asymmetry(m);
    if asymmetry > tolerance {
        return Err(Error::SymmetryViolation {
            asymmetry: asymmetry.to_f64_lossy(),
            tolerance: tolerance.to_f64_lossy(),
        });
    }
    Ok(symmetrize(m))
}

/// Eigendecomposition of a (near-)symmetric matrix.
pub fn sym_eig<T: Real>(m: &DMatrix<T>) -> Result<SymEig<T>> {
    let sym = symmetrize_checked(m)?;
    let eig = sym.symmetric_eigen();
    Ok(SymEig {
        basis: eig.eigenvectors,
        eigenvalues: eig.eigenvalues,
    })
}

/// Projects the spectrum of a symmetric matrix into `[lo, hi]`.
///
/// Eigenvalues below `lo`, including negative ones, map to `lo`; those above
/// `hi` map to `hi`. Eigenvectors are left as computed.
pub fn clamp_spectrum<T: Real>(m: &DMatrix<T>, lo: T, hi: T) -> Result<SymEig<T>> {
    if !(lo > T::zero() && lo <= hi && hi.is_finite()) {
        return Err(Error::invalid(format!(
            "spectral window requires 0 < lo <= hi (got [{lo}, {hi}])"
        )));
    }
    let mut eig = sym_eig(m)?;
    eig.eigenvalues.apply(|theta| *theta = theta.clamp(lo, hi));
    Ok(eig)
}

/// Spectral (operator 2-) norm.
pub fn spectral_norm<T: Real>(m: &DMatrix<T>) -> T {
    if m.is_empty() {
        return T::zero();
    }
    m.singular_values().iter().copied().fold(T::zero(), |a, b| a.max(b))
}

/// Projects `m` onto the spectral-norm ball of radius `c`.
///
/// Inside the ball `m` is returned unchanged (bit-for-bit). Outside, the
/// singular values are thresholded at `c` and the singular vectors kept.
/// The right (or left, for wide `m`) singular vectors come from the
/// eigendecomposition of the smaller Gram matrix, and the result is
/// `m − m·V·diag(1 − c/σ)₊·Vᵀ`; this stays accurate when singular values
/// cluster, which a direct SVD does not.
pub fn project_spectral_norm<T: Real>(m: &DMatrix<T>, c: T) -> Result<DMatrix<T>> {
    if !(c > T::zero()) {
        return Err(Error::invalid(format!("spectral radius must be positive, got {c}")));
    }
    ensure_finite_matrix(m, "matrix")?;
    // ‖m‖₂ ≤ ‖m‖_F, so a Frobenius certificate skips the factorization.
    if m.norm() <= c {
        return Ok(m.clone());
    }
    let wide = m.nrows() < m.ncols();
    let gram = if wide { m * m.transpose() } else { m.tr_mul(m) };
    let eig = symmetrize(&gram).symmetric_eigen();
    let mut shrink = eig.eigenvectors.clone();
    let mut any = false;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let sigma = lambda.max(T::zero()).sqrt();
        let factor = if sigma > c {
            any = true;
            T::one() - c / sigma
        } else {
            T::zero()
        };
        shrink.column_mut(j).scale_mut(factor);
    }
    if !any {
        return Ok(m.clone());
    }
    let correction = shrink * eig.eigenvectors.transpose();
    Ok(if wide { m - correction * m } else { m - m * correction })
}

/// Euclidean projection onto the ball of radius `c` centred at the origin.
pub fn project_ball<T: Real>(v: &DVector<T>, c: T) -> Result<DVector<T>> {
    if !(c > T::zero()) {
        return Err(Error::invalid(format!("ball radius must be positive, got {c}")));
    }
    ensure_finite_vector(v, "vector")?;
    let norm = v.norm();
    if norm <= c {
        Ok(v.clone())
    } else {
        Ok(v * (c / norm))
    }
}

/// Solves `U·diag(θ)·Uᵀ r = rhs` as `r = Σ_i (U_iᵀ rhs / θ_i) U_i`.
pub fn apply_clamped_inverse<T: Real>(h_eig: &SymEig<T>, rhs: &DVector<T>) -> Result<DVector<T>> {
    if rhs.len() != h_eig.dim() {
        return Err(Error::invalid(format!(
            "rhs has length {}, eigensystem has dimension {}",
            rhs.len(),
            h_eig.dim()
        )));
    }
    for (index, theta) in h_eig.eigenvalues.iter().enumerate() {
        if !(*theta > T::zero()) {
            return Err(Error::Singular {
                index,
                value: theta.to_f64_lossy(),
            });
        }
    }
    let mut coords = h_eig.basis.tr_mul(rhs);
    coords.component_div_assign(&h_eig.eigenvalues);
    Ok(&h_eig.basis * coords)
}

//! Bilevel problem oracles.
//!
//! A problem is `min_x f(x, y*(x))` with `y*(x) ∈ argmin_y g(x, y)`, where
//! `f` and `g` are finite averages over samples. [`BilevelOracle`] exposes
//! values and the five derivative blocks the solvers need, either over all
//! samples ([`Batch::Full`]) or averaged over an index set.

mod plgame;
mod quad;
mod sensing;

pub use plgame::{generate_pl_game, PlGameInstance, PlGameParams};
pub use quad::{generate_quad_oracle, quad_oracle_truth, QuadOracleInstance, QuadParams, QuadTruth};
pub use sensing::{generate_matrix_sensing, MatrixSensingInstance, SensingParams};

use nalgebra::{DMatrix, DVector};

use crate::{Error, Real, Result};

/// Which samples an oracle call averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batch<'a> {
    /// The full-sample (deterministic) objective.
    Full,
    /// Average over the listed sample indices; duplicates count twice.
    Indices(&'a [usize]),
}

/// Upper-level partial gradients at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperDerivs<T: Real> {
    pub grad_x: DVector<T>,
    pub grad_y: DVector<T>,
}

/// Lower-level first and second derivatives at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerDerivs<T: Real> {
    pub grad_y: DVector<T>,
    /// `∇²_xy g`, shape `d × p`.
    pub jac_xy: DMatrix<T>,
    /// `∇²_yy g`, shape `p × p`.
    pub hess_yy: DMatrix<T>,
}

/// Value and derivative oracle of a bilevel problem.
///
/// Upper-level samples (`ξ`) index `0..upper_samples()`; lower-level samples
/// (`ζ`) index `0..lower_samples()`. The full-batch form must equal the
/// average of single-sample forms.
pub trait BilevelOracle<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    /// Upper dimension `d`.
    fn upper_dim(&self) -> usize;
    /// Lower dimension `p`.
    fn lower_dim(&self) -> usize;
    fn upper_samples(&self) -> usize;
    fn lower_samples(&self) -> usize;

    fn f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T>;
    fn g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T>;
    fn grad_x_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
    fn grad_y_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
    fn grad_y_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
    fn jac_xy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>>;
    fn hess_yy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>>;

    /// Both upper partial gradients; override when they share work.
    fn upper_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<UpperDerivs<T>> {
        Ok(UpperDerivs {
            grad_x: self.grad_x_f(x, y, batch)?,
            grad_y: self.grad_y_f(x, y, batch)?,
        })
    }

    /// All lower derivatives; override when they share work.
    fn lower_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<LowerDerivs<T>> {
        Ok(LowerDerivs {
            grad_y: self.grad_y_g(x, y, batch)?,
            jac_xy: self.jac_xy_g(x, y, batch)?,
            hess_yy: self.hess_yy_g(x, y, batch)?,
        })
    }

    /// Closed-form lower minimizer `y*(x)`, when one exists.
    fn exact_lower(&self, _x: &DVector<T>) -> Option<Result<DVector<T>>> {
        None
    }

    /// Closed-form hyper-gradient `∇F(x)`, when one exists.
    fn exact_hypergrad(&self, _x: &DVector<T>) -> Option<Result<DVector<T>>> {
        None
    }
}

pub(crate) fn check_point<T: Real, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    x: &DVector<T>,
    y: &DVector<T>,
) -> Result<()> {
    if x.len() != oracle.upper_dim() || y.len() != oracle.lower_dim() {
        return Err(Error::invalid(format!(
            "{}: expected x of length {} and y of length {}, got {} and {}",
            oracle.name(),
            oracle.upper_dim(),
            oracle.lower_dim(),
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

/// Validates an index set against `n` samples and returns `1/|batch|`.
pub(crate) fn batch_weight<T: Real>(indices: &[usize], n: usize) -> Result<T> {
    if indices.is_empty() {
        return Err(Error::invalid("minibatch is empty"));
    }
    if let Some(bad) = indices.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("sample index {bad} out of range 0..{n}")));
    }
    Ok(T::one() / T::lit(indices.len() as f64))
}

/// Orthonormal columns (Householder QR) of a Gaussian `rows × cols` draw.
pub(crate) fn column_orthogonal(gaussian: DMatrix<f64>) -> DMatrix<f64> {
    let qr = gaussian.qr();
    qr.q()
}

pub(crate) fn lift<T: Real>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(T::lit)
}

/// Any of the generated problem families behind one oracle.
#[derive(Debug, Clone)]
pub enum AnyInstance<T: Real> {
    PlGame(PlGameInstance<T>),
    Sensing(MatrixSensingInstance<T>),
    Quad(QuadOracleInstance<T>),
}

impl<T: Real> AnyInstance<T> {
    pub fn family(&self) -> &'static str {
        self.oracle().name()
    }

    pub fn oracle(&self) -> &dyn BilevelOracle<T> {
        match self {
            AnyInstance::PlGame(i) => i,
            AnyInstance::Sensing(i) => i,
            AnyInstance::Quad(i) => i,
        }
    }
}

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*) -> $ret:ty;)*) => {
        $(fn $name(&self, $($arg: $ty),*) -> $ret {
            self.oracle().$name($($arg),*)
        })*
    };
}

impl<T: Real> BilevelOracle<T> for AnyInstance<T> {
    forward! {
        name() -> &'static str;
        upper_dim() -> usize;
        lower_dim() -> usize;
        upper_samples() -> usize;
        lower_samples() -> usize;
        f(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T>;
        g(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T>;
        grad_x_f(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
        grad_y_f(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
        grad_y_g(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>>;
        jac_xy_g(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>>;
        hess_yy_g(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>>;
        upper_derivs(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<UpperDerivs<T>>;
        lower_derivs(x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<LowerDerivs<T>>;
        exact_lower(x: &DVector<T>) -> Option<Result<DVector<T>>>;
        exact_hypergrad(x: &DVector<T>) -> Option<Result<DVector<T>>>;
    }
}

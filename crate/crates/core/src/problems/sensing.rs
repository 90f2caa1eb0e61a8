//! Hyper-representation learning on matrix sensing.
//!
//! `U = [x₁ … x_{r−1} y] ∈ ℝ^{d×r}`; each sample contributes
//! `ℓ_i(U) = ½(⟨C_i, UUᵀ⟩ − e_i)²`. The upper objective averages `ℓ_i` over
//! the validation split, the lower one over the training split. The upper
//! variable `x` stacks the first `r − 1` columns (column-major, length
//! `d(r−1)`); the lower variable `y` is the last column.
//!
//! With `A_i = C_i + C_iᵀ` and `res_i = ⟨C_i, UUᵀ⟩ − e_i`:
//!
//! ```text
//! ∇_{x_j} ℓ_i = res_i A_i x_j          ∇_y ℓ_i = res_i A_i y
//! ∇²_yy ℓ_i  = res_i A_i + (A_i y)(A_i y)ᵀ
//! ∇²_{x_j y} ℓ_i = (A_i x_j)(A_i y)ᵀ    (block j of the d(r−1) × d Jacobian)
//! ```

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{batch_weight, check_point, lift, Batch, BilevelOracle, LowerDerivs, UpperDerivs};
use crate::trace_io::rng::{self, INSTANCE_STREAM};
use crate::{Error, Real, Result};

/// Fraction of samples in the training split.
pub const TRAIN_FRACTION: f64 = 0.4;
/// Samples per dimension: `n = 20·d`.
pub const SAMPLES_PER_DIM: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensingParams {
    pub d: usize,
    #[serde(default = "default_rank")]
    pub r: usize,
    pub seed: u64,
}

fn default_rank() -> usize {
    3
}

impl SensingParams {
    pub fn new(d: usize, r: usize, seed: u64) -> Self {
        SensingParams { d, r, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.r >= self.d {
            return Err(Error::config(format!(
                "sensing requires 1 <= r < d (got r = {}, d = {})",
                self.r, self.d
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        SAMPLES_PER_DIM * self.d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSensingInstance<T: Real> {
    pub params: SensingParams,
    pub sensing: Vec<DMatrix<T>>,
    pub labels: DVector<T>,
    pub h_star: DMatrix<T>,
    pub u_star: DMatrix<T>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

/// Draws a matrix-sensing instance with `n = 20d` noiseless samples and a
/// 40/60 train/validation split. Deterministic in `params.seed`.
pub fn generate_matrix_sensing<T: Real>(params: &SensingParams) -> Result<MatrixSensingInstance<T>> {
    params.validate()?;
    let (d, r, n) = (params.d, params.r, params.n());
    let mut rng = rng::substream(params.seed, INSTANCE_STREAM);

    let u_star = DMatrix::from_vec(d, r, rng::normals(&mut rng, d * r)) / (d as f64).sqrt();
    let sensing: Vec<DMatrix<f64>> = (0..n)
        .map(|_| DMatrix::from_vec(d, d, rng::normals(&mut rng, d * d)))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut train_idx = order[..n_train].to_vec();
    let mut val_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();

    let u_star_t: DMatrix<T> = lift(&u_star);
    MatrixSensingInstance::from_parts(
        params.clone(),
        sensing.iter().map(lift).collect(),
        u_star_t,
        train_idx,
        val_idx,
    )
}

impl<T: Real> MatrixSensingInstance<T> {
    /// Assembles an instance, recomputing `H* = U*U*ᵀ` and the labels.
    pub fn from_parts(
        params: SensingParams,
        sensing: Vec<DMatrix<T>>,
        u_star: DMatrix<T>,
        train_idx: Vec<usize>,
        val_idx: Vec<usize>,
    ) -> Result<Self> {
        params.validate()?;
        let (d, r, n) = (params.d, params.r, params.n());
        if sensing.len() != n || sensing.iter().any(|c| c.shape() != (d, d)) {
            return Err(Error::invalid(format!("expected {n} sensing matrices of shape {d}x{d}")));
        }
        if u_star.shape() != (d, r) {
            return Err(Error::invalid(format!("U* must be {d}x{r}")));
        }
        let mut seen = vec![false; n];
        for &i in train_idx.iter().chain(val_idx.iter()) {
            if i >= n || seen[i] {
                return Err(Error::invalid("train/validation indices must partition 0..n"));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("train/validation indices must cover 0..n"));
        }
        let h_star = &u_star * u_star.transpose();
        let labels = DVector::from_iterator(n, sensing.iter().map(|c| c.dot(&h_star)));
        Ok(MatrixSensingInstance {
            params,
            sensing,
            labels,
            h_star,
            u_star,
            train_idx,
            val_idx,
        })
    }

    /// `U = [x₁ … x_{r−1} y]`.
    pub fn assemble(&self, x: &DVector<T>, y: &DVector<T>) -> DMatrix<T> {
        let (d, r) = (self.params.d, self.params.r);
        let mut u = DMatrix::zeros(d, r);
        for j in 0..r - 1 {
            u.column_mut(j).copy_from(&x.rows(j * d, d));
        }
        u.column_mut(r - 1).copy_from(y);
        u
    }

    /// Splits `U` back into `(x, y)`.
    pub fn split(&self, u: &DMatrix<T>) -> (DVector<T>, DVector<T>) {
        let (d, r) = (self.params.d, self.params.r);
        let x = DVector::from_iterator(d * (r - 1), u.columns(0, r - 1).iter().copied());
        (x, u.column(r - 1).into_owned())
    }

    /// `‖UUᵀ − H*‖²_F / ‖H*‖²_F`.
    pub fn recovery_ratio(&self, x: &DVector<T>, y: &DVector<T>) -> T {
        let u = self.assemble(x, y);
        let diff = &u * u.transpose() - &self.h_star;
        diff.norm_squared() / self.h_star.norm_squared()
    }

    fn resolve<'a>(&'a self, split: &'a [usize], batch: Batch<'a>) -> Result<(Vec<usize>, T)> {
        match batch {
            Batch::Full => Ok((split.to_vec(), T::one() / T::lit(split.len() as f64))),
            Batch::Indices(idx) => {
                let w = batch_weight(idx, split.len())?;
                Ok((idx.iter().map(|&k| split[k]).collect(), w))
            }
        }
    }

    /// Residual, `A_i U` for one sample.
    fn sample(&self, i: usize, u: &DMatrix<T>) -> (T, DMatrix<T>) {
        let c = &self.sensing[i];
        let cu = c * u;
        let a_u = &cu + c.tr_mul(u);
        let inner = u.dot(&cu);
        (inner - self.labels[i], a_u)
    }

    fn loss(&self, u: &DMatrix<T>, samples: &[usize], w: T) -> T {
        let half = T::lit(0.5);
        samples
            .iter()
            .map(|&i| {
                let c = &self.sensing[i];
                let res = u.dot(&(c * u)) - self.labels[i];
                half * res * res
            })
            .fold(T::zero(), |a, b| a + b)
            * w
    }
}

impl<T: Real> BilevelOracle<T> for MatrixSensingInstance<T> {
    fn name(&self) -> &'static str {
        "sensing"
    }

    fn upper_dim(&self) -> usize {
        self.params.d * (self.params.r - 1)
    }

    fn lower_dim(&self) -> usize {
        self.params.d
    }

    fn upper_samples(&self) -> usize {
        self.val_idx.len()
    }

    fn lower_samples(&self) -> usize {
        self.train_idx.len()
    }

    fn f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        let (samples, w) = self.resolve(&self.val_idx, batch)?;
        Ok(self.loss(&self.assemble(x, y), &samples, w))
    }

    fn g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        let (samples, w) = self.resolve(&self.train_idx, batch)?;
        Ok(self.loss(&self.assemble(x, y), &samples, w))
    }

    fn grad_x_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        Ok(self.upper_derivs(x, y, batch)?.grad_x)
    }

    fn grad_y_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        Ok(self.upper_derivs(x, y, batch)?.grad_y)
    }

    fn grad_y_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        check_point(self, x, y)?;
        let (samples, w) = self.resolve(&self.train_idx, batch)?;
        let u = self.assemble(x, y);
        let r = self.params.r;
        let mut acc = DVector::zeros(self.params.d);
        for &i in &samples {
            let (res, a_u) = self.sample(i, &u);
            acc.axpy(res, &a_u.column(r - 1), T::one());
        }
        Ok(acc * w)
    }

    fn jac_xy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        Ok(self.lower_derivs(x, y, batch)?.jac_xy)
    }

    fn hess_yy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        Ok(self.lower_derivs(x, y, batch)?.hess_yy)
    }

    fn upper_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<UpperDerivs<T>> {
        check_point(self, x, y)?;
        let (samples, w) = self.resolve(&self.val_idx, batch)?;
        let (d, r) = (self.params.d, self.params.r);
        let u = self.assemble(x, y);
        // Column k of the accumulator is Σ res_i A_i u_k.
        let mut acc = DMatrix::zeros(d, r);
        for &i in &samples {
            let (res, a_u) = self.sample(i, &u);
            acc.zip_apply(&a_u, |a, b| *a += res * b);
        }
        acc *= w;
        let (grad_x, grad_y) = self.split(&acc);
        Ok(UpperDerivs { grad_x, grad_y })
    }

    fn lower_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<LowerDerivs<T>> {
        check_point(self, x, y)?;
        let (samples, w) = self.resolve(&self.train_idx, batch)?;
        let (d, r) = (self.params.d, self.params.r);
        let u = self.assemble(x, y);
        let mut grad_y = DVector::zeros(d);
        let mut weighted_c = DMatrix::zeros(d, d);
        let mut outer = DMatrix::zeros(d, d);
        let mut jac = DMatrix::zeros(d * (r - 1), d);
        for &i in &samples {
            let (res, a_u) = self.sample(i, &u);
            let a_y = a_u.column(r - 1);
            grad_y.axpy(res, &a_y, T::one());
            weighted_c.zip_apply(&self.sensing[i], |a, b| *a += res * b);
            outer.ger(T::one(), &a_y, &a_y, T::one());
            for j in 0..r - 1 {
                jac.rows_mut(j * d, d).ger(T::one(), &a_u.column(j), &a_y, T::one());
            }
        }
        // Σ res_i (C_i + C_iᵀ) = S + Sᵀ with S = Σ res_i C_i.
        let hess = (&weighted_c + weighted_c.transpose() + outer) * w;
        Ok(LowerDerivs {
            grad_y: grad_y * w,
            jac_xy: jac * w,
            hess_yy: hess,
        })
    }
}

//! Bilevel PL game:
//!
//! ```text
//! min_x ½xᵀPx + xᵀR¹y   s.t.  y ∈ argmin_y ½yᵀQy + xᵀR²y
//! ```
//!
//! with `P`, `Q`, `R¹`, `R²` empirical second moments of Gaussian samples
//! whose covariances for `P` and `Q` have rank `l < d`, so both are singular.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{batch_weight, check_point, column_orthogonal, lift, Batch, BilevelOracle, LowerDerivs, UpperDerivs};
use crate::trace_io::rng::{self, INSTANCE_STREAM};
use crate::{Error, Real, Result};

/// Per-sample weight on the `R¹`/`R²` outer products.
pub const CROSS_SAMPLE_FACTOR: f64 = 0.01;
/// Scale of the `R¹`/`R²` sample covariances `0.001·V Vᵀ`.
pub const CROSS_COVARIANCE_SCALE: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlGameParams {
    pub d: usize,
    pub l: usize,
    pub n: usize,
    /// Interval the diagonal of `D¹`, `D²` is drawn from.
    pub interval: (f64, f64),
    /// Replace `R²` by `B·Q` so that `(R²)ᵀx ∈ range(Q)` and `y*(x)` exists.
    #[serde(default)]
    pub range_compatible: bool,
    /// Entry scale of `B` in the range-compatible variant.
    #[serde(default = "default_range_map_scale")]
    pub range_map_scale: f64,
    pub seed: u64,
}

fn default_range_map_scale() -> f64 {
    0.1
}

impl PlGameParams {
    /// The experiment regime: `d = 50`, `l = 48`, `n = 2500`.
    pub fn experiment_regime(seed: u64) -> Self {
        PlGameParams {
            d: 50,
            l: 48,
            n: 2500,
            interval: (0.1, 1.0),
            range_compatible: false,
            range_map_scale: default_range_map_scale(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.l >= self.d {
            return Err(Error::config(format!("plgame requires 0 < l < d (got l = {}, d = {})", self.l, self.d)));
        }
        if self.n == 0 {
            return Err(Error::config("plgame requires n >= 1"));
        }
        let (mu, big_l) = self.interval;
        if !(mu > 0.0 && mu < big_l && big_l.is_finite()) {
            return Err(Error::config(format!("plgame interval requires 0 < mu < L (got ({mu}, {big_l}))")));
        }
        if !(self.range_map_scale > 0.0 && self.range_map_scale.is_finite()) {
            return Err(Error::config("range_map_scale must be positive"));
        }
        Ok(())
    }
}

/// A generated PL game. Sample `i` is column `i` of each `*_samples` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PlGameInstance<T: Real> {
    pub params: PlGameParams,
    pub p_mat: DMatrix<T>,
    pub q_mat: DMatrix<T>,
    pub r1_mat: DMatrix<T>,
    pub r2_mat: DMatrix<T>,
    pub p_samples: DMatrix<T>,
    pub q_samples: DMatrix<T>,
    pub r1_samples: DMatrix<T>,
    pub r2_samples: DMatrix<T>,
    /// `B` of the range-compatible variant.
    pub range_map: Option<DMatrix<T>>,
    // R²_i = r2_scale · r2_left[:, i] · r2_right[:, i]ᵀ
    r2_left: DMatrix<T>,
    r2_right: DMatrix<T>,
    r2_scale: T,
}

/// Draws a PL game instance. Deterministic in `params.seed`.
pub fn generate_pl_game<T: Real>(params: &PlGameParams) -> Result<PlGameInstance<T>> {
    params.validate()?;
    let (d, l, n) = (params.d, params.l, params.n);
    let (lo, hi) = params.interval;
    let mut rng = rng::substream(params.seed, INSTANCE_STREAM);

    let factor = |rng: &mut rng::StreamRng| {
        let basis = column_orthogonal(DMatrix::from_vec(d, l, rng::normals(rng, d * l)));
        let diag: Vec<f64> = (0..l).map(|_| rng::uniform(rng, lo, hi).sqrt()).collect();
        // Σ = U D Uᵀ, so a sample is U D^{1/2} z.
        let mut sqrt_cov = basis;
        for (j, s) in diag.iter().enumerate() {
            sqrt_cov.column_mut(j).scale_mut(*s);
        }
        sqrt_cov
    };
    let p_factor = factor(&mut rng);
    let q_factor = factor(&mut rng);
    let cross_sqrt = CROSS_COVARIANCE_SCALE.sqrt();
    let v1 = DMatrix::from_vec(d, d, rng::normals(&mut rng, d * d)) * cross_sqrt;
    let v2 = DMatrix::from_vec(d, d, rng::normals(&mut rng, d * d)) * cross_sqrt;

    let p_samples = &p_factor * DMatrix::from_vec(l, n, rng::normals(&mut rng, l * n));
    let q_samples = &q_factor * DMatrix::from_vec(l, n, rng::normals(&mut rng, l * n));
    let r1_samples = &v1 * DMatrix::from_vec(d, n, rng::normals(&mut rng, d * n));
    let r2_samples = &v2 * DMatrix::from_vec(d, n, rng::normals(&mut rng, d * n));
    let range_map = if params.range_compatible {
        Some(DMatrix::from_vec(d, d, rng::normals(&mut rng, d * d)) * (params.range_map_scale / (d as f64).sqrt()))
    } else {
        None
    };

    PlGameInstance::from_samples(
        params.clone(),
        lift(&p_samples),
        lift(&q_samples),
        lift(&r1_samples),
        lift(&r2_samples),
        range_map.as_ref().map(lift),
    )
}

impl<T: Real> PlGameInstance<T> {
    /// Assembles an instance from its samples, recomputing the averaged
    /// matrices.
    pub fn from_samples(
        params: PlGameParams,
        p_samples: DMatrix<T>,
        q_samples: DMatrix<T>,
        r1_samples: DMatrix<T>,
        r2_samples: DMatrix<T>,
        range_map: Option<DMatrix<T>>,
    ) -> Result<Self> {
        let (d, n) = (params.d, params.n);
        for (name, m) in [("p", &p_samples), ("q", &q_samples), ("r1", &r1_samples), ("r2", &r2_samples)] {
            if m.shape() != (d, n) {
                return Err(Error::invalid(format!("{name} samples must be {d}x{n}, got {:?}", m.shape())));
            }
        }
        if params.range_compatible != range_map.is_some() {
            return Err(Error::invalid("range_map must be present exactly when range_compatible is set"));
        }
        let inv_n = T::one() / T::lit(n as f64);
        let cross = T::lit(CROSS_SAMPLE_FACTOR);
        let p_mat = (&p_samples * p_samples.transpose()) * inv_n;
        let q_mat = (&q_samples * q_samples.transpose()) * inv_n;
        let r1_mat = (&r1_samples * r1_samples.transpose()) * (inv_n * cross);
        let (r2_left, r2_right, r2_scale) = match &range_map {
            Some(b) => (b * &q_samples, q_samples.clone(), T::one()),
            None => (r2_samples.clone(), r2_samples.clone(), cross),
        };
        let r2_mat = (&r2_left * r2_right.transpose()) * (inv_n * r2_scale);
        Ok(PlGameInstance {
            params,
            p_mat,
            q_mat,
            r1_mat,
            r2_mat,
            p_samples,
            q_samples,
            r1_samples,
            r2_samples,
            range_map,
            r2_left,
            r2_right,
            r2_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.d
    }

    /// `G(x) = min_y g(x, y) = −½ xᵀ B Q Bᵀ x` in the range-compatible variant.
    pub fn lower_min_value(&self, x: &DVector<T>) -> Option<T> {
        let b = self.range_map.as_ref()?;
        let z = b.tr_mul(x);
        Some(-T::lit(0.5) * z.dot(&(&self.q_mat * &z)))
    }

    /// Smallest eigenvalue of `Q` above `1e-8·‖Q‖`: the effective PL constant
    /// on `range(Q)`.
    pub fn effective_mu(&self) -> T {
        let eig = self.q_mat.clone().symmetric_eigen();
        let top = eig.eigenvalues.amax();
        let floor = top * T::lit(1e-8);
        eig.eigenvalues
            .iter()
            .copied()
            .filter(|v| *v > floor)
            .fold(top, |a, b| a.min(b))
    }
}

impl<T: Real> BilevelOracle<T> for PlGameInstance<T> {
    fn name(&self) -> &'static str {
        "plgame"
    }

    fn upper_dim(&self) -> usize {
        self.params.d
    }

    fn lower_dim(&self) -> usize {
        self.params.d
    }

    fn upper_samples(&self) -> usize {
        self.params.n
    }

    fn lower_samples(&self) -> usize {
        self.params.n
    }

    fn f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        let half = T::lit(0.5);
        match batch {
            Batch::Full => Ok(half * x.dot(&(&self.p_mat * x)) + x.dot(&(&self.r1_mat * y))),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let cross = T::lit(CROSS_SAMPLE_FACTOR);
                let mut acc = T::zero();
                for &i in idx {
                    let px = self.p_samples.column(i).dot(x);
                    let r = self.r1_samples.column(i);
                    acc += half * px * px + cross * r.dot(x) * r.dot(y);
                }
                Ok(acc * w)
            }
        }
    }

    fn g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<T> {
        check_point(self, x, y)?;
        let half = T::lit(0.5);
        match batch {
            Batch::Full => Ok(half * y.dot(&(&self.q_mat * y)) + x.dot(&(&self.r2_mat * y))),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let mut acc = T::zero();
                for &i in idx {
                    let qy = self.q_samples.column(i).dot(y);
                    acc += half * qy * qy
                        + self.r2_scale * self.r2_left.column(i).dot(x) * self.r2_right.column(i).dot(y);
                }
                Ok(acc * w)
            }
        }
    }

    fn grad_x_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        Ok(self.upper_derivs(x, y, batch)?.grad_x)
    }

    fn grad_y_f(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        Ok(self.upper_derivs(x, y, batch)?.grad_y)
    }

    fn grad_y_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DVector<T>> {
        check_point(self, x, y)?;
        match batch {
            Batch::Full => Ok(&self.q_mat * y + self.r2_mat.tr_mul(x)),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let mut acc = DVector::zeros(self.params.d);
                for &i in idx {
                    let q = self.q_samples.column(i);
                    acc.axpy(q.dot(y), &q, T::one());
                    let coef = self.r2_scale * self.r2_left.column(i).dot(x);
                    acc.axpy(coef, &self.r2_right.column(i), T::one());
                }
                Ok(acc * w)
            }
        }
    }

    fn jac_xy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        check_point(self, x, y)?;
        match batch {
            Batch::Full => Ok(self.r2_mat.clone()),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let mut acc = DMatrix::zeros(self.params.d, self.params.d);
                for &i in idx {
                    acc.ger(self.r2_scale, &self.r2_left.column(i), &self.r2_right.column(i), T::one());
                }
                Ok(acc * w)
            }
        }
    }

    fn hess_yy_g(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<DMatrix<T>> {
        check_point(self, x, y)?;
        match batch {
            Batch::Full => Ok(self.q_mat.clone()),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let mut acc = DMatrix::zeros(self.params.d, self.params.d);
                for &i in idx {
                    let q = self.q_samples.column(i);
                    acc.ger(T::one(), &q, &q, T::one());
                }
                Ok(acc * w)
            }
        }
    }

    fn upper_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<UpperDerivs<T>> {
        check_point(self, x, y)?;
        match batch {
            Batch::Full => Ok(UpperDerivs {
                grad_x: &self.p_mat * x + &self.r1_mat * y,
                grad_y: self.r1_mat.tr_mul(x),
            }),
            Batch::Indices(idx) => {
                let w: T = batch_weight(idx, self.params.n)?;
                let cross = T::lit(CROSS_SAMPLE_FACTOR);
                let d = self.params.d;
                let mut gx = DVector::zeros(d);
                let mut gy = DVector::zeros(d);
                for &i in idx {
                    let p = self.p_samples.column(i);
                    let r = self.r1_samples.column(i);
                    gx.axpy(p.dot(x), &p, T::one());
                    gx.axpy(cross * r.dot(y), &r, T::one());
                    gy.axpy(cross * r.dot(x), &r, T::one());
                }
                Ok(UpperDerivs {
                    grad_x: gx * w,
                    grad_y: gy * w,
                })
            }
        }
    }

    fn lower_derivs(&self, x: &DVector<T>, y: &DVector<T>, batch: Batch<'_>) -> Result<LowerDerivs<T>> {
        Ok(LowerDerivs {
            grad_y: self.grad_y_g(x, y, batch)?,
            jac_xy: self.jac_xy_g(x, y, batch)?,
            hess_yy: self.hess_yy_g(x, y, batch)?,
        })
    }

    fn exact_lower(&self, x: &DVector<T>) -> Option<Result<DVector<T>>> {
        let b = self.range_map.as_ref()?;
        if x.len() != self.params.d {
            return Some(Err(Error::invalid("x has the wrong length")));
        }
        // ∇_y g = Q(y + Bᵀx), so y = −Bᵀx is a minimizer.
        Some(Ok(-b.tr_mul(x)))
    }
}

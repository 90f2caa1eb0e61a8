//! Library routines against independent reference computations: a cyclic
//! Jacobi eigensolver, LU solves, closed-form quadratic identities and a
//! Monte-Carlo variance estimate.

use nalgebra::{DMatrix, DVector};
use pl_bilevel::diagnostics::pl_residual;
use pl_bilevel::hypergrad::{clipped_hypergradient, InnerSolve};
use pl_bilevel::problems::{generate_pl_game, generate_quad_oracle, PlGameParams, QuadParams};
use pl_bilevel::solvers::{self, MomentumCoeffs, SolverConfig, SolverKind, StepSchedule};
use pl_bilevel::spectral::{apply_clamped_inverse, clamp_spectrum, project_spectral_norm, ClipSpec};
use pl_bilevel::trace_io::rng::{normals, substream, uniform, StreamRng};
use pl_bilevel::{Batch, BilevelOracle, FeasibleSet64, QuadOracle64};

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
/// Returns eigenvalues and eigenvectors (as columns).
fn jacobi_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let mut a = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * a.norm().max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

fn from_eigen(vals: &[f64], vecs: &DMatrix<f64>) -> DMatrix<f64> {
    vecs * DMatrix::from_diagonal(&DVector::from_column_slice(vals)) * vecs.transpose()
}

fn gaussian(rng: &mut StreamRng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_vec(r, c, normals(rng, r * c))
}

fn random_symmetric(rng: &mut StreamRng, n: usize) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    (&g + g.transpose()) * 0.5
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1.0)
}

#[test]
fn jacobi_reference_diagonalizes() {
    let mut rng = substream(11, "jacobi-self-check");
    for n in 1..9 {
        let a = random_symmetric(&mut rng, n);
        let (vals, vecs) = jacobi_eigen(&a);
        assert!(rel(&from_eigen(&vals, &vecs), &a) < 1e-13);
        assert!(rel(&(vecs.transpose() * &vecs), &DMatrix::identity(n, n)) < 1e-13);
    }
}

#[test]
fn clamp_spectrum_matches_jacobi_route() {
    let mut rng = substream(12, "clamp-vs-jacobi");
    for trial in 0..100 {
        let n = 2 + trial % 9;
        let a = random_symmetric(&mut rng, n) * 2.0;
        let lo = uniform(&mut rng, 0.05, 0.5);
        let hi = lo + uniform(&mut rng, 0.1, 2.0);
        let (vals, vecs) = jacobi_eigen(&a);
        let clamped: Vec<f64> = vals.iter().map(|v| v.clamp(lo, hi)).collect();
        let want = from_eigen(&clamped, &vecs);
        let got = clamp_spectrum(&a, lo, hi).unwrap();
        assert!(rel(&got.reconstruct(), &want) < 1e-12, "trial {trial}");

        let mut sorted_got: Vec<f64> = got.eigenvalues().iter().copied().collect();
        let mut sorted_want = clamped.clone();
        sorted_got.sort_by(f64::total_cmp);
        sorted_want.sort_by(f64::total_cmp);
        for (g, w) in sorted_got.iter().zip(&sorted_want) {
            assert!((g - w).abs() < 1e-12);
        }

        // Inverse through the factorization versus an LU solve of the
        // reference reconstruction.
        let rhs = DVector::from_vec(normals(&mut rng, n));
        let by_lu = want.clone().lu().solve(&rhs).unwrap();
        let by_eig = apply_clamped_inverse(&got, &rhs).unwrap();
        assert!((&by_eig - &by_lu).norm() <= 1e-10 * by_lu.norm().max(1.0), "trial {trial}");
    }
}

#[test]
fn spectral_norm_projection_matches_singular_value_threshold() {
    let mut rng = substream(13, "spectral-vs-jacobi");
    for trial in 0..100 {
        let (r, c) = (1 + trial % 7, 1 + (trial / 7) % 6);
        let m = gaussian(&mut rng, r, c) * 2.0;
        let radius = uniform(&mut rng, 0.2, 3.0);
        let sigma = |x: &DMatrix<f64>| -> Vec<f64> {
            let (vals, _) = jacobi_eigen(&(x.transpose() * x));
            let mut s: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            s.truncate(r.min(c));
            s
        };
        let before = sigma(&m);
        let projected = project_spectral_norm(&m, radius).unwrap();
        let after = sigma(&projected);
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b.min(radius)).abs() < 1e-9, "trial {trial}: {a} vs min({b}, {radius})");
        }
        // The Frobenius distance to the spectral ball is the excess of the
        // singular values over the radius.
        let excess: f64 = before.iter().map(|s| (s - radius).max(0.0).powi(2)).sum::<f64>().sqrt();
        assert!(((&m - &projected).norm() - excess).abs() < 1e-9, "trial {trial}");
    }
}

fn quad(seed: u64) -> QuadOracle64 {
    generate_quad_oracle(&QuadParams::new(10, 10, (1.0, 4.0), seed)).unwrap()
}

fn wide_clip() -> ClipSpec<f64> {
    ClipSpec::new(1e6, 1e6, 1e-3, 1e3).unwrap()
}

#[test]
fn quad_hypergradient_matches_lu_formula() {
    for seed in 0..10 {
        let q = quad(seed);
        let mut rng = substream(seed, "quad-lu");
        let x = DVector::from_vec(normals(&mut rng, 10));
        let lu = q.q_mat.clone().lu();
        let y_star = -lu.solve(&q.r2_mat.tr_mul(&x)).unwrap();
        // ∇F = Px + R¹y* − R²Q⁻¹(R¹)ᵀx
        let truth = &q.p_mat * &x + &q.r1_mat * &y_star - &q.r2_mat * lu.solve(&q.r1_mat.tr_mul(&x)).unwrap();
        let w = clipped_hypergradient(&q, &x, &y_star, &wide_clip()).unwrap().w;
        assert!((&w - &truth).norm() <= 1e-10 * truth.norm().max(1.0), "seed {seed}");
        // F is quadratic, so ∇F is also its Hessian times x.
        let via_hessian = q.hyper_hessian() * &x;
        assert!((&via_hessian - &truth).norm() <= 1e-10 * truth.norm().max(1.0));
    }
}

#[test]
fn estimator_error_is_linear_in_lower_offset() {
    // For the quadratic oracle w(x, y) − ∇F(x) = R¹(y − y*).
    let q = quad(3);
    let mut rng = substream(3, "geometric-radii");
    let x = DVector::from_vec(normals(&mut rng, 10));
    let y_star = q.y_star(&x);
    let dir = DVector::from_vec(normals(&mut rng, 10)).normalize();
    let truth = clipped_hypergradient(&q, &x, &y_star, &wide_clip()).unwrap().w;
    let slope = (&q.r1_mat * &dir).norm();
    for k in 0..8 {
        let r = 10f64.powi(-k);
        let w = clipped_hypergradient(&q, &x, &(&y_star + &dir * r), &wide_clip()).unwrap().w;
        let err = (&w - &truth).norm();
        assert!((err / r - slope).abs() <= 1e-6 * slope, "radius {r}: {} vs {slope}", err / r);
    }
}

#[test]
fn pl_residual_equals_quadratic_form_on_quad() {
    for seed in 0..5 {
        let q = quad(seed);
        let mut rng = substream(seed, "pl-residual");
        let mu = q.q_mat.clone().symmetric_eigenvalues().min();
        for _ in 0..10 {
            let x = DVector::from_vec(normals(&mut rng, 10));
            let y = DVector::from_vec(normals(&mut rng, 10));
            let offset = &y - q.y_star(&x);
            let want = 0.5 * offset.dot(&(&q.q_mat * &offset));
            let got = pl_residual(&q, &x, &y, &InnerSolve::default()).unwrap();
            assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
            let grad = q.grad_y_g(&x, &y, Batch::Full).unwrap();
            assert!(grad.norm_squared() >= 2.0 * mu * got * (1.0 - 1e-9));
        }
    }
}

fn stationary_config(beta: f64) -> SolverConfig<f64> {
    SolverConfig {
        gamma: 1e-14,
        lambda: 1e-14,
        schedule: StepSchedule::Constant(1.0),
        coeffs: MomentumCoeffs::Fixed([beta; 5]),
        batch: 1,
        init_batch: 1,
        horizon: 1,
        seed: 5,
        clip: ClipSpec::new(1e6, 1e6, 1e-3, 1e6).unwrap(),
        set: FeasibleSet64::Unconstrained,
        init_radius: 1.0,
    }
}

/// Total variance of the momentum estimate `u` at a frozen iterate.
fn momentum_variance(beta: f64, steps: usize) -> (f64, f64) {
    let game = generate_pl_game::<f64>(&PlGameParams {
        d: 10,
        l: 8,
        n: 200,
        ..PlGameParams::experiment_regime(4)
    })
    .unwrap();
    let cfg = stationary_config(beta);
    let mut rng = substream(cfg.seed, "momentum-variance");
    let mut state = solvers::init_state(&game, &cfg, SolverKind::Msgbio, &mut rng).unwrap();
    let (x, y) = (state.x.clone(), state.y.clone());

    let singles: Vec<DVector<f64>> =
        (0..game.upper_samples()).map(|i| game.grad_x_f(&x, &y, Batch::Indices(&[i])).unwrap()).collect();
    let mean = singles.iter().fold(DVector::zeros(10), |a, s| a + s) / singles.len() as f64;
    let fresh = singles.iter().map(|s| (s - &mean).norm_squared()).sum::<f64>() / singles.len() as f64;

    let burn_in = (20.0 / beta) as usize;
    let mut sum = 0.0;
    for t in 0..burn_in + steps {
        state = solvers::msgbio_step(&state, &game, &cfg, &mut rng).unwrap();
        if t >= burn_in {
            sum += (&state.u - &mean).norm_squared();
        }
    }
    assert!((&state.x - &x).norm() < 1e-6, "iterate drifted");
    (sum / steps as f64, fresh)
}

#[test]
fn momentum_variance_shrinks_as_weight_falls() {
    // An exponential average of independent draws has variance
    // β/(2 − β) times the single-draw variance.
    let mut last = f64::INFINITY;
    for beta in [1.0, 0.5, 0.2, 0.05] {
        let (var, fresh) = momentum_variance(beta, 40_000);
        let want = beta / (2.0 - beta) * fresh;
        assert!((var / want - 1.0).abs() < 0.15, "beta {beta}: variance {var:e}, predicted {want:e}");
        assert!(var < last);
        last = var;
    }
}

//! Constants report against a second, literal transcription of every formula.

use pl_bilevel::diagnostics::{constants_report, mgbio_bound, ProblemConstants};
use pl_bilevel::solvers::SolverKind;
use proptest::prelude::*;

struct Literal {
    kappa: f64,
    l_y: f64,
    l_f_upper: f64,
    l_g_upper: f64,
    l_hat: f64,
    l_breve: f64,
    l_check: f64,
    mgbio_lambda: f64,
    mgbio_gamma: f64,
    msgbio_lambda: f64,
    msgbio_gamma: f64,
    msgbio_lo: [f64; 5],
    msgbio_hi: f64,
    vr_lambda: f64,
    vr_gamma: f64,
    vr_lo: [f64; 5],
    vr_hi: f64,
}

fn literal(pc: &ProblemConstants, c_gy: f64, eta: f64, k: f64, m: f64) -> Literal {
    let (cfy, cgxy, mu, lf, lg, lgxy, lgyy) = (pc.c_fy, pc.c_gxy, pc.mu, pc.l_f, pc.l_g, pc.l_gxy, pc.l_gyy);
    let kappa = cgxy / mu;
    let bracket = cgxy * lgyy / mu.powi(2) + lgxy / mu;
    let l_y = bracket * (1.0 + cgxy / mu);
    let l_f_upper = (lf + lf * kappa + cfy * bracket) * (1.0 + kappa);
    let l_g_upper = (lg + lg * kappa + c_gy * bracket) * (1.0 + kappa);
    let l_hat = (4.0
        * (lf.powi(2)
            + lgxy.powi(2) * cfy.powi(2) / mu.powi(2)
            + lgyy.powi(2) * cgxy.powi(2) * cfy.powi(2) / mu.powi(4)
            + lf.powi(2) * cgxy.powi(2) / mu.powi(2)))
    .sqrt();
    let l_breve = (lf.powi(2)
        + lf.powi(2) / kappa.powi(2)
        + mu.powi(2) * lgxy.powi(2) / cfy.powi(2)
        + mu.powi(2) * lgyy.powi(2) / (cfy.powi(2) * kappa.powi(2)))
    .sqrt();
    let l_check = (2.0 * lf.powi(2) + lgxy.powi(2) + lgyy.powi(2)).sqrt();
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);

    let mgbio_lambda = 1.0 / (2.0 * lg * eta);
    let mgbio_gamma = min(&[1.0 / (2.0 * l_f_upper * eta), mgbio_lambda * mu.powi(2) / (16.0 * l_hat.powi(2))]);

    let msgbio_lambda = min(&[m.sqrt() / (2.0 * lg * k), 1.0 / (4.0 * lg)]);
    let lam = msgbio_lambda;
    let msgbio_gamma = min(&[
        m.sqrt() / (2.0 * l_f_upper * k),
        lam * mu.powi(2) / (16.0 * l_hat.powi(2)),
        5f64.sqrt() / (4.0 * l_breve),
        1.0 / (32.0 * lg.powi(2) * lam),
        5.0 / (8.0 * l_breve.powi(2) * lam),
    ]);
    let base = [
        10.0,
        10.0 * kappa.powi(2),
        1.0,
        10.0 * cfy.powi(2) / mu.powi(2),
        10.0 * cfy.powi(2) * kappa.powi(2) / mu.powi(2),
    ];

    let vr_lambda = min(&[1.0 / (4.0 * 2f64.sqrt() * lg), m.cbrt() / (2.0 * lg * k)]);
    let lam = vr_lambda;
    let vr_gamma = min(&[
        m.cbrt() / (2.0 * l_f_upper * k),
        lam * mu.powi(2) / (16.0 * l_hat.powi(2)),
        1.0 / (8.0 * l_check),
        1.0 / (64.0 * lg.powi(2) * lam),
        1.0 / (32.0 * l_check.powi(2) * lam),
        lam * mu / (8.0 * l_g_upper),
    ]);
    Literal {
        kappa,
        l_y,
        l_f_upper,
        l_g_upper,
        l_hat,
        l_breve,
        l_check,
        mgbio_lambda,
        mgbio_gamma,
        msgbio_lambda,
        msgbio_gamma,
        msgbio_lo: base,
        msgbio_hi: m.sqrt() / k,
        vr_lambda,
        vr_gamma,
        vr_lo: base.map(|b| b + 2.0 / (3.0 * k.powi(3))),
        vr_hi: m.cbrt() / k,
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn positive() -> impl Strategy<Value = f64> {
    (-2.0f64..2.0).prop_map(|e| 10f64.powf(e))
}

proptest! {
    #[test]
    fn report_matches_literal_formulas(
        c_fy in positive(), c_gxy in positive(), mu in positive(), gap in positive(),
        l_f in positive(), l_gxy in 0.0f64..3.0, l_gyy in 0.0f64..3.0, c_gy in positive(),
        eta in 0.01f64..1.0, k in positive(), m in positive(),
    ) {
        let pc = ProblemConstants {
            c_fy, c_gxy, c_gy: Some(c_gy), mu, l_f, l_g: mu + gap, l_gxy, l_gyy, sampled: false,
        };
        let r = constants_report(&pc, eta, k, m).unwrap();
        let lit = literal(&pc, c_gy, eta, k, m);
        prop_assert_eq!(r.kappa, c_gxy / mu);
        for (name, got, want) in [
            ("l_y", r.l_y, lit.l_y),
            ("l_f_upper", r.l_f_upper, lit.l_f_upper),
            ("l_g_upper", r.l_g_upper, lit.l_g_upper),
            ("l_hat", r.l_hat, lit.l_hat),
            ("l_breve", r.l_breve, lit.l_breve),
            ("l_check", r.l_check, lit.l_check),
            ("mgbio lambda", r.mgbio.lambda_max, lit.mgbio_lambda),
            ("mgbio gamma", r.mgbio.gamma_max, lit.mgbio_gamma),
            ("msgbio lambda", r.msgbio.lambda_max, lit.msgbio_lambda),
            ("msgbio gamma", r.msgbio.gamma_max, lit.msgbio_gamma),
            ("vr lambda", r.vr_msgbio.lambda_max, lit.vr_lambda),
            ("vr gamma", r.vr_msgbio.gamma_max, lit.vr_gamma),
        ] {
            prop_assert!(close(got, want), "{}: {} vs {}", name, got, want);
            prop_assert!(got.is_finite());
        }
        prop_assert!(close(lit.kappa, r.kappa));
        for i in 0..5 {
            prop_assert!(close(r.msgbio.windows[i].lo, lit.msgbio_lo[i]));
            prop_assert!(close(r.msgbio.windows[i].hi, lit.msgbio_hi));
            prop_assert!(close(r.vr_msgbio.windows[i].lo, lit.vr_lo[i]));
            prop_assert!(close(r.vr_msgbio.windows[i].hi, lit.vr_hi));
            prop_assert_eq!(r.msgbio.windows[i].empty, lit.msgbio_lo[i] > lit.msgbio_hi);
        }
        prop_assert!(close(r.gamma_max(SolverKind::Mgbio, lit.mgbio_lambda), lit.mgbio_gamma));
    }
}

#[test]
fn unknown_c_gy_defaults_to_heuristic() {
    let pc = ProblemConstants {
        c_fy: 2.0,
        c_gxy: 1.0,
        c_gy: None,
        mu: 0.5,
        l_f: 4.0,
        l_g: 3.0,
        l_gxy: 0.0,
        l_gyy: 0.0,
        sampled: false,
    };
    let r = constants_report(&pc, 1.0, 1.0, 1.0).unwrap();
    assert!(r.c_gy_heuristic);
    assert_eq!(r.c_gy, 2.0 * 3.0 / 4.0);
    // Quadratic problems: the Lipschitz terms of the Hessian blocks vanish.
    assert_eq!(r.l_y, 0.0);
    assert_eq!(r.l_f_upper, 4.0 * (1.0 + 2.0) * (1.0 + 2.0));
}

#[test]
fn deterministic_bound_closed_form() {
    // 4√R/√(3Tγη) at R = 3, T = 4, γ = 1/4, η = 1 is 4·√3/√3 = 4.
    assert!((mgbio_bound(3.0, 4, 0.25, 1.0) - 4.0).abs() < 1e-15);
    let b = mgbio_bound(2.0, 1000, 0.01, 0.5);
    assert!((b - 4.0 * 2f64.sqrt() / (15f64).sqrt()).abs() < 1e-14);
}

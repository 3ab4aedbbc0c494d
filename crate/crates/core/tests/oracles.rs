//! Cross-checks against independent computations.

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;

use tdaqm::delay_lmi::{max_stable_delay, oracle_delay_margin, rightmost_root, SearchOptions};
use tdaqm::model::{augment, dc_gain, disturbance_transfer, linearize, operating_point, NetworkParams, TdsSystem};
use tdaqm::synthesis::{synthesize_gain, verify_closed_loop, Gains, SynthesisCertificate, SynthesisOptions};

/// Right-hand side of the nonlinear model with constant delay `h` for the
/// lagged arguments: `(Ẇ, q̇)` as a function of `(W, q, W_lag, q_lag, p_lag)`.
fn fluid_rhs(net: &NetworkParams, x: [f64; 5]) -> [f64; 2] {
    let [w, q, wl, ql, pl] = x;
    let n = f64::from(net.n_flows);
    let r = q / net.capacity + net.prop_delay;
    let rl = ql / net.capacity + net.prop_delay;
    [1.0 / r - w * wl / (2.0 * rl) * pl, n * w / r - net.capacity]
}

#[test]
fn linearization_matches_finite_differences_of_the_fluid_model() {
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).unwrap();
    let sys = linearize(&net, &op);
    let x0 = [op.w0, net.q_target, op.w0, net.q_target, op.p0];
    let f0 = fluid_rhs(&net, x0);
    assert!(f0[0].abs() < 1e-12 && f0[1].abs() < 1e-9);
    let jac = |j: usize| {
        let eps = 1e-6 * x0[j].abs().max(1e-3);
        let mut up = x0;
        let mut dn = x0;
        up[j] += eps;
        dn[j] -= eps;
        let (fu, fd) = (fluid_rhs(&net, up), fluid_rhs(&net, dn));
        [(fu[0] - fd[0]) / (2.0 * eps), (fu[1] - fd[1]) / (2.0 * eps)]
    };
    let (dw, dq, dwl, dql, dp) = (jac(0), jac(1), jac(2), jac(3), jac(4));
    let pairs = [
        (sys.a[(0, 0)], dw[0]),
        (sys.a[(0, 1)], dq[0]),
        (sys.a[(1, 0)], dw[1]),
        (sys.a[(1, 1)], dq[1]),
        (sys.a_d[(0, 0)], dwl[0]),
        (sys.a_d[(0, 1)], dql[0]),
        (sys.b[(0, 0)], dp[0]),
    ];
    for (got, want) in pairs {
        assert_relative_eq!(got, want, max_relative = 1e-6);
    }
    assert_eq!(sys.a_d[(1, 0)], 0.0);
    assert_eq!(sys.a_d[(1, 1)], 0.0);
}

#[test]
fn open_loop_transfer_matches_frequency_response_of_linear_model() {
    // T(jω) from the closed form against (jωI − A − Ad e^{−jωh})⁻¹ Bd
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).unwrap();
    let sys = linearize(&net, &op);
    let k = Gains::reference_plain();
    for omega in [0.1, 1.0, 3.0, 10.0] {
        let s = Complex64::new(0.0, omega);
        let e = (-s * op.r0).exp();
        let m = DMatrix::<Complex64>::from_fn(2, 2, |i, j| {
            let id = if i == j { s } else { Complex64::new(0.0, 0.0) };
            id - sys.a[(i, j)] - (sys.a_d[(i, j)] + sys.b[(i, 0)] * k.k[(0, j)]) * e
        });
        let resp = m.try_inverse().unwrap() * DMatrix::from_column_slice(2, 1, &[Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0)]);
        let t = disturbance_transfer(&net, &op, &k, op.r0, s).unwrap().value;
        assert!((t - resp[(1, 0)]).norm() < 1e-9 * resp[(1, 0)].norm(), "ω = {omega}: {t} vs {}", resp[(1, 0)]);
    }
    let dc = dc_gain(&net, &op, &k, op.r0).unwrap();
    assert_relative_eq!(dc, 0.0615, max_relative = 0.01);
}

/// Lambert W on the branch nearest the starting point, by Newton iteration.
fn lambert_w(z: Complex64, mut w: Complex64) -> Complex64 {
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - z;
        w -= f / (ew * (w + 1.0));
    }
    w
}

#[test]
fn scalar_roots_agree_with_lambert_w() {
    // s + e^{−sh} = 0  ⇔  s = W(−h)/h
    for h in [0.3, 1.0, 1.4, 2.0] {
        let root = rightmost_root(&DMatrix::from_element(1, 1, 0.0), &DMatrix::from_element(1, 1, -1.0), h).unwrap();
        let w = lambert_w(Complex64::new(-h, 0.0), root * h);
        let want = w / h;
        assert!((w * w.exp() + h).norm() < 1e-12);
        assert!((root - Complex64::new(want.re, want.im.abs())).norm() < 1e-8, "h = {h}: {root} vs {want}");
    }
}

#[test]
fn certified_margins_bracket_below_the_spectral_margin() {
    let sys = TdsSystem::autonomous(
        DMatrix::from_row_slice(2, 2, &[-2.0, 0.0, 0.0, -0.9]),
        DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, -1.0, -1.0]),
        1.0,
    )
    .unwrap();
    let spectral = oracle_delay_margin(&sys.a, &sys.a_d, 20.0, 1e-6).unwrap().unwrap();
    let opts = SearchOptions { h_cap: 20.0, ..SearchOptions::default() };
    let mut prev = 0.0;
    for r in 1..=2 {
        let rep = max_stable_delay(&sys, r, 1e-3, &opts).unwrap();
        assert!(rep.h_max > 0.0 && rep.h_max <= spectral + 1e-9, "r = {r}: {} vs {spectral}", rep.h_max);
        assert!(rep.h_max >= prev - 1e-3);
        prev = rep.h_max;
    }
}

#[test]
fn reference_network_admits_both_gain_structures() {
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).unwrap();
    let lin = linearize(&net, &op);
    let aug = augment(&lin).unwrap();
    for sys in [lin, aug] {
        let cert = synthesize_gain(&sys, op.r0, 1, &SynthesisOptions::default()).unwrap();
        assert!(cert.is_feasible(), "{:?}", cert.verdict);
        assert_eq!(cert.gains.k.ncols(), sys.dim());
        assert!(cert.oracle_root[0] < 0.0);
        // the closed loop also passes the analysis test on its own
        let check = verify_closed_loop(&sys, &cert.gains, op.r0, 1, &SearchOptions::default()).unwrap();
        assert!(check.certificate.is_feasible());
        let text = cert.to_toml().unwrap();
        let back = SynthesisCertificate::from_toml(&text).unwrap();
        assert_eq!(back, cert);
        assert!((back.recompute_margin(&sys).unwrap() - cert.margin).abs() <= 1e-10 * cert.margin.abs().max(1.0));
    }
}

#[test]
fn unstabilizable_loop_is_never_certified() {
    // zero gain on the augmented model leaves the integrator on the axis
    let net = NetworkParams::REFERENCE;
    let op = operating_point(&net).unwrap();
    let aug = augment(&linearize(&net, &op)).unwrap();
    let zero = Gains::integral(0.0, 0.0, 0.0);
    let opts = SearchOptions { restarts: 2, iterations: 1000, ..SearchOptions::default() };
    if let Ok(c) = verify_closed_loop(&aug, &zero, op.r0, 1, &opts) {
        assert!(!c.certificate.is_feasible());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn operating_point_identities(n in 1u32..200, c in 100f64..1e5, tp in 0.0f64..1.0, frac in 0.0f64..1.0) {
        let net = NetworkParams { n_flows: n, capacity: c, prop_delay: tp, q_target: 800.0 * frac, buffer_size: 800.0 };
        if let Ok(op) = operating_point(&net) {
            prop_assert!((op.w0 * op.w0 * op.p0 - 2.0).abs() < 1e-12);
            prop_assert!((f64::from(n) * op.w0 / op.r0 - c).abs() < 1e-9 * c);
            prop_assert!(op.w0 >= 1.0 && op.p0 <= 1.0);
        }
    }

    #[test]
    fn scalar_margin_is_pi_over_two_over_gain(k in 0.2f64..5.0) {
        // ẋ = −k x(t−h) crosses at h = π/(2k)
        let h = oracle_delay_margin(&DMatrix::from_element(1, 1, 0.0), &DMatrix::from_element(1, 1, -k), 20.0 / k, 1e-7)
            .unwrap()
            .unwrap();
        prop_assert!((h - std::f64::consts::FRAC_PI_2 / k).abs() < 1e-5);
    }
}

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taper::models::{
    certify_lpop, certify_opponent, coarsen, ImpulseResponse, Mode, ModeConditions, DEFAULT_TAIL_TOL, RATE_TOL,
    SIGN_TOL,
};
use taper::oracles::suites::random_lpop_modes;

/// Checks the rate conditions directly at `alpha`.
fn rates_hold(g: &ImpulseResponse, tau0: usize, alpha: f64) -> bool {
    let v = g.values();
    let tol = 1e-9;
    let positive = (0..tau0.saturating_sub(1)).all(|t| v[t + 1] <= alpha * v[t] + tol * v[t].abs().max(1.0));
    let negative = (tau0..v.len() - 1).all(|t| v[t + 1].abs() >= alpha * v[t].abs() - tol * v[t].abs().max(1e-300));
    positive && negative
}

#[test]
fn mode_conditions_imply_certification_on_a_thousand_systems() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut certified = 0;
    let mut drawn = 0;
    while certified < 1000 {
        drawn += 1;
        assert!(drawn < 10_000, "generator rarely produces crossing kernels");
        let modes = random_lpop_modes(&mut rng);
        let g = ImpulseResponse::from_modes(&modes, DEFAULT_TAIL_TOL).unwrap();
        let cond = ModeConditions::check(&modes, &g);
        if !cond.holds() {
            continue;
        }
        let cert = certify_lpop(&g).unwrap_or_else(|v| panic!("{modes:?}: {v}"));
        let witness = cond.witness_rate().unwrap();
        assert!(cert.contains(witness), "{modes:?}: {witness} not in [{}, {}]", cert.alpha_lo, cert.alpha_hi);
        certified += 1;
    }
}

fn kernel_values() -> impl Strategy<Value = Vec<f64>> {
    (0.05..3.0f64, 1usize..4, 0.05..0.95f64, 0.5..0.99f64, 2usize..40).prop_map(|(head, pos, a, b, neg)| {
        // positive phase decaying at rate a, then a negative phase decaying at b
        let mut v = Vec::new();
        let mut x = head;
        for _ in 0..pos {
            v.push(x);
            x *= a;
        }
        let mut y = -0.3 * head;
        for _ in 0..neg {
            v.push(y);
            y *= b;
        }
        v
    })
}

proptest! {
    #[test]
    fn certificates_are_sound(values in kernel_values()) {
        let g = ImpulseResponse::from_values(values).unwrap();
        if let Ok(cert) = certify_lpop(&g) {
            prop_assert!(cert.alpha_lo <= cert.alpha_hi + RATE_TOL);
            prop_assert!(cert.alpha_hi < 1.0);
            prop_assert!(rates_hold(&g, cert.tau0, cert.alpha_lo));
            prop_assert!(rates_hold(&g, cert.tau0, cert.alpha_hi));
            let v = g.values();
            prop_assert!(v[..cert.tau0].iter().all(|&x| x > SIGN_TOL));
            prop_assert!(v[cert.tau0..].iter().all(|&x| x <= SIGN_TOL));
        }
    }

    #[test]
    fn certification_is_scale_invariant(values in kernel_values(), c in 0.01..100.0f64) {
        let g = ImpulseResponse::from_values(values).unwrap();
        let scaled = g.scaled(c);
        match (certify_lpop(&g), certify_lpop(&scaled)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.tau0, b.tau0);
                prop_assert!((a.alpha_lo - b.alpha_lo).abs() < 1e-9);
                prop_assert!((a.alpha_hi - b.alpha_hi).abs() < 1e-9);
            }
            (Err(a), Err(b)) => prop_assert_eq!(a.kind, b.kind),
            (a, b) => prop_assert!(false, "scaling changed the verdict: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn two_mode_conditions_certify(
        c_pos in 0.05..3.0f64,
        l_pos in 0.0..0.9f64,
        gap in 0.0..0.09f64,
        c_neg in -2.0..-0.01f64,
    ) {
        let l_neg = (l_pos + gap).min(0.99);
        let modes = [Mode::new(c_pos, l_pos).unwrap(), Mode::new(c_neg, l_neg).unwrap()];
        let g = ImpulseResponse::from_modes(&modes, DEFAULT_TAIL_TOL).unwrap();
        let cond = ModeConditions::check(&modes, &g);
        prop_assume!(cond.holds());
        let cert = certify_lpop(&g).unwrap();
        prop_assert!(cert.contains(cond.witness_rate().unwrap()));
    }

    #[test]
    fn coarsening_preserves_mass(values in kernel_values(), block in 1usize..5) {
        let g = ImpulseResponse::from_values(values).unwrap();
        prop_assume!(block == 1 || block < g.horizon());
        let c = coarsen(&g, block).unwrap();
        prop_assert_eq!(c.horizon(), g.horizon().div_ceil(block));
        assert_relative_eq!(c.dc_gain() * block as f64, g.dc_gain(), max_relative = 1e-9, epsilon = 1e-12);
    }

    #[test]
    fn coarsening_to_one_crossover_step(values in kernel_values()) {
        // a block as long as the positive phase leaves a single positive entry
        let g = ImpulseResponse::from_values(values).unwrap();
        let tau0 = certify_opponent(&g).unwrap().tau0;
        prop_assume!(tau0 < g.horizon());
        let c = coarsen(&g, tau0).unwrap();
        if c.head() > SIGN_TOL {
            prop_assert!(c.values()[1..].iter().all(|&x| x <= SIGN_TOL));
        }
    }
}

#[test]
fn mode_truncation_meets_tail_tolerance() {
    let modes = [Mode::new(0.4, 0.9).unwrap(), Mode::new(-0.17, 0.95).unwrap()];
    let g = ImpulseResponse::from_modes(&modes, 1e-9).unwrap();
    let n = g.horizon() - 1;
    assert!(0.57 * 0.95f64.powi(n as i32) <= 1e-9);
    assert!(0.57 * 0.95f64.powi(n as i32 - 1) > 1e-9);
    for (t, &x) in g.values().iter().enumerate() {
        assert_relative_eq!(x, 0.4 * 0.9f64.powi(t as i32) - 0.17 * 0.95f64.powi(t as i32), epsilon = 1e-15);
    }
}

use pnc_core::contract::{compute_optimal_exchange, joint_utility, EnergyBounds, TradeParams};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRID_STEP: f64 = 1e-4;

/// Exhaustive scan of the bounds at `GRID_STEP`, endpoints included.
fn grid_argmax(p: &TradeParams, b: &EnergyBounds) -> (f64, f64) {
    let n = ((b.x_max - b.x_min) / GRID_STEP).round() as i64;
    let mut best = (b.x_min, joint_utility(b.x_min, p));
    for i in 1..=n {
        let x = (b.x_min + i as f64 * GRID_STEP).min(b.x_max);
        let j = joint_utility(x, p);
        if j > best.1 {
            best = (x, j);
        }
    }
    let j0 = joint_utility(0.0, p);
    if j0 > best.1 {
        best = (0.0, j0);
    }
    best
}

fn params(alpha: f64, beta: f64, gamma: f64, delta: f64, c_g: f64, v_g: f64) -> TradeParams {
    TradeParams {
        alpha,
        beta,
        gamma,
        delta,
        p_c: 0.2,
        p_d: 0.15,
        c_g,
        v_g,
        fee: 0.5,
    }
}

fn assert_matches_grid(p: &TradeParams, b: &EnergyBounds) {
    let x = compute_optimal_exchange(p, b);
    let (gx, gj) = grid_argmax(p, b);
    let j = joint_utility(x, p);
    assert!(x >= b.x_min && x <= b.x_max, "x*={x} outside {b:?}");
    assert!(j >= gj - 1e-9, "analytic J={j} below grid J={gj} for {p:?} {b:?}");
    // Only an exact tie between the two branches may put the argmaxes apart.
    if (x - gx).abs() > GRID_STEP + 1e-12 {
        assert!((j - gj).abs() <= 1e-9, "x*={x} grid={gx} for {p:?} {b:?}");
    }
}

#[test]
fn worked_examples() {
    // alpha - c_g = 0.4, beta = 0.01: vertex at 20 kWh, J = 4.0.
    let p = params(0.5, 0.01, 0.1, 0.01, 0.1, 0.3);
    let b = EnergyBounds::new(-30.0, 40.0).unwrap();
    assert!((compute_optimal_exchange(&p, &b) - 20.0).abs() < 1e-12);
    assert!((joint_utility(20.0, &p) - 4.0).abs() < 1e-12);
    assert_matches_grid(&p, &b);

    let clamped = EnergyBounds::new(-30.0, 15.0).unwrap();
    assert!((compute_optimal_exchange(&p, &clamped) - 15.0).abs() < 1e-12);
    assert!((joint_utility(15.0, &p) - 3.75).abs() < 1e-12);
    assert_matches_grid(&p, &clamped);
}

#[test]
fn hundred_random_sets_match_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6f70);
    for _ in 0..100 {
        let p = params(
            rng.gen_range(0.0..0.8),
            rng.gen_range(0.001..0.05),
            rng.gen_range(0.0..0.3),
            rng.gen_range(0.001..0.05),
            rng.gen_range(0.0..0.3),
            rng.gen_range(0.0..0.5),
        );
        let b = EnergyBounds::new(-rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)).unwrap();
        assert_matches_grid(&p, &b);
    }
}

#[test]
fn no_trade_when_neither_branch_pays() {
    let p = params(0.1, 0.01, 0.4, 0.01, 0.2, 0.3);
    let b = EnergyBounds::new(-20.0, 20.0).unwrap();
    assert_eq!(compute_optimal_exchange(&p, &b), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_never_worse_than_samples(
        alpha in 0.0..1.0f64, beta in 1e-4..0.1f64, gamma in 0.0..0.5f64, delta in 1e-4..0.1f64,
        c_g in 0.0..0.5f64, v_g in 0.0..0.8f64, lo in 0.0..50.0f64, hi in 0.0..50.0f64,
        probes in prop::collection::vec(0.0..1.0f64, 32),
    ) {
        let p = params(alpha, beta, gamma, delta, c_g, v_g);
        let b = EnergyBounds::new(-lo, hi).unwrap();
        let x = compute_optimal_exchange(&p, &b);
        prop_assert!(x >= -lo && x <= hi);
        let j = joint_utility(x, &p);
        prop_assert!(j >= 0.0);
        for t in probes {
            let y = -lo + t * (lo + hi);
            prop_assert!(j >= joint_utility(y, &p) - 1e-9);
        }
    }
}

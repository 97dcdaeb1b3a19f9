mod support;

use mlhf::curvature::{CurvatureOperator, DenseCurvature};
use mlhf::pcg::pcg;
use mlhf::vecops::{norm, sub};
use proptest::prelude::*;
use rand::Rng;
use support::oracles::{random_spd, rng, to_vec};
use support::pcg_checks::sweep;

#[test]
fn exact_on_random_spd_systems() {
    let out = sweep(100, 64, (0.5, 5.0), 1, false);
    assert!(out.worst_rel_error <= 1e-6, "{out:?}");
    assert!(out.worst_energy_rise <= 1e-12, "{out:?}");
    assert!(out.worst_descent >= 0.0, "{out:?}");
}

#[test]
fn wide_spectra_stay_monotone_and_descending() {
    // Rounding defeats finite termination here, but not the energy decrease.
    let out = sweep(60, 64, (1e-2, 1e2), 3, false);
    assert!(out.worst_energy_rise <= 1e-12, "{out:?}");
    assert!(out.worst_descent >= 0.0, "{out:?}");
}

#[test]
fn diagonal_preconditioning_keeps_the_guarantees() {
    let out = sweep(40, 48, (0.5, 5.0), 2, true);
    assert!(out.worst_energy_rise <= 1e-12, "{out:?}");
    assert!(out.worst_descent >= 0.0, "{out:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn residual_and_iteration_cap(seed in any::<u64>(), n in 0usize..12, warm in any::<bool>()) {
        let mut r = rng(seed);
        let d = r.gen_range(1..16);
        let a = random_spd(d, 0.05, 20.0, &mut r);
        let dense = DenseCurvature::new(d, to_vec(&a)).unwrap();
        let op = CurvatureOperator::new(&dense, None).unwrap();
        let b: Vec<f64> = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
        let x0: Vec<f64> = if warm { (0..d).map(|_| r.gen_range(-1.0..1.0)).collect() } else { vec![0.0; d] };
        let p: Vec<f64> = (0..d).map(|_| r.gen_range(0.5..2.0)).collect();
        let res = pcg(&b, |v| op.ggn_vp(v), &x0, &p, n, 0.0).unwrap();
        prop_assert!(res.iterations <= n);
        prop_assert_eq!(op.applications(), res.iterations + 1 + usize::from(res.breakdown));
        let recomputed = sub(&b, &op.ggn_vp(&res.x).unwrap());
        prop_assert!(norm(&sub(&recomputed, &res.r)) <= 1e-8 * norm(&b).max(norm(&recomputed)).max(1e-300));
    }
}

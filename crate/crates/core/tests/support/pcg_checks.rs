//! PCG checks against dense direct solves.

use super::oracles::{random_spd, rng};
use mlhf::pcg::pcg;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

#[derive(Debug, Default, Clone, Copy)]
pub struct SweepOutcome {
    pub systems: usize,
    pub worst_rel_error: f64,
    /// Largest increase of the energy error between consecutive iterates,
    /// relative to the starting energy error.
    pub worst_energy_rise: f64,
    /// Smallest `<x_i, b> / (|x_i| |b|)` over all iterates `i >= 1`.
    pub worst_descent: f64,
}

fn apply(a: &DMatrix<f64>) -> impl Fn(&[f64]) -> mlhf::Result<Vec<f64>> + '_ {
    move |v| Ok((a * DVector::from_column_slice(v)).iter().copied().collect())
}

/// Cold-started solves with `n = d`, `eps = 0` on matrices with spectrum in
/// `[lo, hi]`; `random_precond` draws a positive diagonal instead of the identity.
pub fn sweep(count: usize, max_dim: usize, (lo, hi): (f64, f64), seed: u64, random_precond: bool) -> SweepOutcome {
    let mut r = rng(seed);
    let mut out = SweepOutcome { systems: count, worst_descent: f64::INFINITY, ..Default::default() };
    for _ in 0..count {
        let d = r.gen_range(1..=max_dim);
        let a = random_spd(d, lo, hi, &mut r);
        let b: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let p: Vec<f64> = if random_precond { (0..d).map(|_| r.gen_range(0.2..5.0)).collect() } else { vec![1.0; d] };
        let exact = a.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&b));
        let energy = |x: &[f64]| {
            let e = DVector::from_column_slice(x) - &exact;
            (e.transpose() * &a * &e)[(0, 0)].max(0.0).sqrt()
        };
        let x0 = vec![0.0; d];
        let res = pcg(&b, apply(&a), &x0, &p, d, 0.0).unwrap();
        let err = (DVector::from_column_slice(&res.x) - &exact).norm() / exact.norm();
        out.worst_rel_error = out.worst_rel_error.max(err);

        let e0 = energy(&x0);
        let mut prev = e0;
        let bn = DVector::from_column_slice(&b).norm();
        for i in 1..=d {
            let xi = pcg(&b, apply(&a), &x0, &p, i, 0.0).unwrap().x;
            let ei = energy(&xi);
            out.worst_energy_rise = out.worst_energy_rise.max((ei - prev) / e0);
            prev = ei;
            let xn = DVector::from_column_slice(&xi).norm();
            if xn > 0.0 {
                let c = mlhf::vecops::dot(&xi, &b) / (xn * bn);
                out.worst_descent = out.worst_descent.min(c);
            }
        }
    }
    out
}

mod support;

use mlhf::curvature::CurvatureOperator;
use mlhf::nn::build_model;
use mlhf::objective::{ModelObjective, Objective};
use mlhf::vecops::dot;
use proptest::prelude::*;
use rand::Rng;
use support::oracles::{dense_ggn, jitter, max_rel, random_batch, rng, small_zoo};

#[test]
fn ggn_matches_dense_assembly_on_small_zoo() {
    for (name, spec, kind) in small_zoo() {
        let (model, params) = build_model(&spec, 3).unwrap();
        assert!(model.total_dim() <= 64, "{name} has {} parameters", model.total_dim());
        let mut r = rng(5);
        let batch = random_batch(&spec, kind, model.output_dim(), 4, &mut r);
        let w = jitter(&params.flatten(), &mut r);
        let s: Vec<f64> = (0..w.len()).map(|_| r.gen_range(0.0..0.5)).collect();
        let dense = dense_ggn(&model, kind, &w, &batch.x, &s);

        let obj = ModelObjective::new(&spec, kind, 3).unwrap();
        let lin = obj.linearize(&w, &batch).unwrap();
        let op = CurvatureOperator::new(&*lin.curvature, Some(s.clone())).unwrap();
        for i in 0..w.len() {
            let mut e = vec![0.0; w.len()];
            e[i] = 1.0;
            let col = op.ggn_vp(&e).unwrap();
            let want: Vec<f64> = dense.column(i).iter().copied().collect();
            let err = max_rel(&col, &want);
            assert!(err <= 1e-5, "{name}: column {i} off by {err}");
        }
    }
}

fn probe(seed: u64) -> (f64, f64, f64, f64, f64) {
    let zoo = small_zoo();
    let (_, spec, kind) = &zoo[seed as usize % zoo.len()];
    let obj = ModelObjective::new(spec, *kind, seed).unwrap();
    let mut r = rng(seed);
    let batch = random_batch(spec, *kind, obj.model().output_dim(), 3, &mut r);
    let w = obj.initial_point();
    let lin = obj.linearize(&w, &batch).unwrap();
    let s: Vec<f64> = (0..w.len()).map(|_| r.gen_range(0.0..0.1)).collect();
    let min_s = s.iter().cloned().fold(f64::INFINITY, f64::min);
    let op = CurvatureOperator::new(&*lin.curvature, Some(s)).unwrap();
    let u: Vec<f64> = (0..w.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v: Vec<f64> = (0..w.len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let uhv = dot(&u, &op.ggn_vp(&v).unwrap());
    let vhu = dot(&v, &op.ggn_vp(&u).unwrap());
    let vhv = dot(&v, &op.ggn_vp(&v).unwrap());
    let undamped = dot(&v, &lin.curvature.product(&v).unwrap());
    (uhv, vhu, vhv, min_s * dot(&v, &v), undamped)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn symmetric_and_positive_semidefinite(seed in any::<u64>()) {
        let (uhv, vhu, vhv, floor, undamped) = probe(seed);
        prop_assert!((uhv - vhu).abs() <= 1e-9 * uhv.abs().max(vhu.abs()).max(1e-12));
        prop_assert!(undamped >= -1e-12 * vhv.abs().max(1.0));
        prop_assert!(vhv >= floor * (1.0 - 1e-12));
    }
}

#[test]
fn operator_is_linear() {
    let (_, spec, kind) = &small_zoo()[0];
    let obj = ModelObjective::new(spec, *kind, 1).unwrap();
    let mut r = rng(1);
    let batch = random_batch(spec, *kind, 3, 5, &mut r);
    let lin = obj.linearize(&obj.initial_point(), &batch).unwrap();
    let n = obj.dim();
    let op = CurvatureOperator::new(&*lin.curvature, Some(vec![0.3; n])).unwrap();
    let v1: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let v2: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (a, b) = (1.7, -0.4);
    let mix: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
    let lhs = op.ggn_vp(&mix).unwrap();
    let (h1, h2) = (op.ggn_vp(&v1).unwrap(), op.ggn_vp(&v2).unwrap());
    let rhs: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| a * x + b * y).collect();
    assert!(max_rel(&lhs, &rhs) <= 1e-12);
    assert!(op.ggn_vp(&vec![0.0; n]).unwrap().iter().all(|&x| x == 0.0));
}

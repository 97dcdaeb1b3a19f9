mod support;

use mlhf::controller::ControllerBank;
use mlhf::curvature::CurvatureOperator;
use mlhf::meta::{lp_term, rollout, BatchSource, MetaConfig, MetaTrainer, ReplayBuffer, RolloutConfig, WindowState};
use mlhf::nn::{Batch, LossKind, ModelSpec};
use mlhf::objective::{ModelObjective, Objective};
use mlhf::optim::MlhfConfig;
use mlhf::pcg::pcg;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use support::meta_fd::surrogate;
use support::oracles::{random_batch, random_spd, rng};

struct Stream {
    spec: ModelSpec,
    cursor: u64,
}

impl BatchSource for Stream {
    fn next_batch(&mut self) -> mlhf::Result<Batch> {
        let b = random_batch(&self.spec, LossKind::CrossEntropy, 3, 8, &mut rng(self.cursor));
        self.cursor += 1;
        Ok(b)
    }

    fn position(&self) -> u64 {
        self.cursor
    }

    fn seek(&mut self, position: u64) {
        self.cursor = position;
    }
}

fn setup(t: usize) -> (ModelObjective, Vec<Batch>, ModelSpec) {
    let spec = ModelSpec::mlp(&[2, 16, 3]);
    let obj = ModelObjective::new(&spec, LossKind::CrossEntropy, 21).unwrap();
    let mut r = rng(21);
    let data = (0..=t).map(|_| random_batch(&spec, LossKind::CrossEntropy, 3, 8, &mut r)).collect();
    (obj, data, spec)
}

#[test]
fn replay_sampling_is_uniform() {
    let mut buf = ReplayBuffer::new(8);
    for k in 0..4usize {
        buf.store(k);
    }
    let mut counts = [0usize; 4];
    let mut r = rng(0);
    let draws = 10_000;
    for _ in 0..draws {
        counts[buf.sample(&mut r).unwrap()] += 1;
    }
    let (mean, sd) = (draws as f64 / 4.0, (draws as f64 * 0.25 * 0.75).sqrt());
    for c in counts {
        assert!((c as f64 - mean).abs() <= 5.0 * sd, "{counts:?}");
    }
}

#[test]
fn fresh_controllers_reduce_to_uniform_damped_pcg() {
    let (obj, data, _) = setup(4);
    let cfg = RolloutConfig { t: 4, ..Default::default() };
    let start = WindowState::fresh(obj.initial_point(), &obj.layout());
    let trace = rollout(&obj, &ControllerBank::init(1), &cfg, start, data.clone()).unwrap();
    let ln2 = std::f64::consts::LN_2;
    let n = obj.dim();
    let mut w = obj.initial_point();
    let mut d0 = vec![0.0; n];
    for (t, step) in trace.steps.iter().enumerate() {
        assert_eq!(step.w, w);
        let lin = obj.linearize(&w, &data[t]).unwrap();
        let op = CurvatureOperator::new(&*lin.curvature, Some(vec![ln2; n])).unwrap();
        let res = pcg(&lin.grad, |v| op.ggn_vp(v), &d0, &vec![ln2; n], 4, 0.0).unwrap();
        assert_eq!(step.d, res.x);
        assert_eq!(step.s_range, (ln2, ln2));
        mlhf::vecops::axpy(-1.0, &res.x, &mut w);
        d0 = res.x;
    }
    assert_eq!(trace.end.w, w);
}

#[test]
fn single_step_window_and_weights() {
    let (obj, data, _) = setup(1);
    let cfg = RolloutConfig { t: 1, ..Default::default() };
    let start = WindowState::fresh(obj.initial_point(), &obj.layout());
    let trace = rollout(&obj, &ControllerBank::init(2), &cfg, start, data).unwrap();
    assert_eq!(trace.weights, vec![1.0]);
    assert_eq!(trace.ls, trace.steps[0].ls);

    let (obj, data, _) = setup(6);
    let cfg = RolloutConfig { t: 6, ..Default::default() };
    let start = WindowState::fresh(obj.initial_point(), &obj.layout());
    let trace = rollout(&obj, &ControllerBank::init(2), &cfg, start, data).unwrap();
    assert!((trace.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn one_meta_step_lowers_both_losses_on_the_frozen_window() {
    let (obj, data, _) = setup(3);
    let cfg = RolloutConfig { t: 3, mlhf: MlhfConfig { lr: 1.0, n: 4, use_precond: true }, ..Default::default() };
    let mut bank = ControllerBank::init(3);
    let mut r = rng(3);
    for c in [&mut bank.damping, &mut bank.precond] {
        let flat: Vec<f64> = c.flatten().iter().map(|v| v + r.gen_range(-0.3..0.3)).collect();
        c.set_flat(&flat).unwrap();
    }
    let start = WindowState::fresh(obj.initial_point(), &obj.layout());
    let trace = rollout(&obj, &bank, &cfg, start, data).unwrap();
    let (ls0, lp0) = surrogate(&obj, &bank, &cfg, &trace);
    assert!((ls0 - trace.ls).abs() <= 1e-12 * ls0.abs().max(1.0));
    assert!((lp0 - trace.lp).abs() <= 1e-12 * lp0.abs().max(1.0));

    let meta = MetaConfig { rollout: cfg, meta_lr: 1e-4, ..Default::default() };
    let mut trainer = MetaTrainer::new(bank, meta).unwrap();
    assert!(trainer.apply(&trace));
    let (ls1, lp1) = surrogate(&obj, trainer.bank(), &cfg, &trace);
    assert!(ls1 < ls0, "{ls1} >= {ls0}");
    assert!(lp1 < lp0, "{lp1} >= {lp0}");
}

#[test]
fn zero_meta_gradient_leaves_controllers_in_place() {
    let (obj, data, _) = setup(2);
    let cfg = RolloutConfig { t: 2, ..Default::default() };
    let bank = ControllerBank::init(4);
    let start = WindowState::fresh(obj.initial_point(), &obj.layout());
    let mut trace = rollout(&obj, &bank, &cfg, start, data).unwrap();
    trace.grad_damping.fill(0.0);
    trace.grad_precond.fill(0.0);
    let mut trainer = MetaTrainer::new(bank.clone(), MetaConfig { rollout: cfg, ..Default::default() }).unwrap();
    assert!(trainer.apply(&trace));
    let moved = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!(moved(&trainer.bank().damping.flatten(), &bank.damping.flatten()) <= 1e-12);
    assert!(moved(&trainer.bank().precond.flatten(), &bank.precond.flatten()) <= 1e-12);

    trace.grad_damping[0] = f64::NAN;
    assert!(!trainer.apply(&trace));
}

#[test]
fn trainer_chains_windows_and_fills_the_replay() {
    let spec = ModelSpec::mlp(&[2, 16, 3]);
    let obj = ModelObjective::new(&spec, LossKind::CrossEntropy, 0).unwrap();
    let cfg = MetaConfig {
        rollout: RolloutConfig { t: 3, ..Default::default() },
        windows_per_episode: 3,
        fresh_prob: 0.5,
        seed: 9,
        ..Default::default()
    };
    let mut trainer = MetaTrainer::new(ControllerBank::init(0), cfg).unwrap();
    let mut stream = Stream { spec, cursor: 0 };
    let mut episodes = Vec::new();
    for _ in 0..12 {
        let rec = trainer.iterate(&obj, &mut stream).unwrap();
        assert!(!rec.diverged);
        assert!(rec.lp.is_finite() && rec.ls.is_finite());
        episodes.push((rec.episode, rec.new_episode));
    }
    assert_eq!(trainer.iterations(), 12);
    let starts = episodes.iter().filter(|(_, s)| *s).count();
    assert_eq!(starts, 4);
    assert!(trainer.replay().len() >= 4);
    assert_ne!(trainer.bank(), &ControllerBank::init(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn alignment_term_is_bounded_by_the_natural_gradient(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = r.gen_range(1..8);
        let h = random_spd(n, 0.1, 10.0, &mut r);
        let g = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
        let d = DVector::from_fn(n, |_, _| r.gen_range(-1.0..1.0));
        let hd = &h * &d;
        let bound = -(g.dot(&h.clone().cholesky().unwrap().solve(&g))).sqrt();
        let term = lp_term(d.as_slice(), g.as_slice(), hd.as_slice()).unwrap();
        prop_assert!(term >= bound * (1.0 + 1e-12));
    }
}

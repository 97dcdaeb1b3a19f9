//! Finite-difference oracle for the windowed meta-gradient.
//!
//! Replays a recorded window with every stopped quantity frozen at its
//! recorded value, so the only free inputs are the controller parameters.

use mlhf::controller::{features, Controller, ControllerBank};
use mlhf::curvature::CurvatureOperator;
use mlhf::meta::{lp_term, RolloutConfig, RolloutTrace};
use mlhf::objective::Objective;
use mlhf::pcg::pcg;
use mlhf::vecops::{axpy, dot};

/// `(L_s, L_p)` of the frozen window under `bank`.
pub fn surrogate(obj: &dyn Objective, bank: &ControllerBank, cfg: &RolloutConfig, trace: &RolloutTrace) -> (f64, f64) {
    let layout = obj.layout();
    let dim = layout.dim();
    let t_len = trace.steps.len() as f64;
    let mut states = trace.start.states.clone();
    let (mut ls, mut lp) = (0.0, 0.0);
    for (t, step) in trace.steps.iter().enumerate() {
        let feats = features(&layout, &step.d0, &step.r0, &step.g).unwrap();
        let (s, ds) = bank.damping.step(&layout, &states.damping, &feats).unwrap();
        states.damping = ds;
        let p = if cfg.mlhf.use_precond {
            let (p, ps) = bank.precond.step(&layout, &states.precond, &feats).unwrap();
            states.precond = ps;
            p
        } else {
            vec![1.0; dim]
        };
        let lin = obj.linearize(&step.w, &trace.batches[t]).unwrap();
        let op = CurvatureOperator::new(&*lin.curvature, Some(s)).unwrap();
        let res = pcg(&step.g, |v| op.ggn_vp(v), &step.d0, &p, cfg.mlhf.n, 0.0).unwrap();

        let mut w_next = step.w.clone();
        axpy(-cfg.mlhf.lr, &res.x, &mut w_next);
        let next = obj.loss(&w_next, &trace.batches[t + 1]).unwrap();
        let same = obj.loss(&w_next, &trace.batches[t]).unwrap();
        ls += trace.weights[t] * (next + same - 2.0 * step.loss);

        if cfg.lp_residual {
            lp += dot(&res.r, &res.r) / t_len;
        } else {
            let hd = op.ggn_vp(&res.x).unwrap();
            if let Some(v) = lp_term(&res.x, &step.g, &hd) {
                lp += v / t_len;
            }
        }
    }
    (ls, lp)
}

/// Central differences of `L_s` in the damping parameters and `L_p` in the
/// preconditioner parameters, at the coordinates `which`.
pub fn fd_gradients(
    obj: &dyn Objective,
    bank: &ControllerBank,
    cfg: &RolloutConfig,
    trace: &RolloutTrace,
    which: &[usize],
    h: f64,
) -> (Vec<f64>, Vec<f64>) {
    let perturb = |ctrl: &Controller, i: usize, delta: f64| {
        let mut c = ctrl.clone();
        let mut flat = c.flatten();
        flat[i] += delta;
        c.set_flat(&flat).unwrap();
        c
    };
    let mut gs = Vec::with_capacity(which.len());
    let mut gp = Vec::with_capacity(which.len());
    for &i in which {
        let mut b = bank.clone();
        b.damping = perturb(&bank.damping, i, h);
        let up = surrogate(obj, &b, cfg, trace).0;
        b.damping = perturb(&bank.damping, i, -h);
        let down = surrogate(obj, &b, cfg, trace).0;
        gs.push((up - down) / (2.0 * h));

        let mut b = bank.clone();
        b.precond = perturb(&bank.precond, i, h);
        let up = surrogate(obj, &b, cfg, trace).1;
        b.precond = perturb(&bank.precond, i, -h);
        let down = surrogate(obj, &b, cfg, trace).1;
        gp.push((up - down) / (2.0 * h));
    }
    (gs, gp)
}

/// Largest violation of `|a - b| <= tol * max(|b|, 1e-3 * max_j |b_j|)`;
/// at most 1 means the check passes.
pub fn worst_violation(analytic: &[f64], fd: &[f64], tol: f64) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / (tol * b.abs().max(1e-3 * scale).max(f64::MIN_POSITIVE)))
        .fold(0.0, f64::max)
}

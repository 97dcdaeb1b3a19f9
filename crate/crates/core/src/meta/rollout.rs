use super::losses::{loss_ls, lp_term, lp_term_grad, ls_term};
use crate::controller::{block_backward, features, Controller, ControllerBank, CoordinateStates, RoleStates};
use crate::curvature::CurvatureOperator;
use crate::error::{Error, Result};
use crate::nn::{Batch, KindLayout};
use crate::objective::{Linearization, Objective};
use crate::optim::MlhfConfig;
use crate::pcg::{pcg_recorded, PcgTape};
use crate::tensor::Tensor;
use crate::vecops::{axpy, dot, min_max, norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutConfig {
    /// Window length.
    pub t: usize,
    pub mlhf: MlhfConfig,
    /// Use `mean |r_n|^2` instead of the natural-gradient alignment loss.
    pub lp_residual: bool,
    /// Fill [`RolloutTrace::stops`]; costs two extra curvature products per step.
    pub report_stops: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { t: 10, mlhf: MlhfConfig::default(), lp_residual: false, report_stops: false }
    }
}

/// Training state carried from one window to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowState {
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub r: Vec<f64>,
    pub states: CoordinateStates,
}

impl WindowState {
    /// Cold start at `w`.
    pub fn fresh(w: Vec<f64>, layout: &KindLayout) -> Self {
        let n = w.len();
        Self { w, d: vec![0.0; n], r: vec![0.0; n], states: CoordinateStates::zeros(layout) }
    }
}

/// One step of a window. Everything here is a constant to the meta-gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub w: Vec<f64>,
    pub g: Vec<f64>,
    pub d0: Vec<f64>,
    pub r0: Vec<f64>,
    pub d: Vec<f64>,
    pub r: Vec<f64>,
    /// `l(x^t; w^t)`.
    pub loss: f64,
    /// `l(x^t; w^{t+1})`.
    pub loss_same: f64,
    /// `l(x^{t+1}; w^{t+1})`.
    pub loss_next: f64,
    pub ls: f64,
    pub lp: Option<f64>,
    pub dot_dg: f64,
    pub curvature_dd: f64,
    pub s_range: (f64, f64),
    pub p_range: (f64, f64),
}

/// Norms of the cotangents that reach the stop points and are dropped there.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StopReport {
    /// `[w, g, d0, r0]`.
    pub raw: [f64; 4],
    /// `[l_p into damping, l_s into preconditioner]`.
    pub severed_raw: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub steps: Vec<StepTrace>,
    /// `T + 1` batches; the last one only enters `l(x^{T+1}; w^{T+1})`.
    pub batches: Vec<Batch>,
    pub start: WindowState,
    pub end: WindowState,
    /// Softmax weights of the `l_s` terms.
    pub weights: Vec<f64>,
    pub lp: f64,
    pub ls: f64,
    /// `d l_s / d theta_s` in [`Controller::flatten`] order.
    pub grad_damping: Vec<f64>,
    /// `d l_p / d theta_p`; zero when the preconditioner is disabled.
    pub grad_precond: Vec<f64>,
    pub stops: Option<StopReport>,
    pub skipped_lp: usize,
}

struct Recorded {
    features: Vec<Tensor>,
    damping_in: RoleStates,
    precond_in: Option<RoleStates>,
}

struct Pending<'a> {
    lin: Linearization<'a>,
    s: Vec<f64>,
    tape: PcgTape,
    trace: StepTrace,
    hd: Vec<f64>,
    grad_same: Vec<f64>,
}

struct Finalized {
    s_bar: Vec<f64>,
    p_bar: Vec<f64>,
    stop_w: Vec<f64>,
    stop_g_ls: Vec<f64>,
    stop_g_lp: Vec<f64>,
    stop_d0_ls: Vec<f64>,
    stop_d0_lp: Vec<f64>,
    severed_s: Vec<f64>,
    severed_p: Vec<f64>,
}

fn finalize(
    mut p: Pending<'_>,
    g_next: &[f64],
    loss_next: f64,
    cfg: &RolloutConfig,
    skipped: &mut usize,
) -> Result<(StepTrace, Finalized)> {
    let window = cfg.t as f64;
    let lr = cfg.mlhf.lr;
    p.trace.loss_next = loss_next;
    p.trace.ls = ls_term(loss_next, p.trace.loss_same, p.trace.loss);

    let op = CurvatureOperator::new(&*p.lin.curvature, Some(p.s.clone()))?;
    let d = &p.trace.d;
    let g = &p.trace.g;

    // l_s^t = l(x^{t+1}; w - lr d) + l(x^t; w - lr d) - stop(2 l(x^t; w)), unit weight.
    let mut c_ls: Vec<f64> = g_next.iter().zip(&p.grad_same).map(|(a, b)| -lr * (a + b)).collect();
    if !crate::vecops::all_finite(&c_ls) {
        return Err(Error::NonFinite("l_s cotangent".into()));
    }
    let gs = p.tape.backward(&op, &c_ls, None, cfg.report_stops)?;

    let (x_bar_lp, r_bar_lp, direct_g) = if cfg.lp_residual {
        p.trace.lp = Some(dot(&p.trace.r, &p.trace.r));
        let rb: Vec<f64> = p.trace.r.iter().map(|v| 2.0 * v / window).collect();
        (vec![0.0; d.len()], Some(rb), vec![0.0; d.len()])
    } else {
        match lp_term_grad(d, g, &p.hd) {
            Some(gd) => {
                let q = p.trace.curvature_dd;
                let direct: Vec<f64> = d.iter().map(|v| -v / (q.sqrt() * window)).collect();
                (gd.iter().map(|v| v / window).collect(), None, direct)
            }
            None => {
                *skipped += 1;
                log::debug!("l_p term skipped: <d, H d> = {}", p.trace.curvature_dd);
                (vec![0.0; d.len()], None, vec![0.0; d.len()])
            }
        }
    };
    let gp = p.tape.backward(&op, &x_bar_lp, r_bar_lp.as_deref(), cfg.report_stops)?;

    // Severed: l_p into the damping (through the solve and through <d, H d>), l_s into P.
    let mut severed_s = gp.damping.clone();
    if !cfg.lp_residual && p.trace.lp.is_some() {
        let q = p.trace.curvature_dd;
        let k = dot(d, g) / (2.0 * q.powf(1.5) * window);
        for (sv, dv) in severed_s.iter_mut().zip(d) {
            *sv += k * dv * dv;
        }
    }

    let stop_w: Vec<f64> = g_next.iter().zip(&p.grad_same).map(|(a, b)| a + b).collect();
    let mut stop_g_lp = gp.b.clone();
    axpy(1.0, &direct_g, &mut stop_g_lp);
    c_ls.clear();
    let fin = Finalized {
        s_bar: gs.damping,
        p_bar: gp.p_diag,
        stop_w,
        stop_g_ls: gs.b,
        stop_g_lp,
        stop_d0_ls: gs.x0.unwrap_or_default(),
        stop_d0_lp: gp.x0.unwrap_or_default(),
        severed_s,
        severed_p: gs.p_diag,
    };
    Ok((p.trace, fin))
}

fn gather(flat: &[f64], idx: &[usize]) -> Tensor {
    Tensor::new(vec![idx.len(), 1], idx.iter().map(|&i| flat[i]).collect()).expect("column shape")
}

/// Backpropagates per-step output cotangents through one controller's
/// recurrence, re-executing each step. Returns the flat meta-gradient and
/// the squared norms of the feature cotangents `(d0, r0, g)`.
fn controller_bptt(
    ctrl: &Controller,
    layout: &KindLayout,
    features: &[&[Tensor]],
    states_in: &[&RoleStates],
    out_bars: &[Vec<f64>],
) -> Result<(Vec<f64>, [f64; 3])> {
    let mut grad = vec![0.0; ctrl.dim()];
    let mut feat_sq = [0.0; 3];
    let mut carry: Vec<[Tensor; 4]> = states_in[0].blocks.iter().map(|(_, s)| s.tensors.clone()).collect();
    for c in carry.iter_mut() {
        for t in c.iter_mut() {
            t.data_mut().fill(0.0);
        }
    }
    for t in (0..out_bars.len()).rev() {
        for (b, (kind, idx)) in layout.groups().iter().enumerate() {
            let exec = ctrl.execute(*kind, &features[t][b], &states_in[t].blocks[b].1)?;
            let bg = block_backward(&exec, gather(&out_bars[t], idx), &carry[b])?;
            let mut off = Controller::kind_offset(*kind);
            for p in &bg.params {
                for (gv, pv) in grad[off..off + p.len()].iter_mut().zip(p.data()) {
                    *gv += pv;
                }
                off += p.len();
            }
            for row in bg.features.data().chunks(3) {
                for k in 0..3 {
                    feat_sq[k] += row[k] * row[k];
                }
            }
            carry[b] = bg.state;
        }
    }
    Ok((grad, feat_sq))
}

/// Runs one window of `cfg.t` meta-learned steps from `start` on
/// `batches[0..t]` and returns both losses with their meta-gradients.
///
/// Gradients flow only through the controller outputs and their recurrent
/// states. The parameters, gradients, warm-start vectors, the last term of
/// each `l_s^t` and the softmax weights are constants, and each loss reaches
/// only its own controller.
pub fn rollout(
    obj: &dyn Objective,
    bank: &ControllerBank,
    cfg: &RolloutConfig,
    start: WindowState,
    batches: Vec<Batch>,
) -> Result<RolloutTrace> {
    let t_len = cfg.t;
    if t_len == 0 {
        return Err(Error::InvalidArgument("window length must be at least 1".into()));
    }
    if batches.len() != t_len + 1 {
        return Err(Error::InvalidArgument(format!("{} batches for a window of {t_len}", batches.len())));
    }
    let layout = obj.layout();
    let dim = layout.dim();
    if start.w.len() != dim {
        return Err(Error::Shape(format!("{} parameters for an objective of {dim}", start.w.len())));
    }
    let lr = cfg.mlhf.lr;

    let mut w = start.w.clone();
    let mut d_prev = start.d.clone();
    let mut r_prev = start.r.clone();
    let mut states = start.states.clone();
    let mut recorded: Vec<Recorded> = Vec::with_capacity(t_len);
    let mut done: Vec<(StepTrace, Finalized)> = Vec::with_capacity(t_len);
    let mut pending: Option<Pending<'_>> = None;
    let mut skipped = 0;

    for t in 0..t_len {
        let batch = &batches[t];
        let lin = obj.linearize(&w, batch)?;
        if let Some(p) = pending.take() {
            done.push(finalize(p, &lin.grad, lin.loss, cfg, &mut skipped)?);
        }
        let g = lin.grad.clone();
        let feats = features(&layout, &d_prev, &r_prev, &g)?;
        let (s, damping_next) = bank.damping.step(&layout, &states.damping, &feats)?;
        let (p_diag, precond_next) = if cfg.mlhf.use_precond {
            let (p, st) = bank.precond.step(&layout, &states.precond, &feats)?;
            (p, Some(st))
        } else {
            (vec![1.0; dim], None)
        };
        recorded.push(Recorded {
            features: feats,
            damping_in: states.damping.clone(),
            precond_in: precond_next.as_ref().map(|_| states.precond.clone()),
        });
        states.damping = damping_next;
        if let Some(st) = precond_next {
            states.precond = st;
        }

        let op = CurvatureOperator::new(&*lin.curvature, Some(s.clone()))?;
        let (res, tape) = pcg_recorded(&g, &op, &d_prev, &p_diag, cfg.mlhf.n, 0.0)?;
        let hd = op.ggn_vp(&res.x)?;
        let q = dot(&res.x, &hd);
        let lp = lp_term(&res.x, &g, &hd);
        drop(op);

        let mut w_next = w.clone();
        axpy(-lr, &res.x, &mut w_next);
        let (loss_same, grad_same) = obj.loss_and_grad(&w_next, batch)?;

        let trace = StepTrace {
            w: w.clone(),
            g,
            d0: d_prev.clone(),
            r0: r_prev.clone(),
            d: res.x.clone(),
            r: res.r.clone(),
            loss: lin.loss,
            loss_same,
            loss_next: f64::NAN,
            ls: f64::NAN,
            lp,
            dot_dg: dot(&res.x, &lin.grad),
            curvature_dd: q,
            s_range: min_max(&s),
            p_range: min_max(&p_diag),
        };
        d_prev = res.x;
        r_prev = res.r;
        w = w_next;
        pending = Some(Pending { lin, s, tape, trace, hd, grad_same });
    }
    let (loss_last, grad_last) = obj.loss_and_grad(&w, &batches[t_len])?;
    if let Some(p) = pending.take() {
        done.push(finalize(p, &grad_last, loss_last, cfg, &mut skipped)?);
    }

    let ls_terms: Vec<f64> = done.iter().map(|(s, _)| s.ls).collect();
    let (ls, weights) = loss_ls(&ls_terms);
    let lp_terms: Vec<Option<f64>> = done.iter().map(|(s, _)| s.lp).collect();
    let lp = super::losses::loss_lp(&lp_terms, t_len);
    if !ls.is_finite() || !lp.is_finite() {
        return Err(Error::NonFinite("meta losses".into()));
    }

    let s_bars: Vec<Vec<f64>> =
        done.iter().zip(&weights).map(|((_, f), wt)| f.s_bar.iter().map(|v| wt * v).collect()).collect();
    let feats: Vec<&[Tensor]> = recorded.iter().map(|r| r.features.as_slice()).collect();
    let damping_in: Vec<&RoleStates> = recorded.iter().map(|r| &r.damping_in).collect();
    let (grad_damping, feat_sq_s) = controller_bptt(&bank.damping, &layout, &feats, &damping_in, &s_bars)?;
    let (grad_precond, feat_sq_p) = if cfg.mlhf.use_precond {
        let p_bars: Vec<Vec<f64>> = done.iter().map(|(_, f)| f.p_bar.clone()).collect();
        let precond_in: Vec<&RoleStates> = recorded.iter().map(|r| r.precond_in.as_ref().expect("recorded")).collect();
        controller_bptt(&bank.precond, &layout, &feats, &precond_in, &p_bars)?
    } else {
        (vec![0.0; bank.precond.dim()], [0.0; 3])
    };

    let stops = cfg.report_stops.then(|| {
        let mut raw_sq = [0.0; 4];
        let mut severed_sq = [0.0; 2];
        for ((_, f), wt) in done.iter().zip(&weights) {
            let sw: Vec<f64> = f.stop_w.iter().map(|v| wt * v).collect();
            let mut sg: Vec<f64> = f.stop_g_ls.iter().map(|v| wt * v).collect();
            axpy(1.0, &f.stop_g_lp, &mut sg);
            let mut sd: Vec<f64> = f.stop_d0_ls.iter().map(|v| wt * v).collect();
            if !f.stop_d0_lp.is_empty() {
                axpy(1.0, &f.stop_d0_lp, &mut sd);
            }
            for (k, v) in [&sw, &sg, &sd].into_iter().enumerate() {
                raw_sq[k] += dot(v, v);
            }
            let sp: Vec<f64> = f.severed_p.iter().map(|v| wt * v).collect();
            severed_sq[0] += dot(&f.severed_s, &f.severed_s);
            severed_sq[1] += dot(&sp, &sp);
        }
        raw_sq[1] += feat_sq_s[2] + feat_sq_p[2];
        raw_sq[2] += feat_sq_s[0] + feat_sq_p[0];
        raw_sq[3] += feat_sq_s[1] + feat_sq_p[1];
        StopReport { raw: raw_sq.map(f64::sqrt), severed_raw: severed_sq.map(f64::sqrt) }
    });

    let steps: Vec<StepTrace> = done.into_iter().map(|(s, _)| s).collect();
    let end = WindowState { w, d: d_prev, r: r_prev, states };
    if norm(&end.w).is_nan() {
        return Err(Error::NonFinite("parameters".into()));
    }
    Ok(RolloutTrace {
        steps,
        batches,
        start,
        end,
        weights,
        lp,
        ls,
        grad_damping,
        grad_precond,
        stops,
        skipped_lp: skipped,
    })
}

use super::{ensure_finite, Optimizer, StepRecord};
use crate::controller::{features, ControllerBank, CoordinateStates};
use crate::curvature::CurvatureOperator;
use crate::error::{Error, Result};
use crate::nn::{Batch, KindLayout};
use crate::objective::Objective;
use crate::pcg::pcg;
use crate::vecops::{axpy, dot, min_max, norm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlhfConfig {
    pub lr: f64,
    /// PCG iteration cap.
    pub n: usize,
    /// When false the preconditioner is the identity and its controller is not run.
    pub use_precond: bool,
}

impl MlhfConfig {
    /// `lr = b_tr / b_mt`, four PCG iterations, preconditioner on.
    pub fn from_batches(b_tr: usize, b_mt: usize) -> Self {
        Self { lr: b_tr as f64 / b_mt as f64, n: 4, use_precond: true }
    }
}

impl Default for MlhfConfig {
    fn default() -> Self {
        Self { lr: 1.0, n: 4, use_precond: true }
    }
}

/// Natural-gradient steps solved by a few PCG iterations whose damping and
/// preconditioner come from the controllers.
#[derive(Debug, Clone)]
pub struct Mlhf {
    bank: ControllerBank,
    layout: KindLayout,
    states: CoordinateStates,
    cfg: MlhfConfig,
    d: Vec<f64>,
    r: Vec<f64>,
    t: usize,
}

impl Mlhf {
    pub fn new(bank: ControllerBank, layout: KindLayout, cfg: MlhfConfig) -> Self {
        let dim = layout.dim();
        let states = CoordinateStates::zeros(&layout);
        Self { bank, layout, states, cfg, d: vec![0.0; dim], r: vec![0.0; dim], t: 0 }
    }

    pub fn config(&self) -> MlhfConfig {
        self.cfg
    }

    pub fn bank(&self) -> &ControllerBank {
        &self.bank
    }

    pub fn states(&self) -> &CoordinateStates {
        &self.states
    }

    /// Previous solution and residual, used to warm-start the next solve.
    pub fn warm_start(&self) -> (&[f64], &[f64]) {
        (&self.d, &self.r)
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }
}

impl Optimizer for Mlhf {
    fn name(&self) -> String {
        "mlhf".into()
    }

    fn step(&mut self, obj: &dyn Objective, w: &mut [f64], batch: &Batch) -> Result<StepRecord> {
        if w.len() != self.layout.dim() {
            return Err(Error::Shape(format!("{} parameters for a layout of {}", w.len(), self.layout.dim())));
        }
        let lin = obj.linearize(w, batch)?;
        ensure_finite(lin.loss, w)?;
        let g = &lin.grad;

        let feats = features(&self.layout, &self.d, &self.r, g)?;
        let (s, damping_states) = self.bank.damping.step(&self.layout, &self.states.damping, &feats)?;
        let p_diag = if self.cfg.use_precond {
            let (p, precond_states) = self.bank.precond.step(&self.layout, &self.states.precond, &feats)?;
            self.states.precond = precond_states;
            p
        } else {
            vec![1.0; w.len()]
        };
        self.states.damping = damping_states;

        let s_range = min_max(&s);
        let op = CurvatureOperator::new(&*lin.curvature, Some(s))?;
        let res = pcg(g, |v| op.ggn_vp(v), &self.d, &p_diag, self.cfg.n, 0.0)?;
        axpy(-self.cfg.lr, &res.x, w);
        ensure_finite(lin.loss, w)?;

        let rec = StepRecord {
            loss: lin.loss,
            dot_dg: Some(dot(&res.x, g)),
            res_norm: Some(norm(&res.r)),
            s_range: Some(s_range),
            p_range: Some(min_max(&p_diag)),
            applications: op.applications(),
            pcg_iterations: Some(res.iterations),
            batch_stats: lin.batch_stats,
            ..Default::default()
        };
        self.d = res.x;
        self.r = res.r;
        self.t += 1;
        Ok(rec)
    }
}

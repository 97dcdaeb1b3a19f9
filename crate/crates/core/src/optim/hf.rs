use super::{ensure_finite, Optimizer, StepRecord};
use crate::curvature::CurvatureOperator;
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::objective::Objective;
use crate::pcg::pcg;
use crate::vecops::{axpy, dot, norm};

/// Hessian-free step with constant damping `lambda I` and identity preconditioner.
#[derive(Debug, Clone, PartialEq)]
pub struct HfFixed {
    pub lr: f64,
    pub lambda: f64,
    pub n: usize,
    pub eps: f64,
    warm: Vec<f64>,
}

impl HfFixed {
    pub fn new(lr: f64, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("damping must be positive, got {lambda}")));
        }
        Ok(Self { lr, lambda, n: 20, eps: 1e-5, warm: Vec::new() })
    }

    pub fn with_solver(mut self, n: usize, eps: f64) -> Self {
        self.n = n;
        self.eps = eps;
        self
    }
}

fn warm_start(warm: &mut Vec<f64>, dim: usize) -> Vec<f64> {
    if warm.len() != dim {
        *warm = vec![0.0; dim];
    }
    warm.clone()
}

impl Optimizer for HfFixed {
    fn name(&self) -> String {
        "hf_fixed".into()
    }

    fn step(&mut self, obj: &dyn Objective, w: &mut [f64], batch: &Batch) -> Result<StepRecord> {
        let lin = obj.linearize(w, batch)?;
        ensure_finite(lin.loss, w)?;
        let op = CurvatureOperator::new(&*lin.curvature, Some(vec![self.lambda; w.len()]))?;
        let x0 = warm_start(&mut self.warm, w.len());
        let res = pcg(&lin.grad, |v| op.ggn_vp(v), &x0, &vec![1.0; w.len()], self.n, self.eps)?;
        axpy(-self.lr, &res.x, w);
        ensure_finite(lin.loss, w)?;
        let rec = StepRecord {
            loss: lin.loss,
            dot_dg: Some(dot(&res.x, &lin.grad)),
            res_norm: Some(norm(&res.r)),
            s_range: Some((self.lambda, self.lambda)),
            applications: op.applications(),
            pcg_iterations: Some(res.iterations),
            lambda: Some(self.lambda),
            batch_stats: lin.batch_stats,
            ..Default::default()
        };
        self.warm = res.x;
        Ok(rec)
    }
}

/// Levenberg-Marquardt adaptation of a scalar damping.
#[derive(Debug, Clone, PartialEq)]
pub struct LmDamping {
    pub lambda: f64,
    pub decay: f64,
    pub low: f64,
    pub high: f64,
    pub min: f64,
    pub max: f64,
}

impl LmDamping {
    pub fn new(lambda: f64, decay: f64) -> Result<Self> {
        if !(lambda > 0.0) || !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("need lambda > 0 and 0 < decay < 1, got {lambda}, {decay}")));
        }
        Ok(Self { lambda, decay, low: 0.25, high: 0.75, min: 1e-12, max: 1e12 })
    }

    /// `rho > 3/4` shrinks, `rho < 1/4` grows, anything else (or no ratio) keeps lambda.
    pub fn update(&mut self, rho: Option<f64>) {
        match rho {
            Some(r) if r > self.high => self.lambda *= self.decay,
            Some(r) if r < self.low || r.is_nan() => self.lambda /= self.decay,
            _ => {}
        }
        self.lambda = self.lambda.clamp(self.min, self.max);
    }
}

/// Reduction ratio of an actual change against a predicted one; `None` when
/// the prediction is indistinguishable from zero at the loss's scale.
pub(crate) fn reduction_ratio(actual: f64, predicted: f64, loss: f64) -> Option<f64> {
    if predicted.abs() <= 64.0 * f64::EPSILON * loss.abs().max(f64::MIN_POSITIVE) || predicted == 0.0 {
        None
    } else {
        Some(actual / predicted)
    }
}

/// Hessian-free step whose damping follows the Levenberg-Marquardt heuristic.
#[derive(Debug, Clone, PartialEq)]
pub struct HfLm {
    pub lr: f64,
    pub damping: LmDamping,
    pub n: usize,
    pub eps: f64,
    warm: Vec<f64>,
}

impl HfLm {
    pub fn new(lr: f64, lambda: f64, decay: f64) -> Result<Self> {
        Ok(Self { lr, damping: LmDamping::new(lambda, decay)?, n: 20, eps: 1e-5, warm: Vec::new() })
    }

    pub fn with_solver(mut self, n: usize, eps: f64) -> Self {
        self.n = n;
        self.eps = eps;
        self
    }
}

impl Optimizer for HfLm {
    fn name(&self) -> String {
        "hf_lm".into()
    }

    fn step(&mut self, obj: &dyn Objective, w: &mut [f64], batch: &Batch) -> Result<StepRecord> {
        let lin = obj.linearize(w, batch)?;
        ensure_finite(lin.loss, w)?;
        let dim = w.len();
        let lambda = self.damping.lambda;
        let op = CurvatureOperator::new(&*lin.curvature, Some(vec![lambda; dim]))?;
        let x0 = warm_start(&mut self.warm, dim);
        let res = pcg(&lin.grad, |v| op.ggn_vp(v), &x0, &vec![1.0; dim], self.n, self.eps)?;
        let applications = op.applications();

        // Predicted change of the undamped quadratic model along the step taken.
        let delta: Vec<f64> = res.x.iter().map(|v| -self.lr * v).collect();
        let h_delta = lin.curvature.product(&delta)?;
        let predicted = dot(&lin.grad, &delta) + 0.5 * dot(&delta, &h_delta);
        let mut trial = w.to_vec();
        axpy(1.0, &delta, &mut trial);
        let actual = obj.loss(&trial, batch)? - lin.loss;
        let rho = reduction_ratio(actual, predicted, lin.loss);
        self.damping.update(rho);

        w.copy_from_slice(&trial);
        ensure_finite(lin.loss, w)?;
        let rec = StepRecord {
            loss: lin.loss,
            dot_dg: Some(dot(&res.x, &lin.grad)),
            res_norm: Some(norm(&res.r)),
            s_range: Some((lambda, lambda)),
            applications,
            pcg_iterations: Some(res.iterations),
            lambda: Some(self.damping.lambda),
            rho,
            batch_stats: lin.batch_stats,
            ..Default::default()
        };
        self.warm = res.x;
        Ok(rec)
    }
}

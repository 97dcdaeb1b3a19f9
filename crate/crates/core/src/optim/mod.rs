//! Training-step rules: the meta-learned Hessian-free step and its baselines.

mod first_order;
mod hf;
mod mlhf;

pub use first_order::{Adam, RmsProp, Sgdm, UpdateRule};
pub use hf::{HfFixed, HfLm, LmDamping};
pub use mlhf::{Mlhf, MlhfConfig};

use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::objective::Objective;

/// Diagnostics of one training step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepRecord {
    /// Mini-batch loss before the update.
    pub loss: f64,
    pub dot_dg: Option<f64>,
    pub res_norm: Option<f64>,
    pub s_range: Option<(f64, f64)>,
    pub p_range: Option<(f64, f64)>,
    /// Curvature-operator applications spent by the step.
    pub applications: usize,
    pub pcg_iterations: Option<usize>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    /// Batchnorm statistics of the batch, for running averages.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

pub trait Optimizer: Send {
    fn name(&self) -> String;

    /// Updates `w` in place from one mini-batch.
    fn step(&mut self, obj: &dyn Objective, w: &mut [f64], batch: &Batch) -> Result<StepRecord>;
}

fn ensure_finite(loss: f64, w: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    if !crate::vecops::all_finite(w) {
        return Err(Error::NonFinite("parameter update".into()));
    }
    Ok(())
}

impl<R: UpdateRule + Send> Optimizer for R {
    fn name(&self) -> String {
        UpdateRule::name(self).to_string()
    }

    fn step(&mut self, obj: &dyn Objective, w: &mut [f64], batch: &Batch) -> Result<StepRecord> {
        let lin = obj.linearize(w, batch)?;
        ensure_finite(lin.loss, w)?;
        self.update(w, &lin.grad);
        ensure_finite(lin.loss, w)?;
        Ok(StepRecord { loss: lin.loss, batch_stats: lin.batch_stats, ..Default::default() })
    }
}

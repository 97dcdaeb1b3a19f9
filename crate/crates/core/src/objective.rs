//! Training objectives over flat parameter vectors.

use crate::curvature::{Curvature, DenseCurvature, ModelCurvature};
use crate::error::{Error, Result};
use crate::nn::{build_model, loss_and_output_grad, Batch, KindLayout, LossHessian, LossKind, Model, ModelSpec, ParamKind};
use crate::tensor::Tensor;
use crate::vecops;

/// Loss, gradient and curvature at one point on one mini-batch.
pub struct Linearization<'a> {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub curvature: Box<dyn Curvature + 'a>,
    /// Per-batchnorm (mean, var) of the batch, empty for models without batchnorm.
    pub batch_stats: Vec<(Vec<f64>, Vec<f64>)>,
}

pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn layout(&self) -> KindLayout;

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64>;

    fn loss_and_grad(&self, w: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)>;

    fn linearize<'a>(&'a self, w: &[f64], batch: &Batch) -> Result<Linearization<'a>>;

    /// A fresh starting point.
    fn init(&self, seed: u64) -> Result<Vec<f64>>;
}

/// A network with a loss.
#[derive(Debug, Clone)]
pub struct ModelObjective {
    model: Model,
    kind: LossKind,
    w0: Vec<f64>,
}

impl ModelObjective {
    /// Builds the network; the seed's initialisation is kept as [`initial_point`](Self::initial_point).
    pub fn new(spec: &ModelSpec, kind: LossKind, seed: u64) -> Result<Self> {
        let (model, params) = build_model(spec, seed)?;
        Ok(Self { model, kind, w0: params.flatten() })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn loss_kind(&self) -> LossKind {
        self.kind
    }

    pub fn initial_point(&self) -> Vec<f64> {
        self.w0.clone()
    }

}

fn flatten(ts: &[Tensor]) -> Vec<f64> {
    let mut out = Vec::with_capacity(ts.iter().map(Tensor::len).sum());
    for t in ts {
        out.extend_from_slice(t.data());
    }
    out
}

impl Objective for ModelObjective {
    fn dim(&self) -> usize {
        self.model.total_dim()
    }

    fn layout(&self) -> KindLayout {
        self.model.template().layout()
    }

    fn loss(&self, w: &[f64], batch: &Batch) -> Result<f64> {
        let exec = self.model.execute(w, &batch.x)?;
        Ok(loss_and_output_grad(self.kind, exec.outputs()[0], &batch.y)?.0)
    }

    fn loss_and_grad(&self, w: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let exec = self.model.execute(w, &batch.x)?;
        let (loss, dz) = loss_and_output_grad(self.kind, exec.outputs()[0], &batch.y)?;
        Ok((loss, flatten(&exec.vjp(&[dz])?)))
    }

    fn linearize<'a>(&'a self, w: &[f64], batch: &Batch) -> Result<Linearization<'a>> {
        let exec = self.model.execute(w, &batch.x)?;
        let z = exec.outputs()[0];
        let (loss, dz) = loss_and_output_grad(self.kind, z, &batch.y)?;
        let grad = flatten(&exec.vjp(&[dz])?);
        let hl = LossHessian::at(self.kind, z)?;
        let batch_stats = exec.batchnorm_stats();
        Ok(Linearization { loss, grad, curvature: Box::new(ModelCurvature::new(exec, hl)), batch_stats })
    }

    fn init(&self, seed: u64) -> Result<Vec<f64>> {
        Ok(build_model(self.model.spec(), seed)?.1.flatten())
    }
}

/// `f(w) = 0.5 w^T A w - b^T w` with symmetric positive semidefinite `A`.
/// The batch argument is ignored.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: DenseCurvature,
    b: Vec<f64>,
}

impl Quadratic {
    pub fn new(n: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if b.len() != n {
            return Err(Error::Shape(format!("linear term of length {} for dim {n}", b.len())));
        }
        Ok(Self { a: DenseCurvature::new(n, a)?, b })
    }

    pub fn matrix(&self) -> &[f64] {
        self.a.matrix()
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.b
    }

    /// A placeholder batch for APIs that require one.
    pub fn batch() -> Batch {
        Batch::new(Tensor::zeros(&[1, 1]), crate::nn::Targets::Classes(vec![0])).expect("valid placeholder")
    }

    fn value_and_grad(&self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let aw = self.a.product(w)?;
        let f = 0.5 * vecops::dot(w, &aw) - vecops::dot(&self.b, w);
        Ok((f, vecops::sub(&aw, &self.b)))
    }
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn layout(&self) -> KindLayout {
        KindLayout::uniform(ParamKind::FcWeight, self.b.len())
    }

    fn loss(&self, w: &[f64], _batch: &Batch) -> Result<f64> {
        Ok(self.value_and_grad(w)?.0)
    }

    fn loss_and_grad(&self, w: &[f64], _batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.value_and_grad(w)
    }

    fn linearize<'a>(&'a self, w: &[f64], _batch: &Batch) -> Result<Linearization<'a>> {
        let (loss, grad) = self.value_and_grad(w)?;
        Ok(Linearization { loss, grad, curvature: Box::new(self.a.clone()), batch_stats: Vec::new() })
    }

    fn init(&self, _seed: u64) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.b.len()])
    }
}

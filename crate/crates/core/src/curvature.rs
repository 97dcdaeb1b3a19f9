//! Gauss-Newton curvature-vector products.
//!
//! `H v = J^T H_l J v` is evaluated matrix-free: a forward-mode pass gives
//! `mu = J v`, the loss Hessian gives `u = H_l mu`, and a reverse-mode pass
//! gives `J^T u`. A [`CurvatureOperator`] adds the per-coordinate damping
//! `s (.) v` and counts how many products it has served.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::Execution;
use crate::nn::LossHessian;
use crate::tensor::Tensor;

/// `u = H_l mu` (batch-mean scaled).
pub fn hl_apply(hl: &LossHessian, mu: &Tensor) -> Result<Tensor> {
    hl.apply(mu)
}

/// An undamped, symmetric positive semidefinite curvature matrix known only
/// through its products.
pub trait Curvature: Send + Sync {
    fn dim(&self) -> usize;

    fn product(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// GGN of a network at a cached primal pass.
pub struct ModelCurvature<'m> {
    exec: Execution<'m>,
    hl: LossHessian,
    shapes: Vec<Vec<usize>>,
    dim: usize,
}

impl<'m> ModelCurvature<'m> {
    /// `exec` must come from a graph whose single output is the network output.
    pub fn new(exec: Execution<'m>, hl: LossHessian) -> Self {
        let shapes: Vec<Vec<usize>> = exec.params().iter().map(|t| t.shape().to_vec()).collect();
        let dim = exec.params().iter().map(Tensor::len).sum();
        Self { exec, hl, shapes, dim }
    }

    pub fn execution(&self) -> &Execution<'m> {
        &self.exec
    }

    fn split(&self, v: &[f64]) -> Result<Vec<Tensor>> {
        let mut off = 0;
        self.shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::new(s.clone(), v[off..off + n].to_vec());
                off += n;
                t
            })
            .collect()
    }
}

impl Curvature for ModelCurvature<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn product(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector of length {} for curvature of dim {}", v.len(), self.dim)));
        }
        let tangents = self.split(v)?;
        let mu = self.exec.jvp(&tangents)?;
        let u = hl_apply(&self.hl, &mu[0])?;
        let grads = self.exec.vjp(&[u])?;
        let mut out = Vec::with_capacity(self.dim);
        for g in &grads {
            out.extend_from_slice(g.data());
        }
        Ok(out)
    }
}

/// Explicit symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseCurvature {
    n: usize,
    a: Vec<f64>,
}

impl DenseCurvature {
    pub fn new(n: usize, a: Vec<f64>) -> Result<Self> {
        if a.len() != n * n {
            return Err(Error::Shape(format!("{} entries for a {n}x{n} matrix", a.len())));
        }
        Ok(Self { n, a })
    }

    pub fn matrix(&self) -> &[f64] {
        &self.a
    }
}

impl Curvature for DenseCurvature {
    fn dim(&self) -> usize {
        self.n
    }

    fn product(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.n {
            return Err(Error::Shape(format!("vector of length {} for a {}x{} matrix", v.len(), self.n, self.n)));
        }
        Ok(self.a.chunks(self.n).map(|row| crate::vecops::dot(row, v)).collect())
    }
}

/// The zero matrix; only damping remains.
#[derive(Debug, Clone, Copy)]
pub struct ZeroCurvature(pub usize);

impl Curvature for ZeroCurvature {
    fn dim(&self) -> usize {
        self.0
    }

    fn product(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.0 {
            return Err(Error::Shape(format!("vector of length {} for dim {}", v.len(), self.0)));
        }
        Ok(vec![0.0; self.0])
    }
}

/// `H + diag(s)` with an application counter.
pub struct CurvatureOperator<'c> {
    curvature: &'c dyn Curvature,
    damping: Option<Vec<f64>>,
    applications: AtomicUsize,
}

impl<'c> CurvatureOperator<'c> {
    pub fn new(curvature: &'c dyn Curvature, damping: Option<Vec<f64>>) -> Result<Self> {
        if let Some(s) = &damping {
            if s.len() != curvature.dim() {
                return Err(Error::Shape(format!("damping of length {} for dim {}", s.len(), curvature.dim())));
            }
            if let Some(bad) = s.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("damping must be finite and nonnegative, got {bad}")));
            }
        }
        Ok(Self { curvature, damping, applications: AtomicUsize::new(0) })
    }

    pub fn dim(&self) -> usize {
        self.curvature.dim()
    }

    pub fn damping(&self) -> Option<&[f64]> {
        self.damping.as_deref()
    }

    /// `H v + s (.) v`.
    pub fn ggn_vp(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.applications.fetch_add(1, Ordering::Relaxed);
        let mut u = self.curvature.product(v)?;
        if let Some(s) = &self.damping {
            for ((ui, si), vi) in u.iter_mut().zip(s).zip(v) {
                *ui += si * vi;
            }
        }
        Ok(u)
    }

    /// Reverse-mode rule for `u = H v` with respect to `v`: the operator is
    /// symmetric, so the cotangent `c` maps to `H c`.
    pub fn ggn_vp_grad(&self, c: &[f64]) -> Result<Vec<f64>> {
        self.ggn_vp(c)
    }

    /// Cotangent of the damping vector for `u = H v` given `c = du`.
    pub fn damping_grad(&self, v: &[f64], c: &[f64]) -> Vec<f64> {
        crate::vecops::hadamard(c, v)
    }

    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    pub fn reset_applications(&self) {
        self.applications.store(0, Ordering::Relaxed);
    }
}

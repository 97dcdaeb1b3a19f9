use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax followed by negative log-likelihood of the target class.
    #[default]
    CrossEntropy,
    /// `0.5 * ||z - y||^2` per sample.
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Integer class labels, one per sample.
    Classes(Vec<usize>),
    /// Dense targets shaped like the network output.
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Targets,
}

impl Batch {
    pub fn new(x: Tensor, y: Targets) -> Result<Self> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n != y.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", n, y.len())));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(Self { x, y })
    }

    pub fn size(&self) -> usize {
        self.y.len()
    }
}

fn dense_targets(z: &Tensor, y: &Targets) -> Result<Vec<f64>> {
    let (n, k) = z.dims2()?;
    match y {
        Targets::Values(t) => {
            z.expect_same_shape(t)?;
            Ok(t.data().to_vec())
        }
        Targets::Classes(c) => {
            let mut out = vec![0.0; n * k];
            for (i, &label) in c.iter().enumerate() {
                if label >= k {
                    return Err(Error::LabelOutOfRange { label, classes: k });
                }
                out[i * k + label] = 1.0;
            }
            Ok(out)
        }
    }
}

fn row_softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mini-batch mean loss and its gradient with respect to the network output.
pub fn loss_and_output_grad(kind: LossKind, z: &Tensor, y: &Targets) -> Result<(f64, Tensor)> {
    let (n, k) = z.dims2()?;
    if y.len() != n {
        return Err(Error::Shape(format!("{} outputs but {} targets", n, y.len())));
    }
    let inv_n = 1.0 / n as f64;
    let zd = z.data();
    let mut dz = vec![0.0; n * k];
    let mut total = 0.0;
    match kind {
        LossKind::CrossEntropy => {
            let t = dense_targets(z, y)?;
            for i in 0..n {
                let row = &zd[i * k..(i + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                let p = row_softmax(row);
                let tsum: f64 = t[i * k..(i + 1) * k].iter().sum();
                for j in 0..k {
                    let tj = t[i * k + j];
                    total -= tj * (row[j] - lse);
                    dz[i * k + j] = (tsum * p[j] - tj) * inv_n;
                }
            }
        }
        LossKind::MeanSquaredError => {
            let t = dense_targets(z, y)?;
            for i in 0..n * k {
                let d = zd[i] - t[i];
                total += 0.5 * d * d;
                dz[i] = d * inv_n;
            }
        }
    }
    let loss = total * inv_n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, k], dz)?))
}

/// Hessian of the mini-batch mean loss with respect to the network output,
/// evaluated at a fixed output `z`.
#[derive(Debug, Clone)]
pub struct LossHessian {
    kind: LossKind,
    shape: Vec<usize>,
    probs: Option<Vec<f64>>,
}

impl LossHessian {
    pub fn at(kind: LossKind, z: &Tensor) -> Result<Self> {
        let (n, k) = z.dims2()?;
        let probs = match kind {
            LossKind::CrossEntropy => {
                let mut p = Vec::with_capacity(n * k);
                for i in 0..n {
                    p.extend(row_softmax(&z.data()[i * k..(i + 1) * k]));
                }
                Some(p)
            }
            LossKind::MeanSquaredError => None,
        };
        Ok(Self { kind, shape: vec![n, k], probs })
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    /// `u = H_l mu`, including the `1/batch` factor of the mean loss.
    pub fn apply(&self, mu: &Tensor) -> Result<Tensor> {
        if mu.shape() != self.shape.as_slice() {
            return Err(Error::Shape(format!(
                "loss Hessian at {:?} applied to {:?}",
                self.shape,
                mu.shape()
            )));
        }
        let (n, k) = (self.shape[0], self.shape[1]);
        let inv_n = 1.0 / n as f64;
        let md = mu.data();
        let out = match &self.probs {
            None => md.iter().map(|v| v * inv_n).collect(),
            Some(p) => {
                let mut out = vec![0.0; n * k];
                for i in 0..n {
                    let pr = &p[i * k..(i + 1) * k];
                    let mr = &md[i * k..(i + 1) * k];
                    let pm: f64 = pr.iter().zip(mr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        out[i * k + j] = pr[j] * (mr[j] - pm) * inv_n;
                    }
                }
                out
            }
        };
        Tensor::new(self.shape.clone(), out)
    }
}

//! Target networks: parameter taxonomy, model zoo and losses.

mod loss;
mod model;
mod spec;

use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use loss::{loss_and_output_grad, Batch, LossHessian, LossKind, Targets};
pub use model::{build_model, Model, RunningStats};
pub use spec::{Activation, Layer, ModelSpec};

/// The six kinds of trainable tensor. Controller meta-parameters are shared
/// within a kind and independent across kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    ConvKernel,
    ConvBias,
    FcWeight,
    FcBias,
    BnGamma,
    BnBeta,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::ConvKernel,
        ParamKind::ConvBias,
        ParamKind::FcWeight,
        ParamKind::FcBias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::ConvKernel => "conv_kernel",
            ParamKind::ConvBias => "conv_bias",
            ParamKind::FcWeight => "fc_weight",
            ParamKind::FcBias => "fc_bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
}

/// Named, kinded parameter tensors with a fixed flattening order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, kind: ParamKind, tensor: Tensor) -> Result<usize> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push(ParamEntry { name: name.to_string(), kind });
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    pub fn total_dim(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Coordinate range of each entry inside the flat vector.
    pub fn ranges(&self) -> Vec<Range<usize>> {
        let mut off = 0;
        self.tensors
            .iter()
            .map(|t| {
                let r = off..off + t.len();
                off = r.end;
                r
            })
            .collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Splits a flat vector into tensors shaped like this set's entries.
    pub fn split_flat(&self, flat: &[f64]) -> Result<Vec<Tensor>> {
        if flat.len() != self.total_dim() {
            return Err(Error::Shape(format!(
                "flat vector has {} coordinates, parameter set has {}",
                flat.len(),
                self.total_dim()
            )));
        }
        self.tensors
            .iter()
            .zip(self.ranges())
            .map(|(t, r)| Tensor::new(t.shape().to_vec(), flat[r].to_vec()))
            .collect()
    }

    /// Same names and kinds, new values.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        Ok(ParamSet { entries: self.entries.clone(), tensors: self.split_flat(flat)? })
    }

    pub fn layout(&self) -> KindLayout {
        let segments = self.entries.iter().zip(self.ranges()).map(|(e, r)| (e.kind, r)).collect();
        KindLayout::new(self.total_dim(), segments)
    }
}

/// Which flat coordinates belong to which [`ParamKind`].
#[derive(Debug, Clone, PartialEq)]
pub struct KindLayout {
    dim: usize,
    groups: Vec<(ParamKind, Vec<usize>)>,
}

impl KindLayout {
    pub fn new(dim: usize, segments: Vec<(ParamKind, Range<usize>)>) -> Self {
        let mut groups: Vec<(ParamKind, Vec<usize>)> = Vec::new();
        for kind in ParamKind::ALL {
            let idx: Vec<usize> = segments
                .iter()
                .filter(|(k, _)| *k == kind)
                .flat_map(|(_, r)| r.clone())
                .collect();
            if !idx.is_empty() {
                groups.push((kind, idx));
            }
        }
        Self { dim, groups }
    }

    /// Every coordinate assigned to a single kind.
    pub fn uniform(kind: ParamKind, dim: usize) -> Self {
        Self::new(dim, vec![(kind, 0..dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[(ParamKind, Vec<usize>)] {
        &self.groups
    }

    pub fn kinds(&self) -> Vec<ParamKind> {
        self.groups.iter().map(|(k, _)| *k).collect()
    }

    pub fn indices(&self, kind: ParamKind) -> Option<&[usize]> {
        self.groups.iter().find(|(k, _)| *k == kind).map(|(_, i)| i.as_slice())
    }

    /// True when every coordinate appears in exactly one group.
    pub fn is_partition(&self) -> bool {
        let mut seen = HashSet::new();
        let total: usize = self.groups.iter().map(|(_, i)| i.len()).sum();
        total == self.dim && self.groups.iter().flat_map(|(_, i)| i).all(|&c| c < self.dim && seen.insert(c))
    }
}

//! Natural-gradient training with a Hessian-free inner solver whose damping
//! and diagonal preconditioner are produced by meta-learned, coordinate-wise
//! LSTM controllers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`graph`]: a small dense AD engine with reverse mode,
//!   forward (dual) mode, and cached primal passes.
//! - [`nn`]: target-network zoo, parameter taxonomy and losses.
//! - [`curvature`]: Gauss-Newton curvature-vector products.
//! - [`pcg`]: preconditioned conjugate gradient with a differentiable tape.
//! - [`controller`]: the damping and preconditioner LSTM controllers.
//! - [`optim`]: the meta-learned optimizer and its baselines.
//! - [`meta`]: truncated-BPTT meta-training of the controllers.

pub mod controller;
pub mod curvature;
pub mod error;
pub mod graph;
pub mod meta;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pcg;
pub mod tensor;
pub mod vecops;

pub use error::{Error, Result};
pub use graph::{Dual, Execution, Graph, NodeId, Op};
pub use tensor::Tensor;

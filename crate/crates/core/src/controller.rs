//! Coordinate-wise LSTM controllers.
//!
//! Every target coordinate runs its own copy of a two-layer, four-unit LSTM
//! on the features `(tanh d0, tanh r0, tanh g)`. Copies share weights within a
//! [`ParamKind`] and keep separate states. The top layer feeds a linear map
//! followed by softplus, so outputs are strictly positive.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Execution, Graph, NodeId};
use crate::nn::{KindLayout, ParamKind};
use crate::tensor::Tensor;

pub const FEATURES: usize = 3;
pub const HIDDEN: usize = 4;
pub const INIT_RANGE: f64 = 0.1;

const GATES: [&str; 4] = ["i", "f", "g", "o"];
const STATE_NAMES: [&str; 4] = ["h1", "c1", "h2", "c2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Produces the damping vector `s`.
    Damping,
    /// Produces the preconditioner diagonal.
    Preconditioner,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Damping => "damping",
            Role::Preconditioner => "precond",
        }
    }
}

/// Name and shape of every meta-parameter tensor of one kind, in order.
pub fn tensor_specs() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (layer, fan_in) in [(1, FEATURES), (2, HIDDEN)] {
        for gate in GATES {
            out.push((format!("l{layer}.{gate}.w"), vec![fan_in, HIDDEN]));
            out.push((format!("l{layer}.{gate}.u"), vec![HIDDEN, HIDDEN]));
            out.push((format!("l{layer}.{gate}.b"), vec![HIDDEN]));
        }
    }
    out.push(("post.w".into(), vec![HIDDEN, 1]));
    out.push(("post.b".into(), vec![1]));
    out
}

/// Meta-parameter count of one kind of one controller.
pub fn params_per_kind() -> usize {
    tensor_specs().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

fn lstm_layer(g: &mut Graph, x: NodeId, h: NodeId, c: NodeId, first_param: usize) -> (NodeId, NodeId) {
    let mut gates = [0; 4];
    for (k, gate) in gates.iter_mut().enumerate() {
        let w = g.param(first_param + 3 * k);
        let u = g.param(first_param + 3 * k + 1);
        let b = g.param(first_param + 3 * k + 2);
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let pre = g.add(xw, hu);
        let pre = g.add_bias(pre, b);
        *gate = if k == 2 { g.tanh(pre) } else { g.sigmoid(pre) };
    }
    let [i, f, cand, o] = gates;
    let keep = g.mul(f, c);
    let write = g.mul(i, cand);
    let c_next = g.add(keep, write);
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed);
    (h_next, c_next)
}

/// One controller step for a block of coordinates.
///
/// Inputs `x [N,3]`, `h1 c1 h2 c2 [N,4]`; outputs `out [N,1]` and the next states.
pub fn step_graph() -> &'static Graph {
    static GRAPH: OnceLock<Graph> = OnceLock::new();
    GRAPH.get_or_init(|| {
        let mut g = Graph::new();
        let x = g.input("x");
        let [h1, c1, h2, c2] = STATE_NAMES.map(|n| g.input(n));
        let (h1n, c1n) = lstm_layer(&mut g, x, h1, c1, 0);
        let (h2n, c2n) = lstm_layer(&mut g, h1n, h2, c2, 12);
        let w = g.param(24);
        let b = g.param(25);
        let lin = g.matmul(h2n, w);
        let lin = g.add_bias(lin, b);
        let out = g.softplus(lin);
        g.output("out", out);
        for (name, id) in STATE_NAMES.iter().zip([h1n, c1n, h2n, c2n]) {
            g.output(name, id);
        }
        g
    })
}

/// Recurrent state of one block of coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    /// `[h1, c1, h2, c2]`, each `[N, 4]`.
    pub tensors: [Tensor; 4],
}

impl LstmState {
    pub fn zeros(n: usize) -> Self {
        Self { tensors: std::array::from_fn(|_| Tensor::zeros(&[n, HIDDEN])) }
    }

    pub fn coordinates(&self) -> usize {
        self.tensors[0].shape()[0]
    }
}

/// States of one controller, one block per kind present in the layout.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleStates {
    pub blocks: Vec<(ParamKind, LstmState)>,
}

impl RoleStates {
    pub fn zeros(layout: &KindLayout) -> Self {
        Self { blocks: layout.groups().iter().map(|(k, idx)| (*k, LstmState::zeros(idx.len()))).collect() }
    }

    fn matches(&self, layout: &KindLayout) -> bool {
        self.blocks.len() == layout.groups().len()
            && self
                .blocks
                .iter()
                .zip(layout.groups())
                .all(|((k, s), (lk, idx))| k == lk && s.coordinates() == idx.len())
    }
}

/// Per-coordinate states of both controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateStates {
    pub damping: RoleStates,
    pub precond: RoleStates,
}

impl CoordinateStates {
    pub fn zeros(layout: &KindLayout) -> Self {
        Self { damping: RoleStates::zeros(layout), precond: RoleStates::zeros(layout) }
    }

    pub fn role(&self, role: Role) -> &RoleStates {
        match role {
            Role::Damping => &self.damping,
            Role::Preconditioner => &self.precond,
        }
    }

    /// Number of stored `(h, c)` vectors summed over coordinates, layers and controllers.
    pub fn state_count(&self) -> usize {
        [&self.damping, &self.precond]
            .iter()
            .flat_map(|r| &r.blocks)
            .map(|(_, s)| 2 * s.coordinates())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerOutput {
    pub s: Vec<f64>,
    pub p_diag: Vec<f64>,
}

/// Meta-parameters of one controller: one set of tensors per kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    role: Role,
    kinds: Vec<(ParamKind, Vec<Tensor>)>,
}

impl Controller {
    /// Gate weights `U(-0.1, 0.1)`, gate biases 0, post-process weight and bias 0.
    pub fn init(role: Role, rng: &mut ChaCha8Rng) -> Self {
        let kinds = ParamKind::ALL
            .iter()
            .map(|&kind| {
                let tensors = tensor_specs()
                    .into_iter()
                    .map(|(name, shape)| {
                        let n: usize = shape.iter().product();
                        let data = if name.starts_with('l') && !name.ends_with(".b") {
                            (0..n).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect()
                        } else {
                            vec![0.0; n]
                        };
                        Tensor::new(shape, data).expect("shape from spec")
                    })
                    .collect();
                (kind, tensors)
            })
            .collect();
        Self { role, kinds }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn kind_params(&self, kind: ParamKind) -> &[Tensor] {
        &self.kinds.iter().find(|(k, _)| *k == kind).expect("all kinds present").1
    }

    pub fn kind_params_mut(&mut self, kind: ParamKind) -> &mut [Tensor] {
        &mut self.kinds.iter_mut().find(|(k, _)| *k == kind).expect("all kinds present").1
    }

    pub fn dim(&self) -> usize {
        ParamKind::ALL.len() * params_per_kind()
    }

    /// Offset of a kind's block inside [`flatten`](Self::flatten).
    pub fn kind_offset(kind: ParamKind) -> usize {
        ParamKind::ALL.iter().position(|k| *k == kind).expect("known kind") * params_per_kind()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for (_, ts) in &self.kinds {
            for t in ts {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.dim() {
            return Err(Error::Shape(format!("{} values for {} meta-parameters", flat.len(), self.dim())));
        }
        let mut off = 0;
        for (_, ts) in &mut self.kinds {
            for t in ts.iter_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&flat[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// `(name, tensor)` pairs, e.g. `damping.fc_weight.l1.i.w`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let specs = tensor_specs();
        self.kinds
            .iter()
            .flat_map(|(kind, ts)| {
                ts.iter()
                    .zip(&specs)
                    .map(move |(t, (n, _))| (format!("{}.{}.{}", self.role.name(), kind.name(), n), t))
            })
            .collect()
    }

    /// Primal pass of one block; the execution is kept for the reverse pass.
    pub fn execute(&self, kind: ParamKind, features: &Tensor, state: &LstmState) -> Result<Execution<'static>> {
        let mut inputs: Vec<(&str, &Tensor)> = vec![("x", features)];
        inputs.extend(STATE_NAMES.iter().copied().zip(state.tensors.iter()));
        step_graph().forward(self.kind_params(kind), &inputs)
    }

    /// Advances every block one step and scatters the outputs into a flat vector.
    pub fn step(&self, layout: &KindLayout, states: &RoleStates, features: &[Tensor]) -> Result<(Vec<f64>, RoleStates)> {
        if !states.matches(layout) || features.len() != layout.groups().len() {
            return Err(Error::Shape("controller states do not match the parameter layout".into()));
        }
        let mut out = vec![0.0; layout.dim()];
        let mut next = Vec::with_capacity(states.blocks.len());
        for (((kind, idx), (_, state)), feat) in layout.groups().iter().zip(&states.blocks).zip(features) {
            let exec = self.execute(*kind, feat, state)?;
            let outs = exec.outputs();
            for (&i, &v) in idx.iter().zip(outs[0].data()) {
                out[i] = v;
            }
            next.push((*kind, LstmState { tensors: std::array::from_fn(|k| outs[k + 1].clone()) }));
        }
        Ok((out, RoleStates { blocks: next }))
    }
}

/// Reverse pass of one block step.
pub struct BlockGradients {
    pub params: Vec<Tensor>,
    /// Cotangents of the incoming `[h1, c1, h2, c2]`.
    pub state: [Tensor; 4],
    /// Cotangent of the (stopped) input features.
    pub features: Tensor,
}

/// `out_bar [N,1]` and `state_bar` (cotangents of the outgoing states) pulled back
/// through one step.
pub fn block_backward(exec: &Execution<'_>, out_bar: Tensor, state_bar: &[Tensor; 4]) -> Result<BlockGradients> {
    let mut cot = vec![out_bar];
    cot.extend(state_bar.iter().cloned());
    let mut g = exec.vjp_full(&cot)?;
    let mut take = |name: &str| g.inputs.remove(name).ok_or_else(|| Error::InvalidArgument(format!("no input `{name}`")));
    let features = take("x")?;
    let state = [take("h1")?, take("c1")?, take("h2")?, take("c2")?];
    Ok(BlockGradients { params: g.params, state, features })
}

/// Per-kind `[N_k, 3]` features `(tanh d0, tanh r0, tanh g)`.
pub fn features(layout: &KindLayout, d0: &[f64], r0: &[f64], g: &[f64]) -> Result<Vec<Tensor>> {
    let n = layout.dim();
    if d0.len() != n || r0.len() != n || g.len() != n {
        return Err(Error::Shape(format!(
            "controller inputs of lengths {}, {}, {} for dim {n}",
            d0.len(),
            r0.len(),
            g.len()
        )));
    }
    layout
        .groups()
        .iter()
        .map(|(_, idx)| {
            let data = idx.iter().flat_map(|&i| [d0[i].tanh(), r0[i].tanh(), g[i].tanh()]).collect();
            Tensor::new(vec![idx.len(), FEATURES], data)
        })
        .collect()
}

/// Both controllers.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerBank {
    pub damping: Controller,
    pub precond: Controller,
}

impl ControllerBank {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let damping = Controller::init(Role::Damping, &mut rng);
        let precond = Controller::init(Role::Preconditioner, &mut rng);
        Self { damping, precond }
    }

    pub fn controller(&self, role: Role) -> &Controller {
        match role {
            Role::Damping => &self.damping,
            Role::Preconditioner => &self.precond,
        }
    }

    pub fn controller_mut(&mut self, role: Role) -> &mut Controller {
        match role {
            Role::Damping => &mut self.damping,
            Role::Preconditioner => &mut self.precond,
        }
    }

    /// Advances both controllers one step.
    pub fn step(
        &self,
        layout: &KindLayout,
        states: &CoordinateStates,
        d0: &[f64],
        r0: &[f64],
        g: &[f64],
    ) -> Result<(ControllerOutput, CoordinateStates)> {
        let feats = features(layout, d0, r0, g)?;
        let (s, damping) = self.damping.step(layout, &states.damping, &feats)?;
        let (p_diag, precond) = self.precond.step(layout, &states.precond, &feats)?;
        Ok((ControllerOutput { s, p_diag }, CoordinateStates { damping, precond }))
    }
}

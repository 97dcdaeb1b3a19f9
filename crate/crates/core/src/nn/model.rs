use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::{loss_and_output_grad, LossKind, Targets};
use super::spec::{Activation, Layer, ModelSpec};
use super::{ParamKind, ParamSet};
use crate::error::{Error, Result};
use crate::graph::{Execution, Graph, NodeId};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.9;

/// A built target network: a training graph (batch statistics), an inference
/// graph (running statistics) and the parameter template both index into.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    train_graph: Graph,
    eval_graph: Graph,
    template: ParamSet,
    bn_channels: Vec<usize>,
    output_dim: usize,
}

/// Running batchnorm statistics, one `(mean, var)` pair per batchnorm node.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
}

impl RunningStats {
    /// `running <- 0.9 * running + 0.1 * batch`.
    pub fn update(&mut self, batch: &[(Vec<f64>, Vec<f64>)]) {
        for (i, (m, v)) in batch.iter().enumerate() {
            for (r, b) in self.mean[i].iter_mut().zip(m) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in self.var[i].iter_mut().zip(v) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }
}

struct Builder<'a> {
    graph: Graph,
    params: ParamSet,
    rng: &'a mut ChaCha8Rng,
    inference: bool,
    bn_channels: Vec<usize>,
}

impl Builder<'_> {
    fn he_uniform(&mut self, name: &str, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> Result<NodeId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let idx = self.params.push(name, kind, Tensor::new(shape, data)?)?;
        Ok(self.graph.param(idx))
    }

    fn filled(&mut self, name: &str, kind: ParamKind, len: usize, value: f64) -> Result<NodeId> {
        let idx = self.params.push(name, kind, Tensor::full(&[len], value))?;
        Ok(self.graph.param(idx))
    }

    fn activation(&mut self, x: NodeId, act: Activation) -> NodeId {
        match act {
            Activation::None => x,
            Activation::Relu => self.graph.relu(x),
            Activation::Tanh => self.graph.tanh(x),
            Activation::Sigmoid => self.graph.sigmoid(x),
            Activation::Softplus => self.graph.softplus(x),
        }
    }

    fn batchnorm(&mut self, x: NodeId, channels: usize) -> Result<NodeId> {
        let k = self.bn_channels.len();
        let gamma = self.filled(&format!("bn{k}.gamma"), ParamKind::BnGamma, channels, 1.0)?;
        let beta = self.filled(&format!("bn{k}.beta"), ParamKind::BnBeta, channels, 0.0)?;
        self.bn_channels.push(channels);
        Ok(if self.inference {
            let mean = self.graph.input(&format!("bn{k}.mean"));
            let var = self.graph.input(&format!("bn{k}.var"));
            self.graph.batchnorm_stats(x, gamma, beta, mean, var, BN_EPS)
        } else {
            self.graph.batchnorm(x, gamma, beta, BN_EPS)
        })
    }

    fn conv(&mut self, name: &str, x: NodeId, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let kernel = self.he_uniform(&format!("{name}.kernel"), ParamKind::ConvKernel, vec![cout, cin, k, k], cin * k * k)?;
        let bias = self.filled(&format!("{name}.bias"), ParamKind::ConvBias, cout, 0.0)?;
        let c = self.graph.conv2d(x, kernel, stride, pad);
        Ok(self.graph.add_bias(c, bias))
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || size + 2 * pad < k {
        return Err(Error::Spec(format!("kernel {k} (stride {stride}, pad {pad}) does not fit size {size}")));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn build_graph(spec: &ModelSpec, rng: &mut ChaCha8Rng, inference: bool) -> Result<(Graph, ParamSet, Vec<usize>, usize)> {
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return Err(Error::Spec(format!("bad input shape {:?}", spec.input_shape)));
    }
    let mut b = Builder { graph: Graph::new(), params: ParamSet::new(), rng, inference, bn_channels: Vec::new() };
    let mut x = b.graph.input("x");
    let mut shape = spec.input_shape.clone();
    for (li, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Dense { units, activation, batchnorm } => {
                let [fan_in] = shape[..] else {
                    return Err(Error::Spec(format!("layer {li}: dense needs flat input, got {shape:?}")));
                };
                if units == 0 {
                    return Err(Error::Spec(format!("layer {li}: zero units")));
                }
                let w = b.he_uniform(&format!("dense{li}.weight"), ParamKind::FcWeight, vec![fan_in, units], fan_in)?;
                let bias = b.filled(&format!("dense{li}.bias"), ParamKind::FcBias, units, 0.0)?;
                let h = b.graph.matmul(x, w);
                x = b.graph.add_bias(h, bias);
                if batchnorm {
                    x = b.batchnorm(x, units)?;
                }
                x = b.activation(x, activation);
                shape = vec![units];
            }
            Layer::Conv { channels, kernel, stride, padding, activation, batchnorm } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Spec(format!("layer {li}: conv needs [C,H,W] input, got {shape:?}")));
                };
                let (oh, ow) = (conv_out(h, kernel, stride, padding)?, conv_out(w, kernel, stride, padding)?);
                x = b.conv(&format!("conv{li}"), x, c, channels, kernel, stride, padding)?;
                if batchnorm {
                    x = b.batchnorm(x, channels)?;
                }
                x = b.activation(x, activation);
                shape = vec![channels, oh, ow];
            }
            Layer::ResBlock { channels, stride, kernel } => {
                let [c, h, w] = shape[..] else {
                    return Err(Error::Spec(format!("layer {li}: resblock needs [C,H,W] input, got {shape:?}")));
                };
                if kernel % 2 == 0 {
                    return Err(Error::Spec(format!("layer {li}: resblock kernel must be odd")));
                }
                let pad = kernel / 2;
                let (oh, ow) = (conv_out(h, kernel, stride, pad)?, conv_out(w, kernel, stride, pad)?);
                let n1 = b.batchnorm(x, c)?;
                let pre = b.graph.relu(n1);
                let h1 = b.conv(&format!("res{li}.conv1"), pre, c, channels, kernel, stride, pad)?;
                let n2 = b.batchnorm(h1, channels)?;
                let a2 = b.graph.relu(n2);
                let h2 = b.conv(&format!("res{li}.conv2"), a2, channels, channels, kernel, 1, pad)?;
                let shortcut = if c == channels && stride == 1 {
                    x
                } else {
                    b.conv(&format!("res{li}.proj"), pre, c, channels, 1, stride, 0)?
                };
                x = b.graph.add(h2, shortcut);
                shape = vec![channels, oh, ow];
            }
            Layer::BatchNorm { activation } => {
                let channels = shape[0];
                x = b.batchnorm(x, channels)?;
                x = b.activation(x, activation);
            }
            Layer::Flatten => {
                x = b.graph.flatten(x);
                shape = vec![shape.iter().product()];
            }
            Layer::GlobalAvgPool => {
                let [c, _, _] = shape[..] else {
                    return Err(Error::Spec(format!("layer {li}: pooling needs [C,H,W] input, got {shape:?}")));
                };
                x = b.graph.spatial_mean(x);
                shape = vec![c];
            }
        }
    }
    let [out_dim] = shape[..] else {
        return Err(Error::Spec(format!("network output must be flat, got {shape:?}")));
    };
    b.graph.output("z", x);
    Ok((b.graph, b.params, b.bn_channels, out_dim))
}

/// Builds the network and its He-uniform initialisation (biases 0, BN gamma 1,
/// BN beta 0). Identical `(spec, seed)` pairs give bit-identical parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train_graph, params, bn_channels, output_dim) = build_graph(spec, &mut rng, false)?;
    // The inference graph shares the parameter layout; its draws are discarded.
    let mut scratch = ChaCha8Rng::seed_from_u64(seed);
    let (eval_graph, _, _, _) = build_graph(spec, &mut scratch, true)?;
    let model = Model { spec: spec.clone(), train_graph, eval_graph, template: params.clone(), bn_channels, output_dim };
    Ok((model, params))
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Training-mode graph with a single output `z` and input `x`.
    pub fn graph(&self) -> &Graph {
        &self.train_graph
    }

    pub fn eval_graph(&self) -> &Graph {
        &self.eval_graph
    }

    pub fn template(&self) -> &ParamSet {
        &self.template
    }

    pub fn total_dim(&self) -> usize {
        self.template.total_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn has_batchnorm(&self) -> bool {
        !self.bn_channels.is_empty()
    }

    pub fn fresh_running_stats(&self) -> RunningStats {
        RunningStats {
            mean: self.bn_channels.iter().map(|&c| vec![0.0; c]).collect(),
            var: self.bn_channels.iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            return Err(Error::Shape(format!(
                "input {:?} does not match [N, {:?}]",
                x.shape(),
                self.spec.input_shape
            )));
        }
        Ok(())
    }

    /// Training-mode primal pass at flat parameters `w`.
    pub fn execute(&self, w: &[f64], x: &Tensor) -> Result<Execution<'_>> {
        self.check_input(x)?;
        let tensors = self.template.split_flat(w)?;
        self.train_graph.forward(&tensors, &[("x", x)])
    }

    /// Network output and mini-batch mean loss.
    pub fn forward_loss(&self, params: &ParamSet, x: &Tensor, y: &Targets, kind: LossKind) -> Result<(Tensor, f64)> {
        self.check_input(x)?;
        if x.shape()[0] != y.len() {
            return Err(Error::Shape(format!("{} inputs but {} targets", x.shape()[0], y.len())));
        }
        let exec = self.train_graph.forward(params.tensors(), &[("x", x)])?;
        let z = exec.outputs()[0].clone();
        let (loss, _) = loss_and_output_grad(kind, &z, y)?;
        Ok((z, loss))
    }

    /// Inference-mode outputs using running batchnorm statistics.
    pub fn predict(&self, w: &[f64], x: &Tensor, stats: &RunningStats) -> Result<Tensor> {
        self.check_input(x)?;
        let tensors = self.template.split_flat(w)?;
        let stat_tensors: Vec<(String, Tensor)> = stats
            .mean
            .iter()
            .zip(&stats.var)
            .enumerate()
            .flat_map(|(k, (m, v))| {
                [(format!("bn{k}.mean"), Tensor::vector(m.clone())), (format!("bn{k}.var"), Tensor::vector(v.clone()))]
            })
            .collect();
        let mut inputs: Vec<(&str, &Tensor)> = vec![("x", x)];
        inputs.extend(stat_tensors.iter().map(|(n, t)| (n.as_str(), t)));
        let exec = self.eval_graph.forward(&tensors, &inputs)?;
        Ok(exec.outputs()[0].clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_total_dim() {
        let (m, ps) = build_model(&ModelSpec::mlp(&[2, 16, 2]), 0).unwrap();
        assert_eq!(ps.total_dim(), 2 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(m.total_dim(), 82);
        assert_eq!(m.output_dim(), 2);
        let (m, _) = build_model(&ModelSpec::mlp(&[3, 16, 2]), 0).unwrap();
        assert_eq!(m.total_dim(), 98);
    }

    #[test]
    fn same_seed_same_params() {
        let spec = ModelSpec::mini_convnet([3, 8, 8], [4, 4], 8, 10);
        let (_, a) = build_model(&spec, 7).unwrap();
        let (_, b) = build_model(&spec, 7).unwrap();
        let (_, c) = build_model(&spec, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.flatten(), c.flatten());
    }

    #[test]
    fn batchnorm_init_and_all_kinds_present() {
        let spec = ModelSpec::mini_resnet([3, 8, 8], &[4, 8], 3, 10);
        let (m, ps) = build_model(&spec, 1).unwrap();
        for (e, t) in ps.entries().iter().zip(ps.tensors()) {
            match e.kind {
                ParamKind::BnGamma => assert!(t.data().iter().all(|&v| v == 1.0)),
                ParamKind::BnBeta | ParamKind::ConvBias | ParamKind::FcBias => {
                    assert!(t.data().iter().all(|&v| v == 0.0))
                }
                _ => {}
            }
        }
        let kinds = ps.layout().kinds();
        assert_eq!(kinds.len(), 6);
        assert!(ps.layout().is_partition());
        assert!(m.has_batchnorm());
    }

    #[test]
    fn inconsistent_spec_rejected() {
        let spec = ModelSpec { input_shape: vec![3, 8, 8], layers: vec![Layer::Dense { units: 4, activation: Activation::None, batchnorm: false }] };
        assert!(matches!(build_model(&spec, 0), Err(Error::Spec(_))));
        let spec = ModelSpec { input_shape: vec![4], layers: vec![Layer::GlobalAvgPool] };
        assert!(build_model(&spec, 0).is_err());
    }

    #[test]
    fn forward_loss_shapes() {
        let (m, ps) = build_model(&ModelSpec::mlp(&[2, 5, 3]), 3).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8]).unwrap();
        let (z, l) = m.forward_loss(&ps, &x, &Targets::Classes(vec![0, 1, 2, 0]), LossKind::CrossEntropy).unwrap();
        assert_eq!(z.shape(), &[4, 3]);
        assert!(l > 0.0);
        assert!(m.forward_loss(&ps, &x, &Targets::Classes(vec![0, 1]), LossKind::CrossEntropy).is_err());
        let bad = Tensor::matrix(4, 3, vec![0.0; 12]).unwrap();
        assert!(m.forward_loss(&ps, &bad, &Targets::Classes(vec![0; 4]), LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn inference_graph_matches_training_with_batch_stats() {
        let spec = ModelSpec::mini_resnet([1, 4, 4], &[2, 2], 3, 3);
        let (m, ps) = build_model(&spec, 5).unwrap();
        let x = Tensor::new(vec![6, 1, 4, 4], (0..96).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect()).unwrap();
        let w = ps.flatten();
        let exec = m.execute(&w, &x).unwrap();
        let stats = exec.batchnorm_stats();
        let running = RunningStats {
            mean: stats.iter().map(|s| s.0.clone()).collect(),
            var: stats.iter().map(|s| s.1.clone()).collect(),
        };
        let z_eval = m.predict(&w, &x, &running).unwrap();
        for (a, b) in z_eval.data().iter().zip(exec.outputs()[0].data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    /// Fully connected layer on `[N, D]` input.
    Dense {
        units: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        batchnorm: bool,
    },
    /// 2-D convolution on `[N, C, H, W]` input.
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        activation: Activation,
        #[serde(default)]
        batchnorm: bool,
    },
    /// Pre-activation residual block: BN-ReLU-conv-BN-ReLU-conv plus a
    /// (projected when the shape changes) shortcut.
    ResBlock {
        channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "three")]
        kernel: usize,
    },
    BatchNorm {
        #[serde(default)]
        activation: Activation,
    },
    Flatten,
    GlobalAvgPool,
}

/// Architecture of a target network, excluding the batch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl ModelSpec {
    /// Tanh MLP with the given layer widths; the first entry is the input size
    /// and the last layer is linear.
    pub fn mlp(widths: &[usize]) -> Self {
        Self::mlp_with(widths, Activation::Tanh)
    }

    pub fn mlp_with(widths: &[usize], activation: Activation) -> Self {
        let n = widths.len();
        let layers = widths[1..]
            .iter()
            .enumerate()
            .map(|(i, &units)| Layer::Dense {
                units,
                activation: if i + 2 == n { Activation::None } else { activation },
                batchnorm: false,
            })
            .collect();
        Self { input_shape: vec![widths[0]], layers }
    }

    /// Two strided convolutions followed by two dense layers.
    pub fn mini_convnet(input: [usize; 3], channels: [usize; 2], hidden: usize, classes: usize) -> Self {
        Self {
            input_shape: input.to_vec(),
            layers: vec![
                Layer::Conv {
                    channels: channels[0],
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    activation: Activation::Relu,
                    batchnorm: false,
                },
                Layer::Conv {
                    channels: channels[1],
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                    activation: Activation::Relu,
                    batchnorm: false,
                },
                Layer::Flatten,
                Layer::Dense { units: hidden, activation: Activation::Relu, batchnorm: false },
                Layer::Dense { units: classes, activation: Activation::None, batchnorm: false },
            ],
        }
    }

    /// Conv stem, a stack of residual blocks (stride 2 wherever the channel
    /// count grows), final BN-ReLU, global average pooling and a classifier.
    pub fn mini_resnet(input: [usize; 3], block_channels: &[usize], kernel: usize, classes: usize) -> Self {
        let stem = block_channels[0];
        let mut layers = vec![Layer::Conv {
            channels: stem,
            kernel,
            stride: 1,
            padding: kernel / 2,
            activation: Activation::None,
            batchnorm: false,
        }];
        let mut prev = stem;
        for &c in block_channels {
            let stride = if c > prev { 2 } else { 1 };
            layers.push(Layer::ResBlock { channels: c, stride, kernel });
            prev = c;
        }
        layers.push(Layer::BatchNorm { activation: Activation::Relu });
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Dense { units: classes, activation: Activation::None, batchnorm: false });
        Self { input_shape: input.to_vec(), layers }
    }
}

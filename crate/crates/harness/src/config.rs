//! Experiment configuration: one TOML document per run, plus `key=value` overrides.

use std::path::{Path, PathBuf};

use mlhf::meta::{MetaConfig, RolloutConfig};
use mlhf::nn::{Activation, Layer, LossKind, ModelSpec};
use mlhf::optim::MlhfConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Mlp {
        widths: Vec<usize>,
        #[serde(default = "tanh")]
        activation: Activation,
    },
    Convnet {
        input: [usize; 3],
        channels: [usize; 2],
        hidden: usize,
        classes: usize,
    },
    Resnet {
        input: [usize; 3],
        blocks: Vec<usize>,
        #[serde(default = "three")]
        kernel: usize,
        classes: usize,
    },
    Custom {
        input_shape: Vec<usize>,
        layers: Vec<Layer>,
    },
}

fn tanh() -> Activation {
    Activation::Tanh
}

fn three() -> usize {
    3
}

impl ModelConfig {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Self::Mlp { widths, activation } => ModelSpec::mlp_with(widths, *activation),
            Self::Convnet { input, channels, hidden, classes } => ModelSpec::mini_convnet(*input, *channels, *hidden, *classes),
            Self::Resnet { input, blocks, kernel, classes } => ModelSpec::mini_resnet(*input, blocks, *kernel, *classes),
            Self::Custom { input_shape, layers } => ModelSpec { input_shape: input_shape.clone(), layers: layers.clone() },
        }
    }
}

/// Which part of the training set a run sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Full,
    /// The first 3/5.
    Meta,
    /// The remaining 2/5.
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Spirals {
        points_per_class: usize,
        #[serde(default = "three")]
        classes: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default = "default_turns")]
        turns: f64,
    },
    Blobs {
        points_per_class: usize,
        classes: usize,
        #[serde(default = "two")]
        dim: usize,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        limit: Option<usize>,
    },
    Cifar {
        files: Vec<PathBuf>,
        test_file: Option<PathBuf>,
        limit: Option<usize>,
    },
}

fn default_noise() -> f64 {
    0.2
}

fn default_turns() -> f64 {
    1.5
}

fn two() -> usize {
    2
}

fn default_spread() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgdm {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
    },
    Rmsprop {
        lr: f64,
        decay: f64,
    },
    HfFixed {
        lr: f64,
        damping: f64,
        #[serde(default = "hf_n")]
        n: usize,
        #[serde(default = "hf_eps")]
        eps: f64,
    },
    HfLm {
        lr: f64,
        damping: f64,
        decay: f64,
        #[serde(default = "hf_n")]
        n: usize,
        #[serde(default = "hf_eps")]
        eps: f64,
    },
    Mlhf {
        #[serde(default = "mlhf_n")]
        n: usize,
        #[serde(default = "yes")]
        use_precond: bool,
        /// Controllers to load; fresh controllers when absent.
        checkpoint: Option<PathBuf>,
    },
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn hf_n() -> usize {
    20
}

fn hf_eps() -> f64 {
    1e-5
}

fn mlhf_n() -> usize {
    4
}

fn yes() -> bool {
    true
}

impl OptimizerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgdm { .. } => "sgdm",
            Self::Adam { .. } => "adam",
            Self::Rmsprop { .. } => "rmsprop",
            Self::HfFixed { .. } => "hf_fixed",
            Self::HfLm { .. } => "hf_lm",
            Self::Mlhf { .. } => "mlhf",
        }
    }

    /// Defaults for `--optimizer NAME`.
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "sgdm" => Self::Sgdm { lr: 0.1, momentum: 0.9 },
            "adam" => Self::Adam { lr: 0.01, beta1: beta1(), beta2: beta2() },
            "rmsprop" => Self::Rmsprop { lr: 0.01, decay: 0.9 },
            "hf_fixed" => Self::HfFixed { lr: 1.0, damping: 0.1, n: hf_n(), eps: hf_eps() },
            "hf_lm" => Self::HfLm { lr: 1.0, damping: 1.0, decay: 2.0 / 3.0, n: hf_n(), eps: hf_eps() },
            "mlhf" => Self::Mlhf { n: mlhf_n(), use_precond: true, checkpoint: None },
            other => return Err(HarnessError::Config(format!("unknown optimizer `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "b_tr")]
    pub b_tr: usize,
    #[serde(default = "b_mt")]
    pub b_mt: usize,
    /// Baseline batch size the first-order learning rates are quoted at.
    #[serde(default = "b_tr")]
    pub b_bl: usize,
    /// Test-accuracy interval in steps; 0 disables evaluation.
    #[serde(default = "eval_every")]
    pub eval_every: usize,
}

fn b_tr() -> usize {
    128
}

fn b_mt() -> usize {
    64
}

fn eval_every() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1000, b_tr: b_tr(), b_mt: b_mt(), b_bl: b_tr(), eval_every: eval_every() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub iterations: usize,
    #[serde(default = "window")]
    pub t: usize,
    #[serde(default = "mlhf_n")]
    pub n: usize,
    #[serde(default = "yes")]
    pub use_precond: bool,
    /// Step scale inside rollouts, whose batches have b_mt samples.
    #[serde(default = "unit")]
    pub inner_lr: f64,
    #[serde(default = "meta_lr")]
    pub meta_lr: f64,
    #[serde(default = "windows")]
    pub windows_per_episode: usize,
    #[serde(default = "capacity")]
    pub replay_capacity: usize,
    #[serde(default = "fresh")]
    pub fresh_prob: f64,
    #[serde(default)]
    pub lp_residual: bool,
    #[serde(default = "average")]
    pub average_window: usize,
    /// Controller checkpoint interval in meta-iterations; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn window() -> usize {
    10
}

fn unit() -> f64 {
    1.0
}

fn meta_lr() -> f64 {
    1e-3
}

fn windows() -> usize {
    25
}

fn capacity() -> usize {
    64
}

fn fresh() -> f64 {
    0.2
}

fn average() -> usize {
    100
}

impl Default for MetaSection {
    fn default() -> Self {
        Self {
            iterations: 2000,
            t: window(),
            n: mlhf_n(),
            use_precond: true,
            inner_lr: unit(),
            meta_lr: meta_lr(),
            windows_per_episode: windows(),
            replay_capacity: capacity(),
            fresh_prob: fresh(),
            lp_residual: false,
            average_window: average(),
            checkpoint_every: 0,
        }
    }
}

impl MetaSection {
    pub fn meta_config(&self, seed: u64) -> MetaConfig {
        MetaConfig {
            rollout: RolloutConfig {
                t: self.t,
                mlhf: MlhfConfig { lr: self.inner_lr, n: self.n, use_precond: self.use_precond },
                lp_residual: self.lp_residual,
                report_stops: false,
            },
            meta_lr: self.meta_lr,
            windows_per_episode: self.windows_per_episode,
            replay_capacity: self.replay_capacity,
            fresh_prob: self.fresh_prob,
            average_window: self.average_window,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "out_dir")]
    pub out: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossKind,
    pub data: DataConfig,
    #[serde(default)]
    pub split: Split,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub meta: MetaSection,
}

fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::Sgdm { lr: 0.1, momentum: 0.9 }
}

fn out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Used when no config file is given: a 2-16-3 MLP on three spirals.
pub const DEFAULT_TOML: &str = r#"
seed = 0
out = "runs"
split = "full"

[model]
kind = "mlp"
widths = [2, 16, 3]
activation = "tanh"

[data]
kind = "spirals"
points_per_class = 500
classes = 3
noise = 0.2
turns = 1.5

[optimizer]
name = "sgdm"
lr = 0.1
momentum = 0.9

[train]
steps = 1000
b_tr = 128
b_mt = 64
b_bl = 128
eval_every = 50

[meta]
iterations = 2000
t = 10
n = 4
"#;

impl ExperimentConfig {
    pub fn default_spirals(overrides: &[String]) -> Result<Self> {
        Self::from_toml(DEFAULT_TOML, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e| HarnessError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(|e| HarnessError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        if self.train.b_tr == 0 || self.train.b_mt == 0 || self.train.b_bl == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.meta.inner_lr > 0.0) {
            return bad("meta.inner_lr must be positive");
        }
        if self.meta.t == 0 {
            return bad("meta.t must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.meta.fresh_prob) {
            return bad("meta.fresh_prob must lie in [0, 1]");
        }
        if let ModelConfig::Mlp { widths, .. } = &self.model {
            if widths.len() < 2 || widths.contains(&0) {
                return bad("model.widths needs at least two positive entries");
            }
        }
        Ok(())
    }

    /// `lr = b_tr / b_mt`.
    pub fn mlhf_lr(&self) -> f64 {
        self.train.b_tr as f64 / self.train.b_mt as f64
    }

    /// Scale applied to first-order learning rates, `b_tr / b_bl`.
    pub fn lr_scale(&self) -> f64 {
        self.train.b_tr as f64 / self.train.b_bl as f64
    }
}

/// Sets `a.b.c=value`; the value is read as a TOML literal, or as a bare
/// string when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in path {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[model]
kind = "mlp"
widths = [2, 16, 3]
[data]
kind = "spirals"
points_per_class = 100
[optimizer]
name = "sgdm"
lr = 0.1
momentum = 0.9
[train]
steps = 10
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.b_tr, 128);
        assert_eq!(cfg.meta.t, 10);
        assert_eq!(cfg.mlhf_lr(), 2.0);
        assert_eq!(cfg.model.spec(), ModelSpec::mlp(&[2, 16, 3]));
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let o = ["train.steps=25".to_string(), "optimizer.lr=0.5".into(), "split=meta".into()];
        let cfg = ExperimentConfig::from_toml(BASE, &o).unwrap();
        assert_eq!(cfg.train.steps, 25);
        assert_eq!(cfg.split, Split::Meta);
        assert_eq!(cfg.optimizer, OptimizerConfig::Sgdm { lr: 0.5, momentum: 0.9 });
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap(), cfg);
    }

    #[test]
    fn builtin_default_parses() {
        let cfg = ExperimentConfig::default_spirals(&[]).unwrap();
        assert_eq!(cfg.model.spec(), ModelSpec::mlp(&[2, 16, 3]));
        assert_eq!(cfg.optimizer.name(), "sgdm");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::from_toml(BASE, &["train.b_tr=0".into()]).is_err());
        assert!(ExperimentConfig::from_toml(BASE, &["train.bogus=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml(BASE, &["nonsense".into()]).is_err());
        assert!(OptimizerConfig::default_for("kfac").is_err());
    }
}

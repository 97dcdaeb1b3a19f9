//! Training, meta-training and ablation runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use mlhf::controller::ControllerBank;
use mlhf::meta::{BatchSource, MetaRecord, MetaTrainer};
use mlhf::nn::{RunningStats, Targets};
use mlhf::objective::{ModelObjective, Objective};
use mlhf::optim::{Adam, HfFixed, HfLm, Mlhf, MlhfConfig, Optimizer, RmsProp, Sgdm, StepRecord};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, OptimizerConfig};
use crate::data::{load_dataset, Dataset, Sampler, Samples};
use crate::error::{HarnessError, Result};
use crate::metrics::{MetricsRow, MetricsWriter};

const EVAL_CHUNK: usize = 512;

/// `(use_precond, n)` of the four ablation configurations, in order.
pub const ABLATIONS: [(bool, usize); 4] = [(false, 20), (false, 4), (true, 2), (true, 4)];

/// Dataset and network of one experiment.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub dataset: Dataset,
    pub objective: ModelObjective,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let dataset = load_dataset(&cfg.data, cfg.seed)?;
        let spec = cfg.model.spec();
        if spec.input_shape != dataset.train.sample_shape {
            return Err(HarnessError::Config(format!(
                "model input {:?} does not match samples of shape {:?}",
                spec.input_shape, dataset.train.sample_shape
            )));
        }
        let objective = ModelObjective::new(&spec, cfg.loss, cfg.seed)?;
        if objective.model().output_dim() != dataset.classes {
            return Err(HarnessError::Config(format!(
                "model has {} outputs for {} classes",
                objective.model().output_dim(),
                dataset.classes
            )));
        }
        Ok(Self { cfg, dataset, objective })
    }

    pub fn indices(&self) -> Vec<usize> {
        self.dataset.split_indices(self.cfg.split)
    }

    pub fn sampler(&self, batch_size: usize) -> Result<Sampler<'_>> {
        Sampler::new(&self.dataset.train, self.indices(), batch_size, self.cfg.seed.wrapping_add(1))
    }

    /// Mean loss of `w` over the run's split.
    pub fn split_loss(&self, w: &[f64]) -> Result<f64> {
        mean_loss(&self.objective, &self.dataset.train, &self.indices(), w)
    }
}

pub fn mean_loss(obj: &dyn Objective, samples: &Samples, idx: &[usize], w: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        total += obj.loss(w, &samples.batch(chunk)?)? * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Fraction of samples whose largest output is the label.
pub fn accuracy(obj: &ModelObjective, samples: &Samples, w: &[f64], stats: &RunningStats) -> Result<f64> {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let batch = samples.batch(chunk)?;
        let z = obj.model().predict(w, &batch.x, stats)?;
        let k = z.shape()[1];
        let Targets::Classes(labels) = &batch.y else { unreachable!("datasets carry class labels") };
        for (row, &label) in z.data().chunks(k).zip(labels) {
            let best = row.iter().enumerate().fold(0, |b, (j, v)| if *v > row[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn build_optimizer(cfg: &ExperimentConfig, obj: &dyn Objective) -> Result<Box<dyn Optimizer>> {
    let scale = cfg.lr_scale();
    Ok(match &cfg.optimizer {
        OptimizerConfig::Sgdm { lr, momentum } => Box::new(Sgdm::new(lr * scale, *momentum)),
        OptimizerConfig::Adam { lr, beta1, beta2 } => Box::new(Adam::new(lr * scale, *beta1, *beta2)),
        OptimizerConfig::Rmsprop { lr, decay } => Box::new(RmsProp::new(lr * scale, *decay)),
        OptimizerConfig::HfFixed { lr, damping, n, eps } => Box::new(HfFixed::new(*lr, *damping)?.with_solver(*n, *eps)),
        OptimizerConfig::HfLm { lr, damping, decay, n, eps } => {
            Box::new(HfLm::new(*lr, *damping, *decay)?.with_solver(*n, *eps))
        }
        OptimizerConfig::Mlhf { n, use_precond, checkpoint } => {
            let bank = match checkpoint {
                Some(path) => Checkpoint::load(path)?.to_bank()?,
                None => ControllerBank::init(cfg.seed),
            };
            let mcfg = MlhfConfig { lr: cfg.mlhf_lr(), n: *n, use_precond: *use_precond };
            Box::new(Mlhf::new(bank, obj.layout(), mcfg))
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub csv: PathBuf,
    pub steps: usize,
    /// Mean loss over the split at the final parameters.
    pub final_loss: f64,
    pub final_accuracy: Option<f64>,
    pub w: Vec<f64>,
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

fn diverged(step: usize, e: mlhf::Error) -> HarnessError {
    match e {
        mlhf::Error::NonFinite(what) => HarnessError::Diverged { step, reason: format!("non-finite {what}") },
        other => other.into(),
    }
}

/// Trains with the configured optimizer, writing one row per step to `csv`.
pub fn train(ws: &Workspace, csv: &Path) -> Result<TrainSummary> {
    let cfg = &ws.cfg;
    let obj = &ws.objective;
    let mut opt = build_optimizer(cfg, obj)?;
    let mut sampler = ws.sampler(cfg.train.b_tr)?;
    let mut w = obj.initial_point();
    let mut stats = obj.model().fresh_running_stats();
    let mut out = MetricsWriter::create(csv)?;
    let start = Instant::now();
    let test = ws.dataset.test.as_ref();
    let evaluate = |step: usize| cfg.train.eval_every > 0 && (step % cfg.train.eval_every == 0 || step + 1 == cfg.train.steps);

    for step in 0..cfg.train.steps {
        let test_accuracy = match test.filter(|_| evaluate(step)) {
            Some(t) => Some(accuracy(obj, t, &w, &stats)?),
            None => None,
        };
        let batch = sampler.next_batch()?;
        let rec = opt.step(obj, &mut w, &batch).map_err(|e| diverged(step, e))?;
        stats.update(&rec.batch_stats);
        out.write(&step_row(step, cfg.train.b_tr, elapsed_ms(start), &rec, test_accuracy))?;
    }

    let final_loss = ws.split_loss(&w)?;
    if !final_loss.is_finite() {
        return Err(HarnessError::Diverged { step: cfg.train.steps, reason: "non-finite final loss".into() });
    }
    let final_accuracy = test.map(|t| accuracy(obj, t, &w, &stats)).transpose()?;
    Ok(TrainSummary { csv: csv.to_path_buf(), steps: cfg.train.steps, final_loss, final_accuracy, w })
}

fn step_row(step: usize, batch: usize, wall_ms: u64, rec: &StepRecord, test_accuracy: Option<f64>) -> MetricsRow {
    let mut row = MetricsRow {
        step: step as u64,
        samples_seen: (step * batch) as u64,
        wall_ms,
        train_loss: Some(rec.loss),
        test_accuracy,
        dot_dg: rec.dot_dg,
        res_norm: rec.res_norm,
        ..Default::default()
    };
    row.set_s(rec.s_range);
    row.set_p(rec.p_range);
    row
}

#[derive(Debug, Clone)]
pub struct MetaSummary {
    pub csv: PathBuf,
    pub checkpoint: PathBuf,
    pub records: Vec<MetaRecord>,
    pub bank: ControllerBank,
}

impl MetaSummary {
    pub fn final_lp_avg(&self) -> Option<f64> {
        self.records.iter().rev().find(|r| !r.diverged).map(|r| r.lp_avg)
    }

    pub fn divergences(&self) -> usize {
        self.records.iter().filter(|r| r.diverged).count()
    }
}

/// Meta-trains fresh controllers; metrics go to `csv` and the controllers to `checkpoint`.
pub fn meta_train(ws: &Workspace, csv: &Path, checkpoint: &Path) -> Result<MetaSummary> {
    let cfg = &ws.cfg;
    // Inner steps here use b_mt-sized batches, so b_tr = b_mt and lr = 1.
    let mcfg = cfg.meta.meta_config(cfg.seed);
    let mut trainer = MetaTrainer::new(ControllerBank::init(cfg.seed), mcfg)?;
    let mut sampler = ws.sampler(cfg.train.b_mt)?;
    let mut out = MetricsWriter::create(csv)?;
    let start = Instant::now();
    let mut records = Vec::with_capacity(cfg.meta.iterations);

    for it in 0..cfg.meta.iterations {
        let rec = trainer.iterate(&ws.objective, &mut sampler)?;
        if rec.diverged {
            log::warn!("meta-iteration {it}: inner run diverged, episode restarted");
        }
        out.write(&meta_row(&rec, sampler.position() * cfg.train.b_mt as u64, elapsed_ms(start)))?;
        records.push(rec);
        let every = cfg.meta.checkpoint_every;
        if every > 0 && (it + 1) % every == 0 {
            Checkpoint::from_bank(trainer.bank()).save(checkpoint)?;
        }
    }
    let bank = trainer.into_bank();
    Checkpoint::from_bank(&bank).save(checkpoint)?;
    Ok(MetaSummary { csv: csv.to_path_buf(), checkpoint: checkpoint.to_path_buf(), records, bank })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn meta_row(rec: &MetaRecord, samples_seen: u64, wall_ms: u64) -> MetricsRow {
    let mut row = MetricsRow {
        step: rec.iteration as u64,
        samples_seen,
        wall_ms,
        train_loss: finite(rec.loss),
        l_p: finite(rec.lp),
        l_s: finite(rec.ls),
        dot_dg: finite(rec.dot_dg_min),
        res_norm: finite(rec.res_norm_mean),
        l_p_avg: finite(rec.lp_avg),
        l_s_avg: finite(rec.ls_avg),
        ..Default::default()
    };
    if !rec.diverged {
        row.set_s(Some(rec.s_range));
        row.set_p(Some(rec.p_range));
    }
    row
}

/// Meta-trains the four ablation configurations on the same data and seed.
pub fn ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<MetaSummary>> {
    ABLATIONS
        .iter()
        .enumerate()
        .map(|(k, &(use_precond, n))| {
            let mut c = cfg.clone();
            c.meta.use_precond = use_precond;
            c.meta.n = n;
            let ws = Workspace::new(c)?;
            let stem = format!("ablation_config{}", k + 1);
            log::info!("{stem}: preconditioner {use_precond}, n = {n}");
            meta_train(&ws, &out_dir.join(format!("{stem}.csv")), &out_dir.join(format!("{stem}.ckpt")))
        })
        .collect()
}

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::replay::ReplayBuffer;
use super::rollout::{rollout, RolloutConfig, RolloutTrace, WindowState};
use crate::controller::{Controller, ControllerBank};
use crate::error::{Error, Result};
use crate::nn::Batch;
use crate::objective::Objective;
use crate::optim::{Adam, UpdateRule};
use crate::vecops::all_finite;

/// An endless, seekable stream of mini-batches.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Batch>;

    /// Opaque cursor; seeking back to it replays the same batches.
    fn position(&self) -> u64;

    fn seek(&mut self, position: u64);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetaConfig {
    pub rollout: RolloutConfig,
    pub meta_lr: f64,
    pub windows_per_episode: usize,
    pub replay_capacity: usize,
    /// Probability of starting an episode from a fresh initialisation
    /// rather than a replayed one.
    pub fresh_prob: f64,
    /// Length of the moving averages in [`MetaRecord`].
    pub average_window: usize,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            rollout: RolloutConfig::default(),
            meta_lr: 1e-3,
            windows_per_episode: 25,
            replay_capacity: 64,
            fresh_prob: 0.2,
            average_window: 100,
            seed: 0,
        }
    }
}

/// A stored starting point: parameters and the data cursor that goes with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub w: Vec<f64>,
    pub cursor: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetaRecord {
    pub iteration: usize,
    pub episode: usize,
    pub lp: f64,
    pub ls: f64,
    pub lp_avg: f64,
    pub ls_avg: f64,
    /// Mean training loss over the window.
    pub loss: f64,
    pub dot_dg_min: f64,
    /// Mean final PCG residual norm over the window.
    pub res_norm_mean: f64,
    pub s_range: (f64, f64),
    pub p_range: (f64, f64),
    pub grad_norm_damping: f64,
    pub grad_norm_precond: f64,
    pub diverged: bool,
    pub new_episode: bool,
}

#[derive(Debug, Clone)]
pub struct MetaTrainer {
    cfg: MetaConfig,
    bank: ControllerBank,
    adam_damping: Adam,
    adam_precond: Adam,
    replay: ReplayBuffer<ReplayEntry>,
    rng: ChaCha8Rng,
    window: Option<WindowState>,
    windows_done: usize,
    iteration: usize,
    episode: usize,
    lp_hist: VecDeque<f64>,
    ls_hist: VecDeque<f64>,
}

fn push_mean(hist: &mut VecDeque<f64>, cap: usize, v: f64) -> f64 {
    if hist.len() == cap.max(1) {
        hist.pop_front();
    }
    hist.push_back(v);
    hist.iter().sum::<f64>() / hist.len() as f64
}

impl MetaTrainer {
    pub fn new(bank: ControllerBank, cfg: MetaConfig) -> Result<Self> {
        if cfg.windows_per_episode == 0 || cfg.replay_capacity == 0 || !(0.0..=1.0).contains(&cfg.fresh_prob) {
            return Err(Error::InvalidArgument("meta-training schedule".into()));
        }
        Ok(Self {
            adam_damping: Adam::with_lr(cfg.meta_lr),
            adam_precond: Adam::with_lr(cfg.meta_lr),
            replay: ReplayBuffer::new(cfg.replay_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            window: None,
            windows_done: 0,
            iteration: 0,
            episode: 0,
            lp_hist: VecDeque::new(),
            ls_hist: VecDeque::new(),
            cfg,
            bank,
        })
    }

    pub fn config(&self) -> &MetaConfig {
        &self.cfg
    }

    pub fn bank(&self) -> &ControllerBank {
        &self.bank
    }

    pub fn into_bank(self) -> ControllerBank {
        self.bank
    }

    pub fn replay(&self) -> &ReplayBuffer<ReplayEntry> {
        &self.replay
    }

    pub fn iterations(&self) -> usize {
        self.iteration
    }

    fn start_episode(&mut self, obj: &dyn Objective, source: &mut dyn BatchSource) -> Result<WindowState> {
        self.episode += 1;
        self.windows_done = 0;
        let fresh = self.replay.is_empty() || self.rng.gen::<f64>() < self.cfg.fresh_prob;
        let w = if fresh {
            let w = obj.init(self.rng.gen())?;
            self.replay.store(ReplayEntry { w: w.clone(), cursor: source.position() });
            w
        } else {
            let entry = self.replay.sample(&mut self.rng)?;
            source.seek(entry.cursor);
            entry.w
        };
        Ok(WindowState::fresh(w, &obj.layout()))
    }

    /// Adam steps on both controllers. Returns false, leaving them untouched,
    /// when a gradient is not finite.
    pub fn apply(&mut self, trace: &RolloutTrace) -> bool {
        if !all_finite(&trace.grad_damping) || !all_finite(&trace.grad_precond) {
            return false;
        }
        let update = |ctrl: &mut Controller, adam: &mut Adam, grad: &[f64]| {
            let mut flat = ctrl.flatten();
            adam.update(&mut flat, grad);
            ctrl.set_flat(&flat).expect("flat size is fixed");
        };
        update(&mut self.bank.damping, &mut self.adam_damping, &trace.grad_damping);
        if self.cfg.rollout.mlhf.use_precond {
            update(&mut self.bank.precond, &mut self.adam_precond, &trace.grad_precond);
        }
        true
    }

    /// One window and one meta-update.
    pub fn iterate(&mut self, obj: &dyn Objective, source: &mut dyn BatchSource) -> Result<MetaRecord> {
        let new_episode = self.window.is_none();
        let start = match self.window.take() {
            Some(s) => s,
            None => self.start_episode(obj, source)?,
        };
        let batches = (0..=self.cfg.rollout.t).map(|_| source.next_batch()).collect::<Result<Vec<_>>>()?;
        self.iteration += 1;
        let mut rec = MetaRecord { iteration: self.iteration, episode: self.episode, new_episode, ..Default::default() };

        let trace = match rollout(obj, &self.bank, &self.cfg.rollout, start, batches) {
            Ok(trace) => trace,
            Err(Error::NonFinite(what)) => {
                log::warn!("window {} diverged ({what}); starting a new episode", self.iteration);
                rec.diverged = true;
                rec.lp = f64::NAN;
                rec.ls = f64::NAN;
                rec.lp_avg = self.lp_hist.iter().sum::<f64>() / self.lp_hist.len().max(1) as f64;
                rec.ls_avg = self.ls_hist.iter().sum::<f64>() / self.ls_hist.len().max(1) as f64;
                return Ok(rec);
            }
            Err(e) => return Err(e),
        };
        rec.diverged = !self.apply(&trace);
        rec.lp = trace.lp;
        rec.ls = trace.ls;
        rec.lp_avg = push_mean(&mut self.lp_hist, self.cfg.average_window, trace.lp);
        rec.ls_avg = push_mean(&mut self.ls_hist, self.cfg.average_window, trace.ls);
        rec.loss = trace.steps.iter().map(|s| s.loss).sum::<f64>() / trace.steps.len() as f64;
        rec.dot_dg_min = trace.steps.iter().map(|s| s.dot_dg).fold(f64::INFINITY, f64::min);
        rec.res_norm_mean = trace.steps.iter().map(|s| crate::vecops::norm(&s.r)).sum::<f64>() / trace.steps.len() as f64;
        rec.s_range = trace.steps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, s| {
            (a.0.min(s.s_range.0), a.1.max(s.s_range.1))
        });
        rec.p_range = trace.steps.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, s| {
            (a.0.min(s.p_range.0), a.1.max(s.p_range.1))
        });
        rec.grad_norm_damping = crate::vecops::norm(&trace.grad_damping);
        rec.grad_norm_precond = crate::vecops::norm(&trace.grad_precond);

        self.windows_done += 1;
        if rec.diverged {
            return Ok(rec);
        }
        if self.windows_done >= self.cfg.windows_per_episode {
            self.replay.store(ReplayEntry { w: trace.end.w.clone(), cursor: source.position() });
        } else {
            self.window = Some(trace.end);
        }
        Ok(rec)
    }
}

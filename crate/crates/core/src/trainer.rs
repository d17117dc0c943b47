//! Adam training loop for the denoiser.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState, ReturnScaling};
use crate::dataset::Dataset;
use crate::denoiser::{Denoiser, DenoiserConfig, ParameterSet, TrainingDraw, DEFAULT_DROP_PROBABILITY};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::schedule::ScheduleConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_EMA_DECAY: f64 = 0.995;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub drop_probability: f64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    /// Steps averaged into each loss-log row.
    pub log_interval: usize,
    pub seed: u64,
    pub ema_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 32,
            total_steps: 200_000,
            drop_probability: DEFAULT_DROP_PROBABILITY,
            checkpoint_interval: 10_000,
            log_interval: 100,
            seed: 0,
            ema_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(Error::config(format!(
                "drop probability must lie in [0, 1], got {}",
                self.drop_probability
            )));
        }
        if self.log_interval == 0 {
            return Err(Error::config("log interval must be at least 1"));
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::config(format!("EMA decay must lie in (0, 1), got {d}")));
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn from_state(lr: f64, state: &OptimizerState, t: usize) -> Self {
        Self {
            lr,
            m: state.m.clone(),
            v: state.v.clone(),
            t,
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut [f64], params: &[f64], decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::shape(format!("{} parameters", ema.len()), params.len()));
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::config(format!("EMA decay must lie in [0, 1], got {decay}")));
    }
    for (e, p) in ema.iter_mut().zip(params) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}

/// Where training writes its artifacts, and what it resumes from.
#[derive(Default)]
pub struct TrainOptions<'a> {
    pub resume: Option<Checkpoint>,
    pub checkpoint_path: Option<PathBuf>,
    pub loss_log: Option<PathBuf>,
    pub progress: Option<&'a mut dyn FnMut(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(steps completed, mean loss over the interval)` rows written this run.
    pub losses: Vec<(usize, f64)>,
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

pub fn train(
    dataset: &Dataset,
    denoiser: &DenoiserConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(dataset, denoiser, schedule, cfg, TrainOptions::default())
}

/// Runs `cfg.total_steps` optimizer steps, continuing from `opts.resume`
/// when given. Every step draws from its own rng stream, so a resumed run
/// samples the same batches an uninterrupted one would have.
pub fn train_with(
    dataset: &Dataset,
    denoiser: &DenoiserConfig,
    schedule: &ScheduleConfig,
    cfg: &TrainConfig,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.dims() != denoiser.dims || dataset.horizon() != denoiser.horizon {
        return Err(Error::config(format!(
            "dataset has {}x{} paths but the denoiser expects {}x{}",
            dataset.horizon(),
            dataset.dims(),
            denoiser.horizon,
            denoiser.dims
        )));
    }
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let net = Denoiser::new(denoiser.clone())?;
    let sched = schedule.build()?;
    let scaling = ReturnScaling::from_dataset(dataset);
    let scaled: Vec<f64> = dataset.examples().iter().map(|e| scaling.scale(e.return_value)).collect();

    let (mut params, mut adam, mut ema, start) = match opts.resume.take() {
        Some(ck) => {
            ck.ensure_matches(denoiser)?;
            let step = ck.header().step;
            let adam = match ck.optimizer() {
                Some(s) => Adam::from_state(cfg.learning_rate, s, step),
                None => Adam::new(cfg.learning_rate, ck.params().len()),
            };
            let ema = cfg
                .ema_decay
                .map(|_| ck.ema().unwrap_or(ck.params()).as_slice().to_vec());
            (ck.params().as_slice().to_vec(), adam, ema, step)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let p = net.init_params(&mut rng).into_vec();
            let ema = cfg.ema_decay.map(|_| p.clone());
            let adam = Adam::new(cfg.learning_rate, p.len());
            (p, adam, ema, 0)
        }
    };

    let mut log = match &opts.loss_log {
        Some(path) => {
            let file = if start > 0 {
                OpenOptions::new().append(true).create(true).open(path)
            } else {
                File::create(path)
            }
            .map_err(|e| Error::io(path, e))?;
            let mut w = BufWriter::new(file);
            if start == 0 {
                writeln!(w, "step,loss").map_err(|e| Error::io(path, e))?;
            }
            Some(w)
        }
        None => None,
    };

    let snapshot = |params: &[f64], adam: &Adam, ema: &Option<Vec<f64>>, step: usize| -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(
            denoiser.clone(),
            schedule.clone(),
            dataset.normalization().clone(),
            scaling,
            dataset.header().reward_kind,
            &ParameterSet::from_vec(params.to_vec()),
            step,
        )?
        .with_optimizer(&adam.state());
        if let Some(e) = ema {
            ck = ck.with_ema(&ParameterSet::from_vec(e.clone()));
        }
        Ok(ck)
    };

    let mut losses = Vec::new();
    let mut acc = 0.0;
    let mut acc_n = 0usize;
    for step in start..cfg.total_steps {
        let mut rng = step_rng(cfg.seed, step);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
        let batch: Vec<(&Matrix, f64)> = idx
            .iter()
            .map(|&i| (&dataset.examples()[i].matrix, scaled[i]))
            .collect();
        let draw = TrainingDraw::sample(
            batch.len(),
            dataset.horizon(),
            dataset.dims(),
            sched.steps(),
            cfg.drop_probability,
            &mut rng,
        );
        let p = ParameterSet::from_vec(params);
        let (loss, grad) = net.loss_for_draw(&p, &batch, &sched, &draw)?;
        params = p.into_vec();
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            let norm = params.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(Error::NonFiniteLoss {
                step,
                param_norm: norm,
            });
        }
        adam.step(&mut params, &grad);
        if let (Some(e), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
            ema_update(e, &params, d)?;
        }
        acc += loss;
        acc_n += 1;
        let done = step + 1;
        if done % cfg.log_interval == 0 {
            let mean = acc / acc_n as f64;
            losses.push((done, mean));
            if let (Some(w), Some(path)) = (log.as_mut(), &opts.loss_log) {
                writeln!(w, "{done},{mean}").map_err(|e| Error::io(path, e))?;
            }
            if let Some(cb) = opts.progress.as_mut() {
                cb(done, mean);
            }
            acc = 0.0;
            acc_n = 0;
        }
        if let Some(path) = &opts.checkpoint_path {
            if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.total_steps {
                snapshot(&params, &adam, &ema, done)?.save(path)?;
            }
        }
    }
    if let (Some(w), Some(path)) = (log.as_mut(), &opts.loss_log) {
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    let checkpoint = snapshot(&params, &adam, &ema, cfg.total_steps.max(start))?;
    if let Some(path) = &opts.checkpoint_path {
        checkpoint.save(path)?;
    }
    Ok(TrainOutcome { checkpoint, losses })
}

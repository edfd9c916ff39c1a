//! Synchronous data-parallel SGD over simulated workers.
//!
//! Each round every worker computes a minibatch gradient on its own shard,
//! compresses it layer by layer, and the coordinator averages the
//! decompressed messages, applies a Nesterov-momentum step and feeds the
//! applied gradient to the scheduler. Communication is counted in scalars
//! uploaded by all workers.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::accordion::{AccordionConfig, AccordionState, Mode};
use crate::compressor::{self, CompressedMessage, CompressorState, Level, Scheme};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, seeded_rng, Tensor};
use crate::model::{self, Dataset, GradientSet, Model};

/// Either a fixed level for the whole run or the adaptive scheduler.
#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Static(Level),
    Accordion(AccordionConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub workers: usize,
    pub epochs: usize,
    /// Per-worker minibatch size.
    pub batch_per_worker: usize,
    pub base_lr: f64,
    /// Global batch at which `base_lr` is tuned. Defaults to the initial
    /// global batch, in which case warmup is flat.
    pub lr_reference_batch: Option<usize>,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Nesterov momentum coefficient.
    pub momentum: f64,
    pub policy: Policy,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(workers: usize, epochs: usize, batch_per_worker: usize, base_lr: f64, policy: Policy) -> Self {
        Self {
            workers,
            epochs,
            batch_per_worker,
            base_lr,
            lr_reference_batch: None,
            warmup_epochs: 5,
            decay_epochs: Vec::new(),
            decay_factor: 10.0,
            momentum: 0.9,
            policy,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.workers == 0 || self.epochs == 0 || self.batch_per_worker == 0 {
            return bad("workers, epochs and batch must all be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_factor >= 1.0) {
            return bad(format!("decay_factor must be ≥ 1, got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.lr_reference_batch == Some(0) {
            return bad("lr reference batch must be positive".into());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("decay epochs must be strictly increasing".into());
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad("decay epochs must be before the last epoch".into());
        }
        match &self.policy {
            Policy::Static(level) => level.validate(),
            Policy::Accordion(acc) => acc.validate(),
        }
    }

    fn reference_batch(&self) -> usize {
        self.lr_reference_batch.unwrap_or(self.workers * self.batch_per_worker)
    }

    fn batch_mode(&self) -> bool {
        match &self.policy {
            Policy::Static(l) => l.scheme() == Scheme::BatchSize,
            Policy::Accordion(a) => a.mode == Mode::BatchSize,
        }
    }
}

/// Learning rate for `epoch` with per-worker batch `current_batch`.
///
/// The target is `base_lr` scaled linearly with the global batch relative to
/// the reference batch; warmup ramps linearly from `base_lr` to the target,
/// and each passed decay epoch divides by `decay_factor`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig, current_batch: usize) -> f64 {
    let global = (current_batch * config.workers) as f64;
    let target = config.base_lr * global / config.reference_batch() as f64;
    let lr = if epoch < config.warmup_epochs {
        config.base_lr + (target - config.base_lr) * epoch as f64 / config.warmup_epochs as f64
    } else {
        target
    };
    let decays = config.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    lr / config.decay_factor.powi(decays as i32)
}

/// Contiguous equal shards, remainder to the last worker.
pub fn shard_ranges(n: usize, workers: usize) -> Vec<std::ops::Range<usize>> {
    let size = n / workers;
    (0..workers)
        .map(|w| {
            let start = w * size;
            let end = if w + 1 == workers { n } else { start + size };
            start..end
        })
        .collect()
}

/// Dataset indices a worker visits in `epoch`, one batch per iteration.
pub fn worker_batches(
    seed: u64,
    epoch: usize,
    worker: usize,
    shard: std::ops::Range<usize>,
    batch: usize,
    iterations: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = shard.collect();
    let mut rng = seeded_rng(derive_seed(derive_seed(seed, epoch as u64), worker as u64 + 1));
    order.shuffle(&mut rng);
    order
        .chunks_exact(batch)
        .take(iterations)
        .map(<[usize]>::to_vec)
        .collect()
}

fn tree_sum(parts: &mut [Tensor]) -> Tensor {
    match parts.len() {
        1 => parts[0].clone(),
        n => {
            let (left, right) = parts.split_at_mut(n / 2);
            let mut l = tree_sum(left);
            let r = tree_sum(right);
            l.axpy(1.0, &r).expect("equal layer shapes");
            l
        }
    }
}

/// Mean of the decompressed messages, `messages[worker][layer]`, summed in
/// a fixed pairwise tree over workers.
pub fn aggregate(messages: &[Vec<CompressedMessage>], shapes: &[(usize, usize)]) -> Result<GradientSet> {
    if messages.is_empty() {
        return Err(Error::Protocol("no worker messages".into()));
    }
    let n = messages.len();
    let mut grads = Vec::with_capacity(shapes.len());
    for (layer, &shape) in shapes.iter().enumerate() {
        let mut parts = Vec::with_capacity(n);
        for (w, per_worker) in messages.iter().enumerate() {
            let msg = per_worker
                .iter()
                .find(|m| m.layer_id == layer)
                .ok_or_else(|| Error::Protocol(format!("worker {w} sent nothing for layer {layer}")))?;
            parts.push(compressor::decompress(msg, shape)?);
        }
        let mut sum = tree_sum(&mut parts);
        sum.data_mut().iter_mut().for_each(|v| *v /= n as f64);
        grads.push(sum);
    }
    Ok(GradientSet { grads, batch_size: 0 })
}

/// Run-length encoded per-unit levels, e.g. `powersgd:2*1|powersgd:1*3`.
pub fn level_summary(levels: &[Level]) -> String {
    let mut parts: Vec<(Level, usize)> = Vec::new();
    for l in levels {
        match parts.last_mut() {
            Some((prev, count)) if prev == l => *count += 1,
            _ => parts.push((*l, 1)),
        }
    }
    parts
        .iter()
        .map(|(l, c)| format!("{l}*{c}"))
        .collect::<Vec<_>>()
        .join("|")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    pub lr: f64,
    /// Level of each scheduler unit during this epoch.
    pub levels: Vec<Level>,
    pub floats_cumulative: u64,
    pub iterations_cumulative: u64,
}

impl MetricsRow {
    pub fn level_summary(&self) -> String {
        level_summary(&self.levels)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses rayon's default.
    pub threads: usize,
    /// Keep a copy of the model at the end of every epoch.
    pub keep_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub metrics: Vec<MetricsRow>,
    /// ‖Δ‖ of the whole model (summed applied gradient) per epoch.
    pub delta_norms: Vec<f64>,
    /// Mean norm of the applied gradient per epoch.
    pub grad_norms: Vec<f64>,
    pub checkpoints: Vec<Model>,
}

impl RunResult {
    pub fn total_floats(&self) -> u64 {
        self.metrics.last().map_or(0, |m| m.floats_cumulative)
    }

    pub fn final_metric(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.eval_metric)
    }
}

struct WorkerOutput {
    loss: f64,
    messages: Vec<CompressedMessage>,
}

fn current_batch(config: &TrainConfig, scheduler: Option<&AccordionState>) -> usize {
    let from_level = |l: &Level| match l {
        Level::BatchSize { batch } => Some(*batch),
        _ => None,
    };
    match (&config.policy, scheduler) {
        (Policy::Static(l), _) => from_level(l),
        (Policy::Accordion(a), Some(s)) if a.mode == Mode::BatchSize => from_level(&s.units[0].level),
        _ => None,
    }
    .unwrap_or(config.batch_per_worker)
}

pub fn run(config: &TrainConfig, model: Model, data: &Dataset) -> Result<RunResult> {
    run_with(config, model, data, RunOptions::default())
}

pub fn run_with(config: &TrainConfig, mut model: Model, data: &Dataset, opts: RunOptions) -> Result<RunResult> {
    config.validate()?;
    let shapes = model.shapes();
    let n_workers = config.workers;
    let batch_mode = config.batch_mode();

    match &config.policy {
        Policy::Static(level) => compressor::validate_level(level, &shapes)?,
        Policy::Accordion(acc) => {
            compressor::validate_level(&acc.level_low, &shapes)?;
            compressor::validate_level(&acc.level_high, &shapes)?;
        }
    }
    let largest_batch = match &config.policy {
        Policy::Accordion(a) if batch_mode => [a.level_low, a.level_high]
            .iter()
            .map(|l| match l {
                Level::BatchSize { batch } => *batch,
                _ => 0,
            })
            .max()
            .unwrap_or(0),
        _ => current_batch(config, None),
    };
    if data.len() < n_workers * largest_batch {
        return Err(Error::Config(format!(
            "dataset of {} cannot feed {n_workers} workers with batch {largest_batch}",
            data.len()
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let shards = shard_ranges(data.len(), n_workers);
    let mut states: Vec<CompressorState> = (0..n_workers)
        .map(|w| CompressorState::new(&shapes, derive_seed(config.seed, 1_000 + w as u64)))
        .collect();
    let mut velocity: Vec<Tensor> = shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();

    let mut scheduler = match &config.policy {
        Policy::Accordion(acc) => {
            let units: Vec<usize> = if batch_mode {
                vec![model.num_params()]
            } else {
                shapes.iter().map(|(r, c)| r * c).collect()
            };
            Some((acc.clone(), AccordionState::new(acc, &units)))
        }
        Policy::Static(_) => None,
    };

    let mut result = RunResult {
        model: model.clone(),
        metrics: Vec::with_capacity(config.epochs),
        delta_norms: Vec::with_capacity(config.epochs),
        grad_norms: Vec::with_capacity(config.epochs),
        checkpoints: Vec::new(),
    };
    let mut floats: u64 = 0;
    let mut iterations_total: u64 = 0;

    for epoch in 0..config.epochs {
        let batch = current_batch(config, scheduler.as_ref().map(|(_, s)| s));
        let lr = lr_schedule(epoch, config, batch);
        let iterations = data.len() / (n_workers * batch);

        let unit_levels: Vec<Level> = match (&scheduler, &config.policy) {
            (Some((_, s)), _) => s.levels(),
            (None, Policy::Static(l)) => vec![*l; shapes.len()],
            (None, Policy::Accordion(_)) => unreachable!(),
        };
        let layer_levels: Vec<Level> = if batch_mode {
            vec![Level::Dense; shapes.len()]
        } else {
            unit_levels.clone()
        };

        let plans: Vec<Vec<Vec<usize>>> = shards
            .iter()
            .enumerate()
            .map(|(w, shard)| worker_batches(config.seed, epoch, w, shard.clone(), batch, iterations))
            .collect();

        let mut loss_sum = 0.0;
        let mut norm_sum = 0.0;
        for it in 0..iterations {
            let current = &model;
            let outputs: Vec<Result<WorkerOutput>> = pool.install(|| {
                states
                    .par_iter_mut()
                    .zip(plans.par_iter())
                    .map(|(state, plan)| {
                        let (loss, grads) = model::loss_and_grad(current, data, &plan[it])?;
                        let messages = grads
                            .grads
                            .iter()
                            .zip(state.layers.iter_mut())
                            .zip(&layer_levels)
                            .enumerate()
                            .map(|(l, ((g, st), level))| compressor::compress(g, level, st, l))
                            .collect::<Result<Vec<_>>>()?;
                        Ok(WorkerOutput { loss, messages })
                    })
                    .collect()
            });

            let mut messages = Vec::with_capacity(n_workers);
            let mut round_loss = 0.0;
            for out in outputs {
                let out = out.map_err(|e| match e {
                    Error::Numeric { .. } => Error::Divergence { epoch, iteration: it },
                    other => other,
                })?;
                round_loss += out.loss;
                floats += out.messages.iter().map(|m| m.float_count as u64).sum::<u64>();
                messages.push(out.messages);
            }
            round_loss /= n_workers as f64;
            if !round_loss.is_finite() {
                return Err(Error::Divergence { epoch, iteration: it });
            }
            loss_sum += round_loss;

            let applied = aggregate(&messages, &shapes)?;
            norm_sum += applied.norm2();
            if let Some((_, state)) = scheduler.as_mut() {
                if batch_mode {
                    state.accumulate(0, &applied.flatten())?;
                } else {
                    for (l, g) in applied.grads.iter().enumerate() {
                        state.accumulate(l, g.data())?;
                    }
                }
            }

            for ((layer, v), g) in model.layers.iter_mut().zip(&mut velocity).zip(&applied.grads) {
                v.scale_mut(config.momentum);
                v.axpy(1.0, g)?;
                layer.value.axpy(-lr, g)?;
                layer.value.axpy(-lr * config.momentum, v)?;
                if !layer.value.is_finite() {
                    return Err(Error::Divergence { epoch, iteration: it });
                }
            }
            iterations_total += 1;
        }

        let eval_metric = model::evaluate(&model, data)?;
        let train_loss = loss_sum / iterations.max(1) as f64;
        let lr_next = if epoch + 1 < config.epochs {
            lr_schedule(epoch + 1, config, batch)
        } else {
            lr
        };

        let delta_norm = match scheduler.as_mut() {
            Some((acc, state)) => {
                state.end_of_epoch(acc, lr, lr_next, epoch);
                state.last_norms.iter().map(|n| n * n).sum::<f64>().sqrt()
            }
            None => f64::NAN,
        };
        result.delta_norms.push(delta_norm);
        result.grad_norms.push(norm_sum / iterations.max(1) as f64);

        log::info!(
            "epoch {epoch}: loss {train_loss:.6} metric {eval_metric:.4} lr {lr:.4} levels {}",
            level_summary(&unit_levels)
        );
        result.metrics.push(MetricsRow {
            epoch,
            train_loss,
            eval_metric,
            lr,
            levels: unit_levels,
            floats_cumulative: floats,
            iterations_cumulative: iterations_total,
        });
        if opts.keep_checkpoints {
            result.checkpoints.push(model.clone());
        }
    }

    result.model = model;
    Ok(result)
}

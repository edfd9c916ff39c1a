//! Critical-regime detection and level switching.
//!
//! A unit (one layer in compression mode, the whole model in batch-size
//! mode) is put on the low-compression level when the norm of its
//! accumulated gradient moved by at least `eta` relative to the last check,
//! or when the learning rate is about to decay. Otherwise it gets the high
//! level.

use serde::{Deserialize, Serialize};

use crate::compressor::{Level, Scheme};
use crate::error::{Error, Result};
use crate::linalg::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-layer compression level.
    Compression,
    /// Whole-model batch size.
    BatchSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccordionConfig {
    pub eta: f64,
    pub period_epochs: usize,
    /// More communication (higher rank, larger fraction, smaller batch).
    pub level_low: Level,
    pub level_high: Level,
    pub mode: Mode,
    /// Batch-size mode only: never go back to the small batch once grown.
    pub batch_monotone_increase: bool,
}

impl AccordionConfig {
    pub fn compression(level_low: Level, level_high: Level) -> Self {
        Self {
            eta: 0.5,
            period_epochs: 10,
            level_low,
            level_high,
            mode: Mode::Compression,
            batch_monotone_increase: false,
        }
    }

    pub fn batch_size(low: usize, high: usize) -> Self {
        Self {
            eta: 0.5,
            period_epochs: 10,
            level_low: Level::BatchSize { batch: low },
            level_high: Level::BatchSize { batch: high },
            mode: Mode::BatchSize,
            batch_monotone_increase: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.period_epochs == 0 {
            return Err(Error::Config("accordion period must be at least one epoch".into()));
        }
        self.level_low.validate()?;
        self.level_high.validate()?;
        let batch = self.mode == Mode::BatchSize;
        let is_batch_level = self.level_low.scheme() == Scheme::BatchSize;
        if batch != is_batch_level || self.level_low.scheme() != self.level_high.scheme() {
            return Err(Error::Config(format!(
                "levels {} / {} do not fit {:?} mode",
                self.level_low, self.level_high, self.mode
            )));
        }
        if !self.level_low.communicates_more_than(&self.level_high) {
            return Err(Error::Config(format!(
                "low level {} must communicate more than high level {}",
                self.level_low, self.level_high
            )));
        }
        Ok(())
    }

    /// One detection step for a unit.
    pub fn decide(&self, prev_norm: f64, curr_norm: f64, lr_curr: f64, lr_next: f64) -> Level {
        decide(
            prev_norm,
            curr_norm,
            lr_curr,
            lr_next,
            self.eta,
            &self.level_low,
            &self.level_high,
        )
    }
}

/// `|‖Δ_prev‖ − ‖Δ_curr‖| / ‖Δ_prev‖ ≥ η`, or an upcoming learning-rate decay.
pub fn is_critical(prev_norm: f64, curr_norm: f64, lr_curr: f64, lr_next: f64, eta: f64) -> bool {
    if lr_next < lr_curr {
        return true;
    }
    if prev_norm == 0.0 {
        return curr_norm > 0.0;
    }
    (prev_norm - curr_norm).abs() / prev_norm >= eta
}

pub fn decide(
    prev_norm: f64,
    curr_norm: f64,
    lr_curr: f64,
    lr_next: f64,
    eta: f64,
    low: &Level,
    high: &Level,
) -> Level {
    if is_critical(prev_norm, curr_norm, lr_curr, lr_next, eta) {
        *low
    } else {
        *high
    }
}

/// Training starts in the critical early phase.
pub fn initial_level(config: &AccordionConfig) -> Level {
    config.level_low
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitState {
    pub delta: Tensor,
    pub iterations: usize,
    pub checkpoint_norm: Option<f64>,
    pub checkpoint_iterations: usize,
    pub level: Level,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccordionState {
    pub units: Vec<UnitState>,
    pub epochs_since_check: usize,
    /// ‖Δ‖ of each unit for the most recently finished epoch.
    pub last_norms: Vec<f64>,
}

impl AccordionState {
    /// One unit per entry of `unit_sizes` (flattened element counts).
    pub fn new(config: &AccordionConfig, unit_sizes: &[usize]) -> Self {
        let start = initial_level(config);
        Self {
            units: unit_sizes
                .iter()
                .map(|&n| UnitState {
                    delta: Tensor::zeros(n, 1),
                    iterations: 0,
                    checkpoint_norm: None,
                    checkpoint_iterations: 0,
                    level: start,
                })
                .collect(),
            epochs_since_check: 0,
            last_norms: Vec::new(),
        }
    }

    pub fn levels(&self) -> Vec<Level> {
        self.units.iter().map(|u| u.level).collect()
    }

    /// `Δ_curr += grad` for one iteration.
    pub fn accumulate(&mut self, unit_id: usize, grad: &[f64]) -> Result<()> {
        let unit = self
            .units
            .get_mut(unit_id)
            .ok_or_else(|| Error::Shape(format!("no accordion unit {unit_id}")))?;
        if unit.delta.len() != grad.len() {
            return Err(Error::Shape(format!(
                "unit {unit_id} holds {} values, gradient has {}",
                unit.delta.len(),
                grad.len()
            )));
        }
        for (d, g) in unit.delta.data_mut().iter_mut().zip(grad) {
            *d += g;
        }
        unit.iterations += 1;
        Ok(())
    }

    /// Close the epoch: run the periodic check (or the decay-forced one) and
    /// return the level every unit uses next epoch.
    pub fn end_of_epoch(&mut self, config: &AccordionConfig, lr_curr: f64, lr_next: f64, epoch: usize) -> Vec<Level> {
        let decay = lr_next < lr_curr;
        self.epochs_since_check += 1;
        self.last_norms = self.units.iter().map(|u| u.delta.norm2()).collect();
        let baseline = self.units.iter().any(|u| u.checkpoint_norm.is_none());
        let check = baseline || decay || self.epochs_since_check >= config.period_epochs;

        if check {
            for (unit, &curr) in self.units.iter_mut().zip(&self.last_norms) {
                let proposed = match unit.checkpoint_norm {
                    // no history yet: keep the starting level unless the LR drops
                    None if decay => config.level_low,
                    None => unit.level,
                    Some(prev) => {
                        let prev = if unit.checkpoint_iterations > 0 && unit.iterations > 0 {
                            prev * unit.iterations as f64 / unit.checkpoint_iterations as f64
                        } else {
                            prev
                        };
                        config.decide(prev, curr, lr_curr, lr_next)
                    }
                };
                let suppressed = config.mode == Mode::BatchSize
                    && config.batch_monotone_increase
                    && unit.level == config.level_high
                    && proposed == config.level_low;
                if suppressed {
                    log::debug!("epoch {epoch}: keeping large batch (monotone increase)");
                } else {
                    unit.level = proposed;
                }
                unit.checkpoint_norm = Some(curr);
                unit.checkpoint_iterations = unit.iterations;
            }
            self.epochs_since_check = 0;
        }

        for unit in &mut self.units {
            unit.delta.fill(0.0);
            unit.iterations = 0;
        }
        self.levels()
    }
}

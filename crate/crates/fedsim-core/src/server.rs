//! Server-side policies applied between rounds: periodic iterate averaging
//! of recent global models and the epoch-decay schedule. Both reduce
//! exactly to plain FedAvg when disabled (or with P = 1, respectively).

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::nn::ParameterVector;

/// Every `period` rounds, replace the global model with the uniform mean
/// of the last `models_averaged` broadcast models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ServerAveragingConfig {
    pub enabled: bool,
    /// P: how many recent global models enter the mean.
    pub models_averaged: usize,
    /// R: averaging period in rounds.
    pub period: usize,
}

impl Default for ServerAveragingConfig {
    fn default() -> Self {
        // P = 1 is the FedAvg baseline
        Self {
            enabled: true,
            models_averaged: 1,
            period: 1,
        }
    }
}

impl ServerAveragingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.models_averaged < 1 {
            return Err(Error::Config("server_averaging.models_averaged (P) must be >= 1".into()));
        }
        if self.period < 1 {
            return Err(Error::Config("server_averaging.period (R) must be >= 1".into()));
        }
        Ok(())
    }

    /// History capacity needed to support this policy.
    pub fn history_capacity(&self) -> usize {
        if self.enabled {
            self.models_averaged.max(1)
        } else {
            1
        }
    }
}

/// Halve the local epoch count every `decay_interval` rounds, clamped at 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochDecayConfig {
    pub enabled: bool,
    /// E: local epochs during the first interval.
    pub initial_epochs: f64,
    /// D: rounds between halvings.
    pub decay_interval: usize,
}

impl EpochDecayConfig {
    pub fn disabled(initial_epochs: f64) -> Self {
        Self {
            enabled: false,
            initial_epochs,
            decay_interval: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_epochs >= 1.0) {
            return Err(Error::Config(format!(
                "epoch_decay.initial_epochs (E) must be >= 1, got {}",
                self.initial_epochs
            )));
        }
        if self.decay_interval < 1 {
            return Err(Error::Config("epoch_decay.decay_interval (D) must be >= 1".into()));
        }
        Ok(())
    }
}

/// Local epochs for round `t` (1-indexed): max(E / 2^floor((t-1)/D), 1),
/// so the first D rounds run at the full E.
pub fn epochs_at(t: usize, cfg: &EpochDecayConfig) -> f64 {
    debug_assert!(t >= 1, "rounds are 1-indexed");
    if !cfg.enabled {
        return cfg.initial_epochs;
    }
    let halvings = (t - 1) / cfg.decay_interval;
    let decayed = cfg.initial_epochs * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32);
    decayed.max(1.0)
}

/// Bounded FIFO of the models the server actually broadcast, newest last.
#[derive(Debug, Clone)]
pub struct ModelHistory {
    capacity: usize,
    entries: VecDeque<(usize, ParameterVector)>,
}

impl ModelHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn newest(&self) -> Option<(usize, &ParameterVector)> {
        self.entries.back().map(|(t, w)| (*t, w))
    }

    pub fn rounds(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(t, _)| *t)
    }

    /// Appends the model broadcast after round `t`; evicts the oldest entry
    /// beyond capacity. Rounds must be strictly increasing.
    pub fn push(&mut self, t: usize, w: ParameterVector) -> Result<()> {
        if let Some((newest, _)) = self.newest() {
            if t <= newest {
                return Err(Error::Shape(format!(
                    "history rounds must increase: got {t} after {newest}"
                )));
            }
        }
        self.entries.push_back((t, w));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Swaps the parameters of the newest entry (same round). Used when a
    /// policy replaces the broadcast model for the round just finished.
    pub fn replace_newest(&mut self, w: ParameterVector) {
        if let Some(back) = self.entries.back_mut() {
            back.1 = w;
        }
    }
}

/// Uniform mean of the newest P history entries, taken oldest-first.
/// Each coordinate is clamped to the [min, max] envelope of its inputs;
/// the true mean always lies inside, so this only removes float error and
/// makes "mean of P identical models" exact.
fn uniform_mean(entries: &[&ParameterVector]) -> ParameterVector {
    let p = entries.len();
    let len = entries[0].len();
    let inv_p = 1.0 / p as f64;
    let mut out = vec![0.0; len];
    for w in entries {
        debug_assert_eq!(w.len(), len);
        for (acc, &v) in out.iter_mut().zip(w.as_slice()) {
            *acc += v;
        }
    }
    for (j, acc) in out.iter_mut().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for w in entries {
            let v = w.as_slice()[j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        *acc *= inv_p;
        // an all-NaN coordinate leaves the envelope empty; let the NaN
        // through so the divergence check downstream reports it
        if lo <= hi {
            *acc = acc.clamp(lo, hi);
        }
    }
    ParameterVector::from_values(out)
}

/// Applies the periodic averaging policy after round `t` (1-indexed).
/// `history` must already hold the round-`t` aggregate as its newest entry.
/// On trigger (enabled, t = 0 mod R, at least P models recorded) returns
/// the averaged model and installs it as the newest history entry;
/// otherwise returns None and leaves everything untouched.
pub fn maybe_server_average(
    history: &mut ModelHistory,
    t: usize,
    cfg: &ServerAveragingConfig,
) -> Option<ParameterVector> {
    if !cfg.enabled || !t.is_multiple_of(cfg.period) || history.len() < cfg.models_averaged {
        return None;
    }
    debug_assert_eq!(history.newest().map(|(r, _)| r), Some(t));
    let p = cfg.models_averaged;
    let start = history.len() - p;
    let entries: Vec<&ParameterVector> = history
        .entries
        .iter()
        .skip(start)
        .map(|(_, w)| w)
        .collect();
    let averaged = uniform_mean(&entries);
    history.replace_newest(averaged.clone());
    Some(averaged)
}

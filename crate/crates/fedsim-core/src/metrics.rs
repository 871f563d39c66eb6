//! Rounds-to-accuracy extraction and multi-trial statistics: the T_a
//! metric (first round reaching a test-accuracy threshold) and its
//! mean +- sample standard deviation across trials.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// The accuracy thresholds reported by the experiment harness.
pub const THRESHOLDS: [f64; 4] = [0.90, 0.95, 0.97, 0.98];

/// Canonical string key for a threshold (JSON map key).
pub fn threshold_key(a: f64) -> String {
    format!("{a:.2}")
}

/// Measurements taken after one communication round.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub test_accuracy: f64,
    pub mean_train_loss: f64,
    pub epochs_used: f64,
    pub cumulative_epoch_units: f64,
    pub server_avg_applied: bool,
    pub wall_ms: u64,
}

/// One trial: its seed, the per-round trace, and the first-hit round for
/// every threshold.
#[derive(Debug, Clone)]
pub struct TrialSummary {
    pub seed: u64,
    pub records: Vec<RoundRecord>,
    /// Parallel to [`THRESHOLDS`]; None = never reached within the cap.
    pub rounds_to: Vec<Option<usize>>,
}

impl TrialSummary {
    pub fn from_records(seed: u64, records: Vec<RoundRecord>) -> Result<Self> {
        let rounds_to = THRESHOLDS
            .iter()
            .map(|&a| rounds_to_accuracy(&records, a))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            seed,
            records,
            rounds_to,
        })
    }

    pub fn rounds_to_map(&self) -> BTreeMap<String, Option<usize>> {
        THRESHOLDS
            .iter()
            .zip(&self.rounds_to)
            .map(|(&a, &r)| (threshold_key(a), r))
            .collect()
    }
}

/// Smallest round whose test accuracy is >= `a`; None if never reached.
/// The definition is first-hit: later dips do not move it.
pub fn rounds_to_accuracy(records: &[RoundRecord], a: f64) -> Result<Option<usize>> {
    if !(a > 0.0 && a <= 1.0) {
        return Err(Error::Config(format!(
            "accuracy threshold must be in (0, 1], got {a}"
        )));
    }
    Ok(records
        .iter()
        .find(|r| r.test_accuracy >= a)
        .map(|r| r.round))
}

/// Cross-trial statistics for one threshold. Trials that never reached the
/// threshold are excluded from mean/std and counted separately.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdStats {
    pub reached: usize,
    pub not_reached: usize,
    /// Mean first-hit round over reached trials; absent when none reached.
    pub mean: Option<f64>,
    /// Sample (n-1) standard deviation; 0.0 with `std_defined = false`
    /// when only one trial reached.
    pub std: Option<f64>,
    pub std_defined: bool,
}

/// Mean and sample standard deviation of T_a over the trials that reached
/// threshold `a`.
pub fn summarize(trials: &[TrialSummary], a: f64) -> Result<ThresholdStats> {
    if trials.is_empty() {
        return Err(Error::Config("summarize requires at least one trial".into()));
    }
    let idx = THRESHOLDS
        .iter()
        .position(|&t| t == a)
        .ok_or_else(|| Error::Config(format!("threshold {a} is not tracked")))?;
    let hits: Vec<f64> = trials
        .iter()
        .filter_map(|t| t.rounds_to[idx].map(|r| r as f64))
        .collect();
    let reached = hits.len();
    let not_reached = trials.len() - reached;
    if reached == 0 {
        return Ok(ThresholdStats {
            reached,
            not_reached,
            mean: None,
            std: None,
            std_defined: false,
        });
    }
    let mean = hits.iter().sum::<f64>() / reached as f64;
    let (std, std_defined) = if reached >= 2 {
        let var = hits.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (reached - 1) as f64;
        (var.sqrt(), true)
    } else {
        (0.0, false)
    };
    Ok(ThresholdStats {
        reached,
        not_reached,
        mean: Some(mean),
        std: Some(std),
        std_defined,
    })
}

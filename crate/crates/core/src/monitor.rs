//! Node-side monitoring: raw per-task usage samples in, smoothed and
//! hysteresis-stable band states out, plus health bookkeeping for containers
//! and node components.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{check_amount, BandLadder, ContainerId, ModelError, NodeId, ResourceKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sample batch mixes ticks {first} and {other}")]
    MixedTickBatch { first: u64, other: u64 },
}

/// Tunables shared by every monitor on a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// EWMA weight of the newest sample, in (0, 1].
    pub alpha: f64,
    /// Hysteresis margin as a fraction of the ladder's level width.
    pub hysteresis_fraction: f64,
    /// Consecutive classifications a new band must persist before it is accepted.
    pub dwell: u32,
    /// Ticks of silence after which a subject is reported stale.
    pub staleness_window: u64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            hysteresis_fraction: 0.05,
            dwell: 3,
            staleness_window: 5,
        }
    }
}

impl MonitorConfig {
    pub fn hysteresis_for(&self, ladder: &BandLadder) -> f64 {
        self.hysteresis_fraction * ladder.level_width()
    }
}

/// Exponentially weighted moving average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub alpha: f64,
    pub smoothed: f64,
    pub initialized: bool,
}

impl FilterState {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            smoothed: 0.0,
            initialized: false,
        }
    }

    /// Value of the filter, `None` before the first sample.
    pub fn value(&self) -> Option<f64> {
        self.initialized.then_some(self.smoothed)
    }
}

/// Folds one sample into the filter. The first sample initialises it.
pub fn ewma_update(state: FilterState, sample_value: f64) -> Result<FilterState, MonitorError> {
    let sample = check_amount(sample_value)?;
    let smoothed = if state.initialized {
        state.alpha * sample + (1.0 - state.alpha) * state.smoothed
    } else {
        sample
    };
    Ok(FilterState {
        smoothed,
        initialized: true,
        ..state
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandState {
    pub current_band: u32,
    pub candidate_band: Option<u32>,
    pub dwell: u32,
    pub hysteresis: f64,
    pub dwell_required: u32,
}

impl BandState {
    pub fn new(initial_band: u32, hysteresis: f64, dwell_required: u32) -> Self {
        Self {
            current_band: initial_band,
            candidate_band: None,
            dwell: 0,
            hysteresis,
            dwell_required: dwell_required.max(1),
        }
    }

    fn settled(self) -> Self {
        Self {
            candidate_band: None,
            dwell: 0,
            ..self
        }
    }
}

/// Advances the band state by one classification of the filtered value.
///
/// A move to a new band needs the smoothed value to sit at least `hysteresis`
/// inside the target band, measured from the target's boundary facing the
/// current band, on `dwell_required` consecutive calls. Jumps of several
/// levels are accepted in one step.
pub fn classify_band(ladder: &BandLadder, filter: &FilterState, band: BandState) -> BandState {
    let Some(smoothed) = filter.value() else {
        return band;
    };
    // The filter only ever holds validated, non-negative values.
    let target = ladder.quantize(smoothed).unwrap_or(0);
    if target == band.current_band {
        return band.settled();
    }
    let clear_of_boundary = if target > band.current_band {
        smoothed >= ladder.lower_bound(target) + band.hysteresis
    } else {
        smoothed <= ladder.upper_bound(target) - band.hysteresis
    };
    if !clear_of_boundary {
        return band.settled();
    }
    let dwell = if band.candidate_band == Some(target) {
        band.dwell + 1
    } else {
        1
    };
    if dwell >= band.dwell_required {
        BandState {
            current_band: target,
            ..band.settled()
        }
    } else {
        BandState {
            candidate_band: Some(target),
            dwell,
            ..band
        }
    }
}

/// Filter plus band state for one observed stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandTracker {
    pub filter: FilterState,
    pub band: BandState,
}

impl BandTracker {
    pub fn new(ladder: &BandLadder, config: &MonitorConfig) -> Self {
        Self {
            filter: FilterState::new(config.alpha),
            band: BandState::new(0, config.hysteresis_for(ladder), config.dwell),
        }
    }

    /// Feeds one sample; returns `(from, to)` when the accepted band changes.
    pub fn observe(
        &mut self,
        ladder: &BandLadder,
        sample: f64,
    ) -> Result<Option<(u32, u32)>, MonitorError> {
        self.filter = ewma_update(self.filter, sample)?;
        let before = self.band.current_band;
        self.band = classify_band(ladder, &self.filter, self.band);
        let after = self.band.current_band;
        Ok((before != after).then_some((before, after)))
    }

    pub fn band(&self) -> u32 {
        self.band.current_band
    }

    pub fn smoothed(&self) -> f64 {
        self.filter.value().unwrap_or(0.0)
    }
}

/// Band sequence of the reference classifier that quantises every raw sample.
pub fn naive_bands(ladder: &BandLadder, samples: &[f64]) -> Result<Vec<u32>, MonitorError> {
    samples
        .iter()
        .map(|&s| ladder.quantize(s).map_err(MonitorError::from))
        .collect()
}

/// Number of band changes in `bands`, starting from `initial`.
pub fn transition_count(initial: u32, bands: &[u32]) -> usize {
    let mut previous = initial;
    bands
        .iter()
        .filter(|&&b| {
            let changed = b != previous;
            previous = b;
            changed
        })
        .count()
}

/// Number of level boundaries crossed by `bands`, starting from `initial`.
/// A jump of three levels crosses three boundaries.
pub fn boundary_crossings(initial: u32, bands: &[u32]) -> u64 {
    let mut previous = initial;
    bands
        .iter()
        .map(|&b| {
            let crossed = u64::from(b.abs_diff(previous));
            previous = b;
            crossed
        })
        .sum()
}

/// Upper bound on the number of samples a constant input `target` needs,
/// starting from a filter already at `start`, before the tracker reports
/// `quantize(target)`.
///
/// Returns `None` when `target` sits within the hysteresis margin of its
/// band's boundary, where convergence is not guaranteed.
pub fn settle_bound(
    ladder: &BandLadder,
    config: &MonitorConfig,
    start: f64,
    target: f64,
) -> Option<u64> {
    let band = ladder.quantize(target).ok()?;
    let mut distance = f64::INFINITY;
    if band > 0 {
        distance = distance.min(target - ladder.lower_bound(band));
    }
    if band < ladder.top_level() {
        distance = distance.min(ladder.upper_bound(band) - target);
    }
    let hysteresis = config.hysteresis_for(ladder);
    let slack = distance - hysteresis;
    if slack <= 0.0 {
        return None;
    }
    let gap = (start - target).abs();
    let decay = 1.0 - config.alpha;
    let mut k = 0u64;
    let mut error = gap;
    while error >= slack {
        if decay <= 0.0 {
            k += 1;
            break;
        }
        error *= decay;
        k += 1;
    }
    Some(k + u64::from(config.dwell.max(1)))
}

/// One sample of consumption by a task during a tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageSample {
    pub tick: u64,
    pub container_id: ContainerId,
    pub task_id: u32,
    pub resource: ResourceKind,
    pub value: f64,
}

/// Sums task samples of one tick per (container, resource).
pub fn aggregate_container_usage(
    samples: &[UsageSample],
) -> Result<BTreeMap<(ContainerId, ResourceKind), f64>, MonitorError> {
    let mut totals = BTreeMap::new();
    let Some(first) = samples.first() else {
        return Ok(totals);
    };
    for sample in samples {
        if sample.tick != first.tick {
            return Err(MonitorError::MixedTickBatch {
                first: first.tick,
                other: sample.tick,
            });
        }
        let value = check_amount(sample.value)?;
        *totals
            .entry((sample.container_id.clone(), sample.resource))
            .or_insert(0.0) += value;
    }
    Ok(totals)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Healthy,
    Stale,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthRecord {
    pub subject: String,
    pub node: Option<NodeId>,
    pub last_seen_tick: Option<u64>,
    pub status: HealthStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FaultEvent {
    NodeFail(NodeId),
    SubjectFail(String),
}

/// Health of every subject a monitor knows about.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthTable {
    pub staleness_window: u64,
    pub records: BTreeMap<String, HealthRecord>,
}

impl HealthTable {
    pub fn new(staleness_window: u64) -> Self {
        Self {
            staleness_window,
            records: BTreeMap::new(),
        }
    }

    /// Starts tracking `subject`; a new subject counts as seen at `tick`.
    pub fn register(&mut self, subject: &str, node: Option<&str>, tick: u64) {
        self.records
            .entry(subject.to_string())
            .or_insert_with(|| HealthRecord {
                subject: subject.to_string(),
                node: node.map(str::to_string),
                last_seen_tick: Some(tick),
                status: HealthStatus::Healthy,
            });
    }

    pub fn remove(&mut self, subject: &str) {
        self.records.remove(subject);
    }

    pub fn status(&self, subject: &str) -> Option<HealthStatus> {
        self.records.get(subject).map(|r| r.status)
    }

    /// Marks `seen` subjects healthy, ages silent ones and applies faults.
    /// Failure is sticky.
    pub fn update<'a>(
        &mut self,
        tick: u64,
        seen: impl IntoIterator<Item = &'a str>,
        faults: &[FaultEvent],
    ) {
        for subject in seen {
            if let Some(record) = self.records.get_mut(subject) {
                record.last_seen_tick = Some(tick);
                if record.status != HealthStatus::Failed {
                    record.status = HealthStatus::Healthy;
                }
            }
        }
        for record in self.records.values_mut() {
            if record.status == HealthStatus::Failed {
                continue;
            }
            let silent = record
                .last_seen_tick
                .is_none_or(|seen| tick.saturating_sub(seen) > self.staleness_window);
            if silent {
                record.status = HealthStatus::Stale;
            }
        }
        for fault in faults {
            for record in self.records.values_mut() {
                let hit = match fault {
                    FaultEvent::NodeFail(node) => record.node.as_deref() == Some(node.as_str()),
                    FaultEvent::SubjectFail(subject) => &record.subject == subject,
                };
                if hit {
                    record.status = HealthStatus::Failed;
                }
            }
        }
    }
}

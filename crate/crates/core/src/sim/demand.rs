//! Synthetic per-tick demand, in native units of one resource.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::rng::subject_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandModel {
    Constant {
        value: f64,
    },
    /// `before` until tick `at`, `after` from then on.
    Step {
        before: f64,
        after: f64,
        at: u64,
    },
    /// `high` for the first `high_ticks` of every period, `low` otherwise.
    Periodic {
        low: f64,
        high: f64,
        period: u64,
        high_ticks: u64,
        #[serde(default)]
        phase: u64,
    },
    /// Starts at `start` and moves by up to `step` per tick, clamped to
    /// `[min, max]`.
    RandomWalk {
        start: f64,
        step: f64,
        min: f64,
        max: f64,
    },
}

fn non_negative(name: &str, v: f64) -> Result<(), String> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be finite and non-negative, got {v}"))
    }
}

impl DemandModel {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            DemandModel::Constant { value } => non_negative("value", value),
            DemandModel::Step { before, after, .. } => {
                non_negative("before", before)?;
                non_negative("after", after)
            }
            DemandModel::Periodic {
                low,
                high,
                period,
                high_ticks,
                ..
            } => {
                non_negative("low", low)?;
                non_negative("high", high)?;
                if period == 0 || high_ticks > period {
                    return Err("period must be positive and high_ticks at most period".into());
                }
                Ok(())
            }
            DemandModel::RandomWalk {
                start,
                step,
                min,
                max,
            } => {
                for (name, v) in [("start", start), ("step", step), ("min", min), ("max", max)] {
                    non_negative(name, v)?;
                }
                if min > max {
                    return Err(format!("min {min} exceeds max {max}"));
                }
                Ok(())
            }
        }
    }

    fn walk_step(&self, seed: u64, subject: &str, tick: u64, previous: f64) -> f64 {
        let DemandModel::RandomWalk { step, min, max, .. } = *self else {
            unreachable!("only random walks step")
        };
        let u: f64 = subject_rng(seed, tick, subject).random_range(-1.0..=1.0);
        (previous + step * u).clamp(min, max)
    }

    /// Demand at `tick`. A pure function of its arguments; a random walk is
    /// replayed from tick 0, so use [`DemandCursor`] for sequential reads.
    pub fn value_at(&self, seed: u64, subject: &str, tick: u64) -> f64 {
        match *self {
            DemandModel::Constant { value } => value,
            DemandModel::Step { before, after, at } => {
                if tick < at {
                    before
                } else {
                    after
                }
            }
            DemandModel::Periodic {
                low,
                high,
                period,
                high_ticks,
                phase,
            } => {
                if (tick + phase) % period < high_ticks {
                    high
                } else {
                    low
                }
            }
            DemandModel::RandomWalk {
                start, min, max, ..
            } => {
                let mut value = start.clamp(min, max);
                for t in 1..=tick {
                    value = self.walk_step(seed, subject, t, value);
                }
                value
            }
        }
    }
}

/// Sequential reader of one demand stream that steps a random walk
/// incrementally and agrees with [`DemandModel::value_at`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandCursor {
    pub model: DemandModel,
    pub subject: String,
    last: Option<(u64, f64)>,
}

impl DemandCursor {
    pub fn new(model: DemandModel, subject: impl Into<String>) -> Self {
        Self {
            model,
            subject: subject.into(),
            last: None,
        }
    }

    pub fn value_at(&mut self, seed: u64, tick: u64) -> f64 {
        let value = match (&self.model, self.last) {
            (DemandModel::RandomWalk { .. }, Some((t, v))) if t == tick => v,
            (DemandModel::RandomWalk { .. }, Some((t, v))) if t + 1 == tick => {
                self.model.walk_step(seed, &self.subject, tick, v)
            }
            _ => self.model.value_at(seed, &self.subject, tick),
        };
        self.last = Some((tick, value));
        value
    }
}

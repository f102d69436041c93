//! Admission for the time-triggered scheduling class.
//!
//! A node's table covers one hyperperiod divided into fixed-length slots.
//! Admission rebuilds the table from scratch with every TT container on the
//! node plus the newcomer, assigning slots in EDF order, and accepts only if
//! every job completes by its deadline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ContainerId, NodeSpec, TtParams};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub start: u64,
    pub container_id: ContainerId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotTable {
    pub hyperperiod: u64,
    pub slot_length: u64,
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtTask {
    pub container_id: ContainerId,
    pub params: TtParams,
}

impl TtTask {
    pub fn new(
        container_id: impl Into<ContainerId>,
        period: u64,
        runtime: u64,
        deadline: u64,
    ) -> Self {
        Self {
            container_id: container_id.into(),
            params: TtParams {
                period,
                runtime,
                deadline,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TtError {
    #[error("node `{0}` does not support the time-triggered class")]
    UnsupportedClass(String),
    #[error("period {period} of `{container}` does not divide the hyperperiod {hyperperiod}")]
    PeriodNotDividingHyperperiod {
        container: ContainerId,
        period: u64,
        hyperperiod: u64,
    },
    #[error("utilization exceeds one")]
    UtilizationExceeded,
    #[error("no feasible table: job of `{container}` released at {release} misses its deadline")]
    NoFeasibleTable {
        container: ContainerId,
        release: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableViolation {
    #[error("slot at {0} is not aligned to the slot length or lies outside the hyperperiod")]
    Misaligned(u64),
    #[error("two slots start at {0}")]
    Overlap(u64),
    #[error("slot at {start} belongs to unknown container `{container}`")]
    UnknownContainer { start: u64, container: ContainerId },
    #[error("job of `{container}` released at {release} misses its deadline")]
    DeadlineMiss {
        container: ContainerId,
        release: u64,
    },
}

#[derive(Debug)]
struct Job<'a> {
    container: &'a str,
    release: u64,
    deadline: u64,
    remaining: u64,
}

fn jobs(tasks: &[TtTask], hyperperiod: u64) -> Vec<Job<'_>> {
    tasks
        .iter()
        .flat_map(|task| {
            let p = task.params;
            (0..hyperperiod / p.period).map(move |k| Job {
                container: &task.container_id,
                release: k * p.period,
                deadline: k * p.period + p.deadline,
                remaining: p.runtime,
            })
        })
        .collect()
}

/// Builds the slot table for `tasks` on a node with the given slot length
/// and hyperperiod.
pub fn build_table(
    tasks: &[TtTask],
    slot_length: u64,
    hyperperiod: u64,
) -> Result<SlotTable, TtError> {
    for task in tasks {
        let period = task.params.period;
        if period == 0 || !hyperperiod.is_multiple_of(period) {
            return Err(TtError::PeriodNotDividingHyperperiod {
                container: task.container_id.clone(),
                period,
                hyperperiod,
            });
        }
    }
    let demand: u64 = tasks
        .iter()
        .map(|t| t.params.runtime * (hyperperiod / t.params.period))
        .sum();
    if demand > hyperperiod {
        return Err(TtError::UtilizationExceeded);
    }

    let mut jobs = jobs(tasks, hyperperiod);
    let mut slots = Vec::new();
    let mut start = 0;
    while start < hyperperiod {
        if let Some(missed) = jobs.iter().find(|j| j.remaining > 0 && j.deadline <= start) {
            return Err(TtError::NoFeasibleTable {
                container: missed.container.to_string(),
                release: missed.release,
            });
        }
        let next = jobs
            .iter_mut()
            .filter(|j| j.remaining > 0 && j.release <= start)
            .min_by(|a, b| {
                (a.deadline, a.container, a.release).cmp(&(b.deadline, b.container, b.release))
            });
        if let Some(job) = next {
            let run = job.remaining.min(slot_length);
            if start + run > job.deadline {
                return Err(TtError::NoFeasibleTable {
                    container: job.container.to_string(),
                    release: job.release,
                });
            }
            job.remaining -= run;
            slots.push(Slot {
                start,
                container_id: job.container.to_string(),
            });
        }
        start += slot_length;
    }
    if let Some(left) = jobs.iter().find(|j| j.remaining > 0) {
        return Err(TtError::NoFeasibleTable {
            container: left.container.to_string(),
            release: left.release,
        });
    }
    Ok(SlotTable {
        hyperperiod,
        slot_length,
        slots,
    })
}

/// Admits `new` next to the node's current TT containers.
pub fn admit_tt(node: &NodeSpec, existing: &[TtTask], new: &TtTask) -> Result<SlotTable, TtError> {
    let config = node
        .tt_config
        .filter(|_| node.supports_tt())
        .ok_or_else(|| TtError::UnsupportedClass(node.id.clone()))?;
    let mut tasks: Vec<TtTask> = existing
        .iter()
        .filter(|t| t.container_id != new.container_id)
        .cloned()
        .collect();
    tasks.push(new.clone());
    build_table(&tasks, config.slot_length, config.hyperperiod)
}

/// Replays `table` against `tasks`: slots must be aligned and disjoint, and
/// each job must receive its runtime before its deadline.
pub fn verify_table(table: &SlotTable, tasks: &[TtTask]) -> Result<(), TableViolation> {
    let mut starts = std::collections::BTreeSet::new();
    for slot in &table.slots {
        if slot.start % table.slot_length != 0 || slot.start >= table.hyperperiod {
            return Err(TableViolation::Misaligned(slot.start));
        }
        if !starts.insert(slot.start) {
            return Err(TableViolation::Overlap(slot.start));
        }
    }
    let mut per_container: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for slot in &table.slots {
        if !tasks.iter().any(|t| t.container_id == slot.container_id) {
            return Err(TableViolation::UnknownContainer {
                start: slot.start,
                container: slot.container_id.clone(),
            });
        }
        per_container
            .entry(slot.container_id.as_str())
            .or_default()
            .push(slot.start);
    }
    for task in tasks {
        let p = task.params;
        let mut starts = per_container
            .get(task.container_id.as_str())
            .cloned()
            .unwrap_or_default();
        starts.sort_unstable();
        let mut starts = starts.into_iter().peekable();
        for k in 0..table.hyperperiod / p.period {
            let release = k * p.period;
            let deadline = release + p.deadline;
            let mut remaining = p.runtime;
            while remaining > 0 {
                match starts.peek() {
                    Some(&s) if s < release => {
                        starts.next();
                    }
                    Some(&s) => {
                        let run = remaining.min(table.slot_length);
                        if s + run > deadline {
                            return Err(TableViolation::DeadlineMiss {
                                container: task.container_id.clone(),
                                release,
                            });
                        }
                        remaining -= run;
                        starts.next();
                    }
                    None => {
                        return Err(TableViolation::DeadlineMiss {
                            container: task.container_id.clone(),
                            release,
                        })
                    }
                }
            }
        }
    }
    Ok(())
}

//! The event trace: one JSON object per line with keys in the fixed order
//! `tick`, `source`, `kind`, `payload`.
//!
//! `source` is a node id, `"grm"` or `"sim"`. Within a tick, events appear
//! in phase order (tick, usage, monitor, enforcement, report, GRM, sim) and,
//! inside a phase, by node id.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::global::GlobalAction;
use crate::model::{ContainerId, NodeId, NodeSpec, ResourceClaim, ResourceKind, Strictness};
use crate::node::{BandChange, EnforcementAction, NodeStatusReport, OverloadChange};
use crate::sim::demand::DemandModel;
use crate::sim::scenario::Defaults;

pub const GRM_SOURCE: &str = "grm";
pub const SIM_SOURCE: &str = "sim";

/// One container's share of one resource in one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub container_id: ContainerId,
    pub resource: ResourceKind,
    pub strictness: Strictness,
    pub request_levels: u32,
    pub granted_levels: u32,
    /// Demand after the container's qos scale.
    pub demand: f64,
    pub delivered: f64,
    pub qos_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub horizon: u64,
    pub events: u64,
    pub invariant_violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventBody {
    /// First event of every trace: what was run.
    Scenario {
        seed: u64,
        horizon: u64,
        defaults: Defaults,
        nodes: Vec<NodeSpec>,
    },
    Tick {},
    Usage {
        entries: Vec<UsageEntry>,
    },
    BandChange(BandChange),
    Overload(OverloadChange),
    Enforcement(EnforcementAction),
    Report(NodeStatusReport),
    Arrival {
        container_id: ContainerId,
    },
    RequestChange {
        container_id: ContainerId,
        claims: Vec<ResourceClaim>,
    },
    Action(GlobalAction),
    /// The GRM had an overload report in hand but nothing could move.
    UnresolvedOverload {
        node_id: NodeId,
    },
    NodeFail {
        node_id: NodeId,
    },
    DemandChange {
        container_id: ContainerId,
        resource: ResourceKind,
        demand: DemandModel,
    },
    TtActivate {
        node_id: NodeId,
        slots: usize,
    },
    InvariantViolation {
        node_id: NodeId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        container_id: Option<ContainerId>,
        resource: ResourceKind,
        message: String,
    },
    Summary(Summary),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub tick: u64,
    pub source: String,
    #[serde(flatten)]
    pub body: EventBody,
}

impl Event {
    pub fn new(tick: u64, source: impl Into<String>, body: EventBody) -> Self {
        Self {
            tick,
            source: source.into(),
            body,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.body {
            EventBody::Scenario { .. } => "scenario",
            EventBody::Tick {} => "tick",
            EventBody::Usage { .. } => "usage",
            EventBody::BandChange(_) => "band_change",
            EventBody::Overload(_) => "overload",
            EventBody::Enforcement(_) => "enforcement",
            EventBody::Report(_) => "report",
            EventBody::Arrival { .. } => "arrival",
            EventBody::RequestChange { .. } => "request_change",
            EventBody::Action(_) => "action",
            EventBody::UnresolvedOverload { .. } => "unresolved_overload",
            EventBody::NodeFail { .. } => "node_fail",
            EventBody::DemandChange { .. } => "demand_change",
            EventBody::TtActivate { .. } => "tt_activate",
            EventBody::InvariantViolation { .. } => "invariant_violation",
            EventBody::Summary(_) => "summary",
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: tick {tick} is before the previous tick {previous}")]
    TickRegression {
        line: usize,
        tick: u64,
        previous: u64,
    },
    #[error("usage for node `{0}` but the trace never described it")]
    UnknownNode(NodeId),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode_event(event: &Event) -> String {
    serde_json::to_string(event).expect("events always serialize")
}

pub fn decode_event(line: &str) -> Result<Event, TraceError> {
    serde_json::from_str(line).map_err(|e| TraceError::Malformed {
        line: 1,
        message: e.to_string(),
    })
}

pub fn encode_trace(events: &[Event]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&encode_event(event));
        out.push('\n');
    }
    out
}

/// Decodes a whole trace, checking that ticks never go backwards. Blank
/// lines are ignored.
pub fn decode_trace(text: &str) -> Result<Vec<Event>, TraceError> {
    let mut events: Vec<Event> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: Event = serde_json::from_str(line).map_err(|e| TraceError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(previous) = events.last().map(|e| e.tick) {
            if event.tick < previous {
                return Err(TraceError::TickRegression {
                    line: i + 1,
                    tick: event.tick,
                    previous,
                });
            }
        }
        events.push(event);
    }
    Ok(events)
}

pub fn read_trace(path: &Path) -> Result<Vec<Event>, TraceError> {
    decode_trace(&fs::read_to_string(path)?)
}

/// Writes `contents` next to `path` and renames it into place, so readers
/// never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn write_trace(path: &Path, events: &[Event]) -> io::Result<()> {
    write_atomic(path, encode_trace(events).as_bytes())
}

/// Event counts by kind, handy for summaries and tests.
pub fn kind_counts(events: &[Event]) -> BTreeMap<&'static str, usize> {
    let mut counts = BTreeMap::new();
    for e in events {
        *counts.entry(e.kind()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::global::{ActionKind, GlobalAction};
    use crate::node::{EnforcementDetail, EnforcementKind, QosOutcome};

    fn samples() -> Vec<Event> {
        vec![
            Event::new(0, SIM_SOURCE, EventBody::Tick {}),
            Event::new(
                0,
                "n1",
                EventBody::Usage {
                    entries: vec![UsageEntry {
                        container_id: "c".into(),
                        resource: ResourceKind::MemoryBandwidth,
                        strictness: Strictness::Strict,
                        request_levels: 2,
                        granted_levels: 2,
                        demand: 0.1 + 0.2,
                        delivered: 1.0 / 3.0,
                        qos_level: 0,
                    }],
                },
            ),
            Event::new(
                1,
                "n1",
                EventBody::Enforcement(EnforcementAction {
                    kind: EnforcementKind::QosReduceRequest,
                    container_id: Some("c".into()),
                    resource: ResourceKind::Cache,
                    tick: 1,
                    detail: EnforcementDetail::Reduction {
                        fraction: 0.123_456_789_012_345_67,
                        outcome: QosOutcome::Level(2),
                    },
                }),
            ),
            Event::new(
                1,
                GRM_SOURCE,
                EventBody::Action(
                    GlobalAction::new(ActionKind::Place, 1)
                        .container("c")
                        .to("n1"),
                ),
            ),
        ]
    }

    #[test]
    fn keys_come_in_the_documented_order() {
        let line = encode_event(&samples()[3]);
        let tick = line.find("\"tick\"").unwrap();
        let source = line.find("\"source\"").unwrap();
        let kind = line.find("\"kind\":\"action\"").unwrap();
        let payload = line.find("\"payload\"").unwrap();
        assert!(tick < source && source < kind && kind < payload, "{line}");
    }

    #[test]
    fn events_round_trip_exactly() {
        let events = samples();
        let text = encode_trace(&events);
        assert_eq!(decode_trace(&text).unwrap(), events);
        for e in &events {
            assert_eq!(&decode_event(&encode_event(e)).unwrap(), e);
        }
    }

    #[test]
    fn decoding_rejects_garbage_and_tick_regressions() {
        assert!(matches!(
            decode_trace("{\"tick\":0}"),
            Err(TraceError::Malformed { line: 1, .. })
        ));
        let mut events = samples();
        events.swap(0, 2);
        assert!(matches!(
            decode_trace(&encode_trace(&events)),
            Err(TraceError::TickRegression { .. })
        ));
        assert!(decode_trace("").unwrap().is_empty());
    }

    #[test]
    fn atomic_write_replaces_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        fs::write(&path, "old").unwrap();
        write_trace(&path, &samples()).unwrap();
        assert_eq!(read_trace(&path).unwrap(), samples());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}

//! Metrics recomputed from a trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::global::ActionKind;
use crate::model::{ContainerId, NodeId, NodeSpec, ResourceKind, Strictness};
use crate::trace::{Event, EventBody, TraceError, UsageEntry};

/// Slack when checking delivered against owed amounts.
const DELIVERY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContainerMetrics {
    /// Ticks in which a strict claim got fewer levels than its request or
    /// less than it asked for within its request.
    pub rt_violation_ticks: u64,
    /// Mean of granted / requested levels over claims with a request.
    pub mean_granted_ratio: f64,
    pub qos_histogram: BTreeMap<usize, u64>,
    pub migrations: u64,
    pub delivered: BTreeMap<ResourceKind, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    /// Mean fraction of capacity delivered per tick while the node was up.
    pub utilization: BTreeMap<ResourceKind, f64>,
    pub overload_ticks: u64,
    pub up_ticks: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub ticks: u64,
    pub placements: u64,
    pub redeploys: u64,
    pub rejects: u64,
    pub migrations: u64,
    pub lost: u64,
    pub request_grants: u64,
    pub request_denials: u64,
    pub rt_violation_ticks: u64,
    pub invariant_violations: u64,
    pub delivered: BTreeMap<ResourceKind, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub containers: BTreeMap<ContainerId, ContainerMetrics>,
    pub nodes: BTreeMap<NodeId, NodeMetrics>,
    pub cluster: ClusterMetrics,
}

impl MetricsSummary {
    /// The same summary with only `id`'s container or node entry kept.
    pub fn filtered(&self, id: &str) -> Option<MetricsSummary> {
        let containers: BTreeMap<_, _> = self
            .containers
            .iter()
            .filter(|(c, _)| c.as_str() == id)
            .map(|(c, m)| (c.clone(), m.clone()))
            .collect();
        let nodes: BTreeMap<_, _> = self
            .nodes
            .iter()
            .filter(|(n, _)| n.as_str() == id)
            .map(|(n, m)| (n.clone(), m.clone()))
            .collect();
        if containers.is_empty() && nodes.is_empty() {
            return None;
        }
        Some(MetricsSummary {
            containers,
            nodes,
            cluster: self.cluster.clone(),
        })
    }
}

#[derive(Default)]
struct Accumulator {
    summary: MetricsSummary,
    nodes: BTreeMap<NodeId, NodeSpec>,
    up: BTreeSet<NodeId>,
    /// Latched resources per node.
    latched: BTreeMap<NodeId, BTreeSet<ResourceKind>>,
    delivered_per_node: BTreeMap<NodeId, BTreeMap<ResourceKind, f64>>,
    /// Sum and count of granted / requested ratios per container.
    ratios: BTreeMap<ContainerId, (f64, u64)>,
    seen_tick: bool,
}

impl Accumulator {
    /// Closes a tick: counts latched nodes.
    fn close_tick(&mut self) {
        if !self.seen_tick {
            return;
        }
        for (node, resources) in &self.latched {
            if !resources.is_empty() {
                self.summary
                    .nodes
                    .entry(node.clone())
                    .or_default()
                    .overload_ticks += 1;
            }
        }
    }

    fn usage(&mut self, node_id: &str, entries: &[UsageEntry]) -> Result<(), TraceError> {
        let spec = self
            .nodes
            .get(node_id)
            .ok_or_else(|| TraceError::UnknownNode(node_id.to_string()))?;
        let mut violated: BTreeSet<&str> = BTreeSet::new();
        let mut qos_counted: BTreeSet<&str> = BTreeSet::new();
        for e in entries {
            let c = self
                .summary
                .containers
                .entry(e.container_id.clone())
                .or_default();
            if qos_counted.insert(&e.container_id) {
                *c.qos_histogram.entry(e.qos_level).or_insert(0) += 1;
            }
            *c.delivered.entry(e.resource).or_insert(0.0) += e.delivered;
            *self
                .summary
                .cluster
                .delivered
                .entry(e.resource)
                .or_insert(0.0) += e.delivered;
            *self
                .delivered_per_node
                .entry(node_id.to_string())
                .or_default()
                .entry(e.resource)
                .or_insert(0.0) += e.delivered;
            if e.request_levels > 0 {
                let (sum, count) = self
                    .ratios
                    .entry(e.container_id.clone())
                    .or_insert((0.0, 0));
                *sum += f64::from(e.granted_levels) / f64::from(e.request_levels);
                *count += 1;
            }
            if e.strictness == Strictness::Strict {
                let owed = spec
                    .ladder(e.resource)
                    .map_or(0.0, |l| e.demand.min(l.amount_of(e.request_levels)));
                if e.granted_levels < e.request_levels || e.delivered + DELIVERY_TOLERANCE < owed {
                    violated.insert(&e.container_id);
                }
            }
        }
        for id in violated {
            self.summary
                .containers
                .get_mut(id)
                .expect("entry created above")
                .rt_violation_ticks += 1;
            self.summary.cluster.rt_violation_ticks += 1;
        }
        Ok(())
    }

    fn finish(mut self) -> MetricsSummary {
        self.close_tick();
        for (id, c) in &mut self.summary.containers {
            c.mean_granted_ratio = match self.ratios.get(id) {
                Some(&(sum, count)) if count > 0 => sum / count as f64,
                _ => 0.0,
            };
        }
        for (id, spec) in &self.nodes {
            let m = self.summary.nodes.entry(id.clone()).or_default();
            for ladder in &spec.ladders {
                let delivered = self
                    .delivered_per_node
                    .get(id)
                    .and_then(|d| d.get(&ladder.resource))
                    .copied()
                    .unwrap_or(0.0);
                let utilization = if m.up_ticks == 0 {
                    0.0
                } else {
                    delivered / (ladder.capacity * m.up_ticks as f64)
                };
                m.utilization.insert(ladder.resource, utilization);
            }
        }
        self.summary
    }
}

/// Recomputes the metrics summary from a trace. A pure function of it.
pub fn compute_metrics(events: &[Event]) -> Result<MetricsSummary, TraceError> {
    let mut acc = Accumulator::default();
    for event in events {
        match &event.body {
            EventBody::Scenario { nodes, .. } => {
                for n in nodes {
                    acc.nodes.insert(n.id.clone(), n.clone());
                    acc.up.insert(n.id.clone());
                    acc.summary.nodes.entry(n.id.clone()).or_default();
                }
            }
            EventBody::Tick {} => {
                acc.close_tick();
                acc.seen_tick = true;
                acc.summary.cluster.ticks += 1;
                for n in &acc.up {
                    acc.summary.nodes.entry(n.clone()).or_default().up_ticks += 1;
                }
            }
            EventBody::Usage { entries } => acc.usage(&event.source, entries)?,
            EventBody::Overload(change) => {
                let set = acc.latched.entry(event.source.clone()).or_default();
                if change.latched {
                    set.insert(change.resource);
                } else {
                    set.remove(&change.resource);
                }
            }
            EventBody::NodeFail { node_id } => {
                acc.up.remove(node_id);
                acc.latched.remove(node_id);
            }
            EventBody::Action(action) => {
                let cluster = &mut acc.summary.cluster;
                match action.kind {
                    ActionKind::Place => cluster.placements += 1,
                    ActionKind::Redeploy => cluster.redeploys += 1,
                    ActionKind::Reject => cluster.rejects += 1,
                    ActionKind::MarkLost => cluster.lost += 1,
                    ActionKind::GrantRequestChange => cluster.request_grants += 1,
                    ActionKind::DenyRequestChange => cluster.request_denials += 1,
                    ActionKind::Migrate => {
                        cluster.migrations += 1;
                        if let Some(id) = &action.container_id {
                            acc.summary
                                .containers
                                .entry(id.clone())
                                .or_default()
                                .migrations += 1;
                        }
                    }
                    ActionKind::InstallTtTable | ActionKind::ConfirmThrottle => {}
                }
            }
            EventBody::InvariantViolation { .. } => acc.summary.cluster.invariant_violations += 1,
            _ => {}
        }
    }
    Ok(acc.finish())
}

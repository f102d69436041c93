//! Local resource manager: one per node.
//!
//! Combines the monitors of every resident container with overload
//! detection and the local enforcement ladder, and condenses the node's state
//! into the [`NodeStatusReport`] the global manager works from.

mod arbitrate;
mod enforce;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::global::tt::SlotTable;
use crate::model::{ContainerId, ContainerSpec, NodeId, NodeSpec, ResourceClaim, ResourceKind};
use crate::monitor::{
    aggregate_container_usage, BandTracker, HealthStatus, HealthTable, MonitorConfig, MonitorError,
    UsageSample,
};

pub use arbitrate::{arbitrate, granted_levels, DemandRequest, Grant};
pub use enforce::{
    qos_negotiate, EnforcementAction, EnforcementDetail, EnforcementKind, QosOutcome,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NodeError {
    #[error("node `{node}` has no container `{container}`")]
    UnknownContainer {
        node: NodeId,
        container: ContainerId,
    },
    #[error("container `{0}` is already resident")]
    DuplicateContainer(ContainerId),
    #[error("node `{node}`: strict reservations on {resource} would exceed {levels} levels")]
    CapacityExceeded {
        node: NodeId,
        resource: ResourceKind,
        levels: u32,
    },
    #[error("node `{0}` does not support the time-triggered class")]
    UnsupportedClass(NodeId),
    #[error("container `{0}` is not adaptive")]
    NotAdaptive(ContainerId),
    #[error("sample for tick {sample} delivered to tick {tick}")]
    WrongTick { sample: u64, tick: u64 },
    #[error(transparent)]
    Monitor(#[from] MonitorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub monitor: MonitorConfig,
    /// Ticks between asking adaptive containers to reduce and throttling.
    pub grace: u64,
    /// Overload threshold measured down from the top level: 1 means `L - 1`.
    pub overload_margin_levels: u32,
    pub overload_dwell: u32,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            monitor: MonitorConfig::default(),
            grace: 2,
            overload_margin_levels: 1,
            overload_dwell: 3,
        }
    }
}

impl LocalConfig {
    /// Aggregate band at or above which a resource counts as overloaded.
    /// Never zero, so a single-level ladder can not latch.
    pub fn overload_threshold(&self, levels: u32) -> u32 {
        levels.saturating_sub(self.overload_margin_levels).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnforcementMode {
    Relaxed,
    StrictEnforcement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverloadState {
    pub resource: ResourceKind,
    pub threshold: u32,
    pub dwell_required: u32,
    pub latched: bool,
    pub since_tick: Option<u64>,
    /// Consecutive ticks on the far side of the threshold from the latch state.
    pub streak: u32,
    /// The local ladder was exhausted and the GRM has been told.
    pub escalated: bool,
    pub last_local_action: Option<u64>,
}

impl OverloadState {
    fn new(resource: ResourceKind, threshold: u32, dwell_required: u32) -> Self {
        Self {
            resource,
            threshold,
            dwell_required: dwell_required.max(1),
            latched: false,
            since_tick: None,
            streak: 0,
            escalated: false,
            last_local_action: None,
        }
    }

    pub fn mode(&self) -> EnforcementMode {
        if self.latched {
            EnforcementMode::StrictEnforcement
        } else {
            EnforcementMode::Relaxed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverloadChange {
    pub resource: ResourceKind,
    pub latched: bool,
    pub band: u32,
    pub threshold: u32,
    /// Adaptive residents over their request when the latch closed.
    pub adaptive_over_request: Vec<ContainerId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandChange {
    /// `None` for the node's aggregate band.
    pub container_id: Option<ContainerId>,
    pub resource: ResourceKind,
    pub from: u32,
    pub to: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resident {
    pub spec: ContainerSpec,
    pub tasks: u32,
    pub qos_level: usize,
    pub admitted_tick: u64,
    pub trackers: BTreeMap<ResourceKind, BandTracker>,
    pub throttled: BTreeSet<ResourceKind>,
    /// Tick of the qos request sent in the current overload episode.
    pub qos_asked: BTreeMap<ResourceKind, u64>,
}

impl Resident {
    pub fn smoothed(&self, resource: ResourceKind) -> f64 {
        self.trackers
            .get(&resource)
            .map_or(0.0, BandTracker::smoothed)
    }

    pub fn band(&self, resource: ResourceKind) -> u32 {
        self.trackers.get(&resource).map_or(0, BandTracker::band)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtState {
    pub active: Option<SlotTable>,
    pub pending: Option<(SlotTable, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRuntimeState {
    pub node: NodeSpec,
    pub config: LocalConfig,
    pub residents: BTreeMap<ContainerId, Resident>,
    pub node_bands: BTreeMap<ResourceKind, BandTracker>,
    /// Raw aggregate usage of the last ingested tick.
    pub last_usage: BTreeMap<ResourceKind, f64>,
    pub overload: BTreeMap<ResourceKind, OverloadState>,
    pub health: HealthTable,
    pub tt: Option<TtState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceStatus {
    pub levels: u32,
    pub free_strict_levels: u32,
    pub aggregate_band: u32,
    pub mode: EnforcementMode,
    /// Set once the local ladder is exhausted in the current episode.
    pub overloaded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerBand {
    pub band: u32,
    /// Whole levels spanned by the smoothed usage.
    pub levels: u32,
    /// Smoothed usage is within the hysteresis margin of the limit.
    pub at_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerStatus {
    pub bands: BTreeMap<ResourceKind, ContainerBand>,
    pub qos_level: usize,
    pub health: HealthStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatusReport {
    pub node_id: NodeId,
    pub tick: u64,
    pub resources: BTreeMap<ResourceKind, ResourceStatus>,
    pub containers: BTreeMap<ContainerId, ContainerStatus>,
}

impl NodeStatusReport {
    pub fn is_overloaded(&self) -> bool {
        self.resources.values().any(|r| r.overloaded)
    }
}

impl NodeRuntimeState {
    pub fn new(node: NodeSpec, config: LocalConfig) -> Self {
        let node_bands = node
            .ladders
            .iter()
            .map(|l| (l.resource, BandTracker::new(l, &config.monitor)))
            .collect();
        let overload = node
            .ladders
            .iter()
            .map(|l| {
                (
                    l.resource,
                    OverloadState::new(
                        l.resource,
                        config.overload_threshold(l.levels),
                        config.overload_dwell,
                    ),
                )
            })
            .collect();
        let mut health = HealthTable::new(config.monitor.staleness_window);
        health.register(&Self::component_subject(&node.id), Some(&node.id), 0);
        let tt = node.supports_tt().then_some(TtState {
            active: None,
            pending: None,
        });
        Self {
            node,
            config,
            residents: BTreeMap::new(),
            node_bands,
            last_usage: BTreeMap::new(),
            overload,
            health,
            tt,
        }
    }

    /// Health subject standing for the node's own monitoring component.
    pub fn component_subject(node: &str) -> String {
        format!("{node}/lrm")
    }

    pub fn id(&self) -> &str {
        &self.node.id
    }

    pub fn mode(&self, resource: ResourceKind) -> EnforcementMode {
        self.overload
            .get(&resource)
            .map_or(EnforcementMode::Relaxed, OverloadState::mode)
    }

    pub fn reserved_levels(&self, resource: ResourceKind) -> u32 {
        self.residents
            .values()
            .map(|r| r.spec.reserved(resource))
            .sum()
    }

    pub fn free_strict_levels(&self, resource: ResourceKind) -> u32 {
        self.node
            .levels(resource)
            .saturating_sub(self.reserved_levels(resource))
    }

    fn check_reservations(
        &self,
        claims: &[ResourceClaim],
        skip: Option<&str>,
    ) -> Result<(), NodeError> {
        for claim in claims.iter().filter(|c| c.is_strict()) {
            let others: u32 = self
                .residents
                .iter()
                .filter(|(id, _)| Some(id.as_str()) != skip)
                .map(|(_, r)| r.spec.reserved(claim.resource))
                .sum();
            let levels = self.node.levels(claim.resource);
            if others + claim.request_levels > levels {
                return Err(NodeError::CapacityExceeded {
                    node: self.node.id.clone(),
                    resource: claim.resource,
                    levels,
                });
            }
        }
        Ok(())
    }

    /// Makes `spec` resident. Strict reservations must fit.
    pub fn admit(&mut self, spec: ContainerSpec, tasks: u32, tick: u64) -> Result<(), NodeError> {
        if self.residents.contains_key(&spec.id) {
            return Err(NodeError::DuplicateContainer(spec.id));
        }
        self.check_reservations(&spec.claims, None)?;
        let trackers = self.trackers_for(&spec);
        self.health.register(&spec.id, Some(&self.node.id), tick);
        self.residents.insert(
            spec.id.clone(),
            Resident {
                spec,
                tasks: tasks.max(1),
                qos_level: 0,
                admitted_tick: tick,
                trackers,
                throttled: BTreeSet::new(),
                qos_asked: BTreeMap::new(),
            },
        );
        Ok(())
    }

    fn trackers_for(&self, spec: &ContainerSpec) -> BTreeMap<ResourceKind, BandTracker> {
        spec.claims
            .iter()
            .filter_map(|c| self.node.ladder(c.resource))
            .map(|l| (l.resource, BandTracker::new(l, &self.config.monitor)))
            .collect()
    }

    /// Removes a resident. A departure inside an overload episode re-arms
    /// the escalation so the GRM is only told again on fresh evidence.
    pub fn remove(&mut self, container: &str, tick: u64) -> Option<Resident> {
        let resident = self.residents.remove(container)?;
        self.health.remove(container);
        for state in self.overload.values_mut().filter(|s| s.latched) {
            state.escalated = false;
            state.last_local_action = Some(tick);
        }
        Some(resident)
    }

    /// Replaces a resident's claims in place (a granted request change).
    pub fn update_claims(
        &mut self,
        container: &str,
        claims: Vec<ResourceClaim>,
    ) -> Result<(), NodeError> {
        if !self.residents.contains_key(container) {
            return Err(self.unknown(container));
        }
        self.check_reservations(&claims, Some(container))?;
        let mut spec = self.residents[container].spec.clone();
        spec.claims = claims;
        let trackers = self.trackers_for(&spec);
        let resident = self.residents.get_mut(container).expect("checked above");
        for (resource, tracker) in trackers {
            resident.trackers.entry(resource).or_insert(tracker);
        }
        resident.spec = spec;
        Ok(())
    }

    fn unknown(&self, container: &str) -> NodeError {
        NodeError::UnknownContainer {
            node: self.node.id.clone(),
            container: container.to_string(),
        }
    }

    /// Budget in levels currently applied to `container` on `resource`.
    pub fn cap_levels(&self, container: &str, resource: ResourceKind) -> u32 {
        self.residents.get(container).map_or(0, |r| {
            if r.throttled.contains(&resource) {
                r.spec.request(resource)
            } else {
                r.spec.limit(resource)
            }
        })
    }

    /// Advances every monitor with this tick's samples.
    pub fn ingest_tick(
        &mut self,
        samples: &[UsageSample],
        tick: u64,
    ) -> Result<Vec<BandChange>, NodeError> {
        if let Some(sample) = samples.iter().find(|s| s.tick != tick) {
            return Err(NodeError::WrongTick {
                sample: sample.tick,
                tick,
            });
        }
        if let Some(sample) = samples
            .iter()
            .find(|s| !self.residents.contains_key(&s.container_id))
        {
            return Err(self.unknown(&sample.container_id));
        }
        let component = Self::component_subject(&self.node.id);
        if samples.is_empty() {
            // Nothing was measured, so the filters hold; only health ages.
            self.health.update(tick, [component.as_str()], &[]);
            return Ok(Vec::new());
        }
        let totals = aggregate_container_usage(samples)?;
        let mut changes = Vec::new();
        let mut aggregate: BTreeMap<ResourceKind, f64> = BTreeMap::new();
        for (id, resident) in &mut self.residents {
            for (&resource, tracker) in &mut resident.trackers {
                let ladder = self
                    .node
                    .ladder(resource)
                    .expect("trackers exist only for laddered resources");
                let value = totals.get(&(id.clone(), resource)).copied().unwrap_or(0.0);
                *aggregate.entry(resource).or_insert(0.0) += value;
                if let Some((from, to)) = tracker.observe(ladder, value)? {
                    changes.push(BandChange {
                        container_id: Some(id.clone()),
                        resource,
                        from,
                        to,
                    });
                }
            }
        }
        for ladder in &self.node.ladders {
            let total = aggregate.get(&ladder.resource).copied().unwrap_or(0.0);
            let tracker = self
                .node_bands
                .get_mut(&ladder.resource)
                .expect("one tracker per ladder");
            if let Some((from, to)) = tracker.observe(ladder, total)? {
                changes.push(BandChange {
                    container_id: None,
                    resource: ladder.resource,
                    from,
                    to,
                });
            }
            self.last_usage.insert(ladder.resource, total);
        }
        let component = Self::component_subject(&self.node.id);
        let seen: BTreeSet<&str> = samples
            .iter()
            .map(|s| s.container_id.as_str())
            .chain(std::iter::once(component.as_str()))
            .collect();
        self.health.update(tick, seen, &[]);
        Ok(changes)
    }

    pub fn node_band(&self, resource: ResourceKind) -> u32 {
        self.node_bands.get(&resource).map_or(0, BandTracker::band)
    }

    /// Latches or releases strict enforcement per resource after
    /// `overload_dwell` consecutive ticks on the other side of the threshold.
    pub fn detect_overload(&mut self, tick: u64) -> Vec<OverloadChange> {
        let mut changes = Vec::new();
        let resources: Vec<ResourceKind> = self.overload.keys().copied().collect();
        for resource in resources {
            let band = self.node_band(resource);
            let state = self.overload.get_mut(&resource).expect("key from map");
            let above = band >= state.threshold;
            if above != state.latched {
                state.streak += 1;
            } else {
                state.streak = 0;
            }
            if state.streak < state.dwell_required {
                continue;
            }
            state.streak = 0;
            state.latched = above;
            state.escalated = false;
            state.last_local_action = None;
            let threshold = state.threshold;
            if above {
                state.since_tick = Some(tick);
            } else {
                state.since_tick = None;
                for resident in self.residents.values_mut() {
                    resident.throttled.remove(&resource);
                    resident.qos_asked.remove(&resource);
                }
            }
            let adaptive_over_request = if above {
                self.residents
                    .iter()
                    .filter(|(_, r)| r.spec.adaptive && self.over_request(r, resource))
                    .map(|(id, _)| id.clone())
                    .collect()
            } else {
                Vec::new()
            };
            changes.push(OverloadChange {
                resource,
                latched: above,
                band,
                threshold,
                adaptive_over_request,
            });
        }
        changes
    }

    /// Whole levels spanned by a resident's smoothed usage on `resource`.
    pub fn occupied_levels(&self, resident: &Resident, resource: ResourceKind) -> u32 {
        self.node
            .ladder(resource)
            .map_or(0, |l| l.levels_spanned(resident.smoothed(resource)))
    }

    /// Is the resident running at its limit on `resource`?
    pub fn at_limit(&self, resident: &Resident, resource: ResourceKind) -> bool {
        let limit = resident.spec.limit(resource);
        let Some(ladder) = self.node.ladder(resource) else {
            return false;
        };
        let margin = self.config.monitor.hysteresis_for(ladder);
        limit > 0 && resident.smoothed(resource) >= ladder.amount_of(limit) - margin
    }

    pub fn over_request(&self, resident: &Resident, resource: ResourceKind) -> bool {
        self.occupied_levels(resident, resource) > resident.spec.request(resource)
    }

    pub fn build_status_report(&self, tick: u64) -> NodeStatusReport {
        let resources = self
            .node
            .ladders
            .iter()
            .map(|l| {
                let state = &self.overload[&l.resource];
                (
                    l.resource,
                    ResourceStatus {
                        levels: l.levels,
                        free_strict_levels: self.free_strict_levels(l.resource),
                        aggregate_band: self.node_band(l.resource),
                        mode: state.mode(),
                        overloaded: state.latched && state.escalated,
                    },
                )
            })
            .collect();
        let containers = self
            .residents
            .iter()
            .map(|(id, r)| {
                let bands = r
                    .trackers
                    .keys()
                    .map(|&resource| {
                        (
                            resource,
                            ContainerBand {
                                band: r.band(resource),
                                levels: self.occupied_levels(r, resource),
                                at_limit: self.at_limit(r, resource),
                            },
                        )
                    })
                    .collect();
                (
                    id.clone(),
                    ContainerStatus {
                        bands,
                        qos_level: r.qos_level,
                        health: self.health.status(id).unwrap_or(HealthStatus::Stale),
                    },
                )
            })
            .collect();
        NodeStatusReport {
            node_id: self.node.id.clone(),
            tick,
            resources,
            containers,
        }
    }

    /// Stores `table` to take over at the next hyperperiod boundary
    /// (immediately when `tick` is one).
    pub fn install_tt_table(&mut self, table: SlotTable, tick: u64) -> Result<u64, NodeError> {
        let (Some(tt), Some(config)) = (self.tt.as_mut(), self.node.tt_config) else {
            return Err(NodeError::UnsupportedClass(self.node.id.clone()));
        };
        let hyperperiod = config.hyperperiod;
        let activation = tick.div_ceil(hyperperiod) * hyperperiod;
        if activation == tick {
            tt.active = Some(table);
            tt.pending = None;
        } else {
            tt.pending = Some((table, activation));
        }
        Ok(activation)
    }

    /// Swaps in a pending table whose activation tick has come.
    pub fn advance_tt(&mut self, tick: u64) -> Option<&SlotTable> {
        let tt = self.tt.as_mut()?;
        match tt.pending.take() {
            Some((table, at)) if at <= tick => {
                tt.active = Some(table);
                tt.active.as_ref()
            }
            other => {
                tt.pending = other;
                None
            }
        }
    }

    pub fn active_tt_table(&self) -> Option<&SlotTable> {
        self.tt.as_ref().and_then(|t| t.active.as_ref())
    }
}

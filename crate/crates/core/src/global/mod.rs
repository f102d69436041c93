//! Global resource manager: placement, migration, request changes and
//! recovery from node failure, all worked out on a [`ClusterView`].
//!
//! The view keeps the GRM's own registry of which instance runs where. Strict
//! reservations are derived from that registry rather than from node
//! reports, so a placement decided this tick is visible to the next decision
//! without waiting for a report round trip.

mod failure;
mod migration;
mod placement;
mod request;
pub mod tt;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    ContainerId, ContainerSpec, NodeId, NodeSpec, ResourceClaim, ResourceKind, SpecError,
};
use crate::node::NodeStatusReport;
use tt::{build_table, SlotTable, TtTask};

pub use failure::{handle_node_failure, retry_pending};
pub use migration::{handle_report, select_migration_candidates};
pub use placement::{filter_nodes, place, policy_score, score_nodes, ScoredNode};
pub use request::apply_request_change;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    SpreadResourceIntensive,
    BinPackBestEffort,
    StaticNodePriority,
    HeterogeneousFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringPolicy {
    pub kind: PolicyKind,
    pub weight: f64,
}

pub fn default_policies() -> Vec<ScoringPolicy> {
    [
        (PolicyKind::SpreadResourceIntensive, 0.4),
        (PolicyKind::BinPackBestEffort, 0.3),
        (PolicyKind::StaticNodePriority, 0.2),
        (PolicyKind::HeterogeneousFit, 0.1),
    ]
    .into_iter()
    .map(|(kind, weight)| ScoringPolicy { kind, weight })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AntiAffinity {
    /// Replicas go to distinct nodes when possible, else share.
    BestEffort,
    /// A replica that can not get a node of its own is rejected.
    Mandatory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MisconfigPolicy {
    ConfirmThrottle,
    Migrate,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrmConfig {
    pub policies: Vec<ScoringPolicy>,
    /// A node whose newest report is older than this many ticks is skipped.
    pub staleness_window: u64,
    /// Same margin the nodes use, to recover their overload threshold.
    pub overload_margin_levels: u32,
    /// Non-migratable containers at or above this criticality never move.
    pub criticality_ceiling: i32,
    pub anti_affinity: AntiAffinity,
    /// Reports in a row at the limit before a container counts as misconfigured.
    pub misconfig_dwell: u32,
    pub misconfig_policy: MisconfigPolicy,
}

impl Default for GrmConfig {
    fn default() -> Self {
        Self {
            policies: default_policies(),
            staleness_window: 5,
            overload_margin_levels: 1,
            criticality_ceiling: 0,
            anti_affinity: AntiAffinity::BestEffort,
            misconfig_dwell: 5,
            misconfig_policy: MisconfigPolicy::ConfirmThrottle,
        }
    }
}

impl GrmConfig {
    pub fn overload_threshold(&self, levels: u32) -> u32 {
        levels.saturating_sub(self.overload_margin_levels).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Place,
    Reject,
    Migrate,
    Redeploy,
    GrantRequestChange,
    DenyRequestChange,
    InstallTtTable,
    ConfirmThrottle,
    MarkLost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionReason {
    NoFeasibleNode,
    Overload,
    RequestChange,
    Misconfigured,
    NodeFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalAction {
    pub kind: ActionKind,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub container_id: Option<ContainerId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_node: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ActionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claims: Option<Vec<ResourceClaim>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<SlotTable>,
}

impl GlobalAction {
    pub fn new(kind: ActionKind, tick: u64) -> Self {
        Self {
            kind,
            tick,
            container_id: None,
            from_node: None,
            to_node: None,
            reason: None,
            claims: None,
            table: None,
        }
    }

    pub fn container(mut self, id: &str) -> Self {
        self.container_id = Some(id.to_string());
        self
    }

    pub fn from(mut self, node: &str) -> Self {
        self.from_node = Some(node.to_string());
        self
    }

    pub fn to(mut self, node: &str) -> Self {
        self.to_node = Some(node.to_string());
        self
    }

    pub fn reason(mut self, reason: ActionReason) -> Self {
        self.reason = Some(reason);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrmError {
    #[error("no feasible node")]
    EmptyFeasibleSet,
    #[error("unknown container `{0}`")]
    UnknownContainer(ContainerId),
    #[error("container `{0}` is not running")]
    NotRunning(ContainerId),
    #[error("container `{0}` is already registered")]
    DuplicateContainer(ContainerId),
    #[error("invalid container spec: {0:?}")]
    InvalidSpec(Vec<SpecError>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub spec: NodeSpec,
    pub report: Option<NodeStatusReport>,
    pub registered_tick: u64,
    pub failed: bool,
    /// Tick of the last migration decided because of this node's reports.
    pub last_action_tick: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Running(NodeId),
    Pending,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub spec: ContainerSpec,
    /// Id of the spec this instance was expanded from.
    pub group: ContainerId,
    pub tasks: u32,
    pub placement: Placement,
    pub qos_level: usize,
    /// Has been placed at least once, so a later placement is a redeploy.
    pub was_placed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub config: GrmConfig,
    pub nodes: BTreeMap<NodeId, NodeView>,
    pub registry: BTreeMap<ContainerId, RegistryEntry>,
    /// Instances waiting for a node, in arrival order.
    pub pending: Vec<ContainerId>,
    pub misconfig_streaks: BTreeMap<ContainerId, u32>,
    pub stale_reports: u64,
    /// Overload reports for which no migration could be found.
    pub unresolved_overloads: u64,
}

impl ClusterView {
    pub fn new(config: GrmConfig) -> Self {
        Self {
            config,
            nodes: BTreeMap::new(),
            registry: BTreeMap::new(),
            pending: Vec::new(),
            misconfig_streaks: BTreeMap::new(),
            stale_reports: 0,
            unresolved_overloads: 0,
        }
    }

    pub fn add_node(&mut self, spec: NodeSpec, tick: u64) {
        self.nodes.insert(
            spec.id.clone(),
            NodeView {
                spec,
                report: None,
                registered_tick: tick,
                failed: false,
                last_action_tick: None,
            },
        );
    }

    /// Not failed, and heard from within the staleness window.
    pub fn is_live(&self, node: &str, tick: u64) -> bool {
        self.nodes.get(node).is_some_and(|n| {
            let heard = n.report.as_ref().map_or(n.registered_tick, |r| r.tick);
            !n.failed && tick.saturating_sub(heard) <= self.config.staleness_window
        })
    }

    pub fn node_of(&self, container: &str) -> Option<&str> {
        match &self.registry.get(container)?.placement {
            Placement::Running(node) => Some(node),
            _ => None,
        }
    }

    /// Instances the registry places on `node`, in id order.
    pub fn residents<'a>(
        &'a self,
        node: &'a str,
    ) -> impl Iterator<Item = (&'a ContainerId, &'a RegistryEntry)> {
        self.registry
            .iter()
            .filter(move |(_, e)| matches!(&e.placement, Placement::Running(n) if n == node))
    }

    pub fn reserved(&self, node: &str, resource: ResourceKind, skip: Option<&str>) -> u32 {
        self.residents(node)
            .filter(|(id, _)| Some(id.as_str()) != skip)
            .map(|(_, e)| e.spec.reserved(resource))
            .sum()
    }

    /// Sum of requests, strict or loose.
    pub fn committed(&self, node: &str, resource: ResourceKind, skip: Option<&str>) -> u32 {
        self.residents(node)
            .filter(|(id, _)| Some(id.as_str()) != skip)
            .map(|(_, e)| e.spec.request(resource))
            .sum()
    }

    pub fn free_strict(&self, node: &str, resource: ResourceKind) -> u32 {
        self.nodes.get(node).map_or(0, |n| {
            n.spec
                .levels(resource)
                .saturating_sub(self.reserved(node, resource, None))
        })
    }

    pub fn tt_tasks(&self, node: &str, skip: Option<&str>) -> Vec<TtTask> {
        self.residents(node)
            .filter(|(id, _)| Some(id.as_str()) != skip)
            .filter_map(|(id, e)| {
                e.spec.tt_params.map(|params| TtTask {
                    container_id: id.clone(),
                    params,
                })
            })
            .collect()
    }

    /// Would `spec` fit on `node`, counting every resident except `skip`?
    pub fn fits(&self, node: &str, spec: &ContainerSpec, tick: u64, skip: Option<&str>) -> bool {
        let Some(view) = self.nodes.get(node) else {
            return false;
        };
        if !self.is_live(node, tick) {
            return false;
        }
        for claim in &spec.claims {
            let levels = view.spec.levels(claim.resource);
            if levels == 0 && claim.limit_levels > 0 {
                return false;
            }
            if claim.is_strict()
                && self.reserved(node, claim.resource, skip) + claim.request_levels > levels
            {
                return false;
            }
        }
        match spec.tt_params {
            None => true,
            Some(params) => {
                let new = TtTask {
                    container_id: spec.id.clone(),
                    params,
                };
                tt::admit_tt(&view.spec, &self.tt_tasks(node, skip), &new).is_ok()
            }
        }
    }

    pub fn register(
        &mut self,
        spec: ContainerSpec,
        group: &str,
        tasks: u32,
    ) -> Result<(), GrmError> {
        if self.registry.contains_key(&spec.id) {
            return Err(GrmError::DuplicateContainer(spec.id));
        }
        self.registry.insert(
            spec.id.clone(),
            RegistryEntry {
                spec,
                group: group.to_string(),
                tasks,
                placement: Placement::Pending,
                qos_level: 0,
                was_placed: false,
            },
        );
        Ok(())
    }

    fn assign(&mut self, container: &str, node: &str) {
        if let Some(entry) = self.registry.get_mut(container) {
            entry.placement = Placement::Running(node.to_string());
            entry.was_placed = true;
        }
        self.pending.retain(|id| id != container);
        self.misconfig_streaks.remove(container);
    }

    /// Table covering every TT instance now on `node`, as an install action.
    fn tt_install(&self, node: &str, tick: u64) -> Option<GlobalAction> {
        let view = self.nodes.get(node)?;
        let config = view.spec.tt_config.filter(|_| view.spec.supports_tt())?;
        let table = build_table(
            &self.tt_tasks(node, None),
            config.slot_length,
            config.hyperperiod,
        )
        .ok()?;
        let mut action = GlobalAction::new(ActionKind::InstallTtTable, tick).to(node);
        action.table = Some(table);
        Some(action)
    }

    /// Moves a running instance to `target`, returning the migrate action and
    /// any table rebuilds it causes.
    fn migrate(
        &mut self,
        container: &str,
        target: &str,
        reason: ActionReason,
        tick: u64,
    ) -> Vec<GlobalAction> {
        let source = self.node_of(container).map(str::to_string);
        self.assign(container, target);
        let mut action = GlobalAction::new(ActionKind::Migrate, tick)
            .container(container)
            .to(target)
            .reason(reason);
        action.from_node = source.clone();
        let mut actions = vec![action];
        if self.registry[container].spec.tt_params.is_some() {
            actions.extend(source.and_then(|s| self.tt_install(&s, tick)));
            actions.extend(self.tt_install(target, tick));
        }
        actions
    }
}

/// Score ordering key: scores equal to nine decimals tie, and ties go to
/// the smaller node id.
pub(crate) fn score_key(score: f64) -> i64 {
    (score * 1e9).round() as i64
}

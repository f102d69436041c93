//! Scenario documents: the JSON a user writes, and the validated
//! [`Scenario`] the engine runs.
//!
//! Claims are written per resource as `{"request": r, "limit": l}` in
//! levels; strictness is declared separately through an annotation
//! `"strictness.<resource>": "strict" | "loose"` (loose when absent).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::demand::DemandModel;
use crate::global::{
    default_policies, AntiAffinity, GrmConfig, MisconfigPolicy, PolicyKind, ScoringPolicy,
};
use crate::model::{
    validate_node, validate_spec, BandLadder, ContainerId, ContainerSpec, NodeId, NodeSpec,
    NodeSpecError, ResourceClaim, ResourceKind, SpecError, Strictness, TtParams,
};
use crate::monitor::MonitorConfig;
use crate::node::LocalConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsDoc {
    pub request: u32,
    pub limit: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderDoc {
    pub capacity: f64,
    pub levels: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtConfigDoc {
    pub slot_length: u64,
    pub hyperperiod: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    pub id: NodeId,
    pub resources: BTreeMap<ResourceKind, LadderDoc>,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default)]
    pub static_priority: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_triggered: Option<TtConfigDoc>,
}

fn one() -> u32 {
    1
}

fn full_scale() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerDoc {
    pub id: ContainerId,
    #[serde(default)]
    pub arrival: u64,
    #[serde(default = "one")]
    pub tasks: u32,
    pub resources: BTreeMap<ResourceKind, LevelsDoc>,
    #[serde(default)]
    pub annotations: BTreeMap<String, String>,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "full_scale")]
    pub qos_levels: Vec<f64>,
    #[serde(default)]
    pub migratable: bool,
    #[serde(default)]
    pub criticality: i32,
    #[serde(default = "one")]
    pub replicas: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tt: Option<TtParams>,
    #[serde(default)]
    pub demand: BTreeMap<ResourceKind, DemandModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventDoc {
    NodeFail {
        tick: u64,
        node: NodeId,
    },
    RequestChange {
        tick: u64,
        container: ContainerId,
        resources: BTreeMap<ResourceKind, LevelsDoc>,
        #[serde(default)]
        annotations: BTreeMap<String, String>,
    },
    DemandChange {
        tick: u64,
        container: ContainerId,
        resource: ResourceKind,
        demand: DemandModel,
    },
}

/// Engine-wide parameters. Every field has a default; a document may give
/// any subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub alpha: f64,
    pub hysteresis_fraction: f64,
    pub dwell: u32,
    pub grace: u64,
    pub overload_margin_levels: u32,
    pub overload_dwell: u32,
    pub staleness_window: u64,
    pub report_latency: u64,
    pub misconfig_dwell: u32,
    pub misconfig_policy: MisconfigPolicy,
    pub anti_affinity: AntiAffinity,
    /// Filled with the lower median of the containers' criticalities when
    /// not given.
    pub criticality_ceiling: Option<i32>,
}

impl Default for Defaults {
    fn default() -> Self {
        let local = LocalConfig::default();
        let grm = GrmConfig::default();
        Self {
            alpha: local.monitor.alpha,
            hysteresis_fraction: local.monitor.hysteresis_fraction,
            dwell: local.monitor.dwell,
            grace: local.grace,
            overload_margin_levels: local.overload_margin_levels,
            overload_dwell: local.overload_dwell,
            staleness_window: local.monitor.staleness_window,
            report_latency: 1,
            misconfig_dwell: grm.misconfig_dwell,
            misconfig_policy: grm.misconfig_policy,
            anti_affinity: grm.anti_affinity,
            criticality_ceiling: None,
        }
    }
}

impl Defaults {
    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            monitor: MonitorConfig {
                alpha: self.alpha,
                hysteresis_fraction: self.hysteresis_fraction,
                dwell: self.dwell,
                staleness_window: self.staleness_window,
            },
            grace: self.grace,
            overload_margin_levels: self.overload_margin_levels,
            overload_dwell: self.overload_dwell,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioDoc {
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    pub horizon: u64,
    #[serde(default)]
    pub defaults: Defaults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_weights: Option<BTreeMap<PolicyKind, f64>>,
    pub nodes: Vec<NodeDoc>,
    #[serde(default)]
    pub containers: Vec<ContainerDoc>,
    #[serde(default)]
    pub events: Vec<EventDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerPlan {
    pub spec: ContainerSpec,
    pub arrival: u64,
    pub tasks: u32,
    pub demand: BTreeMap<ResourceKind, DemandModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEvent {
    NodeFail {
        node: NodeId,
    },
    RequestChange {
        container: ContainerId,
        claims: Vec<ResourceClaim>,
    },
    DemandChange {
        container: ContainerId,
        resource: ResourceKind,
        demand: DemandModel,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedEvent {
    pub tick: u64,
    pub event: SimEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub horizon: u64,
    pub defaults: Defaults,
    pub policies: Vec<ScoringPolicy>,
    pub nodes: Vec<NodeSpec>,
    pub containers: Vec<ContainerPlan>,
    pub events: Vec<InjectedEvent>,
}

impl Scenario {
    pub fn grm_config(&self) -> GrmConfig {
        GrmConfig {
            policies: self.policies.clone(),
            staleness_window: self.defaults.staleness_window,
            overload_margin_levels: self.defaults.overload_margin_levels,
            criticality_ceiling: self.defaults.criticality_ceiling.unwrap_or(0),
            anti_affinity: self.defaults.anti_affinity,
            misconfig_dwell: self.defaults.misconfig_dwell,
            misconfig_policy: self.defaults.misconfig_policy,
        }
    }

    /// Checks the cross-reference invariants of an already-built scenario,
    /// e.g. after overriding its horizon.
    pub fn check(&self) -> Result<(), Vec<ValidationError>> {
        let doc = self.to_document();
        load_document(&doc).map(|_| ())
    }

    /// The document this scenario would be loaded from.
    pub fn to_document(&self) -> ScenarioDoc {
        ScenarioDoc {
            schema: SCHEMA_VERSION,
            seed: self.seed,
            horizon: self.horizon,
            defaults: self.defaults.clone(),
            policy_weights: Some(self.policies.iter().map(|p| (p.kind, p.weight)).collect()),
            nodes: self.nodes.iter().map(node_doc).collect(),
            containers: self.containers.iter().map(container_doc).collect(),
            events: self.events.iter().map(event_doc).collect(),
        }
    }
}

fn annotations_for(claims: &[ResourceClaim]) -> BTreeMap<String, String> {
    claims
        .iter()
        .filter(|c| c.is_strict())
        .map(|c| (format!("strictness.{}", c.resource), "strict".to_string()))
        .collect()
}

fn levels_for(claims: &[ResourceClaim]) -> BTreeMap<ResourceKind, LevelsDoc> {
    claims
        .iter()
        .map(|c| {
            (
                c.resource,
                LevelsDoc {
                    request: c.request_levels,
                    limit: c.limit_levels,
                },
            )
        })
        .collect()
}

fn node_doc(node: &NodeSpec) -> NodeDoc {
    NodeDoc {
        id: node.id.clone(),
        resources: node
            .ladders
            .iter()
            .map(|l| {
                (
                    l.resource,
                    LadderDoc {
                        capacity: l.capacity,
                        levels: l.levels,
                    },
                )
            })
            .collect(),
        tags: node.tags.clone(),
        static_priority: node.static_priority,
        time_triggered: node.tt_config.map(|c| TtConfigDoc {
            slot_length: c.slot_length,
            hyperperiod: c.hyperperiod,
        }),
    }
}

fn container_doc(plan: &ContainerPlan) -> ContainerDoc {
    let spec = &plan.spec;
    ContainerDoc {
        id: spec.id.clone(),
        arrival: plan.arrival,
        tasks: plan.tasks,
        resources: levels_for(&spec.claims),
        annotations: annotations_for(&spec.claims),
        adaptive: spec.adaptive,
        qos_levels: spec.qos_levels.clone(),
        migratable: spec.migratable,
        criticality: spec.criticality,
        replicas: spec.replicas,
        tt: spec.tt_params,
        demand: plan.demand.clone(),
    }
}

fn event_doc(event: &InjectedEvent) -> EventDoc {
    let tick = event.tick;
    match &event.event {
        SimEvent::NodeFail { node } => EventDoc::NodeFail {
            tick,
            node: node.clone(),
        },
        SimEvent::RequestChange { container, claims } => EventDoc::RequestChange {
            tick,
            container: container.clone(),
            resources: levels_for(claims),
            annotations: annotations_for(claims),
        },
        SimEvent::DemandChange {
            container,
            resource,
            demand,
        } => EventDoc::DemandChange {
            tick,
            container: container.clone(),
            resource: *resource,
            demand: demand.clone(),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Issue {
    #[error("unsupported schema version {0}, expected 1")]
    Schema(u32),
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("tick {tick} is not before the horizon {horizon}")]
    AfterHorizon { tick: u64, horizon: u64 },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown {what} `{id}`")]
    UnknownRef { what: &'static str, id: String },
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Node(#[from] NodeSpecError),
    #[error("annotation `{key}`: {reason}")]
    BadAnnotation { key: String, reason: String },
    #[error("demand for {resource}: {reason}")]
    BadDemand {
        resource: ResourceKind,
        reason: String,
    },
    #[error("{field}: {reason}")]
    BadParameter { field: &'static str, reason: String },
}

/// One validation failure and where in the document it was found.
#[derive(Debug, Clone, PartialEq, Error)]
pub struct ValidationError {
    pub location: String,
    pub issue: Issue,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.issue)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LoadError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{} validation error(s)", .0.len())]
    Invalid(Vec<ValidationError>),
}

pub fn parse_document(text: &str) -> Result<ScenarioDoc, LoadError> {
    serde_json::from_str(text).map_err(|e| LoadError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, LoadError> {
    load_document(&parse_document(text)?).map_err(LoadError::Invalid)
}

struct Collector(Vec<ValidationError>);

impl Collector {
    fn push(&mut self, location: impl Into<String>, issue: impl Into<Issue>) {
        self.0.push(ValidationError {
            location: location.into(),
            issue: issue.into(),
        });
    }
}

fn build_claims(
    errors: &mut Collector,
    location: &str,
    resources: &BTreeMap<ResourceKind, LevelsDoc>,
    annotations: &BTreeMap<String, String>,
) -> Vec<ResourceClaim> {
    let mut strictness: BTreeMap<ResourceKind, Strictness> = BTreeMap::new();
    for (key, value) in annotations {
        let Some(name) = key.strip_prefix("strictness.") else {
            continue;
        };
        let bad = |reason: String| Issue::BadAnnotation {
            key: key.clone(),
            reason,
        };
        let resource = match name.parse::<ResourceKind>() {
            Ok(r) if resources.contains_key(&r) => r,
            Ok(_) => {
                errors.push(location, bad("resource is not claimed".into()));
                continue;
            }
            Err(e) => {
                errors.push(location, bad(e.to_string()));
                continue;
            }
        };
        let s = match value.as_str() {
            "strict" => Strictness::Strict,
            "loose" => Strictness::Loose,
            other => {
                errors.push(
                    location,
                    bad(format!("expected `strict` or `loose`, got `{other}`")),
                );
                continue;
            }
        };
        strictness.insert(resource, s);
    }
    resources
        .iter()
        .map(|(&resource, levels)| ResourceClaim {
            resource,
            request_levels: levels.request,
            limit_levels: levels.limit,
            strictness: strictness
                .get(&resource)
                .copied()
                .unwrap_or(Strictness::Loose),
        })
        .collect()
}

fn check_defaults(errors: &mut Collector, d: &Defaults) {
    let mut bad = |field: &'static str, reason: &str| {
        errors.push(
            "defaults",
            Issue::BadParameter {
                field,
                reason: reason.to_string(),
            },
        )
    };
    if !(d.alpha > 0.0 && d.alpha <= 1.0) {
        bad("alpha", "must be in (0, 1]");
    }
    if !(d.hysteresis_fraction >= 0.0 && d.hysteresis_fraction < 0.5) {
        bad("hysteresis_fraction", "must be in [0, 0.5)");
    }
    if d.dwell == 0 {
        bad("dwell", "must be at least 1");
    }
    if d.overload_dwell == 0 {
        bad("overload_dwell", "must be at least 1");
    }
    if d.misconfig_dwell == 0 {
        bad("misconfig_dwell", "must be at least 1");
    }
}

/// Lower median, so that with an even count the more permissive choice
/// (fewer containers pinned) is made.
fn lower_median(mut values: Vec<i32>) -> i32 {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

fn instance_ids(spec: &ContainerSpec) -> Vec<String> {
    if spec.replicas <= 1 {
        vec![spec.id.clone()]
    } else {
        (0..spec.replicas)
            .map(|i| format!("{}#{i}", spec.id))
            .collect()
    }
}

pub fn load_document(doc: &ScenarioDoc) -> Result<Scenario, Vec<ValidationError>> {
    let mut errors = Collector(Vec::new());
    if doc.schema != SCHEMA_VERSION {
        errors.push("schema", Issue::Schema(doc.schema));
    }
    if doc.horizon == 0 {
        errors.push("horizon", Issue::ZeroHorizon);
    }
    check_defaults(&mut errors, &doc.defaults);
    let after_horizon = |tick: u64| Issue::AfterHorizon {
        tick,
        horizon: doc.horizon,
    };

    let policies = match &doc.policy_weights {
        None => default_policies(),
        Some(weights) => {
            for (kind, &w) in weights {
                if !(w.is_finite() && w >= 0.0) {
                    errors.push(
                        format!(
                            "policy_weights.{}",
                            serde_json::to_string(kind).unwrap_or_default()
                        ),
                        Issue::BadParameter {
                            field: "weight",
                            reason: format!("must be finite and non-negative, got {w}"),
                        },
                    );
                }
            }
            weights
                .iter()
                .map(|(&kind, &weight)| ScoringPolicy { kind, weight })
                .collect()
        }
    };

    let mut node_ids = BTreeSet::new();
    let mut nodes = Vec::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        let location = format!("nodes[{i}] ({})", n.id);
        if !node_ids.insert(n.id.clone()) {
            errors.push(&location, Issue::DuplicateId(n.id.clone()));
        }
        let ladders = n
            .resources
            .iter()
            .map(|(&r, l)| BandLadder::new(r, l.capacity, l.levels))
            .collect();
        let mut spec = NodeSpec::new(n.id.clone(), ladders);
        spec.tags = n.tags.clone();
        spec.static_priority = n.static_priority;
        if let Some(tt) = n.time_triggered {
            spec = spec.with_time_triggered(tt.slot_length, tt.hyperperiod);
        }
        match validate_node(&spec) {
            Ok(spec) => nodes.push(spec),
            Err(es) => es.into_iter().for_each(|e| errors.push(&location, e)),
        }
    }

    let mut container_ids = BTreeSet::new();
    let mut instance_set = BTreeSet::new();
    let mut containers = Vec::new();
    for (i, c) in doc.containers.iter().enumerate() {
        let location = format!("containers[{i}] ({})", c.id);
        if !container_ids.insert(c.id.clone()) {
            errors.push(&location, Issue::DuplicateId(c.id.clone()));
        }
        if c.arrival >= doc.horizon {
            errors.push(&location, after_horizon(c.arrival));
        }
        let claims = build_claims(&mut errors, &location, &c.resources, &c.annotations);
        let mut spec = ContainerSpec::new(c.id.clone(), claims);
        spec.adaptive = c.adaptive;
        spec.qos_levels = c.qos_levels.clone();
        spec.migratable = c.migratable;
        spec.criticality = c.criticality;
        spec.replicas = c.replicas;
        spec.tt_params = c.tt;
        for (&resource, model) in &c.demand {
            if !c.resources.contains_key(&resource) {
                errors.push(
                    &location,
                    Issue::BadDemand {
                        resource,
                        reason: "resource is not claimed".into(),
                    },
                );
            }
            if let Err(reason) = model.validate() {
                errors.push(&location, Issue::BadDemand { resource, reason });
            }
        }
        if c.tasks == 0 {
            errors.push(
                &location,
                Issue::BadParameter {
                    field: "tasks",
                    reason: "must be at least 1".into(),
                },
            );
        }
        match validate_spec(&spec) {
            Ok(spec) => {
                instance_set.extend(instance_ids(&spec));
                containers.push(ContainerPlan {
                    spec,
                    arrival: c.arrival,
                    tasks: c.tasks,
                    demand: c.demand.clone(),
                });
            }
            Err(es) => es.into_iter().for_each(|e| errors.push(&location, e)),
        }
    }

    let mut events = Vec::new();
    for (i, e) in doc.events.iter().enumerate() {
        let location = format!("events[{i}]");
        let (tick, event) = match e {
            EventDoc::NodeFail { tick, node } => {
                if !node_ids.contains(node) {
                    errors.push(
                        &location,
                        Issue::UnknownRef {
                            what: "node",
                            id: node.clone(),
                        },
                    );
                }
                (*tick, SimEvent::NodeFail { node: node.clone() })
            }
            EventDoc::RequestChange {
                tick,
                container,
                resources,
                annotations,
            } => {
                if !instance_set.contains(container) {
                    errors.push(
                        &location,
                        Issue::UnknownRef {
                            what: "container instance",
                            id: container.clone(),
                        },
                    );
                }
                let claims = build_claims(&mut errors, &location, resources, annotations);
                let mut probe = ContainerSpec::new(container.clone(), claims.clone());
                probe.qos_levels = vec![1.0];
                if let Err(es) = validate_spec(&probe) {
                    es.into_iter().for_each(|e| errors.push(&location, e));
                }
                (
                    *tick,
                    SimEvent::RequestChange {
                        container: container.clone(),
                        claims,
                    },
                )
            }
            EventDoc::DemandChange {
                tick,
                container,
                resource,
                demand,
            } => {
                match doc.containers.iter().find(|c| &c.id == container) {
                    None => errors.push(
                        &location,
                        Issue::UnknownRef {
                            what: "container",
                            id: container.clone(),
                        },
                    ),
                    Some(c) if !c.resources.contains_key(resource) => errors.push(
                        &location,
                        Issue::BadDemand {
                            resource: *resource,
                            reason: "resource is not claimed".into(),
                        },
                    ),
                    Some(_) => {}
                }
                if let Err(reason) = demand.validate() {
                    errors.push(
                        &location,
                        Issue::BadDemand {
                            resource: *resource,
                            reason,
                        },
                    );
                }
                (
                    *tick,
                    SimEvent::DemandChange {
                        container: container.clone(),
                        resource: *resource,
                        demand: demand.clone(),
                    },
                )
            }
        };
        if tick >= doc.horizon {
            errors.push(&location, after_horizon(tick));
        }
        events.push(InjectedEvent { tick, event });
    }
    events.sort_by_key(|e| e.tick);

    if !errors.0.is_empty() {
        return Err(errors.0);
    }
    let mut defaults = doc.defaults.clone();
    if defaults.criticality_ceiling.is_none() {
        defaults.criticality_ceiling = Some(lower_median(
            containers.iter().map(|c| c.spec.criticality).collect(),
        ));
    }
    Ok(Scenario {
        seed: doc.seed,
        horizon: doc.horizon,
        defaults,
        policies,
        nodes,
        containers,
        events,
    })
}

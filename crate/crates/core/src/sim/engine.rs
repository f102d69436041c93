//! The tick loop.
//!
//! Each tick runs the same phases in the same order:
//!
//! 1. `tick`, then any time-triggered table that takes over this tick;
//! 2. per node: demand is arbitrated and delivered (`usage`), monitors are
//!    fed (`band_change`), overload latches move (`overload`), the local
//!    ladder runs (`enforcement`) and a status `report` is produced;
//! 3. the GRM reads failure notices, the reports due this tick, scripted
//!    request changes, arrivals and its own pending queue (`action`);
//! 4. the sim applies the GRM's actions and scripted faults and demand
//!    changes, all of which take effect from the next tick.
//!
//! Node work in phase 2 is independent per node and may run in parallel;
//! the events are merged back in node id order either way.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::demand::DemandCursor;
use super::scenario::{Scenario, SimEvent};
use crate::global::{
    apply_request_change, handle_node_failure, handle_report, place, retry_pending, ActionKind,
    ClusterView, GlobalAction,
};
use crate::model::{ContainerId, NodeId, ResourceKind, Strictness, EPSILON};
use crate::monitor::UsageSample;
use crate::node::{
    arbitrate, BandChange, DemandRequest, EnforcementAction, NodeRuntimeState, NodeStatusReport,
    OverloadChange,
};
use crate::trace::{Event, EventBody, Summary, UsageEntry, GRM_SOURCE, SIM_SOURCE};

/// Slack for comparing delivered amounts, which are sums of divisions.
const DELIVERY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run the per-node phase on the rayon pool.
    pub parallel: bool,
}

#[derive(Debug, Clone, PartialEq)]
struct Violation {
    container_id: Option<ContainerId>,
    resource: ResourceKind,
    message: String,
}

#[derive(Debug, Clone, PartialEq)]
struct NodeTick {
    usage: Vec<UsageEntry>,
    violations: Vec<Violation>,
    bands: Vec<BandChange>,
    overload: Vec<OverloadChange>,
    enforcement: Vec<EnforcementAction>,
    report: NodeStatusReport,
}

#[derive(Debug, Clone)]
pub struct World {
    pub scenario: Scenario,
    pub tick: u64,
    /// Nodes still running. A failed node is dropped from here.
    pub nodes: BTreeMap<NodeId, NodeRuntimeState>,
    pub failed: BTreeSet<NodeId>,
    pub grm: ClusterView,
    cursors: BTreeMap<(ContainerId, ResourceKind), DemandCursor>,
    in_flight: Vec<(u64, NodeStatusReport)>,
    failure_notices: Vec<(u64, NodeId)>,
    pub violations: u64,
    options: RunOptions,
}

impl World {
    pub fn new(scenario: Scenario, options: RunOptions) -> Self {
        let local = scenario.defaults.local_config();
        let nodes = scenario
            .nodes
            .iter()
            .map(|n| (n.id.clone(), NodeRuntimeState::new(n.clone(), local)))
            .collect();
        let mut grm = ClusterView::new(scenario.grm_config());
        for n in &scenario.nodes {
            grm.add_node(n.clone(), 0);
        }
        let cursors = scenario
            .containers
            .iter()
            .flat_map(|c| {
                c.demand.iter().map(|(&r, model)| {
                    (
                        (c.spec.id.clone(), r),
                        DemandCursor::new(model.clone(), format!("{}/{r}", c.spec.id)),
                    )
                })
            })
            .collect();
        Self {
            scenario,
            tick: 0,
            nodes,
            failed: BTreeSet::new(),
            grm,
            cursors,
            in_flight: Vec::new(),
            failure_notices: Vec::new(),
            violations: 0,
            options,
        }
    }

    pub fn is_done(&self) -> bool {
        self.tick >= self.scenario.horizon
    }

    /// The scenario record that opens every trace.
    pub fn header(&self) -> Event {
        Event::new(
            0,
            SIM_SOURCE,
            EventBody::Scenario {
                seed: self.scenario.seed,
                horizon: self.scenario.horizon,
                defaults: self.scenario.defaults.clone(),
                nodes: self.scenario.nodes.clone(),
            },
        )
    }

    /// Raw demand of every resident instance this tick, before qos scaling.
    fn demand_table(&mut self) -> BTreeMap<ContainerId, BTreeMap<ResourceKind, f64>> {
        let seed = self.scenario.seed;
        let tick = self.tick;
        let mut table = BTreeMap::new();
        for node in self.nodes.values() {
            for id in node.residents.keys() {
                let group = self
                    .grm
                    .registry
                    .get(id)
                    .map_or(id.as_str(), |e| e.group.as_str());
                let mut per_resource = BTreeMap::new();
                for ((c, r), cursor) in self
                    .cursors
                    .range_mut((group.to_string(), ResourceKind::CpuTime)..)
                {
                    if c != group {
                        break;
                    }
                    per_resource.insert(*r, cursor.value_at(seed, tick));
                }
                table.insert(id.clone(), per_resource);
            }
        }
        table
    }

    /// Advances one tick and returns its events.
    pub fn step(&mut self) -> Vec<Event> {
        let t = self.tick;
        let mut events = vec![Event::new(t, SIM_SOURCE, EventBody::Tick {})];
        for (id, node) in &mut self.nodes {
            if let Some(table) = node.advance_tt(t) {
                events.push(Event::new(
                    t,
                    id.clone(),
                    EventBody::TtActivate {
                        node_id: id.clone(),
                        slots: table.slots.len(),
                    },
                ));
            }
        }

        let demand = self.demand_table();
        let outputs: Vec<(NodeId, NodeTick)> = if self.options.parallel {
            self.nodes
                .par_iter_mut()
                .map(|(id, node)| (id.clone(), node_phase(node, t, &demand)))
                .collect()
        } else {
            self.nodes
                .iter_mut()
                .map(|(id, node)| (id.clone(), node_phase(node, t, &demand)))
                .collect()
        };
        self.emit_node_phases(t, outputs, &mut events);

        let actions = self.grm_phase(t, &mut events);
        self.sim_phase(t, actions, &mut events);
        self.tick += 1;
        events
    }

    fn emit_node_phases(
        &mut self,
        t: u64,
        outputs: Vec<(NodeId, NodeTick)>,
        events: &mut Vec<Event>,
    ) {
        for (id, out) in &outputs {
            if !out.usage.is_empty() {
                events.push(Event::new(
                    t,
                    id.clone(),
                    EventBody::Usage {
                        entries: out.usage.clone(),
                    },
                ));
            }
            for v in &out.violations {
                self.violations += 1;
                events.push(Event::new(
                    t,
                    id.clone(),
                    EventBody::InvariantViolation {
                        node_id: id.clone(),
                        container_id: v.container_id.clone(),
                        resource: v.resource,
                        message: v.message.clone(),
                    },
                ));
            }
        }
        for (id, out) in &outputs {
            events.extend(
                out.bands
                    .iter()
                    .map(|b| Event::new(t, id.clone(), EventBody::BandChange(b.clone()))),
            );
        }
        for (id, out) in &outputs {
            events.extend(
                out.overload
                    .iter()
                    .map(|o| Event::new(t, id.clone(), EventBody::Overload(o.clone()))),
            );
        }
        for (id, out) in &outputs {
            events.extend(
                out.enforcement
                    .iter()
                    .map(|a| Event::new(t, id.clone(), EventBody::Enforcement(a.clone()))),
            );
        }
        let latency = self.scenario.defaults.report_latency;
        for (id, out) in outputs {
            events.push(Event::new(t, id, EventBody::Report(out.report.clone())));
            self.in_flight.push((t + latency, out.report));
        }
    }

    fn grm_phase(&mut self, t: u64, events: &mut Vec<Event>) -> Vec<GlobalAction> {
        let mut all = Vec::new();
        let mut actions = Vec::new();
        // Emits the actions decided so far, keeping them for the sim phase.
        let mut flush = |events: &mut Vec<Event>, actions: &mut Vec<GlobalAction>| {
            events.extend(actions_to_events(t, actions.clone()));
            all.append(actions);
        };

        let (due, later): (Vec<_>, Vec<_>) =
            self.failure_notices.drain(..).partition(|(at, _)| *at <= t);
        self.failure_notices = later;
        for (_, node) in due {
            actions.extend(handle_node_failure(&mut self.grm, &node, t));
        }

        let (mut due, later): (Vec<_>, Vec<_>) =
            self.in_flight.drain(..).partition(|(at, _)| *at <= t);
        self.in_flight = later;
        due.sort_by(|a, b| (a.1.tick, &a.1.node_id).cmp(&(b.1.tick, &b.1.node_id)));
        for (_, report) in due {
            let unresolved = self.grm.unresolved_overloads;
            actions.extend(handle_report(&mut self.grm, &report, t));
            if self.grm.unresolved_overloads > unresolved {
                flush(events, &mut actions);
                events.push(Event::new(
                    t,
                    GRM_SOURCE,
                    EventBody::UnresolvedOverload {
                        node_id: report.node_id.clone(),
                    },
                ));
            }
        }

        let changes: Vec<(ContainerId, Vec<_>)> = self
            .scenario
            .events
            .iter()
            .filter(|e| e.tick == t)
            .filter_map(|e| match &e.event {
                SimEvent::RequestChange { container, claims } => {
                    Some((container.clone(), claims.clone()))
                }
                _ => None,
            })
            .collect();
        for (container, claims) in changes {
            flush(events, &mut actions);
            events.push(Event::new(
                t,
                SIM_SOURCE,
                EventBody::RequestChange {
                    container_id: container.clone(),
                    claims: claims.clone(),
                },
            ));
            match apply_request_change(&mut self.grm, &container, claims.clone(), t) {
                Ok(answer) => actions.extend(answer),
                Err(e) => {
                    log::warn!("request change for {container} at tick {t}: {e}");
                    let mut deny =
                        GlobalAction::new(ActionKind::DenyRequestChange, t).container(&container);
                    deny.claims = Some(claims);
                    actions.push(deny);
                }
            }
        }

        let arrivals: Vec<_> = self
            .scenario
            .containers
            .iter()
            .filter(|c| c.arrival == t)
            .cloned()
            .collect();
        for plan in arrivals {
            flush(events, &mut actions);
            events.push(Event::new(
                t,
                SIM_SOURCE,
                EventBody::Arrival {
                    container_id: plan.spec.id.clone(),
                },
            ));
            match place(&mut self.grm, &plan.spec, plan.tasks, t) {
                Ok(placed) => actions.extend(placed),
                Err(e) => log::error!("placing {} at tick {t}: {e}", plan.spec.id),
            }
        }

        actions.extend(retry_pending(&mut self.grm, t));
        flush(events, &mut actions);
        all
    }

    fn sim_phase(&mut self, t: u64, actions: Vec<GlobalAction>, events: &mut Vec<Event>) {
        for action in actions {
            if let Err(message) = self.apply(&action, t, events) {
                self.violations += 1;
                let node_id = action
                    .to_node
                    .clone()
                    .or(action.from_node.clone())
                    .unwrap_or_default();
                events.push(Event::new(
                    t,
                    SIM_SOURCE,
                    EventBody::InvariantViolation {
                        node_id,
                        container_id: action.container_id.clone(),
                        resource: ResourceKind::CpuTime,
                        message,
                    },
                ));
            }
        }
        let scripted: Vec<SimEvent> = self
            .scenario
            .events
            .iter()
            .filter(|e| e.tick == t)
            .map(|e| e.event.clone())
            .collect();
        for event in scripted {
            match event {
                SimEvent::NodeFail { node } => {
                    if self.nodes.remove(&node).is_some() {
                        self.failed.insert(node.clone());
                        self.failure_notices
                            .push((t + self.scenario.defaults.report_latency, node.clone()));
                        events.push(Event::new(
                            t,
                            SIM_SOURCE,
                            EventBody::NodeFail { node_id: node },
                        ));
                    }
                }
                SimEvent::DemandChange {
                    container,
                    resource,
                    demand,
                } => {
                    self.cursors.insert(
                        (container.clone(), resource),
                        DemandCursor::new(demand.clone(), format!("{container}/{resource}")),
                    );
                    events.push(Event::new(
                        t,
                        SIM_SOURCE,
                        EventBody::DemandChange {
                            container_id: container,
                            resource,
                            demand,
                        },
                    ));
                }
                SimEvent::RequestChange { .. } => {}
            }
        }
    }

    /// Carries out one GRM action on the node states. Actions aimed at a
    /// node that has failed but whose failure the GRM has not heard of yet
    /// are dropped; the GRM re-homes those instances once it learns.
    fn apply(
        &mut self,
        action: &GlobalAction,
        t: u64,
        events: &mut Vec<Event>,
    ) -> Result<(), String> {
        let id = action.container_id.as_deref().unwrap_or_default();
        match action.kind {
            ActionKind::Place | ActionKind::Redeploy | ActionKind::Migrate => {
                if action.kind == ActionKind::Migrate {
                    if let Some(from) = action
                        .from_node
                        .as_deref()
                        .and_then(|n| self.nodes.get_mut(n))
                    {
                        from.remove(id, t);
                    }
                }
                let to = action.to_node.as_deref().unwrap_or_default();
                let Some(node) = self.nodes.get_mut(to) else {
                    return Ok(());
                };
                let entry = self
                    .grm
                    .registry
                    .get(id)
                    .ok_or_else(|| format!("action for unregistered container `{id}`"))?;
                node.admit(entry.spec.clone(), entry.tasks, t)
                    .map_err(|e| e.to_string())
            }
            ActionKind::GrantRequestChange => {
                let to = action.to_node.as_deref().unwrap_or_default();
                let Some(node) = self.nodes.get_mut(to) else {
                    return Ok(());
                };
                let claims = action.claims.clone().unwrap_or_default();
                node.update_claims(id, claims).map_err(|e| e.to_string())
            }
            ActionKind::InstallTtTable => {
                let to = action.to_node.as_deref().unwrap_or_default();
                let (Some(node), Some(table)) = (self.nodes.get_mut(to), action.table.clone())
                else {
                    return Ok(());
                };
                let slots = table.slots.len();
                let at = node
                    .install_tt_table(table, t + 1)
                    .map_err(|e| e.to_string())?;
                if at == t + 1 {
                    events.push(Event::new(
                        t,
                        to.to_string(),
                        EventBody::TtActivate {
                            node_id: to.to_string(),
                            slots,
                        },
                    ));
                }
                Ok(())
            }
            ActionKind::Reject
            | ActionKind::DenyRequestChange
            | ActionKind::ConfirmThrottle
            | ActionKind::MarkLost => Ok(()),
        }
    }

    pub fn summary(&self, events: u64) -> Event {
        Event::new(
            self.scenario.horizon,
            SIM_SOURCE,
            EventBody::Summary(Summary {
                horizon: self.scenario.horizon,
                events,
                invariant_violations: self.violations,
            }),
        )
    }
}

fn actions_to_events(t: u64, actions: Vec<GlobalAction>) -> impl Iterator<Item = Event> {
    actions
        .into_iter()
        .map(move |a| Event::new(t, GRM_SOURCE, EventBody::Action(a)))
}

/// Arbitration, monitoring, overload detection, enforcement and reporting
/// for one node, plus the engine's own conservation and isolation checks.
fn node_phase(
    node: &mut NodeRuntimeState,
    t: u64,
    demand: &BTreeMap<ContainerId, BTreeMap<ResourceKind, f64>>,
) -> NodeTick {
    let mut usage = Vec::new();
    let mut samples = Vec::new();
    let mut violations = Vec::new();
    let ladders = node.node.ladders.clone();
    for ladder in &ladders {
        let r = ladder.resource;
        let claimants: Vec<_> = node
            .residents
            .iter()
            .filter_map(|(id, res)| res.spec.claim(r).map(|c| (id, res, c)))
            .collect();
        let requests: Vec<DemandRequest> = claimants
            .iter()
            .map(|(id, res, claim)| {
                let raw = demand
                    .get(*id)
                    .and_then(|d| d.get(&r))
                    .copied()
                    .unwrap_or(0.0);
                DemandRequest {
                    container_id: (*id).clone(),
                    strictness: claim.strictness,
                    request_levels: claim.request_levels,
                    cap_levels: node.cap_levels(id, r),
                    demand: raw * res.spec.qos_scale(res.qos_level),
                }
            })
            .collect();
        let grants = arbitrate(ladder, &requests);

        let strict_levels: u32 = requests
            .iter()
            .filter(|q| q.strictness == Strictness::Strict)
            .map(|q| q.request_levels)
            .sum();
        if strict_levels > ladder.levels {
            violations.push(Violation {
                container_id: None,
                resource: r,
                message: format!(
                    "strict reservations {strict_levels} exceed {} levels",
                    ladder.levels
                ),
            });
        }
        let delivered: f64 = grants.iter().map(|g| g.delivered).sum();
        if delivered > ladder.capacity + DELIVERY_TOLERANCE {
            violations.push(Violation {
                container_id: None,
                resource: r,
                message: format!("delivered {delivered} exceeds capacity {}", ladder.capacity),
            });
        }

        for (((id, res, _), request), grant) in claimants.iter().zip(&requests).zip(&grants) {
            if request.strictness == Strictness::Strict {
                let owed = request.demand.min(ladder.amount_of(request.request_levels));
                if grant.granted_levels < request.request_levels
                    || grant.delivered + DELIVERY_TOLERANCE < owed
                {
                    violations.push(Violation {
                        container_id: Some((*id).clone()),
                        resource: r,
                        message: format!(
                            "strict claim got {} levels / {} units, owed {} levels / {owed} units",
                            grant.granted_levels, grant.delivered, request.request_levels
                        ),
                    });
                }
            }
            let tasks = res.tasks.max(1);
            for task in 0..tasks {
                samples.push(UsageSample {
                    tick: t,
                    container_id: (*id).clone(),
                    task_id: task,
                    resource: r,
                    value: (grant.delivered / f64::from(tasks)).max(0.0),
                });
            }
            usage.push(UsageEntry {
                container_id: (*id).clone(),
                resource: r,
                strictness: request.strictness,
                request_levels: request.request_levels,
                granted_levels: grant.granted_levels,
                demand: request.demand,
                delivered: grant.delivered,
                qos_level: res.qos_level,
            });
        }
    }
    debug_assert!(samples.iter().all(|s| s.value >= -EPSILON));

    let bands = match node.ingest_tick(&samples, t) {
        Ok(bands) => bands,
        Err(e) => {
            violations.push(Violation {
                container_id: None,
                resource: ResourceKind::CpuTime,
                message: format!("monitor rejected samples: {e}"),
            });
            Vec::new()
        }
    };
    let overload = node.detect_overload(t);
    let enforcement = node.enforce(t);
    let report = node.build_status_report(t);
    NodeTick {
        usage,
        violations,
        bands,
        overload,
        enforcement,
        report,
    }
}

pub fn run(scenario: &Scenario) -> Vec<Event> {
    run_with(scenario, RunOptions::default())
}

/// Runs `scenario` to its horizon. The trace opens with the scenario record
/// and ends with a summary.
pub fn run_with(scenario: &Scenario, options: RunOptions) -> Vec<Event> {
    let mut world = World::new(scenario.clone(), options);
    let mut events = vec![world.header()];
    while !world.is_done() {
        events.extend(world.step());
    }
    let count = events.len() as u64;
    events.push(world.summary(count));
    events
}

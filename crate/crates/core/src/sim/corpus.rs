//! Ready-made scenarios: a randomized overload family and a few scripted
//! situations (escalation, overbooking, failure, request change).

use std::collections::BTreeMap;

use rand::Rng;

use super::demand::DemandModel;
use super::rng::subject_rng;
use super::scenario::{
    load_document, ContainerDoc, Defaults, EventDoc, LadderDoc, LevelsDoc, NodeDoc, Scenario,
    ScenarioDoc, SCHEMA_VERSION,
};
use crate::model::ResourceKind;

const MB: ResourceKind = ResourceKind::MemoryBandwidth;
const CPU: ResourceKind = ResourceKind::CpuTime;

fn node(id: &str, bandwidth: f64, static_priority: f64) -> NodeDoc {
    NodeDoc {
        id: id.to_string(),
        resources: BTreeMap::from([
            (
                MB,
                LadderDoc {
                    capacity: bandwidth,
                    levels: 8,
                },
            ),
            (
                CPU,
                LadderDoc {
                    capacity: 4.0,
                    levels: 4,
                },
            ),
        ]),
        tags: Default::default(),
        static_priority,
        time_triggered: None,
    }
}

fn container(
    id: &str,
    request: u32,
    limit: u32,
    strict: bool,
    demand: DemandModel,
) -> ContainerDoc {
    let mut annotations = BTreeMap::new();
    if strict {
        annotations.insert(
            "strictness.memory_bandwidth".to_string(),
            "strict".to_string(),
        );
    }
    ContainerDoc {
        id: id.to_string(),
        arrival: 0,
        tasks: 1,
        resources: BTreeMap::from([(MB, LevelsDoc { request, limit })]),
        annotations,
        adaptive: false,
        qos_levels: vec![1.0],
        migratable: false,
        criticality: 0,
        replicas: 1,
        tt: None,
        demand: BTreeMap::from([(MB, demand)]),
    }
}

fn rt(id: &str, levels: u32, demand: DemandModel) -> ContainerDoc {
    let mut c = container(id, levels, levels, true, demand);
    c.criticality = 10;
    c
}

fn document(
    seed: u64,
    horizon: u64,
    nodes: Vec<NodeDoc>,
    containers: Vec<ContainerDoc>,
) -> ScenarioDoc {
    ScenarioDoc {
        schema: SCHEMA_VERSION,
        seed,
        horizon,
        defaults: Defaults::default(),
        policy_weights: None,
        nodes,
        containers,
        events: Vec::new(),
    }
}

fn build(doc: ScenarioDoc) -> Scenario {
    load_document(&doc).unwrap_or_else(|errors| panic!("corpus scenario is invalid: {errors:?}"))
}

fn constant(value: f64) -> DemandModel {
    DemandModel::Constant { value }
}

/// A randomized cluster whose best-effort demand is meant to outgrow node
/// capacity: 2 to 5 nodes, 4 to 12 containers, 300 ticks, sometimes a node
/// failure or a request change. The same `seed` always builds the same
/// scenario.
pub fn random_overload(seed: u64) -> Scenario {
    let mut rng = subject_rng(seed, 0, "corpus");
    let horizon = 300;
    let nodes: Vec<NodeDoc> = (0..rng.random_range(2..=5))
        .map(|i| {
            let bandwidth = 400.0 * f64::from(rng.random_range(1..=2u32));
            node(
                &format!("n{i}"),
                bandwidth,
                f64::from(rng.random_range(0..3u32)),
            )
        })
        .collect();
    let count = rng.random_range(4..=12);
    let mut containers = Vec::new();
    for i in 0..count {
        let arrival = rng.random_range(0..horizon / 4);
        let mut c = if rng.random_bool(0.3) {
            let levels = rng.random_range(1..=2);
            let peak = 50.0 * f64::from(levels) * rng.random_range(0.5..1.3);
            let demand = if rng.random_bool(0.5) {
                constant(peak)
            } else {
                DemandModel::Periodic {
                    low: peak / 2.0,
                    high: peak,
                    period: rng.random_range(5..40),
                    high_ticks: rng.random_range(1..5),
                    phase: rng.random_range(0..5),
                }
            };
            let mut c = rt(&format!("rt{i}"), levels, demand);
            c.criticality = rng.random_range(5..=10);
            c
        } else {
            let request = rng.random_range(0..=1);
            let limit = (request + rng.random_range(2..=6)).min(8);
            let high = rng.random_range(100.0..320.0);
            let demand = match rng.random_range(0..3) {
                0 => DemandModel::Periodic {
                    low: high / 4.0,
                    high,
                    period: rng.random_range(10..60),
                    high_ticks: rng.random_range(5..10),
                    phase: rng.random_range(0..10),
                },
                1 => DemandModel::RandomWalk {
                    start: high / 2.0,
                    step: rng.random_range(5.0..40.0),
                    min: 0.0,
                    max: high,
                },
                _ => DemandModel::Step {
                    before: high / 5.0,
                    after: high,
                    at: rng.random_range(arrival..horizon / 2),
                },
            };
            let mut c = container(&format!("be{i}"), request, limit, false, demand);
            c.criticality = rng.random_range(0..5);
            c.migratable = rng.random_bool(0.6);
            if rng.random_bool(0.5) {
                c.adaptive = true;
                c.qos_levels = vec![1.0, 0.7, 0.4];
            }
            if rng.random_bool(0.2) {
                c.replicas = 2;
            }
            c
        };
        c.arrival = arrival;
        c.tasks = rng.random_range(1..=3);
        containers.push(c);
    }
    let mut doc = document(seed, horizon, nodes, containers);
    if rng.random_bool(0.3) {
        let victim = rng.random_range(0..doc.nodes.len());
        doc.events.push(EventDoc::NodeFail {
            tick: horizon / 2,
            node: doc.nodes[victim].id.clone(),
        });
    }
    if let Some(c) = doc
        .containers
        .iter()
        .find(|c| c.id.starts_with("rt") && c.replicas == 1)
    {
        if rng.random_bool(0.3) {
            let levels = c.resources[&MB].request + 1;
            doc.events.push(EventDoc::RequestChange {
                tick: horizon / 3,
                container: c.id.clone(),
                resources: BTreeMap::from([(
                    MB,
                    LevelsDoc {
                        request: levels,
                        limit: levels,
                    },
                )]),
                annotations: c.annotations.clone(),
            });
        }
    }
    build(doc)
}

/// Two best-effort containers ramp past one node's bandwidth next to an RT
/// resident. Qos reduction and throttling are not enough, so the node
/// reports and one of them is moved to the idle second node.
pub fn escalation() -> Scenario {
    let ramp = DemandModel::Step {
        before: 20.0,
        after: 200.0,
        at: 10,
    };
    let mut adaptive = container("be-adaptive", 3, 6, false, ramp.clone());
    adaptive.adaptive = true;
    adaptive.qos_levels = vec![1.0, 0.9];
    adaptive.migratable = true;
    let mut fixed = container("be-fixed", 3, 6, false, ramp);
    fixed.migratable = true;
    build(document(
        11,
        80,
        vec![node("n1", 400.0, 0.0), node("n2", 400.0, 0.0)],
        vec![rt("rt", 2, constant(90.0)), adaptive, fixed],
    ))
}

/// The overbooking pair: identical demands, with the best-effort limits
/// equal to their requests in the first run and above them in the second.
pub fn overbooking_pair() -> (Scenario, Scenario) {
    let wave = |phase| DemandModel::Periodic {
        low: 60.0,
        high: 180.0,
        period: 20,
        high_ticks: 10,
        phase,
    };
    let make = |limit| {
        build(document(
            5,
            200,
            vec![node("n1", 400.0, 0.0)],
            vec![
                rt("rt", 2, constant(80.0)),
                container("be-a", 2, limit, false, wave(0)),
                container("be-b", 2, limit, false, wave(10)),
            ],
        ))
    };
    (make(2), make(4))
}

/// A replicated service on three nodes; the node running its first replica
/// fails half way through.
pub fn failure_recovery() -> Scenario {
    let mut web = container("web", 1, 2, false, constant(50.0));
    web.replicas = 2;
    let mut doc = document(
        3,
        100,
        vec![
            node("n1", 400.0, 0.0),
            node("n2", 400.0, 0.0),
            node("n3", 400.0, 0.0),
        ],
        vec![web],
    );
    doc.events.push(EventDoc::NodeFail {
        tick: 50,
        node: "n1".into(),
    });
    build(doc)
}

/// An RT container raises its strict request from 2 to 6 levels on a node
/// that also hosts a migratable 4-level reservation. With `spare_node` the
/// neighbour can move away; without it the change must be denied.
pub fn request_change(spare_node: bool) -> Scenario {
    let mut low = container("low", 4, 4, true, constant(150.0));
    low.migratable = true;
    let mut nodes = vec![node("n1", 400.0, 0.0)];
    if spare_node {
        nodes.push(node("n2", 400.0, 0.0));
    }
    let mut doc = document(9, 60, nodes, vec![rt("rt", 2, constant(90.0)), low]);
    doc.events.push(EventDoc::RequestChange {
        tick: 20,
        container: "rt".into(),
        resources: BTreeMap::from([(
            MB,
            LevelsDoc {
                request: 6,
                limit: 6,
            },
        )]),
        annotations: BTreeMap::from([("strictness.memory_bandwidth".into(), "strict".into())]),
    });
    build(doc)
}

/// Container ids of a scenario that hold a strict claim.
pub fn strict_containers(scenario: &Scenario) -> Vec<String> {
    scenario
        .containers
        .iter()
        .filter(|c| c.spec.has_strict_claim())
        .map(|c| c.spec.id.clone())
        .collect()
}

//! Acceptance checks, one line per criterion. Exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtcluster::global::tt::{admit_tt, verify_table, TtTask};
use rtcluster::global::{
    filter_nodes, place, ActionKind, ActionReason, ClusterView, GrmConfig, Placement, PolicyKind,
    RegistryEntry, ScoringPolicy,
};
use rtcluster::model::{
    priority_class, BandLadder, ContainerSpec, NodeSpec, PriorityClass, ResourceClaim, ResourceKind,
};
use rtcluster::monitor::{boundary_crossings, naive_bands, BandTracker, MonitorConfig};
use rtcluster::node::EnforcementKind;
use rtcluster::sim::demand::DemandModel;
use rtcluster::sim::{corpus, run, run_with, RunOptions, Scenario, World};
use rtcluster::trace::{encode_trace, Event, EventBody};

/// Slack allowed between expected and delivered amounts.
const DELIVERY_TOLERANCE: f64 = 1e-6;
/// Wall-clock budget for running the randomized corpus once.
const CORPUS_TIME_BUDGET: Duration = Duration::from_secs(10);
const RANDOM_SEEDS: u64 = 30;
const MIN_OVERLOADED_SCENARIOS: usize = 20;
/// Delivered bandwidth-ticks of the overbooked run over the guaranteed run.
const OVERBOOKING_GAIN: f64 = 1.333_333;
const OVERBOOKING_GAIN_TOLERANCE: f64 = 0.01;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn random_corpus() -> Vec<(String, Scenario)> {
    (0..RANDOM_SEEDS)
        .map(|seed| (format!("random-{seed}"), corpus::random_overload(seed)))
        .collect()
}

fn scripted_corpus() -> Vec<(String, Scenario)> {
    let (guaranteed, overbooked) = corpus::overbooking_pair();
    vec![
        ("escalation".into(), corpus::escalation()),
        ("overbooking-guaranteed".into(), guaranteed),
        ("overbooking-loose".into(), overbooked),
        ("failure".into(), corpus::failure_recovery()),
        ("request-change".into(), corpus::request_change(true)),
        ("request-denied".into(), corpus::request_change(false)),
    ]
}

fn node_spec<'a>(scenario: &'a Scenario, id: &str) -> &'a NodeSpec {
    scenario
        .nodes
        .iter()
        .find(|n| n.id == id)
        .expect("usage from a scenario node")
}

fn ladder(node: &NodeSpec, r: ResourceKind) -> Option<&BandLadder> {
    node.ladders.iter().find(|l| l.resource == r)
}

/// Group id of a container instance (`web#1` belongs to `web`).
fn group_of(instance: &str) -> &str {
    instance.split('#').next().unwrap_or(instance)
}

/// Isolation and conservation, recomputed from the scenario and the raw
/// usage records: every strict claim gets at least its request (as last
/// granted by the GRM) and the demand it has up to that request, and no
/// node hands out more strict levels than it has.
fn isolation_breaches(scenario: &Scenario, events: &[Event]) -> Vec<String> {
    let plans: BTreeMap<&str, _> = scenario
        .containers
        .iter()
        .map(|c| (c.spec.id.as_str(), c))
        .collect();
    let mut claims: BTreeMap<String, Vec<ResourceClaim>> = BTreeMap::new();
    let mut demand: BTreeMap<(String, ResourceKind), (u64, DemandModel)> = BTreeMap::new();
    let mut breaches = Vec::new();
    for e in events {
        match &e.body {
            EventBody::Action(a) if a.kind == ActionKind::GrantRequestChange => {
                let id = a.container_id.clone().unwrap();
                claims.insert(id, a.claims.clone().unwrap());
            }
            EventBody::DemandChange {
                container_id,
                resource,
                demand: model,
            } => {
                demand.insert((container_id.clone(), *resource), (e.tick, model.clone()));
            }
            EventBody::InvariantViolation { message, .. } => {
                breaches.push(format!("tick {}: engine reported `{message}`", e.tick));
            }
            EventBody::Usage { entries } => {
                let node = node_spec(scenario, &e.source);
                let mut strict_granted: BTreeMap<ResourceKind, u32> = BTreeMap::new();
                for u in entries {
                    let plan = plans[group_of(&u.container_id)];
                    let current = claims.get(&u.container_id).unwrap_or(&plan.spec.claims);
                    let Some(claim) = current.iter().find(|c| c.resource == u.resource) else {
                        continue;
                    };
                    if !claim.is_strict() {
                        continue;
                    }
                    *strict_granted.entry(u.resource).or_insert(0) += u.granted_levels;
                    let where_ = format!("tick {} {} {}", e.tick, u.container_id, u.resource);
                    if u.granted_levels < claim.request_levels {
                        breaches.push(format!(
                            "{where_}: granted {} < request {}",
                            u.granted_levels, claim.request_levels
                        ));
                    }
                    let wanted = if plan.spec.adaptive {
                        u.demand
                    } else {
                        let group = group_of(&u.container_id).to_string();
                        match demand.get(&(group.clone(), u.resource)) {
                            Some((_, model)) => model.value_at(
                                scenario.seed,
                                &format!("{group}/{}", u.resource),
                                e.tick,
                            ),
                            None => plan.demand.get(&u.resource).map_or(0.0, |m| {
                                m.value_at(
                                    scenario.seed,
                                    &format!("{group}/{}", u.resource),
                                    e.tick,
                                )
                            }),
                        }
                    };
                    let reserved =
                        ladder(node, u.resource).map_or(0.0, |l| l.amount_of(claim.request_levels));
                    if u.delivered + DELIVERY_TOLERANCE < wanted.min(reserved) {
                        breaches.push(format!(
                            "{where_}: delivered {} of {}",
                            u.delivered,
                            wanted.min(reserved)
                        ));
                    }
                }
                for (r, granted) in strict_granted {
                    let levels = ladder(node, r).map_or(0, |l| l.levels);
                    if granted > levels {
                        breaches.push(format!(
                            "tick {} {}: {granted} strict levels on {levels}",
                            e.tick, e.source
                        ));
                    }
                }
            }
            _ => {}
        }
    }
    breaches
}

/// Did the summed demand on some node and resource exceed its capacity?
fn demand_exceeds_capacity(scenario: &Scenario, events: &[Event]) -> bool {
    events.iter().any(|e| match &e.body {
        EventBody::Usage { entries } => {
            let node = node_spec(scenario, &e.source);
            let mut sums: BTreeMap<ResourceKind, f64> = BTreeMap::new();
            for u in entries {
                *sums.entry(u.resource).or_insert(0.0) += u.demand;
            }
            sums.iter()
                .any(|(r, total)| ladder(node, *r).is_some_and(|l| *total > l.capacity))
        }
        _ => false,
    })
}

fn criterion_1(
    random: &[(String, Scenario, Vec<Event>)],
    elapsed: Duration,
    overbooked: &(Scenario, Vec<Event>),
) -> Verdict {
    let overloaded = random
        .iter()
        .filter(|(_, s, events)| demand_exceeds_capacity(s, events))
        .count();
    let mut breaches = Vec::new();
    for (name, s, events) in random {
        breaches.extend(
            isolation_breaches(s, events)
                .into_iter()
                .map(|b| format!("{name}: {b}")),
        );
    }
    breaches.extend(
        isolation_breaches(&overbooked.0, &overbooked.1)
            .into_iter()
            .map(|b| format!("overbooking-loose: {b}")),
    );
    let detail = format!(
        "{} scenarios, {overloaded} overloaded, {} breaches, {:.2}s",
        random.len(),
        breaches.len(),
        elapsed.as_secs_f64()
    );
    if let Some(first) = breaches.first() {
        return verdict(false, format!("{detail}; first: {first}"));
    }
    verdict(
        overloaded >= MIN_OVERLOADED_SCENARIOS && elapsed < CORPUS_TIME_BUDGET,
        detail,
    )
}

/// Every overload episode, per (node, resource): from the latch to the
/// release, a node failure, or the end of the run.
fn escalation_exceptions(scenario: &Scenario, events: &[Event]) -> (usize, Vec<String>) {
    let grace = scenario.defaults.grace;
    let latency = scenario.defaults.report_latency;
    struct Episode {
        start: u64,
        adaptive_over: bool,
        corrective: usize,
    }
    let mut open: BTreeMap<(String, ResourceKind), Episode> = BTreeMap::new();
    let mut episodes = 0;
    let mut exceptions = Vec::new();
    let mut reports: BTreeMap<String, Vec<u64>> = BTreeMap::new();
    for e in events {
        match &e.body {
            EventBody::Overload(change) => {
                let key = (e.source.clone(), change.resource);
                if change.latched {
                    episodes += 1;
                    open.insert(
                        key,
                        Episode {
                            start: e.tick,
                            adaptive_over: !change.adaptive_over_request.is_empty(),
                            corrective: 0,
                        },
                    );
                } else {
                    open.remove(&key);
                }
            }
            EventBody::NodeFail { node_id } => open.retain(|(n, _), _| n != node_id),
            EventBody::Enforcement(action) => {
                let key = (e.source.clone(), action.resource);
                let Some(episode) = open.get_mut(&key) else {
                    exceptions.push(format!(
                        "tick {} {}: {:?} outside any episode",
                        e.tick, e.source, action.kind
                    ));
                    continue;
                };
                if episode.corrective == 0
                    && episode.adaptive_over
                    && action.kind != EnforcementKind::QosReduceRequest
                {
                    exceptions.push(format!(
                        "tick {} {}: first action is {:?}",
                        e.tick, e.source, action.kind
                    ));
                }
                if action.kind == EnforcementKind::Throttle && e.tick < episode.start + grace {
                    exceptions.push(format!(
                        "tick {} {}: throttle {} ticks after the latch",
                        e.tick,
                        e.source,
                        e.tick - episode.start
                    ));
                }
                if action.kind == EnforcementKind::ReportToGrm {
                    reports.entry(e.source.clone()).or_default().push(e.tick);
                }
                episode.corrective += 1;
            }
            EventBody::Action(a)
                if a.kind == ActionKind::Migrate && a.reason == Some(ActionReason::Overload) =>
            {
                let from = a.from_node.clone().unwrap_or_default();
                let reported = reports
                    .get(&from)
                    .is_some_and(|ticks| ticks.iter().any(|&r| r + latency <= e.tick));
                if !reported {
                    exceptions.push(format!(
                        "tick {}: migration off {from} without an earlier report",
                        e.tick
                    ));
                }
            }
            _ => {}
        }
    }
    (episodes, exceptions)
}

fn criterion_2(runs: &[(String, Scenario, Vec<Event>)]) -> Verdict {
    let mut episodes = 0;
    let mut exceptions = Vec::new();
    let mut migrations = 0;
    for (name, s, events) in runs {
        let (n, found) = escalation_exceptions(s, events);
        episodes += n;
        exceptions.extend(found.into_iter().map(|x| format!("{name}: {x}")));
        migrations += events
            .iter()
            .filter(|e| matches!(&e.body, EventBody::Action(a) if a.kind == ActionKind::Migrate && a.reason == Some(ActionReason::Overload)))
            .count();
    }
    let detail = format!(
        "{episodes} episodes, {migrations} overload migrations, {} exceptions",
        exceptions.len()
    );
    match exceptions.first() {
        Some(first) => verdict(false, format!("{detail}; first: {first}")),
        None => verdict(episodes > 0 && migrations > 0, detail),
    }
}

fn criterion_3() -> Verdict {
    let ladder = BandLadder::new(ResourceKind::MemoryBandwidth, 400.0, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut confined_failures = 0;
    let mut naive_silent = 0;
    let mut unrestricted_failures = 0;
    for _ in 0..100 {
        let config = MonitorConfig {
            alpha: rng.random_range(0.05..1.0),
            dwell: rng.random_range(1..4),
            ..MonitorConfig::default()
        };
        let h = config.hysteresis_for(&ladder);
        let level = rng.random_range(1..8);
        let boundary = ladder.lower_bound(level);
        let stream: Vec<f64> = (0..100)
            .map(|_| boundary + rng.random_range(-0.999..0.999) * h)
            .collect();
        let start = level - 1;
        let mut tracker = BandTracker::new(&ladder, &config);
        tracker.band.current_band = start;
        let filtered: Vec<u32> = stream
            .iter()
            .map(|&s| {
                tracker.observe(&ladder, s).unwrap();
                tracker.band()
            })
            .collect();
        if filtered.iter().any(|&b| b >= level) {
            confined_failures += 1;
        }
        if boundary_crossings(start, &naive_bands(&ladder, &stream).unwrap()) == 0 {
            naive_silent += 1;
        }

        let stream: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..450.0)).collect();
        let mut tracker = BandTracker::new(&ladder, &config);
        let filtered: Vec<u32> = stream
            .iter()
            .map(|&s| {
                tracker.observe(&ladder, s).unwrap();
                tracker.band()
            })
            .collect();
        let naive = naive_bands(&ladder, &stream).unwrap();
        if boundary_crossings(0, &filtered) > boundary_crossings(0, &naive) {
            unrestricted_failures += 1;
        }
    }
    verdict(
        confined_failures == 0 && naive_silent == 0 && unrestricted_failures == 0,
        format!(
            "confined: {confined_failures}/100 filtered crossings, {naive_silent}/100 naive without one; unrestricted: {unrestricted_failures}/100 filtered above naive"
        ),
    )
}

const MB: ResourceKind = ResourceKind::MemoryBandwidth;
const CPU: ResourceKind = ResourceKind::CpuTime;

fn claim_levels(node: &NodeSpec, r: ResourceKind) -> u32 {
    ladder(node, r).map_or(0, |l| l.levels)
}

/// Feasible node ids by the definition: every claimed resource exists on
/// the node and strict requests fit next to the strict requests already there.
fn oracle_feasible(
    nodes: &[NodeSpec],
    residents: &[(ContainerSpec, usize)],
    spec: &ContainerSpec,
) -> Vec<String> {
    let mut out = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let ok = spec.claims.iter().all(|claim| {
            let levels = claim_levels(node, claim.resource);
            if levels == 0 && claim.limit_levels > 0 {
                return false;
            }
            if !claim.is_strict() {
                return true;
            }
            let used: u32 = residents
                .iter()
                .filter(|(_, at)| *at == i)
                .flat_map(|(s, _)| s.claims.iter())
                .filter(|c| c.resource == claim.resource && c.is_strict())
                .map(|c| c.request_levels)
                .sum();
            used + claim.request_levels <= levels
        });
        if ok {
            out.push(node.id.clone());
        }
    }
    out.sort();
    out
}

/// Winner by recomputing every policy score from its definition.
fn oracle_winner(
    nodes: &[NodeSpec],
    residents: &[(ContainerSpec, usize)],
    spec: &ContainerSpec,
    feasible: &[String],
    policies: &[ScoringPolicy],
) -> Option<String> {
    let index = |id: &str| nodes.iter().position(|n| n.id == id).unwrap();
    let on = |i: usize| {
        residents
            .iter()
            .filter(move |(_, at)| *at == i)
            .map(|(s, _)| s)
    };
    let committed = |i: usize, r: ResourceKind| -> u32 {
        on(i)
            .map(|s| {
                s.claims
                    .iter()
                    .filter(|c| c.resource == r)
                    .map(|c| c.request_levels)
                    .sum::<u32>()
            })
            .sum()
    };
    let be_like = |s: &ContainerSpec| {
        s.claims.iter().all(|c| c.request_levels == 0) || s.claims.iter().all(|c| !c.is_strict())
    };
    let be_count = |i: usize| on(i).filter(|s| be_like(s)).count() as f64;
    let max_be = feasible
        .iter()
        .map(|n| be_count(index(n)))
        .fold(0.0, f64::max);
    let max_prio = feasible
        .iter()
        .map(|n| nodes[index(n)].static_priority)
        .fold(0.0, f64::max);
    let score = |i: usize, kind: PolicyKind| -> f64 {
        let node = &nodes[i];
        match kind {
            PolicyKind::SpreadResourceIntensive => {
                let intensive = spec.claims.iter().any(|c| {
                    c.is_strict() && 2 * c.request_levels > claim_levels(node, c.resource)
                });
                let fractions: Vec<f64> = spec
                    .claims
                    .iter()
                    .filter(|c| claim_levels(node, c.resource) > 0)
                    .map(|c| {
                        (f64::from(committed(i, c.resource))
                            / f64::from(claim_levels(node, c.resource)))
                        .min(1.0)
                    })
                    .collect();
                let mean = if fractions.is_empty() {
                    0.0
                } else {
                    fractions.iter().sum::<f64>() / fractions.len() as f64
                };
                if intensive {
                    1.0 - mean
                } else {
                    0.0
                }
            }
            PolicyKind::BinPackBestEffort => {
                if !be_like(spec) || max_be == 0.0 {
                    0.0
                } else {
                    be_count(i) / max_be
                }
            }
            PolicyKind::StaticNodePriority => {
                if max_prio <= 0.0 {
                    0.0
                } else {
                    node.static_priority / max_prio
                }
            }
            PolicyKind::HeterogeneousFit => {
                let levels = claim_levels(node, CPU);
                if levels == 0 {
                    return 0.0;
                }
                let l = f64::from(levels);
                let want = f64::from(
                    spec.claims
                        .iter()
                        .find(|c| c.resource == CPU)
                        .map_or(0, |c| c.request_levels),
                ) / l;
                let headroom = f64::from(levels.saturating_sub(committed(i, CPU))) / l;
                (1.0 - (want - headroom).abs()).clamp(0.0, 1.0)
            }
        }
    };
    let total_weight: f64 = policies.iter().map(|p| p.weight).sum();
    let mut best: Option<(i64, &String)> = None;
    for id in feasible {
        let i = index(id);
        let s = policies
            .iter()
            .map(|p| p.weight * score(i, p.kind))
            .sum::<f64>()
            / total_weight;
        let key = (s * 1e9).round() as i64;
        if best.is_none_or(|(k, _)| key > k) {
            best = Some((key, id));
        }
    }
    best.map(|(_, id)| id.clone())
}

fn random_claim(rng: &mut ChaCha8Rng, r: ResourceKind, max: u32) -> ResourceClaim {
    let request = rng.random_range(0..=max);
    let limit = request + rng.random_range(0..=2);
    if rng.random_bool(0.5) {
        ResourceClaim::strict(r, request, request)
    } else {
        ResourceClaim::loose(r, request, limit)
    }
}

fn random_spec(rng: &mut ChaCha8Rng, id: String) -> ContainerSpec {
    let mut claims = vec![random_claim(rng, MB, 6)];
    if rng.random_bool(0.5) {
        claims.push(random_claim(rng, CPU, 3));
    }
    ContainerSpec::new(id, claims)
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    let mut rejects = 0;
    for case in 0..200 {
        let weights: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
        let policies: Vec<ScoringPolicy> = [
            PolicyKind::SpreadResourceIntensive,
            PolicyKind::BinPackBestEffort,
            PolicyKind::StaticNodePriority,
            PolicyKind::HeterogeneousFit,
        ]
        .into_iter()
        .zip(weights)
        .map(|(kind, weight)| ScoringPolicy {
            kind,
            weight: weight + 0.01,
        })
        .collect();
        let config = GrmConfig {
            policies: policies.clone(),
            ..GrmConfig::default()
        };
        let node_count = rng.random_range(1..=6);
        let nodes: Vec<NodeSpec> = (0..node_count)
            .map(|i| {
                let mut ladders = vec![BandLadder::new(MB, 400.0, rng.random_range(2..=10))];
                if rng.random_bool(0.7) {
                    ladders.push(BandLadder::new(CPU, 4.0, rng.random_range(2..=4)));
                }
                let mut spec = NodeSpec::new(format!("n{i}"), ladders);
                spec.static_priority = f64::from(rng.random_range(0..4u32));
                spec
            })
            .collect();
        let mut view = ClusterView::new(config);
        for n in &nodes {
            view.add_node(n.clone(), 0);
        }
        let mut residents: Vec<(ContainerSpec, usize)> = Vec::new();
        for k in 0..rng.random_range(0..8) {
            let spec = random_spec(&mut rng, format!("e{k}"));
            let at = rng.random_range(0..node_count);
            if !oracle_feasible(&nodes, &residents, &spec).contains(&nodes[at].id) {
                continue;
            }
            view.registry.insert(
                spec.id.clone(),
                RegistryEntry {
                    spec: spec.clone(),
                    group: spec.id.clone(),
                    tasks: 1,
                    placement: Placement::Running(nodes[at].id.clone()),
                    qos_level: 0,
                    was_placed: true,
                },
            );
            residents.push((spec, at));
        }
        let spec = random_spec(&mut rng, "new".into());
        let feasible = oracle_feasible(&nodes, &residents, &spec);
        let filtered = filter_nodes(&view, &spec, 0);
        if filtered != feasible {
            mismatches.push(format!(
                "case {case}: filter {filtered:?}, oracle {feasible:?}"
            ));
            continue;
        }
        let expected = oracle_winner(&nodes, &residents, &spec, &feasible, &policies);
        let actions = place(&mut view, &spec, 1, 0).unwrap();
        let chosen = match actions[0].kind {
            ActionKind::Place => actions[0].to_node.clone(),
            ActionKind::Reject => {
                rejects += 1;
                None
            }
            other => {
                mismatches.push(format!("case {case}: unexpected {other:?}"));
                continue;
            }
        };
        if chosen != expected {
            mismatches.push(format!(
                "case {case}: placed on {chosen:?}, oracle {expected:?}"
            ));
        }
    }
    let detail = format!(
        "200 instances, {rejects} rejects, {} mismatches",
        mismatches.len()
    );
    match mismatches.first() {
        Some(first) => verdict(false, format!("{detail}; first: {first}")),
        None => verdict(true, detail),
    }
}

/// Reference EDF simulation one tick at a time: a job is picked at every
/// slot boundary and keeps the processor for the slot.
fn edf_feasible(tasks: &[TtTask], slot: u64, hyperperiod: u64) -> bool {
    struct Job {
        deadline: u64,
        id: String,
        release: u64,
        left: u64,
    }
    let mut jobs = Vec::new();
    for t in tasks {
        let p = t.params;
        if !hyperperiod.is_multiple_of(p.period) {
            return false;
        }
        for k in 0..hyperperiod / p.period {
            jobs.push(Job {
                deadline: k * p.period + p.deadline,
                id: t.container_id.clone(),
                release: k * p.period,
                left: p.runtime,
            });
        }
    }
    let mut current: Option<usize> = None;
    for tick in 0..hyperperiod {
        if jobs.iter().any(|j| j.left > 0 && j.deadline <= tick) {
            return false;
        }
        if tick % slot == 0 {
            current = jobs
                .iter()
                .enumerate()
                .filter(|(_, j)| j.left > 0 && j.release <= tick)
                .min_by(|(_, a), (_, b)| {
                    (a.deadline, &a.id, a.release).cmp(&(b.deadline, &b.id, b.release))
                })
                .map(|(i, _)| i);
        }
        if let Some(i) = current {
            jobs[i].left = jobs[i].left.saturating_sub(1);
        }
    }
    jobs.iter().all(|j| j.left == 0)
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    let mut accepted = 0;
    let mut replay_failures = 0;
    for case in 0..100 {
        let hyperperiod = [12u64, 20, 24, 30, 36, 40, 48, 60][rng.random_range(0..8)];
        let slot = [1u64, 2, 3][rng.random_range(0..3)];
        let divisors: Vec<u64> = (2..=hyperperiod)
            .filter(|d| hyperperiod.is_multiple_of(*d))
            .collect();
        let tasks: Vec<TtTask> = (0..rng.random_range(1..=5))
            .map(|i| {
                let period = divisors[rng.random_range(0..divisors.len())];
                let runtime = rng.random_range(1..=(period / 2).max(1));
                let deadline = rng.random_range(runtime..=period);
                TtTask::new(format!("t{i}"), period, runtime, deadline)
            })
            .collect();
        let node = NodeSpec::new("tt", vec![BandLadder::new(CPU, 4.0, 4)])
            .with_time_triggered(slot, hyperperiod);
        let (new, existing) = tasks.split_last().unwrap();
        let result = admit_tt(&node, existing, new);
        let expected = edf_feasible(&tasks, slot, hyperperiod);
        if result.is_ok() != expected {
            mismatches.push(format!(
                "case {case}: admit {:?}, oracle {expected}",
                result.as_ref().err()
            ));
        }
        if let Ok(table) = result {
            accepted += 1;
            if verify_table(&table, &tasks).is_err() {
                replay_failures += 1;
            }
        }
    }
    let detail = format!(
        "100 sets, {accepted} accepted, {} mismatches, {replay_failures} replay failures",
        mismatches.len()
    );
    match mismatches.first() {
        Some(first) => verdict(false, format!("{detail}; first: {first}")),
        None => verdict(
            replay_failures == 0 && accepted > 0 && accepted < 100,
            detail,
        ),
    }
}

fn delivered_bandwidth(events: &[Event]) -> f64 {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Usage { entries } => Some(
                entries
                    .iter()
                    .filter(|u| u.resource == MB)
                    .map(|u| u.delivered)
                    .sum::<f64>(),
            ),
            _ => None,
        })
        .sum()
}

fn criterion_6(
    guaranteed: &(Scenario, Vec<Event>),
    overbooked: &(Scenario, Vec<Event>),
) -> Verdict {
    let all_guaranteed = guaranteed
        .0
        .containers
        .iter()
        .all(|c| priority_class(&c.spec) == PriorityClass::Guaranteed);
    let loose_burstable = overbooked
        .0
        .containers
        .iter()
        .filter(|c| !c.spec.has_strict_claim())
        .all(|c| {
            c.spec
                .claims
                .iter()
                .all(|k| k.limit_levels > k.request_levels)
        });
    let a = delivered_bandwidth(&guaranteed.1);
    let b = delivered_bandwidth(&overbooked.1);
    let gain = b / a;
    let isolated = isolation_breaches(&overbooked.0, &overbooked.1).is_empty();
    let pinned = (gain - OVERBOOKING_GAIN).abs() <= OVERBOOKING_GAIN_TOLERANCE * OVERBOOKING_GAIN;
    verdict(
        all_guaranteed && loose_burstable && b >= a && pinned && isolated,
        format!("A {a:.1}, B {b:.1}, gain {gain:.6} (pinned {OVERBOOKING_GAIN} ±1%), isolation in B {isolated}"),
    )
}

fn criterion_7() -> Verdict {
    let scenario = corpus::failure_recovery();
    let latency = scenario.defaults.report_latency;
    let events = run(&scenario);
    let mut hosts: BTreeMap<String, String> = BTreeMap::new();
    let mut failed: BTreeSet<String> = BTreeSet::new();
    let mut failure: Option<(u64, String, Vec<String>)> = None;
    let mut recovered = Vec::new();
    let mut problems = Vec::new();
    for e in &events {
        match &e.body {
            EventBody::NodeFail { node_id } => {
                failed.insert(node_id.clone());
                let victims: Vec<String> = hosts
                    .iter()
                    .filter(|(id, n)| *n == node_id && id.contains('#'))
                    .map(|(id, _)| id.clone())
                    .collect();
                failure = Some((e.tick, node_id.clone(), victims));
            }
            EventBody::Action(a) => {
                let (Some(id), Some(to)) = (a.container_id.clone(), a.to_node.clone()) else {
                    continue;
                };
                if matches!(
                    a.kind,
                    ActionKind::Place | ActionKind::Redeploy | ActionKind::Migrate
                ) {
                    if a.kind == ActionKind::Redeploy {
                        if failed.contains(&to) {
                            problems.push(format!("{id} redeployed onto failed {to}"));
                        }
                        if hosts.iter().any(|(other, n)| {
                            *n == to && group_of(other) == group_of(&id) && *other != id
                        }) {
                            problems.push(format!("{id} redeployed next to a sibling on {to}"));
                        }
                        recovered.push((id.clone(), e.tick));
                    }
                    hosts.insert(id, to);
                }
            }
            _ => {}
        }
    }
    let Some((tick, node, victims)) = failure else {
        return verdict(false, "no node failure in the trace");
    };
    if victims.is_empty() {
        problems.push(format!("no replica ran on {node}"));
    }
    for v in &victims {
        match recovered.iter().find(|(id, _)| id == v) {
            Some((_, at)) if *at <= tick + latency + 1 => {}
            Some((_, at)) => problems.push(format!(
                "{v} redeployed at {at}, deadline {}",
                tick + latency + 1
            )),
            None => problems.push(format!("{v} never redeployed")),
        }
    }
    let detail = format!("{node} failed at {tick}; redeploys {recovered:?}");
    match problems.first() {
        Some(first) => verdict(false, format!("{detail}; {first}")),
        None => verdict(true, detail),
    }
}

fn criterion_8(corpus: &[(String, Scenario, Vec<Event>)]) -> Verdict {
    let mut differing = Vec::new();
    for (name, s, first) in corpus {
        let reference = encode_trace(first);
        if encode_trace(&run(s)) != reference {
            differing.push(format!("{name} (serial)"));
        }
        if encode_trace(&run_with(s, RunOptions { parallel: true })) != reference {
            differing.push(format!("{name} (parallel)"));
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{} scenarios x 3 runs, differing: {differing:?}",
            corpus.len()
        ),
    )
}

/// Steps a world to `tick`, then returns the registry before and after that
/// tick together with the tick's events.
fn around_tick(
    scenario: Scenario,
    tick: u64,
) -> (
    BTreeMap<String, RegistryEntry>,
    BTreeMap<String, RegistryEntry>,
    Vec<Event>,
) {
    let mut world = World::new(scenario, RunOptions::default());
    while world.tick < tick {
        world.step();
    }
    let before = world.grm.registry.clone();
    let events = world.step();
    (before, world.grm.registry.clone(), events)
}

fn actions(events: &[Event]) -> Vec<(ActionKind, String)> {
    events
        .iter()
        .filter_map(|e| match &e.body {
            EventBody::Action(a) => Some((a.kind, a.container_id.clone().unwrap_or_default())),
            _ => None,
        })
        .collect()
}

fn criterion_9() -> Verdict {
    let feasible = corpus::request_change(true);
    let at = feasible.events[0].tick;
    let (_, after, events) = around_tick(feasible, at);
    let granted = actions(&events);
    let expected = vec![
        (ActionKind::Migrate, "low".to_string()),
        (ActionKind::GrantRequestChange, "rt".to_string()),
    ];
    let rt_request = after["rt"].spec.request(MB);

    let denied = corpus::request_change(false);
    let (before, after_deny, events) = around_tick(denied, at);
    let deny = actions(&events);
    let unchanged = before == after_deny;
    verdict(
        granted == expected
            && rt_request == 6
            && deny == vec![(ActionKind::DenyRequestChange, "rt".to_string())]
            && unchanged,
        format!("feasible: {granted:?}; infeasible: {deny:?}, registry unchanged {unchanged}"),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let random: Vec<(String, Scenario, Vec<Event>)> = random_corpus()
        .into_iter()
        .map(|(name, s)| {
            let events = run(&s);
            (name, s, events)
        })
        .collect();
    let elapsed = started.elapsed();
    let scripted: Vec<(String, Scenario, Vec<Event>)> = scripted_corpus()
        .into_iter()
        .map(|(name, s)| {
            let events = run(&s);
            (name, s, events)
        })
        .collect();
    let pick = |name: &str| {
        let (_, s, e) = scripted.iter().find(|(n, _, _)| n == name).unwrap();
        (s.clone(), e.clone())
    };
    let guaranteed = pick("overbooking-guaranteed");
    let overbooked = pick("overbooking-loose");
    let mut everything = random.clone();
    everything.extend(scripted.iter().cloned());

    let results = [
        (
            "RT isolation under overload",
            criterion_1(&random, elapsed, &overbooked),
        ),
        ("escalation ordering", criterion_2(&everything)),
        ("hysteresis effectiveness", criterion_3()),
        ("placement oracle equivalence", criterion_4()),
        ("TT admission oracle equivalence", criterion_5()),
        ("overbooking payoff", criterion_6(&guaranteed, &overbooked)),
        ("failure recovery", criterion_7()),
        ("determinism", criterion_8(&everything)),
        ("dynamic request change", criterion_9()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        let mark = if v.passed { "PASS" } else { "FAIL" };
        println!("criterion {} {mark} {name}: {}", i + 1, v.detail);
        failed += usize::from(!v.passed);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}

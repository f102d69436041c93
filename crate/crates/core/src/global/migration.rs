//! Reacting to node reports: overload migration and misconfiguration.

use std::collections::BTreeMap;

use super::placement::choose_node;
use super::{ActionKind, ActionReason, ClusterView, GlobalAction, MisconfigPolicy};
use crate::model::{ContainerId, ResourceKind};
use crate::node::NodeStatusReport;

fn occupied(report: &NodeStatusReport, container: &str, resource: ResourceKind) -> u32 {
    report
        .containers
        .get(container)
        .and_then(|c| c.bands.get(&resource))
        .map_or(0, |b| b.levels)
}

/// Ids to move off the reporting node so that, per resource, the levels
/// they occupy cover `shed`. Migratable containers go first, then lower
/// criticality, larger excess over request, and id. Non-migratable
/// containers at or above the criticality ceiling are never chosen.
pub fn select_migration_candidates(
    report: &NodeStatusReport,
    view: &ClusterView,
    shed: &BTreeMap<ResourceKind, u32>,
) -> Vec<ContainerId> {
    let needed: Vec<(ResourceKind, u32)> = shed
        .iter()
        .filter(|(_, &levels)| levels > 0)
        .map(|(&r, &levels)| (r, levels))
        .collect();
    if needed.is_empty() {
        return Vec::new();
    }
    let ceiling = view.config.criticality_ceiling;
    let mut pool: Vec<(bool, i32, u32, &ContainerId)> = view
        .residents(&report.node_id)
        .filter(|(id, _)| report.containers.contains_key(*id))
        .filter(|(_, e)| e.spec.migratable || e.spec.criticality < ceiling)
        .map(|(id, e)| {
            let excess = needed
                .iter()
                .map(|&(r, _)| occupied(report, id, r).saturating_sub(e.spec.request(r)))
                .sum();
            (e.spec.migratable, e.spec.criticality, excess, id)
        })
        .collect();
    pool.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(b.2.cmp(&a.2))
            .then_with(|| a.3.cmp(b.3))
    });

    let mut covered: BTreeMap<ResourceKind, u32> = BTreeMap::new();
    let mut chosen = Vec::new();
    for (_, _, _, id) in pool {
        if needed
            .iter()
            .all(|(r, n)| covered.get(r).copied().unwrap_or(0) >= *n)
        {
            break;
        }
        let helps = needed.iter().any(|&(r, n)| {
            covered.get(&r).copied().unwrap_or(0) < n && occupied(report, id, r) > 0
        });
        if !helps {
            continue;
        }
        for &(r, _) in &needed {
            *covered.entry(r).or_insert(0) += occupied(report, id, r);
        }
        chosen.push(id.clone());
    }
    chosen
}

/// Folds a node report into the view and answers it. Reports older than
/// what is already known, or from a failed node, are dropped.
pub fn handle_report(
    view: &mut ClusterView,
    report: &NodeStatusReport,
    tick: u64,
) -> Vec<GlobalAction> {
    let fresh = view.nodes.get(&report.node_id).is_some_and(|n| {
        !n.failed
            && n.report
                .as_ref()
                .is_none_or(|known| known.tick < report.tick)
    });
    if !fresh {
        view.stale_reports += 1;
        return Vec::new();
    }
    let node = report.node_id.clone();
    view.nodes.get_mut(&node).expect("checked above").report = Some(report.clone());
    for (id, status) in &report.containers {
        if view.node_of(id) == Some(node.as_str()) {
            if let Some(entry) = view.registry.get_mut(id) {
                entry.qos_level = status.qos_level;
            }
        }
    }

    let mut actions = overload_migrations(view, report, tick);
    actions.extend(misconfigurations(view, report, tick));
    actions
}

fn overload_migrations(
    view: &mut ClusterView,
    report: &NodeStatusReport,
    tick: u64,
) -> Vec<GlobalAction> {
    let node = report.node_id.clone();
    let acted_since = view.nodes[&node]
        .last_action_tick
        .is_some_and(|at| report.tick <= at);
    if !report.is_overloaded() || acted_since {
        return Vec::new();
    }
    let shed: BTreeMap<ResourceKind, u32> = report
        .resources
        .iter()
        .filter(|(_, s)| s.overloaded)
        .map(|(&r, s)| {
            let threshold = view.config.overload_threshold(s.levels);
            (r, (s.aggregate_band + 1).saturating_sub(threshold))
        })
        .collect();
    let mut actions = Vec::new();
    for id in select_migration_candidates(report, view, &shed) {
        if let Some(target) = choose_node(view, &id, tick, Some(&node)) {
            actions.extend(view.migrate(&id, &target, ActionReason::Overload, tick));
        }
    }
    if actions.is_empty() {
        view.unresolved_overloads += 1;
        log::info!(
            "node {node}: overload reported at tick {} but nothing can move",
            report.tick
        );
    } else {
        view.nodes
            .get_mut(&node)
            .expect("known node")
            .last_action_tick = Some(tick);
    }
    actions
}

/// Containers running at their limit for `misconfig_dwell` reports in a row.
fn misconfigurations(
    view: &mut ClusterView,
    report: &NodeStatusReport,
    tick: u64,
) -> Vec<GlobalAction> {
    let node = report.node_id.clone();
    let mut actions = Vec::new();
    for id in report.containers.keys() {
        if !view.registry.contains_key(id) || view.node_of(id) != Some(node.as_str()) {
            continue;
        }
        let at_limit = report.containers[id].bands.values().any(|b| b.at_limit);
        let streak = view.misconfig_streaks.entry(id.clone()).or_insert(0);
        *streak = if at_limit { *streak + 1 } else { 0 };
        if *streak != view.config.misconfig_dwell {
            continue;
        }
        match view.config.misconfig_policy {
            MisconfigPolicy::Ignore => {}
            MisconfigPolicy::ConfirmThrottle => actions.push(
                GlobalAction::new(ActionKind::ConfirmThrottle, tick)
                    .container(id)
                    .from(&node)
                    .reason(ActionReason::Misconfigured),
            ),
            MisconfigPolicy::Migrate => {
                if let Some(target) = choose_node(view, id, tick, Some(&node)) {
                    actions.extend(view.migrate(id, &target, ActionReason::Misconfigured, tick));
                }
            }
        }
    }
    actions
}

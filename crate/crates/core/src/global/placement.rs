//! Filter and score placement.

use serde::{Deserialize, Serialize};

use super::{
    score_key, ActionKind, ActionReason, AntiAffinity, ClusterView, GlobalAction, GrmError,
    PolicyKind,
};
use crate::model::{
    priority_class, validate_spec, ContainerSpec, NodeId, PriorityClass, ResourceKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNode {
    pub node: NodeId,
    pub score: f64,
}

/// Live nodes on which `spec` fits, in id order.
pub fn filter_nodes(view: &ClusterView, spec: &ContainerSpec, tick: u64) -> Vec<NodeId> {
    view.nodes
        .keys()
        .filter(|node| view.fits(node, spec, tick, Some(&spec.id)))
        .cloned()
        .collect()
}

fn best_effort_like(spec: &ContainerSpec) -> bool {
    priority_class(spec) == PriorityClass::BestEffort || !spec.has_strict_claim()
}

fn best_effort_count(view: &ClusterView, node: &str) -> usize {
    view.residents(node)
        .filter(|(_, e)| best_effort_like(&e.spec))
        .count()
}

/// Mean committed fraction over the resources `spec` claims.
fn utilization(view: &ClusterView, node: &str, spec: &ContainerSpec) -> f64 {
    let node_spec = &view.nodes[node].spec;
    let fractions: Vec<f64> = spec
        .claims
        .iter()
        .filter(|c| node_spec.levels(c.resource) > 0)
        .map(|c| {
            let levels = f64::from(node_spec.levels(c.resource));
            (f64::from(view.committed(node, c.resource, Some(&spec.id))) / levels).min(1.0)
        })
        .collect();
    if fractions.is_empty() {
        0.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    }
}

/// One policy's score in [0, 1] for `node`; `feasible` is the set being
/// ranked, used by the policies that normalize by their maximum.
pub fn policy_score(
    kind: PolicyKind,
    view: &ClusterView,
    node: &str,
    spec: &ContainerSpec,
    feasible: &[NodeId],
) -> f64 {
    let node_spec = &view.nodes[node].spec;
    match kind {
        PolicyKind::SpreadResourceIntensive => {
            let intensive = spec
                .claims
                .iter()
                .any(|c| c.is_strict() && 2 * c.request_levels > node_spec.levels(c.resource));
            if intensive {
                1.0 - utilization(view, node, spec)
            } else {
                0.0
            }
        }
        PolicyKind::BinPackBestEffort => {
            if !best_effort_like(spec) {
                return 0.0;
            }
            let max = feasible
                .iter()
                .map(|n| best_effort_count(view, n))
                .max()
                .unwrap_or(0);
            if max == 0 {
                0.0
            } else {
                best_effort_count(view, node) as f64 / max as f64
            }
        }
        PolicyKind::StaticNodePriority => {
            let max = feasible
                .iter()
                .map(|n| view.nodes[n].spec.static_priority)
                .fold(0.0, f64::max);
            if max <= 0.0 {
                0.0
            } else {
                node_spec.static_priority / max
            }
        }
        PolicyKind::HeterogeneousFit => {
            let levels = node_spec.levels(ResourceKind::CpuTime);
            if levels == 0 {
                return 0.0;
            }
            let levels_f = f64::from(levels);
            let committed = view.committed(node, ResourceKind::CpuTime, Some(&spec.id));
            let wanted = f64::from(spec.request(ResourceKind::CpuTime)) / levels_f;
            let headroom = f64::from(levels.saturating_sub(committed)) / levels_f;
            (1.0 - (wanted - headroom).abs()).clamp(0.0, 1.0)
        }
    }
}

/// Weighted, normalized scores of `feasible`, best first; ties go to the
/// smaller node id.
pub fn score_nodes(
    view: &ClusterView,
    feasible: &[NodeId],
    spec: &ContainerSpec,
) -> Result<Vec<ScoredNode>, GrmError> {
    if feasible.is_empty() {
        return Err(GrmError::EmptyFeasibleSet);
    }
    let total_weight: f64 = view.config.policies.iter().map(|p| p.weight).sum();
    let mut scored: Vec<ScoredNode> = feasible
        .iter()
        .map(|node| {
            let score = if total_weight > 0.0 {
                view.config
                    .policies
                    .iter()
                    .map(|p| p.weight * policy_score(p.kind, view, node, spec, feasible))
                    .sum::<f64>()
                    / total_weight
            } else {
                0.0
            };
            ScoredNode {
                node: node.clone(),
                score,
            }
        })
        .collect();
    scored.sort_by(|a, b| {
        score_key(b.score)
            .cmp(&score_key(a.score))
            .then_with(|| a.node.cmp(&b.node))
    });
    Ok(scored)
}

/// Best node for a registered instance, honouring anti-affinity among its
/// siblings and never choosing `exclude`.
pub(crate) fn choose_node(
    view: &ClusterView,
    container: &str,
    tick: u64,
    exclude: Option<&str>,
) -> Option<NodeId> {
    let entry = view.registry.get(container)?;
    let feasible: Vec<NodeId> = filter_nodes(view, &entry.spec, tick)
        .into_iter()
        .filter(|n| Some(n.as_str()) != exclude)
        .collect();
    let sibling_nodes: Vec<&str> = view
        .registry
        .iter()
        .filter(|(id, e)| id.as_str() != container && e.group == entry.group)
        .filter_map(|(id, _)| view.node_of(id))
        .collect();
    let apart: Vec<NodeId> = feasible
        .iter()
        .filter(|n| !sibling_nodes.contains(&n.as_str()))
        .cloned()
        .collect();
    let candidates = if !apart.is_empty() {
        apart
    } else if view.config.anti_affinity == AntiAffinity::Mandatory && !sibling_nodes.is_empty() {
        return None;
    } else {
        feasible
    };
    score_nodes(view, &candidates, &entry.spec)
        .ok()
        .map(|ranked| ranked[0].node.clone())
}

/// Puts a registered instance on `node`: a place or redeploy action plus a
/// table rebuild for a time-triggered instance.
pub(crate) fn commit_placement(
    view: &mut ClusterView,
    container: &str,
    node: &str,
    kind: ActionKind,
    tick: u64,
) -> Vec<GlobalAction> {
    view.assign(container, node);
    let mut actions = vec![GlobalAction::new(kind, tick).container(container).to(node)];
    if view.registry[container].spec.tt_params.is_some() {
        actions.extend(view.tt_install(node, tick));
    }
    actions
}

pub(crate) fn instance_ids(spec: &ContainerSpec) -> Vec<String> {
    if spec.replicas <= 1 {
        vec![spec.id.clone()]
    } else {
        (0..spec.replicas)
            .map(|i| format!("{}#{i}", spec.id))
            .collect()
    }
}

/// Registers an arriving container and places each of its replicas. An
/// instance with no feasible node is rejected once and kept pending.
pub fn place(
    view: &mut ClusterView,
    spec: &ContainerSpec,
    tasks: u32,
    tick: u64,
) -> Result<Vec<GlobalAction>, GrmError> {
    let spec = validate_spec(spec).map_err(GrmError::InvalidSpec)?;
    let ids = instance_ids(&spec);
    if let Some(dup) = ids.iter().find(|id| view.registry.contains_key(*id)) {
        return Err(GrmError::DuplicateContainer(dup.clone()));
    }
    let mut actions = Vec::new();
    for id in ids {
        let mut instance = spec.clone();
        instance.id = id.clone();
        view.register(instance, &spec.id, tasks)?;
        match choose_node(view, &id, tick, None) {
            Some(node) => {
                actions.extend(commit_placement(view, &id, &node, ActionKind::Place, tick))
            }
            None => {
                view.pending.push(id.clone());
                actions.push(
                    GlobalAction::new(ActionKind::Reject, tick)
                        .container(&id)
                        .reason(ActionReason::NoFeasibleNode),
                );
            }
        }
    }
    Ok(actions)
}

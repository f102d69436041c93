//! Recovery from node failure and retries of instances waiting for a node.

use super::placement::{choose_node, commit_placement};
use super::{ActionKind, ActionReason, ClusterView, GlobalAction, Placement};

/// Marks `node` failed and re-homes what ran there. Replicated instances
/// are redeployed (or left pending); a single-instance container is lost.
pub fn handle_node_failure(view: &mut ClusterView, node: &str, tick: u64) -> Vec<GlobalAction> {
    let Some(node_view) = view.nodes.get_mut(node) else {
        return Vec::new();
    };
    if node_view.failed {
        return Vec::new();
    }
    node_view.failed = true;
    let displaced: Vec<String> = view.residents(node).map(|(id, _)| id.clone()).collect();
    let mut actions = Vec::new();
    for id in displaced {
        let entry = view.registry.get_mut(&id).expect("resident is registered");
        view.misconfig_streaks.remove(&id);
        if entry.spec.replicas <= 1 {
            entry.placement = Placement::Lost;
            actions.push(
                GlobalAction::new(ActionKind::MarkLost, tick)
                    .container(&id)
                    .from(node)
                    .reason(ActionReason::NodeFailure),
            );
            continue;
        }
        entry.placement = Placement::Pending;
        match choose_node(view, &id, tick, Some(node)) {
            Some(target) => {
                let mut placed = commit_placement(view, &id, &target, ActionKind::Redeploy, tick);
                placed[0].from_node = Some(node.to_string());
                placed[0].reason = Some(ActionReason::NodeFailure);
                actions.extend(placed);
            }
            None => {
                view.pending.push(id.clone());
                actions.push(
                    GlobalAction::new(ActionKind::Reject, tick)
                        .container(&id)
                        .from(node)
                        .reason(ActionReason::NoFeasibleNode),
                );
            }
        }
    }
    actions
}

/// Tries every pending instance again, in arrival order. Only successes
/// produce actions; the rejection was reported when the instance first
/// failed to place.
pub fn retry_pending(view: &mut ClusterView, tick: u64) -> Vec<GlobalAction> {
    let mut actions = Vec::new();
    for id in view.pending.clone() {
        if let Some(node) = choose_node(view, &id, tick, None) {
            let kind = if view.registry[&id].was_placed {
                ActionKind::Redeploy
            } else {
                ActionKind::Place
            };
            actions.extend(commit_placement(view, &id, &node, kind, tick));
        }
    }
    actions
}

//! Changes to a running container's requests and limits.

use super::placement::choose_node;
use super::{ActionKind, ActionReason, ClusterView, GlobalAction, GrmError};
use crate::model::{validate_spec, ResourceClaim};

/// Answers a request change for a running container, trying in turn: fit
/// it where it is, move lower-priority neighbours away, move the requester.
/// A denial leaves the view untouched.
pub fn apply_request_change(
    view: &mut ClusterView,
    container: &str,
    claims: Vec<ResourceClaim>,
    tick: u64,
) -> Result<Vec<GlobalAction>, GrmError> {
    let entry = view
        .registry
        .get(container)
        .ok_or_else(|| GrmError::UnknownContainer(container.to_string()))?;
    let node = view
        .node_of(container)
        .ok_or_else(|| GrmError::NotRunning(container.to_string()))?
        .to_string();
    let mut wanted = entry.spec.clone();
    wanted.claims = claims.clone();
    let wanted = validate_spec(&wanted).map_err(GrmError::InvalidSpec)?;

    let grant = |at: &str| {
        let mut action = GlobalAction::new(ActionKind::GrantRequestChange, tick)
            .container(container)
            .to(at)
            .reason(ActionReason::RequestChange);
        action.claims = Some(claims.clone());
        action
    };

    let mut work = view.clone();
    work.registry.get_mut(container).expect("registered").spec = wanted.clone();
    if view.fits(&node, &wanted, tick, Some(container)) {
        *view = work;
        return Ok(vec![grant(&node)]);
    }

    // Free room by moving neighbours that reserve what the change needs.
    let ceiling = view.config.criticality_ceiling;
    let mut neighbours: Vec<(bool, i32, u32, String)> = view
        .residents(&node)
        .filter(|(id, _)| id.as_str() != container)
        .filter(|(_, e)| e.spec.migratable || e.spec.criticality < ceiling)
        .filter_map(|(id, e)| {
            let frees: u32 = wanted
                .claims
                .iter()
                .filter(|c| c.is_strict())
                .map(|c| e.spec.reserved(c.resource))
                .sum();
            (frees > 0).then(|| (e.spec.migratable, e.spec.criticality, frees, id.clone()))
        })
        .collect();
    neighbours.sort_by(|a, b| {
        b.0.cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(b.2.cmp(&a.2))
            .then_with(|| a.3.cmp(&b.3))
    });
    let mut moves = Vec::new();
    for (_, _, _, id) in neighbours {
        if work.fits(&node, &wanted, tick, Some(container)) {
            break;
        }
        if let Some(target) = choose_node(&work, &id, tick, Some(&node)) {
            moves.extend(work.migrate(&id, &target, ActionReason::RequestChange, tick));
        }
    }
    if work.fits(&node, &wanted, tick, Some(container)) {
        *view = work;
        moves.push(grant(&node));
        return Ok(moves);
    }

    if wanted.migratable {
        let mut work = view.clone();
        work.registry.get_mut(container).expect("registered").spec = wanted;
        if let Some(target) = choose_node(&work, container, tick, Some(&node)) {
            let mut actions = work.migrate(container, &target, ActionReason::RequestChange, tick);
            actions.push(grant(&target));
            *view = work;
            return Ok(actions);
        }
    }

    let mut deny = GlobalAction::new(ActionKind::DenyRequestChange, tick)
        .container(container)
        .from(&node)
        .reason(ActionReason::NoFeasibleNode);
    deny.claims = Some(claims);
    Ok(vec![deny])
}

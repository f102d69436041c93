//! The local enforcement ladder run while a resource is in strict mode:
//! ask adaptive containers to shed load, throttle the rest after a grace
//! window, and hand the problem to the GRM if neither was enough.

use serde::{Deserialize, Serialize};

use super::{NodeError, NodeRuntimeState};
use crate::model::{ContainerId, ContainerSpec, ResourceKind, Strictness, EPSILON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnforcementKind {
    QosReduceRequest,
    Throttle,
    ReportToGrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QosOutcome {
    Level(usize),
    Refuse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnforcementDetail {
    Reduction { fraction: f64, outcome: QosOutcome },
    TargetLevel { level: u32 },
    Overload { band: u32, threshold: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnforcementAction {
    pub kind: EnforcementKind,
    pub container_id: Option<ContainerId>,
    pub resource: ResourceKind,
    pub tick: u64,
    pub detail: EnforcementDetail,
}

/// The container side of a qos request: the least-reducing level whose scale
/// is at most `current * (1 - reduction)`.
pub fn qos_negotiate(
    spec: &ContainerSpec,
    current_level: usize,
    reduction: f64,
) -> Result<QosOutcome, NodeError> {
    if !spec.adaptive {
        return Err(NodeError::NotAdaptive(spec.id.clone()));
    }
    let target = spec.qos_scale(current_level) * (1.0 - reduction.clamp(0.0, 1.0));
    Ok(spec
        .qos_levels
        .iter()
        .position(|&scale| scale <= target + EPSILON)
        .map_or(QosOutcome::Refuse, QosOutcome::Level))
}

impl NodeRuntimeState {
    fn latched_resources(&self) -> Vec<ResourceKind> {
        self.overload
            .values()
            .filter(|s| s.latched)
            .map(|s| s.resource)
            .collect()
    }

    fn excess_amount(&self, id: &str, resource: ResourceKind) -> f64 {
        let (Some(resident), Some(ladder)) = (self.residents.get(id), self.node.ladder(resource))
        else {
            return 0.0;
        };
        (resident.smoothed(resource) - ladder.amount_of(resident.spec.request(resource))).max(0.0)
    }

    /// Runs the enforcement ladder for this tick. Actions come out grouped:
    /// every qos request, then every throttle, then every GRM report.
    pub fn enforce(&mut self, tick: u64) -> Vec<EnforcementAction> {
        let latched = self.latched_resources();
        let mut qos = Vec::new();
        let mut throttles = Vec::new();
        let mut reports = Vec::new();
        for &resource in &latched {
            qos.extend(self.request_qos(resource, tick));
        }
        for &resource in &latched {
            let (actions, projected_band) = self.throttle(resource, tick);
            throttles.extend(actions);
            if let Some(report) = self.escalate(resource, tick, projected_band) {
                reports.push(report);
            }
        }
        qos.extend(throttles);
        qos.extend(reports);
        qos
    }

    fn request_qos(&mut self, resource: ResourceKind, tick: u64) -> Vec<EnforcementAction> {
        let Some(ladder) = self.node.ladder(resource).cloned() else {
            return Vec::new();
        };
        let threshold = self.overload[&resource].threshold;
        let candidates: Vec<ContainerId> = self
            .residents
            .iter()
            .filter(|(_, r)| {
                r.spec.adaptive
                    && !r.qos_asked.contains_key(&resource)
                    && self.over_request(r, resource)
            })
            .map(|(id, _)| id.clone())
            .collect();
        if candidates.is_empty() {
            return Vec::new();
        }
        let hysteresis = self.config.monitor.hysteresis_for(&ladder);
        let aggregate = self.node_bands[&resource].smoothed();
        let overshoot = (aggregate - ladder.lower_bound(threshold) + hysteresis).max(0.0);
        let total_excess: f64 = candidates
            .iter()
            .map(|id| self.excess_amount(id, resource))
            .sum();
        let share = if total_excess > EPSILON {
            (overshoot / total_excess).min(1.0)
        } else {
            0.0
        };

        let mut actions = Vec::new();
        for id in candidates {
            let excess = self.excess_amount(&id, resource);
            let resident = self.residents.get_mut(&id).expect("candidate is resident");
            let usage = resident.smoothed(resource);
            let fraction = if usage > EPSILON {
                (excess * share / usage).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let outcome = qos_negotiate(&resident.spec, resident.qos_level, fraction)
                .expect("candidates are adaptive");
            if let QosOutcome::Level(level) = outcome {
                resident.qos_level = resident.qos_level.max(level);
            }
            resident.qos_asked.insert(resource, tick);
            actions.push(EnforcementAction {
                kind: EnforcementKind::QosReduceRequest,
                container_id: Some(id),
                resource,
                tick,
                detail: EnforcementDetail::Reduction { fraction, outcome },
            });
        }
        if let Some(state) = self.overload.get_mut(&resource) {
            state.last_local_action = Some(tick);
        }
        actions
    }

    /// Throttles loose containers above their request, lowest criticality and
    /// largest excess first, until the projected aggregate drops below the
    /// threshold. Returns the actions and the projected aggregate band.
    fn throttle(&mut self, resource: ResourceKind, tick: u64) -> (Vec<EnforcementAction>, u32) {
        let Some(ladder) = self.node.ladder(resource).cloned() else {
            return (Vec::new(), 0);
        };
        let state = &self.overload[&resource];
        let threshold = state.threshold;
        let mut projected = self.node_bands[&resource].smoothed();
        let band_of = |amount: f64| ladder.quantize(amount).unwrap_or(0);
        let since = state.since_tick.unwrap_or(tick);
        if tick < since + self.config.grace {
            return (Vec::new(), band_of(projected));
        }
        let grace = self.config.grace;
        let mut candidates: Vec<(i32, f64, ContainerId)> = self
            .residents
            .iter()
            .filter(|(_, r)| {
                let claim_is_loose = r
                    .spec
                    .claim(resource)
                    .is_some_and(|c| c.strictness == Strictness::Loose);
                let out_of_grace = !r.spec.adaptive
                    || r.qos_asked
                        .get(&resource)
                        .is_some_and(|&asked| tick >= asked + grace);
                claim_is_loose
                    && out_of_grace
                    && !r.throttled.contains(&resource)
                    && self.over_request(r, resource)
            })
            .map(|(id, r)| {
                (
                    r.spec.criticality,
                    self.excess_amount(id, resource),
                    id.clone(),
                )
            })
            .collect();
        candidates.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then(b.1.total_cmp(&a.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut actions = Vec::new();
        for (_, excess, id) in candidates {
            if band_of(projected) < threshold {
                break;
            }
            let resident = self.residents.get_mut(&id).expect("candidate is resident");
            resident.throttled.insert(resource);
            projected = (projected - excess).max(0.0);
            actions.push(EnforcementAction {
                kind: EnforcementKind::Throttle,
                container_id: Some(id),
                resource,
                tick,
                detail: EnforcementDetail::TargetLevel {
                    level: resident.spec.request(resource),
                },
            });
        }
        if !actions.is_empty() {
            if let Some(state) = self.overload.get_mut(&resource) {
                state.last_local_action = Some(tick);
            }
        }
        (actions, band_of(projected))
    }

    /// Reports to the GRM once local measures are spent: past the grace
    /// window, nothing new was tried this tick, nobody is still inside
    /// their grace, and both measured and projected usage remain overloaded.
    fn escalate(
        &mut self,
        resource: ResourceKind,
        tick: u64,
        projected_band: u32,
    ) -> Option<EnforcementAction> {
        let ladder = self.node.ladder(resource)?;
        let grace = self.config.grace;
        let state = &self.overload[&resource];
        let since = state.since_tick?;
        if state.escalated || tick < since + grace || state.last_local_action == Some(tick) {
            return None;
        }
        let waiting = self.residents.values().any(|r| {
            r.qos_asked
                .get(&resource)
                .is_some_and(|&asked| tick < asked + grace)
        });
        let measured = ladder
            .quantize(self.last_usage.get(&resource).copied().unwrap_or(0.0))
            .unwrap_or(0);
        let threshold = state.threshold;
        if waiting || measured < threshold || projected_band < threshold {
            return None;
        }
        let band = self.node_band(resource);
        let state = self.overload.get_mut(&resource)?;
        state.escalated = true;
        Some(EnforcementAction {
            kind: EnforcementKind::ReportToGrm,
            container_id: None,
            resource,
            tick,
            detail: EnforcementDetail::Overload { band, threshold },
        })
    }
}

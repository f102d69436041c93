//! How a node splits one shared resource among its residents in a tick.
//!
//! Strict reservations are served first (up to their request), then the
//! remaining capacity is shared proportionally among whatever demand is left,
//! each container being capped by its current budget in levels.

use serde::{Deserialize, Serialize};

use crate::model::{BandLadder, ContainerId, Strictness, EPSILON};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandRequest {
    pub container_id: ContainerId,
    pub strictness: Strictness,
    pub request_levels: u32,
    /// Budget in levels: the limit, or the request while throttled.
    pub cap_levels: u32,
    /// Demand for this tick after the container's qos scale.
    pub demand: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grant {
    pub container_id: ContainerId,
    pub granted_levels: u32,
    pub delivered: f64,
}

/// Levels granted to a container: what its demand spans within its budget,
/// never below the request for a strict claim.
pub fn granted_levels(ladder: &BandLadder, request: &DemandRequest) -> u32 {
    let wanted = ladder
        .levels_spanned(request.demand)
        .min(request.cap_levels);
    match request.strictness {
        Strictness::Strict => wanted.max(request.request_levels),
        Strictness::Loose => wanted,
    }
}

pub fn arbitrate(ladder: &BandLadder, requests: &[DemandRequest]) -> Vec<Grant> {
    let effective: Vec<f64> = requests
        .iter()
        .map(|r| r.demand.max(0.0).min(ladder.amount_of(r.cap_levels)))
        .collect();
    let reserved: Vec<f64> = requests
        .iter()
        .zip(&effective)
        .map(|(r, &e)| match r.strictness {
            Strictness::Strict => e.min(ladder.amount_of(r.request_levels)),
            Strictness::Loose => 0.0,
        })
        .collect();
    let remaining = (ladder.capacity - reserved.iter().sum::<f64>()).max(0.0);
    let extra_total: f64 = effective.iter().zip(&reserved).map(|(e, r)| e - r).sum();
    let share = if extra_total <= remaining + EPSILON {
        1.0
    } else {
        remaining / extra_total
    };
    requests
        .iter()
        .zip(effective.iter().zip(&reserved))
        .map(|(request, (&e, &r))| Grant {
            container_id: request.container_id.clone(),
            granted_levels: granted_levels(ladder, request),
            delivered: r + (e - r) * share,
        })
        .collect()
}

//! Shared vocabulary for the whole crate: resource kinds, band ladders,
//! container and node specifications, and the priority classification that
//! follows from a container's requests and limits.
//!
//! Amounts are resource-native units (MB/s for memory bandwidth, and so on)
//! carried as `f64`; every comparison that could land on a band boundary goes
//! through [`EPSILON`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Comparison tolerance for native-unit amounts.
pub const EPSILON: f64 = 1e-9;

/// Identifier of a node.
pub type NodeId = String;
/// Identifier of a container instance (a replica has its own id).
pub type ContainerId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    CpuTime,
    MemorySpace,
    MemoryBandwidth,
    Cache,
    Interconnect,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 5] = [
        ResourceKind::CpuTime,
        ResourceKind::MemorySpace,
        ResourceKind::MemoryBandwidth,
        ResourceKind::Cache,
        ResourceKind::Interconnect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::CpuTime => "cpu_time",
            ResourceKind::MemorySpace => "memory_space",
            ResourceKind::MemoryBandwidth => "memory_bandwidth",
            ResourceKind::Cache => "cache",
            ResourceKind::Interconnect => "interconnect",
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResourceKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResourceKind::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| ModelError::UnknownResource(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid amount {0}: amounts must be finite and non-negative")]
    InvalidAmount(f64),
    #[error("unknown resource kind `{0}`")]
    UnknownResource(String),
}

/// A node resource's capacity split into `levels` equal allocation levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLadder {
    pub resource: ResourceKind,
    pub capacity: f64,
    pub levels: u32,
}

impl BandLadder {
    pub fn new(resource: ResourceKind, capacity: f64, levels: u32) -> Self {
        Self {
            resource,
            capacity,
            levels,
        }
    }

    pub fn level_width(&self) -> f64 {
        self.capacity / f64::from(self.levels)
    }

    /// Lower boundary of `level` in native units.
    pub fn lower_bound(&self, level: u32) -> f64 {
        f64::from(level) * self.level_width()
    }

    /// Upper boundary of `level`, i.e. the lower boundary of `level + 1`.
    pub fn upper_bound(&self, level: u32) -> f64 {
        f64::from(level + 1) * self.level_width()
    }

    pub fn top_level(&self) -> u32 {
        self.levels.saturating_sub(1)
    }

    /// Maps an amount to its level index: `min(floor(amount / width), L - 1)`.
    ///
    /// Intervals are half-open; an amount on a boundary `b * width` belongs to
    /// level `b`, and anything at or above capacity lands in the top level.
    pub fn quantize(&self, amount: f64) -> Result<u32, ModelError> {
        let amount = check_amount(amount)?;
        let width = self.level_width();
        let mut index = (amount / width).floor();
        if (index + 1.0) * width - amount <= EPSILON {
            index += 1.0;
        }
        Ok((index as u64).min(u64::from(self.top_level())) as u32)
    }

    /// Number of whole levels needed to hold `amount`, capped at `L`.
    pub fn levels_spanned(&self, amount: f64) -> u32 {
        let amount = amount.max(0.0);
        let spanned = ((amount - EPSILON) / self.level_width()).ceil().max(0.0);
        (spanned as u64).min(u64::from(self.levels)) as u32
    }

    /// Native amount represented by `levels` allocation levels.
    pub fn amount_of(&self, levels: u32) -> f64 {
        f64::from(levels) * self.level_width()
    }
}

pub(crate) fn check_amount(amount: f64) -> Result<f64, ModelError> {
    if !amount.is_finite() || amount < -EPSILON {
        return Err(ModelError::InvalidAmount(amount));
    }
    Ok(amount.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// A hard reservation, typically for real-time containers.
    Strict,
    /// Opportunistic use, typically best effort.
    Loose,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceClaim {
    pub resource: ResourceKind,
    pub request_levels: u32,
    pub limit_levels: u32,
    pub strictness: Strictness,
}

impl ResourceClaim {
    pub fn strict(resource: ResourceKind, request_levels: u32, limit_levels: u32) -> Self {
        Self {
            resource,
            request_levels,
            limit_levels,
            strictness: Strictness::Strict,
        }
    }

    pub fn loose(resource: ResourceKind, request_levels: u32, limit_levels: u32) -> Self {
        Self {
            resource,
            request_levels,
            limit_levels,
            strictness: Strictness::Loose,
        }
    }

    pub fn is_strict(&self) -> bool {
        self.strictness == Strictness::Strict
    }

    /// Strict levels this claim reserves on its node.
    pub fn reserved_levels(&self) -> u32 {
        if self.is_strict() {
            self.request_levels
        } else {
            0
        }
    }
}

/// Time-triggered execution parameters, all in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtParams {
    pub period: u64,
    pub runtime: u64,
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub id: ContainerId,
    pub claims: Vec<ResourceClaim>,
    pub adaptive: bool,
    /// Demand scale factors, strictly decreasing from exactly 1.0.
    pub qos_levels: Vec<f64>,
    pub migratable: bool,
    pub criticality: i32,
    pub replicas: u32,
    pub tt_params: Option<TtParams>,
}

impl ContainerSpec {
    /// A non-adaptive, non-migratable single-replica container.
    pub fn new(id: impl Into<ContainerId>, claims: Vec<ResourceClaim>) -> Self {
        Self {
            id: id.into(),
            claims,
            adaptive: false,
            qos_levels: vec![1.0],
            migratable: false,
            criticality: 0,
            replicas: 1,
            tt_params: None,
        }
    }

    pub fn claim(&self, resource: ResourceKind) -> Option<&ResourceClaim> {
        self.claims.iter().find(|c| c.resource == resource)
    }

    pub fn request(&self, resource: ResourceKind) -> u32 {
        self.claim(resource).map_or(0, |c| c.request_levels)
    }

    pub fn limit(&self, resource: ResourceKind) -> u32 {
        self.claim(resource).map_or(0, |c| c.limit_levels)
    }

    pub fn reserved(&self, resource: ResourceKind) -> u32 {
        self.claim(resource)
            .map_or(0, ResourceClaim::reserved_levels)
    }

    pub fn has_strict_claim(&self) -> bool {
        self.claims.iter().any(ResourceClaim::is_strict)
    }

    pub fn qos_scale(&self, level: usize) -> f64 {
        self.qos_levels.get(level).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedClass {
    General,
    TimeTriggered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtConfig {
    pub slot_length: u64,
    pub hyperperiod: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: NodeId,
    pub ladders: Vec<BandLadder>,
    pub tags: BTreeSet<String>,
    pub static_priority: f64,
    pub sched_classes: BTreeSet<SchedClass>,
    pub tt_config: Option<TtConfig>,
}

impl NodeSpec {
    /// A general-purpose node with the given ladders.
    pub fn new(id: impl Into<NodeId>, ladders: Vec<BandLadder>) -> Self {
        Self {
            id: id.into(),
            ladders,
            tags: BTreeSet::new(),
            static_priority: 0.0,
            sched_classes: BTreeSet::from([SchedClass::General]),
            tt_config: None,
        }
    }

    pub fn with_time_triggered(mut self, slot_length: u64, hyperperiod: u64) -> Self {
        self.sched_classes.insert(SchedClass::TimeTriggered);
        self.tt_config = Some(TtConfig {
            slot_length,
            hyperperiod,
        });
        self
    }

    pub fn ladder(&self, resource: ResourceKind) -> Option<&BandLadder> {
        self.ladders.iter().find(|l| l.resource == resource)
    }

    /// Level count for `resource`; zero when the node has no such ladder.
    pub fn levels(&self, resource: ResourceKind) -> u32 {
        self.ladder(resource).map_or(0, |l| l.levels)
    }

    pub fn supports_tt(&self) -> bool {
        self.sched_classes.contains(&SchedClass::TimeTriggered)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorityClass {
    Guaranteed,
    Burstable,
    BestEffort,
}

/// Classifies a container purely from its requests and limits.
pub fn priority_class(spec: &ContainerSpec) -> PriorityClass {
    if spec.claims.iter().all(|c| c.request_levels == 0) {
        PriorityClass::BestEffort
    } else if spec
        .claims
        .iter()
        .all(|c| c.request_levels == c.limit_levels && c.request_levels > 0)
    {
        PriorityClass::Guaranteed
    } else {
        PriorityClass::Burstable
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpecError {
    #[error("container `{container}`: {resource} limit {limit} is below request {request}")]
    LimitBelowRequest {
        container: ContainerId,
        resource: ResourceKind,
        request: u32,
        limit: u32,
    },
    #[error("container `{container}`: bad qos ladder: {reason}")]
    BadQosLadder {
        container: ContainerId,
        reason: String,
    },
    #[error("container `{container}`: bad time-triggered parameters: {reason}")]
    BadTtParams {
        container: ContainerId,
        reason: String,
    },
    #[error("container `{container}`: resource {resource} claimed more than once")]
    DuplicateResourceClaim {
        container: ContainerId,
        resource: ResourceKind,
    },
    #[error("container `{container}`: replicas must be at least 1")]
    ZeroReplicas { container: ContainerId },
    #[error("container id must not be empty")]
    EmptyId,
}

/// Checks every container invariant, reporting each violation separately.
pub fn validate_spec(spec: &ContainerSpec) -> Result<ContainerSpec, Vec<SpecError>> {
    let mut errors = Vec::new();
    let container = spec.id.clone();
    if spec.id.is_empty() {
        errors.push(SpecError::EmptyId);
    }

    let mut seen = BTreeSet::new();
    for claim in &spec.claims {
        if !seen.insert(claim.resource) {
            errors.push(SpecError::DuplicateResourceClaim {
                container: container.clone(),
                resource: claim.resource,
            });
        }
        if claim.limit_levels < claim.request_levels {
            errors.push(SpecError::LimitBelowRequest {
                container: container.clone(),
                resource: claim.resource,
                request: claim.request_levels,
                limit: claim.limit_levels,
            });
        }
    }

    if let Some(reason) = qos_ladder_problem(spec) {
        errors.push(SpecError::BadQosLadder {
            container: container.clone(),
            reason,
        });
    }

    if let Some(tt) = spec.tt_params {
        let reason = if tt.period == 0 {
            Some("period must be positive".to_string())
        } else if tt.runtime == 0 {
            Some("runtime must be positive".to_string())
        } else if tt.runtime > tt.deadline {
            Some(format!(
                "runtime {} exceeds deadline {}",
                tt.runtime, tt.deadline
            ))
        } else if tt.deadline > tt.period {
            Some(format!(
                "deadline {} exceeds period {}",
                tt.deadline, tt.period
            ))
        } else {
            None
        };
        if let Some(reason) = reason {
            errors.push(SpecError::BadTtParams {
                container: container.clone(),
                reason,
            });
        }
    }

    if spec.replicas == 0 {
        errors.push(SpecError::ZeroReplicas { container });
    }

    if errors.is_empty() {
        Ok(spec.clone())
    } else {
        Err(errors)
    }
}

fn qos_ladder_problem(spec: &ContainerSpec) -> Option<String> {
    let levels = &spec.qos_levels;
    match levels.first() {
        None => return Some("qos_levels must not be empty".into()),
        Some(first) if *first != 1.0 => {
            return Some(format!("first qos level must be exactly 1.0, got {first}"))
        }
        _ => {}
    }
    if !spec.adaptive && levels.len() != 1 {
        return Some("non-adaptive containers must have qos_levels = [1.0]".into());
    }
    if let Some(bad) = levels.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
        return Some(format!("qos level {bad} is outside (0, 1]"));
    }
    if levels.windows(2).any(|w| w[1] >= w[0]) {
        return Some("qos levels must be strictly decreasing".into());
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeSpecError {
    #[error("node id must not be empty")]
    EmptyId,
    #[error("node `{node}`: ladder {resource} must have positive capacity and at least one level")]
    BadLadder {
        node: NodeId,
        resource: ResourceKind,
    },
    #[error("node `{node}`: resource {resource} has more than one ladder")]
    DuplicateLadder {
        node: NodeId,
        resource: ResourceKind,
    },
    #[error("node `{node}`: time_triggered class and tt_config must be given together")]
    TtConfigMismatch { node: NodeId },
    #[error("node `{node}`: hyperperiod must be a positive multiple of slot_length")]
    BadHyperperiod { node: NodeId },
    #[error("node `{node}`: static priority must be finite and non-negative")]
    BadStaticPriority { node: NodeId },
}

pub fn validate_node(node: &NodeSpec) -> Result<NodeSpec, Vec<NodeSpecError>> {
    let mut errors = Vec::new();
    let id = node.id.clone();
    if id.is_empty() {
        errors.push(NodeSpecError::EmptyId);
    }
    let mut seen = BTreeSet::new();
    for ladder in &node.ladders {
        if !seen.insert(ladder.resource) {
            errors.push(NodeSpecError::DuplicateLadder {
                node: id.clone(),
                resource: ladder.resource,
            });
        }
        if !(ladder.capacity.is_finite() && ladder.capacity > 0.0) || ladder.levels == 0 {
            errors.push(NodeSpecError::BadLadder {
                node: id.clone(),
                resource: ladder.resource,
            });
        }
    }
    match (node.supports_tt(), node.tt_config) {
        (true, Some(cfg)) => {
            if cfg.slot_length == 0
                || cfg.hyperperiod == 0
                || cfg.hyperperiod % cfg.slot_length != 0
            {
                errors.push(NodeSpecError::BadHyperperiod { node: id.clone() });
            }
        }
        (false, None) => {}
        _ => errors.push(NodeSpecError::TtConfigMismatch { node: id.clone() }),
    }
    if !(node.static_priority.is_finite() && node.static_priority >= 0.0) {
        errors.push(NodeSpecError::BadStaticPriority { node: id });
    }
    if errors.is_empty() {
        Ok(node.clone())
    } else {
        Err(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mb(capacity: f64, levels: u32) -> BandLadder {
        BandLadder::new(ResourceKind::MemoryBandwidth, capacity, levels)
    }

    #[test]
    fn quantize_examples() {
        let ladder = mb(400.0, 4);
        assert_eq!(ladder.quantize(0.0).unwrap(), 0);
        assert_eq!(ladder.quantize(400.0).unwrap(), 3);
        assert_eq!(ladder.quantize(215.0).unwrap(), 2);
        assert_eq!(ladder.quantize(1e6).unwrap(), 3);
        assert!(matches!(
            ladder.quantize(-1.0),
            Err(ModelError::InvalidAmount(_))
        ));
        assert!(ladder.quantize(f64::NAN).is_err());
    }

    #[test]
    fn quantize_boundary_scan() {
        // Integer oracle: for whole-unit amounts on a 400/4 ladder the level is
        // plain integer division, clamped.
        let ladder = mb(400.0, 4);
        for boundary in [0u32, 100, 200, 300, 400] {
            for amount in boundary.saturating_sub(2)..=boundary + 2 {
                let expected = (amount / 100).min(3);
                assert_eq!(
                    ladder.quantize(f64::from(amount)).unwrap(),
                    expected,
                    "{amount}"
                );
            }
        }
    }

    #[test]
    fn boundaries_belong_to_the_upper_level() {
        let ladder = mb(1.0, 10);
        for b in 0..10 {
            assert_eq!(ladder.quantize(ladder.lower_bound(b)).unwrap(), b);
        }
    }

    #[test]
    fn levels_spanned_rounds_up() {
        let ladder = mb(400.0, 4);
        assert_eq!(ladder.levels_spanned(0.0), 0);
        assert_eq!(ladder.levels_spanned(1.0), 1);
        assert_eq!(ladder.levels_spanned(100.0), 1);
        assert_eq!(ladder.levels_spanned(215.0), 3);
        assert_eq!(ladder.levels_spanned(4000.0), 4);
    }

    #[test]
    fn resource_kind_parses_its_own_names() {
        for r in ResourceKind::ALL {
            assert_eq!(r.as_str().parse::<ResourceKind>().unwrap(), r);
        }
        assert!("gpu".parse::<ResourceKind>().is_err());
    }

    fn spec_with(claims: Vec<ResourceClaim>) -> ContainerSpec {
        ContainerSpec::new("c", claims)
    }

    #[test]
    fn priority_class_examples() {
        let guaranteed = spec_with(vec![
            ResourceClaim::strict(ResourceKind::MemoryBandwidth, 2, 2),
            ResourceClaim::loose(ResourceKind::Cache, 2, 2),
        ]);
        assert_eq!(priority_class(&guaranteed), PriorityClass::Guaranteed);

        let burstable = spec_with(vec![
            ResourceClaim::strict(ResourceKind::MemoryBandwidth, 2, 2),
            ResourceClaim::loose(ResourceKind::Cache, 1, 3),
        ]);
        assert_eq!(priority_class(&burstable), PriorityClass::Burstable);

        let best_effort = spec_with(vec![ResourceClaim::loose(ResourceKind::Cache, 0, 3)]);
        assert_eq!(priority_class(&best_effort), PriorityClass::BestEffort);
        assert_eq!(
            priority_class(&spec_with(vec![])),
            PriorityClass::BestEffort
        );
    }

    #[test]
    fn validate_accepts_well_formed_spec() {
        let mut spec = spec_with(vec![ResourceClaim::strict(
            ResourceKind::MemoryBandwidth,
            1,
            2,
        )]);
        spec.adaptive = true;
        spec.qos_levels = vec![1.0, 0.6, 0.3];
        spec.tt_params = Some(TtParams {
            period: 10,
            runtime: 2,
            deadline: 8,
        });
        assert_eq!(validate_spec(&spec).unwrap(), spec);
    }

    #[test]
    fn validate_reports_every_violation() {
        let mut spec = spec_with(vec![
            ResourceClaim::loose(ResourceKind::MemoryBandwidth, 3, 1),
            ResourceClaim::loose(ResourceKind::MemoryBandwidth, 1, 1),
        ]);
        spec.tt_params = Some(TtParams {
            period: 10,
            runtime: 5,
            deadline: 3,
        });
        spec.qos_levels = vec![1.0, 0.5];
        let errors = validate_spec(&spec).unwrap_err();
        assert!(errors.iter().any(|e| matches!(
            e,
            SpecError::LimitBelowRequest {
                request: 3,
                limit: 1,
                ..
            }
        )));
        assert!(errors
            .iter()
            .any(|e| matches!(e, SpecError::DuplicateResourceClaim { .. })));
        assert!(errors
            .iter()
            .any(|e| matches!(e, SpecError::BadTtParams { .. })));
        assert!(errors
            .iter()
            .any(|e| matches!(e, SpecError::BadQosLadder { .. })));
        assert_eq!(errors.len(), 4);
    }

    #[test]
    fn qos_ladder_rules() {
        let mut spec = spec_with(vec![]);
        spec.adaptive = true;
        for (levels, ok) in [
            (vec![1.0], true),
            (vec![1.0, 0.5, 0.25], true),
            (vec![0.9, 0.5], false),
            (vec![1.0, 0.5, 0.5], false),
            (vec![1.0, 0.0], false),
            (vec![], false),
        ] {
            spec.qos_levels = levels.clone();
            assert_eq!(validate_spec(&spec).is_ok(), ok, "{levels:?}");
        }
    }

    #[test]
    fn node_validation() {
        let node = NodeSpec::new("n1", vec![mb(400.0, 4)]).with_time_triggered(2, 20);
        assert!(validate_node(&node).is_ok());

        let mut bad = NodeSpec::new("n1", vec![mb(400.0, 0), mb(100.0, 2)]);
        bad.sched_classes.insert(SchedClass::TimeTriggered);
        let errors = validate_node(&bad).unwrap_err();
        assert_eq!(errors.len(), 3);

        let odd = NodeSpec::new("n2", vec![mb(400.0, 4)]).with_time_triggered(3, 20);
        assert_eq!(
            validate_node(&odd).unwrap_err(),
            vec![NodeSpecError::BadHyperperiod { node: "n2".into() }]
        );
    }

    proptest! {
        #[test]
        fn quantize_is_monotone(cap in 1.0f64..1e4, levels in 1u32..16, a in 0.0f64..2e4, b in 0.0f64..2e4) {
            let ladder = mb(cap, levels);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(ladder.quantize(lo).unwrap() <= ladder.quantize(hi).unwrap());
        }

        #[test]
        fn priority_class_ignores_strictness_and_adaptivity(
            reqs in proptest::collection::vec((0u32..4, 0u32..3, any::<bool>()), 0..5),
            adaptive in any::<bool>(),
        ) {
            let claims: Vec<_> = reqs
                .iter()
                .zip(ResourceKind::ALL)
                .map(|(&(req, extra, strict), r)| {
                    if strict { ResourceClaim::strict(r, req, req + extra) } else { ResourceClaim::loose(r, req, req + extra) }
                })
                .collect();
            let spec = spec_with(claims.clone());
            let mut flipped = spec.clone();
            flipped.adaptive = adaptive;
            flipped.qos_levels = if adaptive { vec![1.0, 0.5] } else { vec![1.0] };
            for c in &mut flipped.claims {
                c.strictness = if c.is_strict() { Strictness::Loose } else { Strictness::Strict };
            }
            prop_assert_eq!(priority_class(&spec), priority_class(&flipped));
        }

        #[test]
        fn validate_spec_is_idempotent(req in 0u32..5, extra in 0u32..5, crit in -3i32..3) {
            let mut spec = spec_with(vec![ResourceClaim::loose(ResourceKind::Cache, req, req + extra)]);
            spec.criticality = crit;
            let once = validate_spec(&spec).unwrap();
            prop_assert_eq!(validate_spec(&once).unwrap(), once);
        }
    }

    #[test]
    fn quantize_interior_points_exhaustive() {
        for levels in 1u32..=6 {
            let ladder = mb(f64::from(levels) * 10.0, levels);
            let width = ladder.level_width();
            for k in 0..levels {
                for eps in [1e-6, 0.25, 0.5, 0.75, width - 1e-6] {
                    let amount = width * f64::from(k) + eps;
                    assert_eq!(ladder.quantize(amount).unwrap(), k);
                }
            }
        }
    }
}

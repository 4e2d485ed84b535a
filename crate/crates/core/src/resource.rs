//! Resource and partition registry with contention-checked allocation.
//!
//! This is the single-writer state behind the resource service. Callers wrap
//! it in a lock; every mutating method bumps [`ResourceRegistry::version`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Availability, Partition, Resource, ResourceKind};
use crate::partition::{self, PartitionError};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    pub session_id: String,
    pub partition_id: String,
    pub resource_ids: BTreeSet<String>,
    pub allocated_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("resource {0} already registered with a different definition")]
    ConflictingDefinition(String),
    #[error("invalid resource: {0}")]
    InvalidResource(String),
    #[error("unknown resources {0:?}")]
    UnknownResource(Vec<String>),
    #[error("unknown child partitions {0:?}")]
    UnknownChild(Vec<String>),
    #[error("partition graph would contain a cycle through {0}")]
    CycleDetected(String),
    #[error("partition {child} already belongs to {parent}")]
    ForestViolation { child: String, parent: String },
    #[error("unknown partition {0}")]
    UnknownPartition(String),
    #[error("session {0} already holds an allocation")]
    SessionHasAllocation(String),
    #[error("resources unavailable: {0:?}")]
    ResourceUnavailable(Vec<String>),
    #[error("resources {ids:?} held by session {holder}")]
    ContentionConflict { ids: Vec<String>, holder: String },
    #[error("session {0} holds no allocation")]
    NoSuchAllocation(String),
    #[error("malformed filter: {0}")]
    MalformedFilter(String),
}

impl ResourceError {
    pub fn code(&self) -> &'static str {
        match self {
            ResourceError::ConflictingDefinition(_) => "ConflictingDefinition",
            ResourceError::InvalidResource(_) => "InvalidResource",
            ResourceError::UnknownResource(_) => "UnknownResource",
            ResourceError::UnknownChild(_) => "UnknownChild",
            ResourceError::CycleDetected(_) => "CycleDetected",
            ResourceError::ForestViolation { .. } => "ForestViolation",
            ResourceError::UnknownPartition(_) => "UnknownPartition",
            ResourceError::SessionHasAllocation(_) => "SessionHasAllocation",
            ResourceError::ResourceUnavailable(_) => "ResourceUnavailable",
            ResourceError::ContentionConflict { .. } => "ContentionConflict",
            ResourceError::NoSuchAllocation(_) => "NoSuchAllocation",
            ResourceError::MalformedFilter(_) => "MalformedFilter",
        }
    }

    /// Resource or partition ids the error refers to.
    pub fn ids(&self) -> Vec<String> {
        match self {
            ResourceError::UnknownResource(ids)
            | ResourceError::UnknownChild(ids)
            | ResourceError::ResourceUnavailable(ids)
            | ResourceError::ContentionConflict { ids, .. } => ids.clone(),
            ResourceError::ConflictingDefinition(id)
            | ResourceError::CycleDetected(id)
            | ResourceError::UnknownPartition(id) => vec![id.clone()],
            ResourceError::ForestViolation { child, .. } => vec![child.clone()],
            _ => Vec::new(),
        }
    }

    pub fn holder(&self) -> Option<&str> {
        match self {
            ResourceError::ContentionConflict { holder, .. } => Some(holder),
            _ => None,
        }
    }
}

impl From<PartitionError> for ResourceError {
    fn from(e: PartitionError) -> Self {
        match e {
            PartitionError::CycleDetected(id) => ResourceError::CycleDetected(id),
            PartitionError::UnknownPartition(id) => ResourceError::UnknownChild(vec![id]),
        }
    }
}

/// Conjunctive predicate over resources. An empty filter selects everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ResourceKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub availability: Option<Availability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusive: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id_prefix: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl ResourceFilter {
    pub fn validate(&self) -> Result<(), ResourceError> {
        if self.attributes.keys().any(|k| k.is_empty()) {
            return Err(ResourceError::MalformedFilter("empty attribute name".into()));
        }
        Ok(())
    }

    pub fn matches(&self, r: &Resource) -> bool {
        self.kind.is_none_or(|k| r.kind == k)
            && self.availability.is_none_or(|a| r.availability == a)
            && self.exclusive.is_none_or(|e| r.exclusive == e)
            && self.id_prefix.as_deref().is_none_or(|p| r.id.starts_with(p))
            && self
                .attributes
                .iter()
                .all(|(k, v)| r.attributes.get(k) == Some(v))
    }
}

/// `kind=hardware,availability=available,exclusive=true,id=prefix,attr.role=readout`
impl FromStr for ResourceFilter {
    type Err = ResourceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut f = ResourceFilter::default();
        let bad = |m: String| ResourceError::MalformedFilter(m);
        for term in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (key, value) = term
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {term:?}")))?;
            let parse_enum = |v: &str| serde_json::Value::String(v.to_string());
            match key {
                "kind" => {
                    f.kind = Some(
                        serde_json::from_value(parse_enum(value))
                            .map_err(|_| bad(format!("unknown kind {value:?}")))?,
                    )
                }
                "availability" => {
                    f.availability = Some(
                        serde_json::from_value(parse_enum(value))
                            .map_err(|_| bad(format!("unknown availability {value:?}")))?,
                    )
                }
                "exclusive" => {
                    f.exclusive = Some(
                        value
                            .parse()
                            .map_err(|_| bad(format!("exclusive must be true/false, got {value:?}")))?,
                    )
                }
                "id" => f.id_prefix = Some(value.to_string()),
                _ => match key.strip_prefix("attr.") {
                    Some(name) if !name.is_empty() => {
                        f.attributes.insert(name.to_string(), value.to_string());
                    }
                    _ => return Err(bad(format!("unknown filter key {key:?}"))),
                },
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub id: String,
    pub reachable: bool,
    pub availability: Availability,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scanned_at: Timestamp,
    pub entries: Vec<ScanEntry>,
}

impl ScanReport {
    pub fn unreachable(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .filter(|e| !e.reachable)
            .map(|e| e.id.clone())
            .collect()
    }

    pub fn availability_map(&self) -> BTreeMap<String, Availability> {
        self.entries
            .iter()
            .map(|e| (e.id.clone(), e.availability))
            .collect()
    }
}

#[derive(Debug, Default)]
pub struct ResourceRegistry {
    resources: BTreeMap<String, Resource>,
    partitions: BTreeMap<String, Partition>,
    allocations: BTreeMap<String, Allocation>,
    // exclusive resource id -> holding session
    holders: HashMap<String, String>,
    // result of the most recent probe, for resources currently held
    last_probe: HashMap<String, bool>,
    version: u64,
}

impl ResourceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn resource(&self, id: &str) -> Option<&Resource> {
        self.resources.get(id)
    }

    pub fn partition(&self, id: &str) -> Option<&Partition> {
        self.partitions.get(id)
    }

    pub fn allocation(&self, session_id: &str) -> Option<&Allocation> {
        self.allocations.get(session_id)
    }

    pub fn allocations(&self) -> impl Iterator<Item = &Allocation> {
        self.allocations.values()
    }

    pub fn len(&self) -> usize {
        self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }

    pub fn register_resource(&mut self, res: Resource) -> Result<String, ResourceError> {
        if res.id.is_empty() {
            return Err(ResourceError::InvalidResource("empty id".into()));
        }
        if res.uri.is_empty() {
            return Err(ResourceError::InvalidResource(format!("{}: empty uri", res.id)));
        }
        match self.resources.get_mut(&res.id) {
            Some(existing) => {
                if existing.uri != res.uri
                    || existing.kind != res.kind
                    || existing.exclusive != res.exclusive
                {
                    return Err(ResourceError::ConflictingDefinition(res.id));
                }
                if existing.attributes != res.attributes {
                    existing.attributes = res.attributes;
                    self.version += 1;
                }
                Ok(existing.id.clone())
            }
            None => {
                let id = res.id.clone();
                self.resources.insert(
                    id.clone(),
                    Resource {
                        availability: Availability::Available,
                        last_scanned: None,
                        ..res
                    },
                );
                self.version += 1;
                Ok(id)
            }
        }
    }

    pub fn define_partition(&mut self, mut p: Partition) -> Result<String, ResourceError> {
        let unknown: Vec<_> = p
            .resource_ids
            .iter()
            .filter(|r| !self.resources.contains_key(*r))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(ResourceError::UnknownResource(unknown));
        }
        let missing: Vec<_> = p
            .children
            .iter()
            .filter(|c| !self.partitions.contains_key(*c))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(ResourceError::UnknownChild(missing));
        }
        for child in &p.children {
            if partition::would_cycle(&p.id, child, &self.partitions) {
                return Err(ResourceError::CycleDetected(child.clone()));
            }
            if let Some(parent) = &self.partitions[child].parent {
                if parent != &p.id {
                    return Err(ResourceError::ForestViolation {
                        child: child.clone(),
                        parent: parent.clone(),
                    });
                }
            }
        }
        // Parent links are derived, never taken from the caller.
        p.parent = self.partitions.get(&p.id).and_then(|old| old.parent.clone());
        let dropped: Vec<String> = self
            .partitions
            .get(&p.id)
            .map(|old| old.children.iter().filter(|c| !p.children.contains(c)).cloned().collect())
            .unwrap_or_default();
        for d in dropped {
            if let Some(c) = self.partitions.get_mut(&d) {
                c.parent = None;
            }
        }
        for child in &p.children {
            if let Some(c) = self.partitions.get_mut(child) {
                c.parent = Some(p.id.clone());
            }
        }
        let id = p.id.clone();
        self.partitions.insert(id.clone(), p);
        self.version += 1;
        Ok(id)
    }

    pub fn effective_resources(&self, partition_id: &str) -> Result<BTreeSet<String>, ResourceError> {
        let p = self
            .partitions
            .get(partition_id)
            .ok_or_else(|| ResourceError::UnknownPartition(partition_id.to_string()))?;
        Ok(partition::effective_resources(p, &self.partitions)?)
    }

    /// The partition subtree rooted at `partition_id` (pre-order) and every
    /// resource in its effective set.
    pub fn describe(&self, partition_id: &str) -> Result<(Vec<Partition>, Vec<Resource>), ResourceError> {
        let root = self
            .partitions
            .get(partition_id)
            .ok_or_else(|| ResourceError::UnknownPartition(partition_id.to_string()))?;
        let parts: Vec<Partition> = partition::subtree(root, &self.partitions)?
            .into_iter()
            .cloned()
            .collect();
        let resources = self
            .effective_resources(partition_id)?
            .into_iter()
            .filter_map(|id| self.resources.get(&id).cloned())
            .collect();
        Ok((parts, resources))
    }

    pub fn allocate(
        &mut self,
        partition_id: &str,
        session_id: &str,
        now: Timestamp,
    ) -> Result<Allocation, ResourceError> {
        let effective = self.effective_resources(partition_id)?;
        if self.allocations.contains_key(session_id) {
            return Err(ResourceError::SessionHasAllocation(session_id.to_string()));
        }
        let unreachable: Vec<String> = effective
            .iter()
            .filter(|id| {
                self.resources
                    .get(*id)
                    .is_some_and(|r| r.availability == Availability::Unreachable)
            })
            .cloned()
            .collect();
        if !unreachable.is_empty() {
            return Err(ResourceError::ResourceUnavailable(unreachable));
        }
        let mut conflicts: Vec<(String, String)> = effective
            .iter()
            .filter_map(|id| self.holders.get(id).map(|h| (id.clone(), h.clone())))
            .collect();
        if !conflicts.is_empty() {
            conflicts.sort();
            let holder = conflicts[0].1.clone();
            return Err(ResourceError::ContentionConflict {
                ids: conflicts.into_iter().map(|(id, _)| id).collect(),
                holder,
            });
        }
        for id in &effective {
            if let Some(r) = self.resources.get_mut(id) {
                if r.exclusive {
                    r.availability = Availability::Allocated;
                    self.holders.insert(id.clone(), session_id.to_string());
                }
            }
        }
        let alloc = Allocation {
            session_id: session_id.to_string(),
            partition_id: partition_id.to_string(),
            resource_ids: effective,
            allocated_at: now,
        };
        self.allocations.insert(session_id.to_string(), alloc.clone());
        self.version += 1;
        Ok(alloc)
    }

    pub fn release(&mut self, session_id: &str) -> Result<Allocation, ResourceError> {
        let alloc = self
            .allocations
            .remove(session_id)
            .ok_or_else(|| ResourceError::NoSuchAllocation(session_id.to_string()))?;
        for id in &alloc.resource_ids {
            if self.holders.get(id).map(String::as_str) == Some(session_id) {
                self.holders.remove(id);
                let reachable = self.last_probe.remove(id).unwrap_or(true);
                if let Some(r) = self.resources.get_mut(id) {
                    r.availability = if reachable {
                        Availability::Available
                    } else {
                        Availability::Unreachable
                    };
                }
            }
        }
        self.version += 1;
        Ok(alloc)
    }

    /// (id, uri) of every registered resource, for probing.
    pub fn scan_targets(&self) -> Vec<(String, String)> {
        self.resources
            .values()
            .map(|r| (r.id.clone(), r.uri.clone()))
            .collect()
    }

    /// Folds probe results in. Held resources stay `Allocated` whatever the
    /// probe said; the probe result applies once they are released.
    pub fn apply_scan(&mut self, probes: &[(String, bool)], now: Timestamp) -> ScanReport {
        let mut entries = Vec::with_capacity(probes.len());
        for (id, reachable) in probes {
            let Some(r) = self.resources.get_mut(id) else {
                continue;
            };
            r.last_scanned = Some(now);
            if self.holders.contains_key(id) {
                self.last_probe.insert(id.clone(), *reachable);
                r.availability = Availability::Allocated;
            } else {
                r.availability = if *reachable {
                    Availability::Available
                } else {
                    Availability::Unreachable
                };
            }
            entries.push(ScanEntry {
                id: id.clone(),
                reachable: *reachable,
                availability: r.availability,
            });
        }
        self.version += 1;
        ScanReport {
            scanned_at: now,
            entries,
        }
    }

    pub fn query(&self, filter: &ResourceFilter) -> Result<Vec<Resource>, ResourceError> {
        filter.validate()?;
        Ok(self
            .resources
            .values()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect())
    }

    /// Whether every exclusive resource sits in at most one live allocation.
    pub fn exclusivity_holds(&self) -> bool {
        let mut seen = HashMap::new();
        for a in self.allocations.values() {
            for id in &a.resource_ids {
                if self.resources.get(id).is_some_and(|r| r.exclusive)
                    && seen.insert(id.clone(), a.session_id.clone()).is_some()
                {
                    return false;
                }
            }
        }
        true
    }
}

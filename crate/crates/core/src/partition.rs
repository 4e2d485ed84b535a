//! Partition forest traversal.

use std::collections::{BTreeSet, HashMap, HashSet};

use thiserror::Error;

use crate::model::Partition;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PartitionError {
    #[error("partition graph has a cycle through {0}")]
    CycleDetected(String),
    #[error("unknown partition {0}")]
    UnknownPartition(String),
}

/// Lookup of stored partitions by id.
pub trait PartitionSource {
    fn partition(&self, id: &str) -> Option<&Partition>;
}

impl PartitionSource for HashMap<String, Partition> {
    fn partition(&self, id: &str) -> Option<&Partition> {
        self.get(id)
    }
}

impl PartitionSource for std::collections::BTreeMap<String, Partition> {
    fn partition(&self, id: &str) -> Option<&Partition> {
        self.get(id)
    }
}

/// Own resources of `root` united with every descendant's.
pub fn effective_resources<S: PartitionSource + ?Sized>(
    root: &Partition,
    store: &S,
) -> Result<BTreeSet<String>, PartitionError> {
    let mut out = BTreeSet::new();
    let mut on_path = HashSet::new();
    let mut done = HashSet::new();
    collect(root, store, &mut on_path, &mut done, &mut out)?;
    Ok(out)
}

fn collect<S: PartitionSource + ?Sized>(
    p: &Partition,
    store: &S,
    on_path: &mut HashSet<String>,
    done: &mut HashSet<String>,
    out: &mut BTreeSet<String>,
) -> Result<(), PartitionError> {
    if !on_path.insert(p.id.clone()) {
        return Err(PartitionError::CycleDetected(p.id.clone()));
    }
    out.extend(p.resource_ids.iter().cloned());
    for child_id in &p.children {
        if done.contains(child_id) {
            continue;
        }
        let child = store
            .partition(child_id)
            .ok_or_else(|| PartitionError::UnknownPartition(child_id.clone()))?;
        collect(child, store, on_path, done, out)?;
    }
    on_path.remove(&p.id);
    done.insert(p.id.clone());
    Ok(())
}

/// Every partition reachable from `root`, in pre-order, root first.
pub fn subtree<'a, S: PartitionSource + ?Sized>(
    root: &'a Partition,
    store: &'a S,
) -> Result<Vec<&'a Partition>, PartitionError> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    let mut stack = vec![(root, 0usize)];
    let mut on_path: Vec<&str> = Vec::new();
    // Iterative DFS; `on_path` mirrors the current root-to-node chain.
    while let Some((p, depth)) = stack.pop() {
        on_path.truncate(depth);
        if on_path.contains(&p.id.as_str()) {
            return Err(PartitionError::CycleDetected(p.id.clone()));
        }
        on_path.push(&p.id);
        if !seen.insert(p.id.as_str()) {
            continue;
        }
        order.push(p);
        for child_id in p.children.iter().rev() {
            let child = store
                .partition(child_id)
                .ok_or_else(|| PartitionError::UnknownPartition(child_id.clone()))?;
            stack.push((child, depth + 1));
        }
    }
    Ok(order)
}

/// Whether making `child` a child of `parent` would close a cycle.
pub fn would_cycle<S: PartitionSource + ?Sized>(parent: &str, child: &str, store: &S) -> bool {
    if parent == child {
        return true;
    }
    let mut stack = vec![child.to_string()];
    let mut seen = HashSet::new();
    while let Some(id) = stack.pop() {
        if id == parent {
            return true;
        }
        if !seen.insert(id.clone()) {
            continue;
        }
        if let Some(p) = store.partition(&id) {
            stack.extend(p.children.iter().cloned());
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn store(parts: &[Partition]) -> HashMap<String, Partition> {
        parts.iter().map(|p| (p.id.clone(), p.clone())).collect()
    }

    #[test]
    fn leaf_partition() {
        let p = Partition::new("p", ["r1", "r2"]);
        let s = store(&[p.clone()]);
        assert_eq!(
            effective_resources(&p, &s).unwrap(),
            BTreeSet::from(["r1".into(), "r2".into()])
        );
    }

    #[test]
    fn parent_unions_children() {
        let a = Partition::new("a", ["r1"]);
        let b = Partition::new("b", ["r2", "r3"]);
        let top = Partition::new("top", Vec::<String>::new()).with_children(["a", "b"]);
        let s = store(&[a, b, top.clone()]);
        let got: Vec<_> = effective_resources(&top, &s).unwrap().into_iter().collect();
        assert_eq!(got, ["r1", "r2", "r3"]);
    }

    #[test]
    fn overlapping_three_levels() {
        let c = Partition::new("c", ["r3"]);
        let b = Partition::new("b", ["r2", "r3"]).with_children(["c"]);
        let a = Partition::new("a", ["r1", "r2"]).with_children(["b"]);
        let s = store(&[a.clone(), b, c]);
        let got: Vec<_> = effective_resources(&a, &s).unwrap().into_iter().collect();
        assert_eq!(got, ["r1", "r2", "r3"]);
        assert_eq!(oracle(&a, &s), effective_resources(&a, &s).unwrap());
    }

    #[test]
    fn stored_cycle_is_reported() {
        let a = Partition::new("a", ["r1"]).with_children(["b"]);
        let b = Partition::new("b", ["r2"]).with_children(["a"]);
        let s = store(&[a.clone(), b]);
        assert!(matches!(
            effective_resources(&a, &s),
            Err(PartitionError::CycleDetected(_))
        ));
        assert!(matches!(subtree(&a, &s), Err(PartitionError::CycleDetected(_))));
    }

    #[test]
    fn cycle_prediction() {
        let a = Partition::new("a", ["r1"]).with_children(["b"]);
        let b = Partition::new("b", ["r2"]);
        let s = store(&[a, b]);
        assert!(would_cycle("b", "a", &s));
        assert!(would_cycle("a", "a", &s));
        assert!(!would_cycle("a", "b", &s));
    }

    #[test]
    fn subtree_is_preorder() {
        let c = Partition::new("c", ["r3"]);
        let b = Partition::new("b", ["r2"]);
        let a = Partition::new("a", ["r1"]).with_children(["b", "c"]);
        let s = store(&[a.clone(), b, c]);
        let ids: Vec<_> = subtree(&a, &s).unwrap().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
    }

    // Flat traversal: BFS over an adjacency list, no recursion.
    fn oracle(root: &Partition, s: &HashMap<String, Partition>) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut queue = VecDeque::from([root.id.clone()]);
        let mut seen = HashSet::new();
        while let Some(id) = queue.pop_front() {
            if !seen.insert(id.clone()) {
                continue;
            }
            let p = &s[&id];
            for r in &p.resource_ids {
                out.insert(r.clone());
            }
            for c in &p.children {
                queue.push_back(c.clone());
            }
        }
        out
    }

    // Random forest: partition i may only have children with larger index.
    fn forest() -> impl Strategy<Value = Vec<Partition>> {
        (1usize..=200).prop_flat_map(|n| {
            let parents = prop::collection::vec(any::<prop::sample::Index>(), n);
            let resources = prop::collection::vec(prop::collection::btree_set(0u16..300, 0..5), n);
            let roots = prop::collection::vec(prop::bool::weighted(0.2), n);
            (parents, resources, roots).prop_map(move |(parents, resources, roots)| {
                let mut parts: Vec<Partition> = (0..n)
                    .map(|i| Partition {
                        id: format!("p{i}"),
                        resource_ids: resources[i].iter().map(|r| format!("r{r}")).collect(),
                        children: Vec::new(),
                        parent: None,
                        subsystem: None,
                    })
                    .collect();
                for i in 1..n {
                    if roots[i] {
                        continue;
                    }
                    let parent = parents[i].index(i);
                    parts[i].parent = Some(format!("p{parent}"));
                    let id = parts[i].id.clone();
                    parts[parent].children.push(id);
                }
                parts
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_flat_traversal(parts in forest()) {
            let s = store(&parts);
            for p in &parts {
                prop_assert_eq!(effective_resources(p, &s).unwrap(), oracle(p, &s));
            }
        }
    }
}

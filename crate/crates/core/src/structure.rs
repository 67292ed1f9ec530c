//! Partitions of covariate indices into groups and the per-cluster block structure.
//!
//! Indices are 0-based in memory. The 1-based form is only used at the file
//! boundary (`from_one_based` / `to_one_based`).

use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};

/// A partition of `{0, .., d-1}` into disjoint, non-empty groups.
///
/// Groups are stored in canonical form: members ascending, groups ordered by
/// their smallest member. Two partitions describing the same grouping are
/// therefore equal under `==`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Partition {
    dim: usize,
    groups: Vec<Vec<usize>>,
}

impl Partition {
    pub fn new(dim: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let members: usize = groups.iter().map(Vec::len).sum();
        if members != dim {
            return Err(BllimError::Validation(format!(
                "groups hold {members} indices, dimension is {dim}"
            )));
        }
        let mut seen = vec![false; dim];
        for group in &groups {
            if group.is_empty() {
                return Err(BllimError::Validation("empty group in partition".into()));
            }
            for &i in group {
                if i >= dim {
                    return Err(BllimError::Validation(format!(
                        "index {} out of range for dimension {}",
                        i + 1,
                        dim
                    )));
                }
                if seen[i] {
                    return Err(BllimError::Validation(format!(
                        "index {} appears in more than one group",
                        i + 1
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(BllimError::Validation(format!(
                "index {} is not covered by any group",
                missing + 1
            )));
        }
        Ok(Self::canonical(dim, groups))
    }

    fn canonical(dim: usize, mut groups: Vec<Vec<usize>>) -> Self {
        for g in groups.iter_mut() {
            g.sort_unstable();
        }
        groups.sort_unstable_by_key(|g| g[0]);
        Partition { dim, groups }
    }

    /// Builds a partition from a label per index. Labels need not be contiguous.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(i);
        }
        Self::canonical(labels.len(), by_label.into_values().collect())
    }

    pub fn singletons(dim: usize) -> Self {
        Partition {
            dim,
            groups: (0..dim).map(|i| vec![i]).collect(),
        }
    }

    pub fn full(dim: usize) -> Self {
        Partition {
            dim,
            groups: if dim == 0 { vec![] } else { vec![(0..dim).collect()] },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Group label of every index, groups numbered in canonical order.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.dim];
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                labels[i] = g;
            }
        }
        labels
    }

    pub fn largest_group(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.groups.is_empty() {
            0.0
        } else {
            self.dim as f64 / self.groups.len() as f64
        }
    }

    /// Free parameters of a covariance restricted to these blocks.
    pub fn covariance_params(&self) -> usize {
        self.groups.iter().map(|g| g.len() * (g.len() + 1) / 2).sum()
    }

    /// True when every group of `self` lies inside some group of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.dim != coarser.dim {
            return false;
        }
        let labels = coarser.labels();
        self.groups
            .iter()
            .all(|g| g.iter().all(|&i| labels[i] == labels[g[0]]))
    }

    /// Applies an index relabeling: index `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let groups = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&i| perm[i]).collect())
            .collect();
        Self::canonical(self.dim, groups)
    }
}

/// One partition per mixture component.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockStructure {
    clusters: Vec<Partition>,
}

impl BlockStructure {
    pub fn new(clusters: Vec<Partition>) -> Result<Self> {
        if let Some(first) = clusters.first() {
            if clusters.iter().any(|p| p.dim() != first.dim()) {
                return Err(BllimError::Dimension(
                    "partitions of a block structure must share one dimension".into(),
                ));
            }
        }
        Ok(BlockStructure { clusters })
    }

    pub fn diagonal(k: usize, dim: usize) -> Self {
        BlockStructure {
            clusters: vec![Partition::singletons(dim); k],
        }
    }

    pub fn full(k: usize, dim: usize) -> Self {
        BlockStructure {
            clusters: vec![Partition::full(dim); k],
        }
    }

    /// Parses nested lists of 1-based indices: `[cluster][group][member]`.
    pub fn from_one_based(dim: usize, clusters: &[Vec<Vec<usize>>]) -> Result<Self> {
        let parts = clusters
            .iter()
            .enumerate()
            .map(|(k, groups)| {
                let groups = groups
                    .iter()
                    .map(|g| {
                        g.iter()
                            .map(|&i| {
                                i.checked_sub(1).ok_or_else(|| {
                                    BllimError::Validation(format!(
                                        "cluster {}: indices are 1-based, found 0",
                                        k + 1
                                    ))
                                })
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()?;
                Partition::new(dim, groups).map_err(|e| {
                    BllimError::Validation(format!("cluster {}: {}", k + 1, e))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(parts)
    }

    pub fn to_one_based(&self) -> Vec<Vec<Vec<usize>>> {
        self.clusters
            .iter()
            .map(|p| {
                p.groups()
                    .iter()
                    .map(|g| g.iter().map(|&i| i + 1).collect())
                    .collect()
            })
            .collect()
    }

    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, Partition::dim)
    }

    pub fn cluster(&self, k: usize) -> &Partition {
        &self.clusters[k]
    }

    pub fn clusters(&self) -> &[Partition] {
        &self.clusters
    }

    /// Reorders clusters: position `k` of the result is cluster `order[k]` of `self`.
    pub fn reordered(&self, order: &[usize]) -> Self {
        BlockStructure {
            clusters: order.iter().map(|&k| self.clusters[k].clone()).collect(),
        }
    }

    pub fn mean_group_size(&self) -> f64 {
        if self.clusters.is_empty() {
            return 0.0;
        }
        self.clusters.iter().map(Partition::mean_group_size).sum::<f64>() / self.k() as f64
    }
}

//! Candidate block structures from thresholded residual covariances.
//!
//! Thresholding a covariance at level λ keeps the off-diagonal entries with
//! `|s| > λ`. The connected components of the surviving entries are the
//! blocks: the smallest grouping under which the thresholded matrix is
//! exactly block-diagonal.

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{BllimError, Result};
use crate::structure::{BlockStructure, Partition};

/// How residual covariances are scaled before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdScale {
    #[default]
    Covariance,
    Correlation,
}

/// Zeroes every off-diagonal entry with `|s| <= lambda`. The diagonal is kept.
pub fn threshold_matrix(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        let v = s[(i, j)];
        if i == j || v.abs() > lambda {
            v
        } else {
            0.0
        }
    })
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the graph with an edge wherever `|s[i,j]| > lambda`, `i != j`.
pub fn partition_from_threshold(s: &DMatrix<f64>, lambda: f64) -> Partition {
    let d = s.nrows();
    let mut uf = UnionFind::new(d);
    for i in 0..d {
        for j in (i + 1)..d {
            if s[(i, j)].abs() > lambda {
                uf.union(i, j);
            }
        }
    }
    let labels: Vec<usize> = (0..d).map(|i| uf.find(i)).collect();
    Partition::from_labels(&labels)
}

/// Rescales to unit diagonal; entries touching a non-positive variance become zero.
pub fn to_correlation(s: &DMatrix<f64>) -> DMatrix<f64> {
    let sd: Vec<f64> = s.diagonal().iter().map(|v| if *v > 0.0 { v.sqrt() } else { 0.0 }).collect();
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| {
        if i == j {
            1.0
        } else if sd[i] > 0.0 && sd[j] > 0.0 {
            s[(i, j)] / (sd[i] * sd[j])
        } else {
            0.0
        }
    })
}

/// Linear-interpolation quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `max_candidates` thresholds: 0, interior quantiles of the absolute
/// off-diagonal entries at equally spaced levels, and the maximum.
pub fn threshold_grid(s: &DMatrix<f64>, max_candidates: usize) -> Vec<f64> {
    let d = s.nrows();
    let mut off: Vec<f64> = (0..d)
        .flat_map(|i| ((i + 1)..d).map(move |j| (i, j)))
        .map(|(i, j)| s[(i, j)].abs())
        .collect();
    off.sort_by(f64::total_cmp);
    let max = off.last().copied().unwrap_or(0.0);
    match max_candidates {
        0 => vec![],
        1 => vec![max],
        m => (0..m)
            .map(|j| if j == 0 { 0.0 } else { quantile(&off, j as f64 / (m - 1) as f64) })
            .collect(),
    }
}

/// One multi-cluster candidate: the clusters' partitions at a common grid rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedStructure {
    /// Grid index shared by all clusters (0 = densest).
    pub rank: usize,
    pub structure: BlockStructure,
}

/// Per-cluster threshold paths and the paired candidate list.
#[derive(Debug, Clone)]
pub struct ThresholdPath {
    /// Strictly increasing thresholds with their induced partitions, per cluster.
    pub levels: Vec<Vec<(f64, Partition)>>,
    /// Distinct candidates, densest first.
    pub candidates: Vec<RankedStructure>,
}

pub fn threshold_path(residuals: &[DMatrix<f64>], max_candidates: usize) -> Result<ThresholdPath> {
    let first = residuals
        .first()
        .ok_or_else(|| BllimError::Validation("no residual matrices given".into()))?;
    let d = first.nrows();
    if residuals.iter().any(|s| s.shape() != (d, d)) {
        return Err(BllimError::Dimension(
            "residual matrices must all be square of one dimension".into(),
        ));
    }
    if max_candidates == 0 {
        return Err(BllimError::Validation("max_candidates must be positive".into()));
    }
    let per_cluster: Vec<Vec<(f64, Partition)>> = residuals
        .iter()
        .map(|s| {
            threshold_grid(s, max_candidates)
                .into_iter()
                .map(|lambda| (lambda, partition_from_threshold(s, lambda)))
                .collect()
        })
        .collect();
    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    for rank in 0..max_candidates {
        let structure = BlockStructure::new(per_cluster.iter().map(|p| p[rank].1.clone()).collect())?;
        if seen.insert(structure.clone()) {
            candidates.push(RankedStructure { rank, structure });
        }
    }
    let levels = per_cluster
        .into_iter()
        .map(|mut path| {
            path.dedup_by(|b, a| b.0 == a.0);
            path
        })
        .collect();
    Ok(ThresholdPath { levels, candidates })
}

/// Distinct multi-cluster structures, densest first, at most `max_candidates`.
pub fn candidate_structures(residuals: &[DMatrix<f64>], max_candidates: usize) -> Result<Vec<BlockStructure>> {
    Ok(threshold_path(residuals, max_candidates)?
        .candidates
        .into_iter()
        .map(|c| c.structure)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> DMatrix<f64> {
        DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.1, 0.5, 1.0, 0.05, 0.1, 0.05, 1.0])
    }

    #[test]
    fn threshold_example() {
        let t = threshold_matrix(&example(), 0.3);
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(t, expected);
    }

    #[test]
    fn zero_threshold_only_removes_exact_zeros() {
        let mut s = example();
        s[(0, 2)] = 0.0;
        s[(2, 0)] = 0.0;
        assert_eq!(threshold_matrix(&s, 0.0), s);
    }

    #[test]
    fn saturating_threshold_is_diagonal() {
        let t = threshold_matrix(&example(), 0.5);
        assert_eq!(t, DMatrix::identity(3, 3));
        assert_eq!(partition_from_threshold(&example(), 0.5), Partition::singletons(3));
    }

    #[test]
    fn partition_example() {
        let p = partition_from_threshold(&example(), 0.3);
        assert_eq!(p.groups(), &[vec![0, 1], vec![2]]);
        assert_eq!(partition_from_threshold(&example(), 0.0), Partition::full(3));
    }

    #[test]
    fn two_point_path() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        for m in [2, 3, 10] {
            let c = candidate_structures(std::slice::from_ref(&s), m).unwrap();
            assert_eq!(c.len(), 2);
            assert_eq!(c[0].cluster(0), &Partition::full(2));
            assert_eq!(c[1].cluster(0), &Partition::singletons(2));
        }
    }

    #[test]
    fn diagonal_residuals_give_one_candidate() {
        let c = candidate_structures(&[DMatrix::identity(4, 4), DMatrix::identity(4, 4) * 2.0], 4).unwrap();
        assert_eq!(c, vec![BlockStructure::diagonal(2, 4)]);
    }

    #[test]
    fn validation_errors() {
        assert!(candidate_structures(&[], 3).is_err());
        assert!(candidate_structures(&[DMatrix::identity(2, 2), DMatrix::identity(3, 3)], 3).is_err());
        assert!(candidate_structures(&[DMatrix::identity(2, 2)], 0).is_err());
    }

    #[test]
    fn correlation_scaling() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 1.0]);
        let c = to_correlation(&s);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
    }
}

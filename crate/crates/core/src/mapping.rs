//! Matching newly formed batch clusters onto memory pseudo-labels.
//!
//! Batch and memory centroids are compared by cosine distance and
//! matched one-to-one with a minimum-total-cost assignment, so the
//! result is a bijection on the non-empty clusters and independent of
//! row order. A greedy matcher is kept behind a flag for comparison.

use crate::error::{Error, Result};
use crate::numerics::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Sentinel distance for empty centroids.
const INF: Real = Real::INFINITY;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Minimum-total-cost one-to-one assignment (Hungarian).
    Optimal,
    /// Repeatedly take the globally smallest remaining entry.
    Greedy,
}

impl Default for MatchStrategy {
    fn default() -> Self {
        MatchStrategy::Optimal
    }
}

/// An injective map from batch-cluster id to memory pseudo-label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMapping {
    /// `assignment[i]` is the memory label for batch cluster `i`;
    /// clusters with no members stay unmapped.
    pub assignment: BTreeMap<usize, usize>,
    /// Sum of the matched cosine distances, accumulated in batch-cluster
    /// order.
    pub total_cost: Real,
}

/// Pairwise cosine distances between two centroid sets. Entry `(i, j)`
/// is `1 - cos(c_i^t, c_j^m)`, in `[0, 2]`; empty centroids produce
/// infinite rows/columns. A zero-norm non-empty centroid is a numerical
/// error (the caller skips the batch).
pub fn cosine_distance_matrix(
    batch_centroids: &[Option<Vec<Real>>],
    memory_centroids: &[Option<Vec<Real>>],
) -> Result<Vec<Vec<Real>>> {
    let norm = |v: &[Real]| -> Real { v.iter().map(|x| x * x).sum::<Real>().sqrt() };
    let mut out = vec![vec![INF; memory_centroids.len()]; batch_centroids.len()];
    for (i, bc) in batch_centroids.iter().enumerate() {
        let Some(b) = bc else { continue };
        let nb = norm(b);
        if nb <= 1e-12 {
            return Err(Error::Numerical(format!(
                "batch centroid {i} has zero norm"
            )));
        }
        for (j, mc) in memory_centroids.iter().enumerate() {
            let Some(m) = mc else { continue };
            let nm = norm(m);
            if nm <= 1e-12 {
                return Err(Error::Numerical(format!(
                    "memory centroid {j} has zero norm"
                )));
            }
            let dot: Real = b.iter().zip(m).map(|(x, y)| x * y).sum();
            out[i][j] = 1.0 - dot / (nb * nm);
        }
    }
    Ok(out)
}

/// Minimum-cost assignment on a square matrix via shortest augmenting
/// paths with potentials, O(n^3). Returns `assign[row] = col`.
fn hungarian(cost: &[Vec<Real>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based potentials; p[j] is the row matched to column j
    let mut u = vec![0.0 as Real; n + 1];
    let mut v = vec![0.0 as Real; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Match batch clusters to memory labels so the summed cosine distance
/// is minimal. Rows/columns that are entirely infinite (empty clusters)
/// are excluded; a non-empty row with no finite entry, or more non-empty
/// rows than available columns, is a mapping error.
pub fn match_clusters(distances: &[Vec<Real>], strategy: MatchStrategy) -> Result<ClusterMapping> {
    let rows: Vec<usize> = (0..distances.len())
        .filter(|&i| distances[i].iter().any(|d| d.is_finite()))
        .collect();
    let n_cols = distances.first().map(|r| r.len()).unwrap_or(0);
    let cols: Vec<usize> = (0..n_cols)
        .filter(|&j| distances.iter().any(|r| r[j].is_finite()))
        .collect();
    for (i, row) in distances.iter().enumerate() {
        if row.len() != n_cols {
            return Err(Error::contract("match_clusters: ragged distance matrix"));
        }
        let non_empty = row.iter().any(|d| d.is_finite());
        if !non_empty && !row.is_empty() && rows.contains(&i) {
            return Err(Error::Mapping(format!("cluster {i} has no finite match")));
        }
    }
    if rows.len() > cols.len() {
        return Err(Error::Mapping(format!(
            "{} batch clusters cannot map injectively onto {} memory labels",
            rows.len(),
            cols.len()
        )));
    }
    if rows.is_empty() {
        return Ok(ClusterMapping { assignment: BTreeMap::new(), total_cost: 0.0 });
    }
    // reduced square problem: pad missing rows with zero cost
    let m = cols.len();
    let mut sub = vec![vec![0.0 as Real; m]; m];
    for (ri, &i) in rows.iter().enumerate() {
        for (ci, &j) in cols.iter().enumerate() {
            if !distances[i][j].is_finite() {
                return Err(Error::Mapping(format!(
                    "cluster {i} has no finite distance to populated label {j}"
                )));
            }
            sub[ri][ci] = distances[i][j];
        }
    }
    let mut assignment = BTreeMap::new();
    match strategy {
        MatchStrategy::Optimal => {
            let assign = hungarian(&sub);
            for (ri, &i) in rows.iter().enumerate() {
                assignment.insert(i, cols[assign[ri]]);
            }
        }
        MatchStrategy::Greedy => {
            let mut row_done = vec![false; rows.len()];
            let mut col_done = vec![false; m];
            for _ in 0..rows.len() {
                let mut best = (0usize, 0usize, INF);
                for (ri, &i) in rows.iter().enumerate() {
                    if row_done[ri] {
                        continue;
                    }
                    for (ci, &j) in cols.iter().enumerate() {
                        if col_done[ci] {
                            continue;
                        }
                        if distances[i][j] < best.2 {
                            best = (ri, ci, distances[i][j]);
                        }
                    }
                }
                row_done[best.0] = true;
                col_done[best.1] = true;
                assignment.insert(rows[best.0], cols[best.1]);
            }
        }
    }
    // total in batch-cluster order, matching the brute-force oracle
    let total_cost = assignment
        .iter()
        .map(|(&i, &j)| distances[i][j])
        .sum();
    Ok(ClusterMapping { assignment, total_cost })
}

/// Rewrite per-sample cluster ids into memory pseudo-labels.
pub fn assign_pseudo_labels(
    cluster_labels: &[usize],
    mapping: &ClusterMapping,
) -> Result<Vec<usize>> {
    cluster_labels
        .iter()
        .map(|c| {
            mapping
                .assignment
                .get(c)
                .copied()
                .ok_or_else(|| Error::Mapping(format!("cluster {c} has no mapped label")))
        })
        .collect()
}

/// Multiset union of the pseudo-labeled batch and memory samples, batch
/// first.
pub fn merge_with_memory<T: Clone>(
    batch: &[(T, usize)],
    memory: &[(T, usize)],
) -> Vec<(T, usize)> {
    let mut out = Vec::with_capacity(batch.len() + memory.len());
    out.extend_from_slice(batch);
    out.extend_from_slice(memory);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn some(v: Vec<Real>) -> Option<Vec<Real>> {
        Some(v)
    }

    fn brute_force_min(cost: &[Vec<Real>]) -> Real {
        let n = cost.len();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = INF;
        permute(&mut perm, 0, &mut |p: &[usize]| {
            let total: Real = (0..n).map(|i| cost[i][p[i]]).sum();
            if total < best {
                best = total;
            }
        });
        best
    }

    fn permute(perm: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == perm.len() {
            f(perm);
            return;
        }
        for i in k..perm.len() {
            perm.swap(k, i);
            permute(perm, k + 1, f);
            perm.swap(k, i);
        }
    }

    #[test]
    fn identical_centroid_sets_have_zero_diagonal() {
        let c = vec![some(vec![1.0, 0.0]), some(vec![0.5, 0.5])];
        let d = cosine_distance_matrix(&c, &c).unwrap();
        assert!(d[0][0].abs() < 1e-12);
        assert!(d[1][1].abs() < 1e-12);
    }

    #[test]
    fn orthogonal_is_one_opposite_is_two() {
        let a = vec![some(vec![1.0, 0.0])];
        let b = vec![some(vec![0.0, 3.0]), some(vec![-2.0, 0.0])];
        let d = cosine_distance_matrix(&a, &b).unwrap();
        assert!((d[0][0] - 1.0).abs() < 1e-12);
        assert!((d[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn empty_centroids_are_infinite() {
        let a = vec![some(vec![1.0, 0.0]), None];
        let b = vec![some(vec![1.0, 0.0])];
        let d = cosine_distance_matrix(&a, &b).unwrap();
        assert!(d[1][0].is_infinite());
    }

    #[test]
    fn zero_norm_centroid_is_numerical_error() {
        let a = vec![some(vec![0.0, 0.0])];
        let b = vec![some(vec![1.0, 0.0])];
        assert!(matches!(
            cosine_distance_matrix(&a, &b),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn scale_invariance_of_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a: Vec<Option<Vec<Real>>> = (0..3)
            .map(|_| some((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let b: Vec<Option<Vec<Real>>> = (0..3)
            .map(|_| some((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let scaled: Vec<Option<Vec<Real>>> = a
            .iter()
            .map(|c| c.as_ref().map(|v| v.iter().map(|x| x * 37.5).collect()))
            .collect();
        let d1 = cosine_distance_matrix(&a, &b).unwrap();
        let d2 = cosine_distance_matrix(&scaled, &b).unwrap();
        for (r1, r2) in d1.iter().zip(&d2) {
            for (x, y) in r1.iter().zip(r2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_dominant_matrix() {
        let d = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let m = match_clusters(&d, MatchStrategy::Optimal).unwrap();
        assert_eq!(m.assignment[&0], 0);
        assert_eq!(m.assignment[&1], 1);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn permuted_centroids_recover_the_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for k in 2..=5usize {
            let centroids: Vec<Option<Vec<Real>>> = (0..k)
                .map(|i| {
                    let mut v = vec![0.0; k];
                    v[i] = 1.0;
                    v[(i + 1) % k] = 0.2;
                    some(v)
                })
                .collect();
            let mut perm: Vec<usize> = (0..k).collect();
            for i in (1..k).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let shuffled: Vec<Option<Vec<Real>>> =
                (0..k).map(|i| centroids[perm[i]].clone()).collect();
            // row i of the matrix is shuffled cluster i = original perm[i]
            let d = cosine_distance_matrix(&shuffled, &centroids).unwrap();
            let m = match_clusters(&d, MatchStrategy::Optimal).unwrap();
            for i in 0..k {
                assert_eq!(m.assignment[&i], perm[i]);
            }
        }
    }

    #[test]
    fn solver_matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for trial in 0..200 {
            let n = if trial % 2 == 0 { 4 } else { 5 };
            let cost: Vec<Vec<Real>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..2.0)).collect())
                .collect();
            let wrapped: Vec<Vec<Real>> = cost.clone();
            let m = match_clusters(&wrapped, MatchStrategy::Optimal).unwrap();
            let expected = brute_force_min(&cost);
            assert_eq!(m.total_cost, expected, "trial {trial}");
        }
    }

    #[test]
    fn infeasible_all_infinite_row_is_mapping_error() {
        // two non-empty batch clusters, one memory label
        let d = vec![vec![0.3], vec![0.5]];
        assert!(matches!(
            match_clusters(&d, MatchStrategy::Optimal),
            Err(Error::Mapping(_))
        ));
    }

    #[test]
    fn partial_cluster_sets_match_only_populated_rows() {
        let d = vec![
            vec![0.9, 0.1, 0.5],
            vec![INF, INF, INF], // empty batch cluster
            vec![0.2, 0.8, 0.4],
        ];
        let m = match_clusters(&d, MatchStrategy::Optimal).unwrap();
        assert_eq!(m.assignment.len(), 2);
        assert!(!m.assignment.contains_key(&1));
        assert_eq!(m.assignment[&0], 1);
        assert_eq!(m.assignment[&2], 0);
    }

    #[test]
    fn pseudo_label_assignment_follows_mapping() {
        let mut assignment = BTreeMap::new();
        assignment.insert(0usize, 3usize);
        let mapping = ClusterMapping { assignment, total_cost: 0.0 };
        let labels = assign_pseudo_labels(&[0, 0, 0], &mapping).unwrap();
        assert_eq!(labels, vec![3, 3, 3]);
        assert!(assign_pseudo_labels(&[1], &mapping).is_err());
    }

    #[test]
    fn identity_mapping_keeps_cluster_ids() {
        let mut assignment = BTreeMap::new();
        for i in 0..4 {
            assignment.insert(i, i);
        }
        let mapping = ClusterMapping { assignment, total_cost: 0.0 };
        let labels = assign_pseudo_labels(&[2, 0, 3, 1], &mapping).unwrap();
        assert_eq!(labels, vec![2, 0, 3, 1]);
    }

    #[test]
    fn merge_sizes_add_and_order_is_batch_first() {
        let batch: Vec<(u8, usize)> = (0..32).map(|i| (i as u8, 0)).collect();
        let memory: Vec<(u8, usize)> = (0..200).map(|i| (i as u8, 1)).collect();
        let merged = merge_with_memory(&batch, &memory);
        assert_eq!(merged.len(), 232);
        assert_eq!(merged[0].1, 0);
        assert_eq!(merged[231].1, 1);
        let empty: Vec<(u8, usize)> = Vec::new();
        assert_eq!(merge_with_memory(&batch, &empty).len(), 32);
    }

    #[test]
    fn greedy_strategy_is_a_bijection_too() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cost: Vec<Vec<Real>> = (0..4)
            .map(|_| (0..4).map(|_| rng.gen_range(0.0..2.0)).collect())
            .collect();
        let m = match_clusters(&cost, MatchStrategy::Greedy).unwrap();
        let mut seen: Vec<usize> = m.assignment.values().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        let opt = match_clusters(&cost, MatchStrategy::Optimal).unwrap();
        assert!(opt.total_cost <= m.total_cost + 1e-15);
    }
}

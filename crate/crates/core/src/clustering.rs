//! k-means clustering over embedding rows, plus per-label centroid
//! computation for the batch/memory matching step.
//!
//! Lloyd's algorithm with k-means++ seeding and multiple restarts; the
//! best restart by inertia wins (ties broken by restart index). Empty
//! clusters are re-seeded from the point farthest from its assigned
//! centroid, so degenerate inputs (fewer distinct points than K) settle
//! into partially populated clusterings instead of failing.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::Real;
use crate::par;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Convergence threshold on the largest centroid shift (Euclidean).
    pub tolerance: Real,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 4,
            max_iters: 100,
            tolerance: 1e-4,
            restarts: 5,
            seed: 0,
        }
    }
}

/// A converged clustering of one batch.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Per-sample cluster id in `[0, K)`.
    pub labels: Vec<usize>,
    /// K centroids (rows of length d). Centroids of empty clusters keep
    /// their last position; check `counts` before trusting one.
    pub centroids: Vec<Vec<Real>>,
    /// Members per cluster.
    pub counts: Vec<usize>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: Real,
    /// Inertia after each Lloyd iteration of the winning restart;
    /// non-increasing by construction.
    pub inertia_history: Vec<Real>,
}

pub(crate) fn sq_dist(a: &[Real], b: &[Real]) -> Real {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Nearest centroid by squared Euclidean distance; lowest index wins
/// ties.
pub(crate) fn nearest(point: &[Real], centroids: &[Vec<Real>]) -> (usize, Real) {
    let mut best = 0;
    let mut best_d = sq_dist(point, &centroids[0]);
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

fn kmeanspp_init(rows: &[&[Real]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Real>> {
    let n = rows.len();
    let mut centroids: Vec<Vec<Real>> = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].to_vec());
    let mut dists: Vec<Real> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: Real = dists.iter().sum();
        let next = if total <= 0.0 {
            // every point already coincides with a centroid
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen_range(0.0..1.0) * total;
            let mut chosen = n - 1;
            for (i, &d) in dists.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        centroids.push(rows[next].to_vec());
        for (d, r) in dists.iter_mut().zip(rows) {
            *d = (*d).min(sq_dist(r, centroids.last().unwrap()));
        }
    }
    centroids
}

struct LloydRun {
    labels: Vec<usize>,
    centroids: Vec<Vec<Real>>,
    counts: Vec<usize>,
    inertia: Real,
    history: Vec<Real>,
}

fn lloyd(rows: &[&[Real]], k: usize, cfg: &KMeansConfig, seed: u64) -> LloydRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.len();
    let d = rows[0].len();
    let mut centroids = kmeanspp_init(rows, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut history = Vec::new();
    for _ in 0..cfg.max_iters {
        for (i, row) in rows.iter().enumerate() {
            labels[i] = nearest(row, &centroids).0;
        }
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // re-seed empty clusters at the globally worst-fit point; the
        // next assignment pass picks it up (or leaves the cluster empty
        // when every point already sits on its centroid)
        let mut reseeded: Vec<usize> = Vec::new();
        for empty in 0..k {
            if counts[empty] > 0 {
                continue;
            }
            let mut worst_i = usize::MAX;
            let mut worst_d = -1.0;
            for (i, row) in rows.iter().enumerate() {
                if reseeded.contains(&i) {
                    continue;
                }
                let dist = sq_dist(row, &centroids[labels[i]]);
                if dist > worst_d {
                    worst_d = dist;
                    worst_i = i;
                }
            }
            if worst_i != usize::MAX {
                centroids[empty] = rows[worst_i].to_vec();
                reseeded.push(worst_i);
            }
        }
        // means of members
        let mut shift: Real = 0.0;
        let mut new_centroids = vec![vec![0.0; d]; k];
        for (i, row) in rows.iter().enumerate() {
            for (acc, &v) in new_centroids[labels[i]].iter_mut().zip(*row) {
                *acc += v;
            }
        }
        for ck in 0..k {
            if counts[ck] > 0 {
                for v in new_centroids[ck].iter_mut() {
                    *v /= counts[ck] as Real;
                }
                shift = shift.max(sq_dist(&new_centroids[ck], &centroids[ck]).sqrt());
            } else {
                new_centroids[ck] = centroids[ck].clone();
            }
        }
        centroids = new_centroids;
        let inertia: Real = rows
            .iter()
            .zip(&labels)
            .map(|(row, &l)| sq_dist(row, &centroids[l]))
            .sum();
        history.push(inertia);
        if shift < cfg.tolerance {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for &l in &labels {
        counts[l] += 1;
    }
    refine(rows, k, &mut labels, &mut centroids, &mut counts, &mut history);
    let inertia = *history.last().unwrap_or(&0.0);
    LloydRun { labels, centroids, counts, inertia, history }
}

/// Single-point relocation passes after Lloyd converges. Moving `x`
/// from cluster A (size nA) to B changes the total squared error by
/// `nB/(nB+1)*d(x,cB)^2 - nA/(nA-1)*d(x,cA)^2`; applying only strictly
/// improving moves escapes the plateaus Lloyd gets stuck on with few
/// points, keeping the inertia sequence non-increasing.
fn refine(
    rows: &[&[Real]],
    k: usize,
    labels: &mut [usize],
    centroids: &mut [Vec<Real>],
    counts: &mut [usize],
    history: &mut Vec<Real>,
) {
    let max_sweeps = 50;
    for _ in 0..max_sweeps {
        let mut improved = false;
        for (i, row) in rows.iter().enumerate() {
            let a = labels[i];
            if counts[a] <= 1 {
                continue; // removing a singleton's point never helps
            }
            let na = counts[a] as Real;
            let removal = na / (na - 1.0) * sq_dist(row, &centroids[a]);
            let mut best_gain = -1e-12;
            let mut best_b = a;
            for b in 0..k {
                if b == a || counts[b] == 0 {
                    continue;
                }
                let nb = counts[b] as Real;
                let gain = nb / (nb + 1.0) * sq_dist(row, &centroids[b]) - removal;
                if gain < best_gain {
                    best_gain = gain;
                    best_b = b;
                }
            }
            if best_b != a {
                let (na, nb) = (counts[a] as Real, counts[best_b] as Real);
                let ca: Vec<Real> = centroids[a]
                    .iter()
                    .zip(*row)
                    .map(|(c, &v)| (c * na - v) / (na - 1.0))
                    .collect();
                let cb: Vec<Real> = centroids[best_b]
                    .iter()
                    .zip(*row)
                    .map(|(c, &v)| (c * nb + v) / (nb + 1.0))
                    .collect();
                centroids[a] = ca;
                centroids[best_b] = cb;
                counts[a] -= 1;
                counts[best_b] += 1;
                labels[i] = best_b;
                improved = true;
            }
        }
        let inertia: Real = rows
            .iter()
            .zip(labels.iter())
            .map(|(row, &l)| sq_dist(row, &centroids[l]))
            .sum();
        if improved {
            history.push(inertia);
        } else {
            if history.is_empty() {
                history.push(inertia);
            }
            break;
        }
    }
}

/// Cluster the rows of a `(B, d)` tensor into `config.k` groups,
/// keeping the best of `config.restarts` seeded runs.
pub fn kmeans(embeddings: &Tensor, config: &KMeansConfig) -> Result<ClusterAssignment> {
    if config.k == 0 || config.restarts == 0 {
        return Err(Error::config("kmeans: k and restarts must be >= 1"));
    }
    if embeddings.shape().len() != 2 {
        return Err(Error::contract("kmeans: expected (B, d) embeddings"));
    }
    let b = embeddings.shape()[0];
    let d = embeddings.shape()[1];
    if b < config.k {
        return Err(Error::Clustering(format!(
            "batch of {b} samples cannot seed {} clusters",
            config.k
        )));
    }
    let rows: Vec<&[Real]> = (0..b)
        .map(|i| &embeddings.data()[i * d..(i + 1) * d])
        .collect();
    let runs = par::map_indexed(config.restarts, |r| {
        let seed = config
            .seed
            .wrapping_add((r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        lloyd(&rows, config.k, config, seed)
    });
    let best = runs
        .into_iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.inertia.total_cmp(&b.inertia).then(ia.cmp(ib)))
        .map(|(_, run)| run)
        .expect("restarts >= 1");
    Ok(ClusterAssignment {
        labels: best.labels,
        centroids: best.centroids,
        counts: best.counts,
        inertia: best.inertia,
        inertia_history: best.history,
    })
}

/// Mean embedding per label over `(B, d)` rows; labels must lie in
/// `[0, k)`. Labels with no members yield `None`.
pub fn compute_centroids(
    embeddings: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<Vec<Option<Vec<Real>>>> {
    if embeddings.shape().len() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::contract(
            "compute_centroids: embeddings rows must match label count",
        ));
    }
    let d = embeddings.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!(
            "compute_centroids: label {bad} out of range 0..{k}"
        )));
    }
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (acc, &v) in sums[l].iter_mut().zip(embeddings.row(i)) {
            *acc += v;
        }
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(mut s, c)| {
            if c == 0 {
                None
            } else {
                for v in s.iter_mut() {
                    *v /= c as Real;
                }
                Some(s)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::uniform_tensor;

    fn tensor_of(rows: &[Vec<Real>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Exhaustive best 2-partition inertia for small inputs.
    fn exhaustive_two_split(rows: &[Vec<Real>]) -> Real {
        let n = rows.len();
        let d = rows[0].len();
        let mut best = Real::INFINITY;
        for mask in 1u32..(1 << (n - 1)) {
            let mut sums = [vec![0.0; d], vec![0.0; d]];
            let mut counts = [0usize; 2];
            for (i, row) in rows.iter().enumerate() {
                let side = ((mask >> i) & 1) as usize;
                counts[side] += 1;
                for (a, &v) in sums[side].iter_mut().zip(row) {
                    *a += v;
                }
            }
            let mut inertia = 0.0;
            for side in 0..2 {
                if counts[side] == 0 {
                    continue;
                }
                let mean: Vec<Real> =
                    sums[side].iter().map(|v| v / counts[side] as Real).collect();
                for (i, row) in rows.iter().enumerate() {
                    if ((mask >> i) & 1) as usize == side {
                        inertia += sq_dist(row, &mean);
                    }
                }
            }
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn two_well_separated_groups() {
        let rows = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let cfg = KMeansConfig { k: 2, seed: 3, ..KMeansConfig::default() };
        let out = kmeans(&tensor_of(&rows), &cfg).unwrap();
        let mut centers: Vec<Real> = out.centroids.iter().map(|c| c[0]).collect();
        centers.sort_by(Real::total_cmp);
        assert!((centers[0] - 0.05).abs() < 1e-9);
        assert!((centers[1] - 10.05).abs() < 1e-9);
        assert!((out.inertia - 0.01).abs() < 1e-9);
        assert!((out.inertia - exhaustive_two_split(&rows)).abs() < 1e-9);
    }

    #[test]
    fn k1_gives_global_mean() {
        let rows = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 4.0]];
        let cfg = KMeansConfig { k: 1, ..KMeansConfig::default() };
        let out = kmeans(&tensor_of(&rows), &cfg).unwrap();
        assert!(out.labels.iter().all(|&l| l == 0));
        assert!((out.centroids[0][0] - 3.0).abs() < 1e-12);
        assert!((out.centroids[0][1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn identical_points_collapse_to_one_cluster() {
        let rows = vec![vec![2.0, 2.0]; 5];
        let cfg = KMeansConfig { k: 2, seed: 11, ..KMeansConfig::default() };
        let out = kmeans(&tensor_of(&rows), &cfg).unwrap();
        assert!(out.inertia.abs() < 1e-18);
        let populated = out.counts.iter().filter(|&&c| c > 0).count();
        assert_eq!(populated, 1);
    }

    #[test]
    fn fewer_points_than_k_is_clustering_error() {
        let rows = vec![vec![0.0], vec![1.0]];
        let cfg = KMeansConfig { k: 3, ..KMeansConfig::default() };
        match kmeans(&tensor_of(&rows), &cfg) {
            Err(Error::Clustering(_)) => {}
            other => panic!("expected clustering error, got {other:?}"),
        }
    }

    #[test]
    fn inertia_history_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let z = uniform_tensor(&mut rng, vec![24, 3], -1.0, 1.0);
            let cfg = KMeansConfig { k: 4, seed: trial, restarts: 2, ..KMeansConfig::default() };
            let out = kmeans(&z, &cfg).unwrap();
            for w in out.inertia_history.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "inertia increased: {:?}",
                    out.inertia_history
                );
            }
        }
    }

    #[test]
    fn partitions_agree_across_seeds_on_separated_data() {
        let mut rows = Vec::new();
        for c in 0..3 {
            for i in 0..6 {
                rows.push(vec![10.0 * c as Real + 0.01 * i as Real, -5.0 * c as Real]);
            }
        }
        let t = tensor_of(&rows);
        let partition = |labels: &[usize]| -> Vec<Vec<usize>> {
            let mut groups = vec![Vec::new(); 3];
            for (i, &l) in labels.iter().enumerate() {
                groups[l].push(i);
            }
            groups.sort();
            groups
        };
        let base = {
            let cfg = KMeansConfig { k: 3, seed: 1, ..KMeansConfig::default() };
            partition(&kmeans(&t, &cfg).unwrap().labels)
        };
        for seed in 2..8 {
            let cfg = KMeansConfig { k: 3, seed, ..KMeansConfig::default() };
            assert_eq!(partition(&kmeans(&t, &cfg).unwrap().labels), base);
        }
    }

    #[test]
    fn restarts_find_exhaustive_optimum_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5150);
        let mut hits = 0;
        let trials = 40;
        for trial in 0..trials {
            let n = rng.gen_range(4..=8);
            let d = rng.gen_range(1..=3);
            let rows: Vec<Vec<Real>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let cfg = KMeansConfig { k: 2, restarts: 10, seed: trial, ..KMeansConfig::default() };
            let out = kmeans(&tensor_of(&rows), &cfg).unwrap();
            let best = exhaustive_two_split(&rows);
            assert!(
                out.inertia <= best * 1.05 + 1e-12,
                "off by >5%: {} vs {best}",
                out.inertia
            );
            if out.inertia <= best + 1e-9 {
                hits += 1;
            }
        }
        assert!(hits * 100 >= trials * 95, "only {hits}/{trials} optimal");
    }

    #[test]
    fn centroid_of_two_unit_vectors() {
        let z = tensor_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let cents = compute_centroids(&z, &[0, 0], 2).unwrap();
        assert_eq!(cents[0].as_ref().unwrap(), &vec![0.5, 0.5]);
        assert!(cents[1].is_none());
    }

    #[test]
    fn singleton_cluster_centroid_is_the_sample() {
        let z = tensor_of(&[vec![0.3, -0.7, 2.0]]);
        let cents = compute_centroids(&z, &[1], 3).unwrap();
        assert_eq!(cents[1].as_ref().unwrap(), &vec![0.3, -0.7, 2.0]);
    }

    #[test]
    fn centroids_match_brute_force_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z = uniform_tensor(&mut rng, vec![20, 4], -2.0, 2.0);
        let labels: Vec<usize> = (0..20).map(|_| rng.gen_range(0..5)).collect();
        let cents = compute_centroids(&z, &labels, 5).unwrap();
        for k in 0..5 {
            let members: Vec<usize> = (0..20).filter(|&i| labels[i] == k).collect();
            match &cents[k] {
                None => assert!(members.is_empty()),
                Some(c) => {
                    for dim in 0..4 {
                        let mean: Real = members.iter().map(|&i| z.row(i)[dim]).sum::<Real>()
                            / members.len() as Real;
                        assert!((c[dim] - mean).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

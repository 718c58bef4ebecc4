//! Comparison methods that share the pessimistic policy output but choose
//! the aggregation set differently.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::btl::{FeatureMap, UserDataset};
use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::offline::{pessimistic_output, OfflineConfig, PessimisticOutcome, UserStats};

pub const DEFAULT_KNN_K: usize = 5;
pub const DEFAULT_KMEANS_RESTARTS: usize = 50;
pub const DEFAULT_DBSCAN_MIN_PTS: usize = 3;
pub const DEFAULT_DBSCAN_EPS_FACTOR: f64 = 0.5;

const LLOYD_TOL: f64 = 1e-8;
const LLOYD_MAX_ITERS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PessVariant {
    PerUser,
    Pooled,
    NeighborKnn { k: usize },
}

fn cosine(a: &Vector, b: &Vector) -> f64 {
    let n = a.norm() * b.norm();
    if n == 0.0 {
        0.0
    } else {
        a.dot(b) / n
    }
}

/// The test user plus the `k` users whose `θ̂` has the highest cosine
/// similarity to the test user's (lower index wins ties), ascending.
pub fn knn_members(stats: &[UserStats], test: usize, k: usize) -> Result<Vec<usize>> {
    if k >= stats.len() {
        return Err(Error::config(format!(
            "knn k = {k} must be below the user count {}",
            stats.len()
        )));
    }
    let t = &stats[test].theta_hat;
    let mut others: Vec<(usize, f64)> = (0..stats.len())
        .filter(|&v| v != test)
        .map(|v| (v, cosine(t, &stats[v].theta_hat)))
        .collect();
    others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut members: Vec<usize> = others[..k].iter().map(|&(v, _)| v).collect();
    members.push(test);
    members.sort_unstable();
    Ok(members)
}

/// Pessimistic MLE on the test user's own data, on everyone's, or on its
/// cosine nearest neighbours.
#[allow(clippy::too_many_arguments)]
pub fn baseline_pess_mle(
    variant: PessVariant,
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    test: usize,
    stats: &[UserStats],
    dim: usize,
    w: &Vector,
    cfg: &OfflineConfig,
) -> Result<PessimisticOutcome> {
    let members = match variant {
        PessVariant::PerUser => vec![test],
        PessVariant::Pooled => (0..datasets.len()).collect(),
        PessVariant::NeighborKnn { k } => knn_members(stats, test, k)?,
    };
    pessimistic_output(datasets, feat, &members, dim, w, cfg)
}

/// Lloyd's algorithm from `restarts` random initialisations (distinct data
/// points); the lowest-inertia labelling is kept.
pub fn kmeans(points: &[Vector], k: usize, restarts: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("kmeans needs 1 <= k <= {n}, got {k}")));
    }
    if restarts == 0 {
        return Err(Error::config("kmeans needs at least one restart"));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..restarts {
        let init = rand::seq::index::sample(rng, n, k);
        let mut centers: Vec<Vector> = init.iter().map(|i| points[i].clone()).collect();
        let mut labels = vec![0usize; n];
        for _ in 0..LLOYD_MAX_ITERS {
            for (i, p) in points.iter().enumerate() {
                labels[i] = nearest(p, &centers);
            }
            let mut shift: f64 = 0.0;
            for (j, c) in centers.iter_mut().enumerate() {
                let mut sum = Vector::zeros(p_dim(points));
                let mut count = 0usize;
                for (i, p) in points.iter().enumerate() {
                    if labels[i] == j {
                        sum += p;
                        count += 1;
                    }
                }
                // an emptied cluster keeps its previous centre
                if count > 0 {
                    let next = sum / count as f64;
                    shift = shift.max((&next - &*c).norm());
                    *c = next;
                }
            }
            if shift <= LLOYD_TOL {
                break;
            }
        }
        for (i, p) in points.iter().enumerate() {
            labels[i] = nearest(p, &centers);
        }
        let inertia: f64 = points
            .iter()
            .zip(&labels)
            .map(|(p, &l)| (p - &centers[l]).norm_squared())
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("restarts >= 1").1)
}

fn p_dim(points: &[Vector]) -> usize {
    points.first().map_or(0, |p| p.len())
}

fn nearest(p: &Vector, centers: &[Vector]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = (p - c).norm_squared();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// DBSCAN labels (`None` = noise). A point is core when at least `min_pts`
/// points, itself included, lie within `eps`. Clusters grow in index order.
pub fn dbscan(points: &[Vector], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) {
        return Err(Error::config("dbscan eps must be > 0"));
    }
    if min_pts == 0 {
        return Err(Error::config("dbscan min_pts must be >= 1"));
    }
    let n = points.len();
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| (&points[i] - &points[j]).norm() <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || labels[i].is_some() {
            continue;
        }
        labels[i] = Some(next);
        let mut queue = vec![i];
        while let Some(p) = queue.pop() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        queue.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(labels)
}

/// Median of all pairwise distances, 0 for fewer than two points.
pub fn median_pairwise_distance(points: &[Vector]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            d.push((&points[i] - &points[j]).norm());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len() / 2;
    if d.len() % 2 == 1 {
        d[m]
    } else {
        0.5 * (d[m - 1] + d[m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClusterAlgo {
    /// `k = None` uses `⌈√U⌉` clusters.
    KMeans { k: Option<usize>, restarts: usize },
    /// `eps = None` uses half the median pairwise distance of the estimates.
    Dbscan { eps: Option<f64>, min_pts: usize },
}

pub const DBSCAN_NOISE_FLAG: &str = "dbscan_noise_fallback";

/// Pessimistic output over the test user's cluster of `θ̂` vectors. A test
/// user labelled as noise by DBSCAN falls back to its own data and the
/// returned flags say so.
#[allow(clippy::too_many_arguments)]
pub fn baseline_cluster(
    algo: ClusterAlgo,
    datasets: &[UserDataset],
    feat: Option<&FeatureMap>,
    test: usize,
    stats: &[UserStats],
    dim: usize,
    w: &Vector,
    cfg: &OfflineConfig,
    rng: &mut impl Rng,
) -> Result<(PessimisticOutcome, Vec<String>)> {
    let points: Vec<Vector> = stats.iter().map(|s| s.theta_hat.clone()).collect();
    let mut flags = Vec::new();
    let members: Vec<usize> = match algo {
        ClusterAlgo::KMeans { k, restarts } => {
            let k = k.unwrap_or_else(|| (points.len() as f64).sqrt().ceil() as usize);
            let labels = kmeans(&points, k, restarts, rng)?;
            (0..points.len()).filter(|&v| labels[v] == labels[test]).collect()
        }
        ClusterAlgo::Dbscan { eps, min_pts } => {
            let eps = eps.unwrap_or_else(|| DEFAULT_DBSCAN_EPS_FACTOR * median_pairwise_distance(&points));
            if eps > 0.0 {
                let labels = dbscan(&points, eps, min_pts)?;
                match labels[test] {
                    Some(l) => (0..points.len()).filter(|&v| labels[v] == Some(l)).collect(),
                    None => {
                        flags.push(DBSCAN_NOISE_FLAG.to_string());
                        vec![test]
                    }
                }
            } else {
                // all estimates coincide: one cluster
                (0..points.len()).collect()
            }
        }
    };
    Ok((pessimistic_output(datasets, feat, &members, dim, w, cfg)?, flags))
}

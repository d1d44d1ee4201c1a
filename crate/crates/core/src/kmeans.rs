//! Lloyd K-Means with k-means++ seeding and a hard iteration cap.
//!
//! Points and centroids are flat row-major `f32` slices with an explicit
//! `dim`. Distances are squared Euclidean, accumulated in `f32`; inertia is
//! the `f64` sum of those per-point distances so that assignment and
//! inertia agree on the metric.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    pub centroids: Vec<f32>,
    pub dim: usize,
    pub n_clusters: usize,
    pub assignments: Vec<usize>,
    /// Inertia after each completed iteration.
    pub inertia_trace: Vec<f64>,
    pub iterations_run: usize,
}

impl KmeansResult {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Inertia of the returned assignment against the returned centroids.
    pub fn inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(0.0)
    }
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f32], centroids: &[f32], dim: usize) -> (usize, f32) {
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(point, centroid);
        // strict comparison keeps the lower index on ties
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

pub fn assign_nearest(points: &[f32], centroids: &[f32], dim: usize) -> Result<Vec<usize>> {
    check_grid(points, dim, "points")?;
    check_grid(centroids, dim, "centroids")?;
    if centroids.is_empty() {
        return Err(Error::EmptyInput("centroids"));
    }
    Ok(points
        .chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim).0)
        .collect())
}

fn check_grid(data: &[f32], dim: usize, what: &str) -> Result<()> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch(format!(
            "{what}: length {} is not a multiple of dim {dim}",
            data.len()
        )));
    }
    Ok(())
}

pub fn kmeans_fit(
    points: &[f32],
    dim: usize,
    n_clusters: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KmeansResult> {
    check_grid(points, dim, "points")?;
    let n = points.len() / dim;
    if n == 0 {
        return Err(Error::EmptyInput("kmeans points"));
    }
    if n_clusters == 0 {
        return Err(Error::EmptyInput("n_clusters must be >= 1"));
    }
    if max_iter == 0 {
        return Err(Error::EmptyInput("max_iter must be >= 1"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = if n <= n_clusters {
        distinct_point_init(points, dim, n_clusters)
    } else {
        plus_plus_init(points, dim, n_clusters, &mut rng)
    };

    let mut assignments: Vec<usize> = points
        .chunks_exact(dim)
        .map(|p| nearest(p, &centroids, dim).0)
        .collect();
    let mut inertia_trace = Vec::new();
    let mut iterations_run = 0;

    while iterations_run < max_iter {
        update_centroids(points, dim, &mut assignments, &mut centroids, n_clusters);
        let (next, inertia) = assign_with_inertia(points, dim, &centroids);
        inertia_trace.push(inertia);
        iterations_run += 1;
        let changed = next != assignments;
        assignments = next;
        if !changed {
            break;
        }
    }

    Ok(KmeansResult {
        centroids,
        dim,
        n_clusters,
        assignments,
        inertia_trace,
        iterations_run,
    })
}

fn assign_with_inertia(points: &[f32], dim: usize, centroids: &[f32]) -> (Vec<usize>, f64) {
    let mut inertia = 0.0f64;
    let assignments = points
        .chunks_exact(dim)
        .map(|p| {
            let (c, d) = nearest(p, centroids, dim);
            inertia += d as f64;
            c
        })
        .collect();
    (assignments, inertia)
}

/// One centroid per distinct point in input order; remaining slots repeat
/// the last distinct point.
fn distinct_point_init(points: &[f32], dim: usize, n_clusters: usize) -> Vec<f32> {
    let mut distinct: Vec<&[f32]> = Vec::new();
    for p in points.chunks_exact(dim) {
        if !distinct.iter().any(|q| bitwise_eq(q, p)) {
            distinct.push(p);
        }
    }
    let last = *distinct.last().expect("at least one point");
    let mut centroids = Vec::with_capacity(n_clusters * dim);
    for c in 0..n_clusters {
        centroids.extend_from_slice(distinct.get(c).copied().unwrap_or(last));
    }
    centroids
}

fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn plus_plus_init(points: &[f32], dim: usize, n_clusters: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centroids = Vec::with_capacity(n_clusters * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d: Vec<f64> = (0..n)
        .map(|i| squared_distance(row(i), row(first)) as f64)
        .collect();

    for _ in 1..n_clusters {
        let pick = match WeightedIndex::new(&min_d) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        let chosen = row(pick).to_vec();
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = squared_distance(row(i), &chosen) as f64;
            if nd < *d {
                *d = nd;
            }
        }
        centroids.extend_from_slice(&chosen);
    }
    centroids
}

fn cluster_sse(points: &[f32], dim: usize, members: &[usize], centroid: &[f32]) -> f64 {
    members
        .iter()
        .map(|&i| squared_distance(&points[i * dim..(i + 1) * dim], centroid) as f64)
        .sum()
}

fn member_mean(points: &[f32], dim: usize, members: &[usize]) -> Vec<f32> {
    let mut acc = vec![0.0f64; dim];
    for &i in members {
        for (a, v) in acc.iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *a += *v as f64;
        }
    }
    let count = members.len() as f64;
    acc.into_iter().map(|a| (a / count) as f32).collect()
}

/// Moves `centroid` to the member mean unless f32 rounding would make the
/// cluster's SSE larger than at the current position.
fn refit(points: &[f32], dim: usize, members: &[usize], centroid: &mut [f32]) {
    if members.is_empty() {
        return;
    }
    let mean = member_mean(points, dim, members);
    if cluster_sse(points, dim, members, &mean) <= cluster_sse(points, dim, members, centroid) {
        centroid.copy_from_slice(&mean);
    }
}

fn update_centroids(
    points: &[f32],
    dim: usize,
    assignments: &mut [usize],
    centroids: &mut [f32],
    n_clusters: usize,
) {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (i, &c) in assignments.iter().enumerate() {
        members[c].push(i);
    }
    for (c, centroid) in centroids.chunks_exact_mut(dim).enumerate() {
        refit(points, dim, &members[c], centroid);
    }

    // Empty clusters take the point farthest from its centroid, drawn from a
    // cluster that keeps at least one member.
    for empty in 0..n_clusters {
        if !members[empty].is_empty() {
            continue;
        }
        let mut far: Option<(usize, f32)> = None;
        for (i, &c) in assignments.iter().enumerate() {
            if members[c].len() < 2 {
                continue;
            }
            let d = squared_distance(
                &points[i * dim..(i + 1) * dim],
                &centroids[c * dim..(c + 1) * dim],
            );
            if d > 0.0 && far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let Some((point, _)) = far else { continue };
        let donor = assignments[point];
        members[donor].retain(|&i| i != point);
        members[empty].push(point);
        assignments[point] = empty;
        centroids[empty * dim..(empty + 1) * dim]
            .copy_from_slice(&points[point * dim..(point + 1) * dim]);
        refit(
            points,
            dim,
            &members[donor],
            &mut centroids[donor * dim..(donor + 1) * dim],
        );
    }
}

//! k-means over goal-space points, used to find nearby states across
//! trajectories.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::env::{phi, Goal};
use crate::error::{Error, Result};

pub type Point = [f64; 2];

fn sq_dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Index of the nearest centroid; ties go to the lowest index.
pub fn nearest(centroids: &[Point], p: &Point) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, p);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Point>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroid, one entry per
    /// Lloyd iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn count_distinct(points: &[Point]) -> usize {
    points
        .iter()
        .map(|p| (p[0].to_bits(), p[1].to_bits()))
        .collect::<HashSet<_>>()
        .len()
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is a
/// fixpoint or `max_iters` is reached.
pub fn kmeans_fit(points: &[Point], c: usize, max_iters: usize, seed: u64) -> Result<KMeans> {
    if c == 0 {
        return Err(Error::Config("cluster count must be at least 1".into()));
    }
    let distinct = count_distinct(points);
    if c > distinct {
        return Err(Error::Config(format!(
            "cluster count {c} exceeds the {distinct} distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|d| *d > 0.0).unwrap_or(0);
        for (k, d) in d2.iter().enumerate() {
            if *d > 0.0 && u < *d {
                pick = k;
                break;
            }
            u -= d;
        }
        let chosen = points[pick];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &chosen));
        }
        centroids.push(chosen);
    }

    let mut assignment: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
    let mut objective: Vec<f64> = Vec::new();
    let mut iterations = 0;
    loop {
        let obj: f64 = points
            .iter()
            .zip(&assignment)
            .map(|(p, k)| sq_dist(p, &centroids[*k]))
            .sum();
        if let Some(prev) = objective.last() {
            assert!(
                obj <= prev + 1e-9 * prev.abs().max(1.0),
                "Lloyd objective increased from {prev} to {obj}"
            );
        }
        objective.push(obj);
        if iterations >= max_iters {
            break;
        }
        iterations += 1;
        let mut sums = vec![[0.0; 2]; c];
        let mut counts = vec![0usize; c];
        for (p, k) in points.iter().zip(&assignment) {
            sums[*k][0] += p[0];
            sums[*k][1] += p[1];
            counts[*k] += 1;
        }
        for k in 0..c {
            if counts[k] > 0 {
                centroids[k] = [sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64];
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centroids, p)).collect();
        let changed = next != assignment;
        assignment = next;
        if !changed {
            let obj: f64 = points
                .iter()
                .zip(&assignment)
                .map(|(p, k)| sq_dist(p, &centroids[*k]))
                .sum();
            objective.push(obj);
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignment,
        objective,
        iterations,
    })
}

/// Exact maximum pairwise distance within each cluster.
pub fn cluster_diameters(points: &[Point], assignment: &[usize], c: usize) -> Vec<f64> {
    let mut groups: Vec<HashSet<(u64, u64)>> = vec![HashSet::new(); c];
    for (p, k) in points.iter().zip(assignment) {
        groups[*k].insert((p[0].to_bits(), p[1].to_bits()));
    }
    groups
        .into_iter()
        .map(|g| {
            let pts: Vec<Point> = g
                .into_iter()
                .map(|(x, y)| [f64::from_bits(x), f64::from_bits(y)])
                .collect();
            let mut best: f64 = 0.0;
            for a in 0..pts.len() {
                for b in a + 1..pts.len() {
                    best = best.max(sq_dist(&pts[a], &pts[b]));
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Cluster assignments for dataset states, keyed by `(trajectory, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterIndex {
    pub centroids: Vec<Point>,
    /// Maximum intra-cluster pairwise distance, per cluster.
    pub eps_k: Vec<f64>,
    keys: Vec<(usize, usize)>,
    assignment: Vec<usize>,
    members: Vec<Vec<(usize, usize)>>,
    lookup: HashMap<(usize, usize), usize>,
}

impl ClusterIndex {
    pub fn fit(ds: &OfflineDataset, c: usize, max_iters: usize, seed: u64) -> Result<Self> {
        Self::fit_filtered(ds, c, max_iters, seed, |_, _| true)
    }

    /// Clusters only the states for which `keep(traj, t)` holds.
    pub fn fit_filtered(
        ds: &OfflineDataset,
        c: usize,
        max_iters: usize,
        seed: u64,
        keep: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut keys = Vec::new();
        let mut points = Vec::new();
        for (traj, tr) in ds.trajectories.iter().enumerate() {
            for (t, s) in tr.states.iter().enumerate() {
                if keep(traj, t) {
                    keys.push((traj, t));
                    points.push(phi(s).0);
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Config("no states selected for clustering".into()));
        }
        let km = kmeans_fit(&points, c, max_iters, seed)?;
        let eps_k = cluster_diameters(&points, &km.assignment, c);
        Ok(Self::from_parts(km.centroids, eps_k, keys, km.assignment))
    }

    fn from_parts(centroids: Vec<Point>, eps_k: Vec<f64>, keys: Vec<(usize, usize)>, assignment: Vec<usize>) -> Self {
        let mut members = vec![Vec::new(); centroids.len()];
        let mut lookup = HashMap::with_capacity(keys.len());
        for (key, k) in keys.iter().zip(&assignment) {
            members[*k].push(*key);
            lookup.insert(*key, *k);
        }
        ClusterIndex {
            centroids,
            eps_k,
            keys,
            assignment,
            members,
            lookup,
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn n_points(&self) -> usize {
        self.keys.len()
    }

    pub fn assign(&self, g: &Goal) -> usize {
        nearest(&self.centroids, &g.0)
    }

    /// Stored assignment of a dataset state, if it was clustered.
    pub fn cluster_of(&self, traj: usize, t: usize) -> Option<usize> {
        self.lookup.get(&(traj, t)).copied()
    }

    pub fn members(&self, k: usize) -> &[(usize, usize)] {
        &self.members[k]
    }

    pub fn max_eps(&self) -> f64 {
        self.eps_k.iter().copied().fold(0.0, f64::max)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IndexFile {
            centroids: self.centroids.clone(),
            eps_k: self.eps_k.clone(),
            assignments: self
                .keys
                .iter()
                .zip(&self.assignment)
                .map(|((traj, t), k)| [*traj, *t, *k])
                .collect(),
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: IndexFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.eps_k.len() != f.centroids.len() || f.assignments.iter().any(|a| a[2] >= f.centroids.len()) {
            return Err(Error::Config("cluster index file is inconsistent".into()));
        }
        let keys = f.assignments.iter().map(|a| (a[0], a[1])).collect();
        let assignment = f.assignments.iter().map(|a| a[2]).collect();
        Ok(Self::from_parts(f.centroids, f.eps_k, keys, assignment))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    centroids: Vec<Point>,
    eps_k: Vec<f64>,
    assignments: Vec<[usize; 3]>,
}

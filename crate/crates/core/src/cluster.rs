//! K-means over partial gradients and the temporary labels derived from it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{squared_distance, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: 300,
            tol: 1e-6,
            restarts: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

/// k-means++ seeding, Lloyd iterations and a single-point transfer pass,
/// keeping the lowest-inertia restart (ties go to the earlier restart).
pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if cfg.k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if points.rows() < cfg.k {
        return Err(Error::invalid(format!(
            "{} points cannot form {} clusters",
            points.rows(),
            cfg.k
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let mut run = lloyd(points, plus_plus_init(points, cfg.k, &mut rng), cfg);
        transfer_refine(points, &mut run);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn plus_plus_init<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut nearest: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // every point coincides with a centroid already
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (d, p) in nearest.iter_mut().zip(points.iter_rows()) {
            *d = d.min(squared_distance(p, centroids.row(c)));
        }
    }
    centroids
}

/// Nearest centroid, lowest index on ties.
fn nearest_centroid(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter_rows().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(points: &Matrix, mut centroids: Matrix, cfg: &KMeansConfig) -> KMeansResult {
    let n = points.rows();
    let k = cfg.k;
    let dim = points.cols();
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        for (i, p) in points.iter_rows().enumerate() {
            let (c, d) = nearest_centroid(p, &centroids);
            assignments[i] = c;
            dists[i] = d;
        }
        repair_empty_clusters(points, &mut centroids, &mut assignments, &mut dists, k);
        history.push(dists.iter().sum());
        if iterations == cfg.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter_rows().zip(&assignments) {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            let inv = 1.0 / count as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(squared_distance(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift < cfg.tol {
            // one more assignment pass so assignments and inertia match the final centroids
            for (i, p) in points.iter_rows().enumerate() {
                let (c, d) = nearest_centroid(p, &centroids);
                assignments[i] = c;
                dists[i] = d;
            }
            repair_empty_clusters(points, &mut centroids, &mut assignments, &mut dists, k);
            history.push(dists.iter().sum());
            break;
        }
    }
    KMeansResult {
        centroids,
        assignments,
        inertia: *history.last().expect("at least one pass"),
        iterations_run: iterations,
        inertia_history: history,
    }
}

/// Hartigan-style refinement after Lloyd converges: moves one point at a time
/// whenever that lowers the within-cluster sum of squares, keeping exact
/// cluster means. Stable partitions here are also Lloyd fixed points.
fn transfer_refine(points: &Matrix, run: &mut KMeansResult) {
    let k = run.centroids.rows();
    let mut counts = vec![0usize; k];
    let mut sums = Matrix::zeros(k, points.cols());
    for (p, &c) in points.iter_rows().zip(&run.assignments) {
        counts[c] += 1;
        for (s, v) in sums.row_mut(c).iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut centroids = Matrix::zeros(k, points.cols());
    let set_mean = |centroids: &mut Matrix, sums: &Matrix, counts: &[usize], c: usize| {
        let inv = 1.0 / counts[c] as f64;
        for (m, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
            *m = s * inv;
        }
    };
    for c in 0..k {
        set_mean(&mut centroids, &sums, &counts, c);
    }
    loop {
        let mut moved = false;
        for (i, p) in points.iter_rows().enumerate() {
            let from = run.assignments[i];
            if counts[from] == 1 {
                continue;
            }
            let nf = counts[from] as f64;
            let saved = nf / (nf - 1.0) * squared_distance(p, centroids.row(from));
            let mut best = (from, saved * (1.0 - 1e-12));
            for to in (0..k).filter(|&to| to != from) {
                let nt = counts[to] as f64;
                let added = nt / (nt + 1.0) * squared_distance(p, centroids.row(to));
                if added < best.1 {
                    best = (to, added);
                }
            }
            let to = best.0;
            if to == from {
                continue;
            }
            for (s, v) in sums.row_mut(from).iter_mut().zip(p) {
                *s -= v;
            }
            for (s, v) in sums.row_mut(to).iter_mut().zip(p) {
                *s += v;
            }
            counts[from] -= 1;
            counts[to] += 1;
            set_mean(&mut centroids, &sums, &counts, from);
            set_mean(&mut centroids, &sums, &counts, to);
            run.assignments[i] = to;
            moved = true;
        }
        if !moved {
            break;
        }
    }
    let inertia: f64 = points
        .iter_rows()
        .zip(&run.assignments)
        .map(|(p, &c)| squared_distance(p, centroids.row(c)))
        .sum();
    if inertia < run.inertia {
        run.inertia = inertia;
        run.inertia_history.push(inertia);
    }
    run.centroids = centroids;
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty_clusters(
    points: &Matrix,
    centroids: &mut Matrix,
    assignments: &mut [usize],
    dists: &mut [f64],
    k: usize,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // only take from clusters that keep at least one member
        let donor = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
            .expect("n >= k guarantees a cluster with two members");
        assignments[donor] = empty;
        dists[donor] = 0.0;
        centroids.row_mut(empty).copy_from_slice(points.row(donor));
    }
}

/// Unit-normalizes each row; zero rows stay zero.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempLabels {
    /// Cluster index of each overlap sample. Not aligned with server class ids.
    pub labels: Vec<usize>,
    pub num_clusters: usize,
    pub inertia: f64,
}

/// Clusters gradient rows into `classes` groups and labels each overlap sample
/// with its cluster index.
pub fn gradients_to_templabels(
    grads: &Matrix,
    classes: usize,
    normalize: bool,
    restarts: usize,
    seed: u64,
) -> Result<TempLabels> {
    if classes > grads.rows() {
        return Err(Error::invalid(format!(
            "{classes} classes exceed {} overlap samples",
            grads.rows()
        )));
    }
    let points = if normalize {
        l2_normalize_rows(grads)
    } else {
        grads.clone()
    };
    let mut cfg = KMeansConfig::new(classes, seed);
    cfg.restarts = restarts;
    let result = kmeans(&points, &cfg)?;
    Ok(TempLabels {
        labels: result.assignments,
        num_clusters: classes,
        inertia: result.inertia,
    })
}

/// Fraction of samples whose cluster's majority class matches their own class.
pub fn purity(clusters: &[usize], classes: &[usize]) -> f64 {
    assert_eq!(clusters.len(), classes.len());
    if clusters.is_empty() {
        return 0.0;
    }
    let kc = clusters.iter().max().map_or(0, |m| m + 1);
    let cc = classes.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; cc]; kc];
    for (&k, &c) in clusters.iter().zip(classes) {
        table[k][c] += 1;
    }
    let majority: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / clusters.len() as f64
}

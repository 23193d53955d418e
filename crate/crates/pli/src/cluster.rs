//! K-means clustering of vertex features and agreement metrics against
//! reference labels: purity, mutual information (nats), and the adjusted
//! Rand index, plus the subsample-and-evaluate protocol used for the
//! method comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, splitmix};

const STREAM_KMEANS_INIT: u64 = 41;
const STREAM_PROTOCOL_SUBSET: u64 = 42;

/// A fitted k-means clustering.
#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    /// Cluster id per input row.
    pub assignments: Vec<usize>,
    /// `[k, dims]` cluster centers.
    pub centroids: Array2<f64>,
    /// Sum of squared distances from each row to its centroid.
    pub inertia: f64,
    /// Inertia after each assignment step; non-increasing by construction.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties broken toward the lowest index.
fn nearest(centroids: &Array2<f64>, point: ndarray::ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (idx, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(c, point);
        if d < best_d {
            best_d = d;
            best = idx;
        }
    }
    (best, best_d)
}

/// Squared-distance-weighted (k-means++) centroid seeding.
fn seed_centroids(x: &Array2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let (n, dims) = x.dim();
    let mut centroids = Array2::<f64>::zeros((k, dims));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut min_d: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = min_d.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in min_d.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for i in 0..n {
            let d = sq_dist(x.row(i), x.row(pick));
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }
    centroids
}

/// Lloyd iterations from explicit starting centroids. An emptied cluster is
/// reseeded with the point farthest from its current centroid.
fn lloyd(
    x: &Array2<f64>,
    mut centroids: Array2<f64>,
    max_iters: usize,
    tol: f64,
) -> ClusterAssignment {
    let (n, dims) = x.dim();
    let k = centroids.dim().0;
    let mut assignments = vec![0usize; n];
    let mut inertia = f64::INFINITY;
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        // Assign.
        let mut new_inertia = 0.0;
        for i in 0..n {
            let (c, d) = nearest(&centroids, x.row(i));
            assignments[i] = c;
            new_inertia += d;
        }
        debug_assert!(
            new_inertia <= inertia + 1e-9 * inertia.abs().max(1.0),
            "inertia grew: {inertia} -> {new_inertia}"
        );
        inertia = new_inertia;
        history.push(inertia);

        // Refill any emptied cluster with the farthest point from its own
        // centroid, one cluster at a time.
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut refilled = false;
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assignments[i]] <= 1 {
                    continue;
                }
                let d = sq_dist(x.row(i), centroids.row(assignments[i]));
                if d > far_d {
                    far_d = d;
                    far = i;
                }
            }
            counts[assignments[far]] -= 1;
            assignments[far] = c;
            counts[c] = 1;
            refilled = true;
        }

        // Update.
        let mut sums = Array2::<f64>::zeros((k, dims));
        for i in 0..n {
            let mut row = sums.row_mut(assignments[i]);
            row += &x.row(i);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for d in 0..dims {
                let next = sums[[c, d]] * inv;
                moved += (next - centroids[[c, d]]).powi(2);
                centroids[[c, d]] = next;
            }
            shift = shift.max(moved.sqrt());
        }
        if shift < tol && !refilled {
            break;
        }
    }
    // Final assignment against the converged centroids.
    let mut final_inertia = 0.0;
    for i in 0..n {
        let (c, d) = nearest(&centroids, x.row(i));
        assignments[i] = c;
        final_inertia += d;
    }
    history.push(final_inertia);
    ClusterAssignment {
        assignments,
        centroids,
        inertia: final_inertia,
        inertia_history: history,
    }
}

/// K-means with squared-distance-weighted seeding and Lloyd refinement.
pub fn kmeans(x: &Array2<f64>, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterAssignment> {
    let (n, _) = x.dim();
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if n < k {
        return Err(Error::invalid(format!("{n} rows cannot form {k} clusters")));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("clustering requires finite inputs"));
    }
    let mut rng = keyed_rng(seed, STREAM_KMEANS_INIT, 0);
    let centroids = seed_centroids(x, k, &mut rng);
    Ok(lloyd(x, centroids, max_iters, tol))
}

/// Label each row by its nearest centroid (lowest index on ties).
#[must_use]
pub fn assign_to_centroids(centroids: &Array2<f64>, x: &Array2<f64>) -> Vec<usize> {
    (0..x.dim().0)
        .map(|i| nearest(centroids, x.row(i)).0)
        .collect()
}

/// Dense contingency table between two labelings, with arbitrary ids mapped
/// to consecutive rows/columns in sorted id order.
fn contingency(a: &[usize], b: &[usize]) -> Result<(Vec<Vec<usize>>, Vec<usize>, Vec<usize>)> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "partition lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("empty partitions have no agreement"));
    }
    let map_of = |ids: &[usize]| -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &id in ids {
            let next = m.len();
            m.entry(id).or_insert(next);
        }
        m
    };
    let ma = map_of(a);
    let mb = map_of(b);
    let mut table = vec![vec![0usize; mb.len()]; ma.len()];
    for (&ai, &bi) in a.iter().zip(b) {
        table[ma[&ai]][mb[&bi]] += 1;
    }
    let rows: Vec<usize> = table.iter().map(|r| r.iter().sum()).collect();
    let cols: Vec<usize> = (0..mb.len()).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    Ok((table, rows, cols))
}

/// Fraction of points whose cluster's majority label matches their own.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let (table, _, _) = contingency(assignments, labels)?;
    let hits: usize = table
        .iter()
        .map(|row| row.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(hits as f64 / assignments.len() as f64)
}

/// Mutual information of the joint partition distribution, in nats.
pub fn mutual_information(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(assignments, labels)?;
    let n = assignments.len() as f64;
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let pij = nij as f64 / n;
            let pi = rows[i] as f64 / n;
            let qj = cols[j] as f64 / n;
            mi += pij * (pij / (pi * qj)).ln();
        }
    }
    Ok(mi.max(0.0))
}

fn choose2(n: usize) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Chance-corrected partition agreement under the permutation model.
pub fn adjusted_rand_index(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    let (table, rows, cols) = contingency(assignments, labels)?;
    let index: f64 = table
        .iter()
        .flat_map(|r| r.iter())
        .map(|&nij| choose2(nij))
        .sum();
    let sum_a: f64 = rows.iter().map(|&a| choose2(a)).sum();
    let sum_b: f64 = cols.iter().map(|&b| choose2(b)).sum();
    let total = choose2(assignments.len());
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        // Both partitions trivial in the same way; they agree perfectly.
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Metrics of one evaluation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunMetrics {
    pub run: usize,
    pub purity: f64,
    pub ari: f64,
    pub mi: f64,
}

/// Per-run metrics plus their means.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_run: Vec<RunMetrics>,
}

impl MetricsReport {
    #[must_use]
    pub fn mean_purity(&self) -> f64 {
        self.mean(|r| r.purity)
    }

    #[must_use]
    pub fn mean_ari(&self) -> f64 {
        self.mean(|r| r.ari)
    }

    #[must_use]
    pub fn mean_mi(&self) -> f64 {
        self.mean(|r| r.mi)
    }

    fn mean(&self, f: impl Fn(&RunMetrics) -> f64) -> f64 {
        self.per_run.iter().map(f).sum::<f64>() / self.per_run.len().max(1) as f64
    }

    /// CSV rows matching [`metrics_csv_header`], one per run.
    #[must_use]
    pub fn csv_rows(&self, method: &str, input_modalities: &str) -> String {
        let mut out = String::new();
        for r in &self.per_run {
            let _ = writeln!(
                out,
                "{method},{input_modalities},{run},{purity},{ari},{mi}",
                run = r.run,
                purity = r.purity,
                ari = r.ari,
                mi = r.mi,
            );
        }
        out
    }
}

/// Header for the evaluation CSV.
#[must_use]
pub fn metrics_csv_header() -> &'static str {
    "method,input_modalities,run,purity,ari,mi"
}

/// The table's evaluation protocol: per run, fit k-means on a random subset
/// of rows (without replacement), assign every row to the nearest centroid,
/// and score the full assignment against the labels.
pub fn evaluate_protocol(
    x: &Array2<f64>,
    labels: &[usize],
    runs: usize,
    fraction: f64,
    k: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let (n, _) = x.dim();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} feature rows but {} labels",
            labels.len()
        )));
    }
    if n < 2 * k {
        return Err(Error::invalid(format!(
            "protocol needs at least {} rows for k = {k}, found {n}",
            2 * k
        )));
    }
    if runs == 0 {
        return Err(Error::invalid("protocol needs at least one run"));
    }
    if !(0.0..=1.0).contains(&fraction) || fraction <= 0.0 {
        return Err(Error::invalid("subset fraction must lie in (0, 1]"));
    }
    let m = (fraction * n as f64).round() as usize;
    if m < k {
        return Err(Error::invalid(format!(
            "subset of {m} rows cannot seed {k} clusters"
        )));
    }
    let per_run: Result<Vec<RunMetrics>> = (0..runs)
        .into_par_iter()
        .map(|run| {
            let run_seed = splitmix(seed ^ splitmix(run as u64));
            let mut rng = keyed_rng(run_seed, STREAM_PROTOCOL_SUBSET, 0);
            let mut subset = rand::seq::index::sample(&mut rng, n, m).into_vec();
            subset.sort_unstable();
            let mut sub = Array2::<f64>::zeros((m, x.dim().1));
            for (row, &src) in subset.iter().enumerate() {
                sub.row_mut(row).assign(&x.row(src));
            }
            let fit = kmeans(&sub, k, run_seed, 300, 1e-6)?;
            let full = assign_to_centroids(&fit.centroids, x);
            Ok(RunMetrics {
                run,
                purity: purity(&full, labels)?,
                ari: adjusted_rand_index(&full, labels)?,
                mi: mutual_information(&full, labels)?,
            })
        })
        .collect();
    Ok(MetricsReport { per_run: per_run? })
}

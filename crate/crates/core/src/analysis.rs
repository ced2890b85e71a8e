//! Structure of learned user embeddings: export, PCA projection and
//! cluster agreement with ground-truth user groups.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Writes `user_id,e0,…,e{D-1}`, one row per user, sorted by user id.
pub fn export_embeddings(embeddings: &BTreeMap<String, Tensor>, path: &Path) -> Result<()> {
    let Some(first) = embeddings.values().next() else {
        return Err(Error::contract("no embeddings to export"));
    };
    let dim = first.len();
    let mut out = String::from("user_id");
    for k in 0..dim {
        write!(out, ",e{k}").unwrap();
    }
    out.push('\n');
    for (user, e) in embeddings {
        if e.len() != dim {
            return Err(Error::dim("export_embeddings", format!("{user} has length {}", e.len())));
        }
        out.push_str(user);
        for v in e.values() {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Projects rows onto the top `out_dim` principal axes of the centered data.
///
/// Each axis is oriented so that its largest-magnitude component is
/// positive.
pub fn pca_project(rows: &[Vec<f64>], out_dim: usize) -> Result<Vec<Vec<f64>>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim("pca_project", "rows have different lengths"));
    }
    if out_dim == 0 || out_dim > n.min(d) {
        return Err(Error::contract(format!(
            "out_dim {out_dim} must be in 1..={} for {n} rows of dimension {d}",
            n.min(d)
        )));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut axes = DMatrix::zeros(d, out_dim);
    for (c, &k) in order.iter().take(out_dim).enumerate() {
        let mut v = eig.eigenvectors.column(k).clone_owned();
        let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        axes.set_column(c, &v);
    }
    let proj = x * axes;
    Ok((0..n).map(|i| proj.row(i).iter().copied().collect()).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn kmeans_once<R: Rng>(points: &[Vec<f64>], k: usize, rng: &mut R) -> KMeansFit {
    // k-means++ seeding.
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            d2.iter()
                .position(|&w| {
                    target -= w;
                    target <= 0.0
                })
                .unwrap_or(points.len() - 1)
        } else {
            rng.gen_range(0..points.len())
        };
        centroids.push(points[pick].clone());
    }

    let dim = points[0].len();
    let mut assignments = vec![usize::MAX; points.len()];
    for _ in 0..300 {
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let best = (0..k)
                .min_by(|&x, &y| sq_dist(p, &centroids[x]).total_cmp(&sq_dist(p, &centroids[y])))
                .unwrap();
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            // Empty clusters keep their previous centroid.
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = assignments
        .iter()
        .zip(points)
        .map(|(&a, p)| sq_dist(p, &centroids[a]))
        .sum();
    KMeansFit {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's k-means with k-means++ seeding; keeps the lowest-inertia of
/// `restarts` runs.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || points.len() < k {
        return Err(Error::contract(format!("k-means needs 1 <= k <= {}, got {k}", points.len())));
    }
    let mut rng = seed::rng("kmeans", &[seed]);
    (0..restarts.max(1))
        .map(|_| kmeans_once(points, k, &mut rng))
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia))
        .ok_or_else(|| Error::contract("no k-means runs"))
}

fn pairs(n: u64) -> f64 {
    (n * n.saturating_sub(1) / 2) as f64
}

/// Adjusted Rand Index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract("labelings have different lengths"));
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&v| pairs(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| pairs(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| pairs(v)).sum();
    let total = pairs(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// ARI between seeded k-means clusters of the embeddings and the
/// ground-truth groups. Identical embeddings yield 0.
pub fn cluster_agreement(
    embeddings: &BTreeMap<String, Tensor>,
    truth: &BTreeMap<String, usize>,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::contract(format!("cluster_agreement needs k >= 2, got {k}")));
    }
    if embeddings.len() < k {
        return Err(Error::contract(format!(
            "cluster_agreement needs at least {k} users, got {}",
            embeddings.len()
        )));
    }
    let mut points = Vec::with_capacity(embeddings.len());
    let mut labels = Vec::with_capacity(embeddings.len());
    for (user, e) in embeddings {
        let g = truth
            .get(user)
            .ok_or_else(|| Error::contract(format!("no ground-truth cluster for user {user:?}")))?;
        points.push(e.values().to_vec());
        labels.push(*g);
    }
    if points.iter().all(|p| p == &points[0]) {
        log::warn!("all embeddings are identical; cluster agreement is 0");
        return Ok(0.0);
    }
    let fit = kmeans(&points, k, 20, seed)?;
    adjusted_rand_index(&fit.assignments, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub mode: String,
    pub ari: f64,
    pub n_users: usize,
}

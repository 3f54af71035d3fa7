//! Correlation-based feature clustering.
//!
//! Each feature is embedded as its row of the Pearson correlation matrix and
//! the rows are clustered with k-means (k-means++ seeding, Lloyd updates).
//! `select_k` picks k at the elbow of the inertia curve and reports the
//! silhouette of the chosen partition.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::TimeTable;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    names: Vec<String>,
    values: Vec<f64>,
}

impl CorrelationMatrix {
    /// Builds a matrix from explicit values; the upper triangle is mirrored
    /// onto the lower one and the diagonal forced to 1.
    pub fn from_values(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = names.len();
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {n}x{n} correlation matrix",
                values.len()
            )));
        }
        let mut m = Self { names, values };
        for i in 0..n {
            m.values[i * n + i] = 1.0;
            for j in i + 1..n {
                let v = m.values[i * n + j].clamp(-1.0, 1.0);
                m.values[i * n + j] = v;
                m.values[j * n + i] = v;
            }
        }
        Ok(m)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.len();
        &self.values[i * n..(i + 1) * n]
    }
}

/// Pearson correlation between every pair of columns. Constant columns
/// correlate 0 with everything else.
pub fn correlation_matrix(table: &TimeTable) -> Result<CorrelationMatrix> {
    let m = table.n_rows();
    if m < 2 {
        return Err(Error::TooFewRows { needed: 2, got: m });
    }
    let f = table.n_features();
    let centered: Vec<Vec<f64>> = (0..f)
        .map(|c| {
            let col = table.column(c);
            let mean = crate::stats::mean(&col);
            col.into_iter().map(|v| v - mean).collect()
        })
        .collect();
    let ss: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();

    let mut values = vec![0.0; f * f];
    for i in 0..f {
        for j in i + 1..f {
            let denom = (ss[i] * ss[j]).sqrt();
            let r = if denom > 0.0 {
                let cross: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                cross / denom
            } else {
                0.0
            };
            values[i * f + j] = r;
        }
    }
    CorrelationMatrix::from_values(table.feature_names().to_vec(), values)
}

/// A partition of features into k non-empty clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub silhouette: Option<f64>,
    #[serde(default)]
    pub inertia: f64,
    pub assignment: BTreeMap<String, usize>,
}

impl ClusterAssignment {
    /// Builds an assignment from per-feature labels in `names` order.
    pub fn from_labels(names: &[String], labels: &[usize]) -> Result<Self> {
        if names.len() != labels.len() {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: labels.len(),
            });
        }
        let k = labels.iter().max().map_or(0, |m| m + 1);
        for c in 0..k {
            if !labels.contains(&c) {
                return Err(Error::EmptyCluster(c));
            }
        }
        Ok(Self {
            k,
            silhouette: None,
            inertia: 0.0,
            assignment: names.iter().cloned().zip(labels.iter().copied()).collect(),
        })
    }

    pub fn cluster_of(&self, feature: &str) -> Option<usize> {
        self.assignment.get(feature).copied()
    }

    /// Column indices of each cluster's members, following `feature_order`.
    pub fn groups(&self, feature_order: &[String]) -> Result<Vec<Vec<usize>>> {
        if feature_order.len() != self.assignment.len() {
            return Err(Error::ModelDataMismatch(format!(
                "assignment covers {} features, data has {}",
                self.assignment.len(),
                feature_order.len()
            )));
        }
        let mut groups = vec![Vec::new(); self.k];
        for (i, name) in feature_order.iter().enumerate() {
            let c = self
                .cluster_of(name)
                .ok_or_else(|| Error::MissingColumn(name.clone()))?;
            groups
                .get_mut(c)
                .ok_or(Error::KOutOfRange { k: c, min: 0, max: self.k })?
                .push(i);
        }
        if let Some(empty) = groups.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCluster(empty));
        }
        Ok(groups)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) struct KMeansRun {
    pub labels: Vec<usize>,
    pub inertia: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub inertia_history: Vec<f64>,
}

fn plus_plus_seeds(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if *d > 0.0 && target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            if d2[pick] == 0.0 {
                // Rounding fell off the end; take the last point with mass.
                pick = d2.iter().rposition(|d| *d > 0.0).unwrap();
            }
            pick
        } else {
            // All remaining points coincide with a centre.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points[next]));
        }
    }
    chosen.iter().map(|&i| points[i].to_vec()).collect()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(p, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn centroids_of(points: &[&[f64]], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

fn inertia_of(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[&[f64]], labels: &mut [usize], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let centroids = centroids_of(points, labels, k);
        let donor = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                let da = sq_dist(points[a], &centroids[labels[a]]);
                let db = sq_dist(points[b], &centroids[labels[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("k <= number of points");
        labels[donor] = empty;
    }
}

/// Relabels clusters in order of first appearance.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

pub(crate) fn lloyd(points: &[&[f64]], k: usize, seed: u64) -> KMeansRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(points, &mut labels, k);
    centroids = centroids_of(points, &labels, k);
    let mut history = vec![inertia_of(points, &labels, &centroids)];

    for _ in 0..MAX_ITERATIONS {
        let mut next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut next, k);
        let stable = next == labels;
        labels = next;
        centroids = centroids_of(points, &labels, k);
        let inertia = inertia_of(points, &labels, &centroids);
        let prev = *history.last().unwrap();
        debug_assert!(
            inertia <= prev + 1e-9 * prev.max(1.0),
            "k-means inertia increased: {prev} -> {inertia}"
        );
        history.push(inertia);
        if stable {
            break;
        }
    }
    KMeansRun {
        labels: canonical(&labels),
        inertia: *history.last().unwrap(),
        inertia_history: history,
    }
}

/// Clusters the rows of `corr` into `k` groups.
pub fn kmeans_features(corr: &CorrelationMatrix, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = corr.len();
    if k == 0 || k > n {
        return Err(Error::KOutOfRange { k, min: 1, max: n });
    }
    let points: Vec<&[f64]> = (0..n).map(|i| corr.row(i)).collect();
    let run = lloyd(&points, k, seed);
    let mut out = ClusterAssignment::from_labels(corr.names(), &run.labels)?;
    out.inertia = run.inertia;
    Ok(out)
}

/// Mean silhouette over features (Euclidean distance between rows of `corr`).
/// Members of singleton clusters contribute 0.
pub fn silhouette(corr: &CorrelationMatrix, assignment: &ClusterAssignment) -> Result<f64> {
    if assignment.k < 2 {
        return Err(Error::SingleCluster);
    }
    let groups = assignment.groups(corr.names())?;
    let n = corr.len();
    let mut label = vec![0usize; n];
    for (c, g) in groups.iter().enumerate() {
        g.iter().for_each(|&i| label[i] = c);
    }
    let dist = |i: usize, j: usize| sq_dist(corr.row(i), corr.row(j)).sqrt();

    let mut total = 0.0;
    for i in 0..n {
        let own = &groups[label[i]];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(i, j)).sum::<f64>()
            / (own.len() - 1) as f64;
        let b = groups
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != label[i])
            .map(|(_, g)| g.iter().map(|&j| dist(i, j)).sum::<f64>() / g.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok((total / n as f64).clamp(-1.0, 1.0))
}

/// Runs k-means for every k in `k_min..=k_max` and returns the elbow: the
/// interior k maximising the second difference of the inertia curve (ties to
/// the smaller k; `k_min` when the range has no interior point).
pub fn select_k(corr: &CorrelationMatrix, k_min: usize, k_max: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = corr.len();
    if k_min < 1 || k_min >= k_max || k_max > n {
        return Err(Error::KOutOfRange {
            k: if k_min < 1 { k_min } else { k_max },
            min: 1,
            max: n,
        });
    }
    let runs = (k_min..=k_max)
        .map(|k| kmeans_features(corr, k, seed))
        .collect::<Result<Vec<_>>>()?;
    let inertia: Vec<f64> = runs.iter().map(|r| r.inertia).collect();
    let mut best = 0usize;
    let mut best_curvature = f64::NEG_INFINITY;
    for i in 1..inertia.len().saturating_sub(1) {
        let curvature = inertia[i - 1] - 2.0 * inertia[i] + inertia[i + 1];
        if curvature > best_curvature {
            best_curvature = curvature;
            best = i;
        }
    }
    let mut chosen = runs.into_iter().nth(best).unwrap();
    chosen.silhouette = if chosen.k >= 2 {
        Some(silhouette(corr, &chosen)?)
    } else {
        None
    };
    log::info!(
        "elbow selection over k={k_min}..={k_max}: inertia {inertia:?}, chose k={}",
        chosen.k
    );
    Ok(chosen)
}

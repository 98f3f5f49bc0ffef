//! Item-corpus partitioning: Lloyd k-means on length-normalized embeddings,
//! or dense renumbering of externally supplied category labels.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{EbrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 10, max_iters: 100, tol: 1e-4, seed: 42 }
    }
}

/// A total map from item to cluster together with its inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    k: usize,
    assign: Vec<u32>,
    members: Vec<Vec<u32>>,
}

impl ClusterAssignment {
    /// Builds from a per-item cluster vector. Every cluster in `0..k` must be
    /// non-empty.
    pub fn from_assign(assign: Vec<u32>, k: usize) -> Result<Self> {
        let mut members = vec![Vec::new(); k];
        for (item, &c) in assign.iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(EbrError::Input(format!("item {item} has cluster {c} >= k={k}")));
            }
            members[c].push(item as u32);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(EbrError::Input(format!("cluster {empty} is empty")));
        }
        Ok(Self { k, assign, members })
    }

    /// Everything in one cluster.
    pub fn single(num_items: usize) -> Result<Self> {
        Self::from_assign(vec![0; num_items], 1)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_items(&self) -> usize {
        self.assign.len()
    }

    pub fn members(&self, cluster: usize) -> &[u32] {
        &self.members[cluster]
    }

    pub fn assignments(&self) -> &[u32] {
        &self.assign
    }

    /// Unchecked fast path for hot loops; callers guarantee `item < num_items`.
    #[inline]
    pub fn cluster(&self, item: u32) -> usize {
        self.assign[item as usize] as usize
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["item_internal_id", "cluster_id"])?;
        for (item, c) in self.assign.iter().enumerate() {
            wtr.write_record([item.to_string(), c.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["item_internal_id", "cluster_id"] {
            return Err(EbrError::Format(format!("cluster file: unexpected header {header:?}")));
        }
        let mut rows: Vec<(usize, u32)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
            let parse = |i: usize| {
                rec.get(i).unwrap_or("").trim().parse::<u64>().map_err(|_| EbrError::Parse {
                    line,
                    message: format!("non-integer field {:?}", rec.get(i)),
                })
            };
            rows.push((parse(0)? as usize, parse(1)? as u32));
        }
        let n = rows.len();
        let mut assign = vec![u32::MAX; n];
        for (item, c) in rows {
            if item >= n || assign[item] != u32::MAX {
                return Err(EbrError::Format(format!("cluster file: item {item} missing, duplicated or out of range")));
            }
            assign[item] = c;
        }
        let k = assign.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
        Self::from_assign(assign, k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

pub fn cluster_of(ca: &ClusterAssignment, item: usize) -> Result<usize> {
    ca.assign
        .get(item)
        .map(|&c| c as usize)
        .ok_or(EbrError::Index { index: item, len: ca.assign.len() })
}

/// Renumbers categories densely in order of first appearance.
pub fn assign_from_labels<L>(labels: &[Option<L>]) -> Result<ClusterAssignment>
where
    L: Eq + Hash + Clone + Debug,
{
    let missing: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i).collect();
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(10).map(|i| i.to_string()).collect();
        return Err(EbrError::Input(format!(
            "{} item(s) without a label: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 10 { ", ..." } else { "" }
        )));
    }
    let mut ids: HashMap<&L, u32> = HashMap::new();
    let assign = labels
        .iter()
        .map(|l| {
            let next = ids.len() as u32;
            *ids.entry(l.as_ref().unwrap()).or_insert(next)
        })
        .collect();
    ClusterAssignment::from_assign(assign, ids.len())
}

#[derive(Debug, Clone)]
pub struct KMeansOutcome {
    pub assignment: ClusterAssignment,
    /// `k × dim` centroids in normalized space.
    pub centroids: Vec<f64>,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn kmeans(emb: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    Ok(kmeans_with_trace(emb, cfg)?.assignment)
}

pub fn kmeans_with_trace(emb: &EmbeddingMatrix, cfg: &KMeansConfig) -> Result<KMeansOutcome> {
    let (n, dim) = (emb.rows(), emb.dim());
    if cfg.k == 0 || cfg.k > n {
        return Err(EbrError::Config(format!("k={} must be in 1..={n}", cfg.k)));
    }
    if cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(EbrError::Config("max_iters must be >= 1 and tol > 0".into()));
    }
    if !emb.is_finite() {
        return Err(EbrError::Input("embedding contains non-finite entries".into()));
    }
    let k = cfg.k;
    let points = normalized(emb);
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // k-means++ seeding
    let mut centroids = vec![0.0; k * dim];
    let first = rng.random_range(0..n);
    centroids[..dim].copy_from_slice(point(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&nearest).map(|w| w.sample(&mut rng)).unwrap_or_else(|_| rng.random_range(0..n))
        } else {
            rng.random_range(0..n)
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(point(pick));
        for (i, best) in nearest.iter_mut().enumerate() {
            *best = best.min(sq_dist(point(i), point(pick)));
        }
    }

    let mut assign = vec![0u32; n];
    let mut dists = vec![0.0f64; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        assign_step(&points, dim, &centroids, k, &mut assign, &mut dists);
        repair_empty(&points, dim, &mut centroids, k, &mut assign, &mut dists);
        trace.push(dists.iter().sum());
        if iterations == cfg.max_iters {
            break;
        }
        iterations += 1;
        let updated = centroid_step(&points, dim, &assign, &centroids, k);
        let shift = (0..k)
            .map(|c| sq_dist(&updated[c * dim..(c + 1) * dim], &centroids[c * dim..(c + 1) * dim]).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        if shift < cfg.tol {
            assign_step(&points, dim, &centroids, k, &mut assign, &mut dists);
            repair_empty(&points, dim, &mut centroids, k, &mut assign, &mut dists);
            trace.push(dists.iter().sum());
            break;
        }
    }
    Ok(KMeansOutcome {
        assignment: ClusterAssignment::from_assign(assign, k)?,
        centroids,
        objective_trace: trace,
        iterations,
    })
}

fn normalized(emb: &EmbeddingMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(emb.rows() * emb.dim());
    for r in 0..emb.rows() {
        let row = emb.row(r);
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        let scale = if norm > 0.0 { 1.0 / norm } else { 0.0 };
        out.extend(row.iter().map(|&v| v as f64 * scale));
    }
    out
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_step(points: &[f64], dim: usize, centroids: &[f64], k: usize, assign: &mut [u32], dists: &mut [f64]) {
    assign
        .par_iter_mut()
        .zip(dists.par_iter_mut())
        .enumerate()
        .for_each(|(i, (a, dist))| {
            let p = &points[i * dim..(i + 1) * dim];
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..k {
                let d = sq_dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best.0 {
                    best = (d, c);
                }
            }
            *a = best.1 as u32;
            *dist = best.0;
        });
}

/// Re-seeds every empty cluster at the point farthest from its centroid.
fn repair_empty(points: &[f64], dim: usize, centroids: &mut [f64], k: usize, assign: &mut [u32], dists: &mut [f64]) {
    let mut sizes = vec![0usize; k];
    for &a in assign.iter() {
        sizes[a as usize] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let far = (0..assign.len())
            .filter(|&i| sizes[assign[i] as usize] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        let Some(far) = far else { break };
        sizes[assign[far] as usize] -= 1;
        sizes[c] += 1;
        assign[far] = c as u32;
        dists[far] = 0.0;
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
    }
}

fn centroid_step(points: &[f64], dim: usize, assign: &[u32], previous: &[f64], k: usize) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assign.iter().enumerate() {
        let c = a as usize;
        counts[c] += 1;
        for (s, p) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += p;
        }
    }
    for c in 0..k {
        let block = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            block.copy_from_slice(&previous[c * dim..(c + 1) * dim]);
        } else {
            block.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn matrix(rows: &[Vec<f32>]) -> EmbeddingMatrix {
        let dim = rows[0].len();
        EmbeddingMatrix::new(rows.len(), dim, rows.concat()).unwrap()
    }

    #[test]
    fn single_cluster_centroid_is_mean() {
        let emb = matrix(&[vec![3.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0]]);
        let out = kmeans_with_trace(&emb, &KMeansConfig { k: 1, ..Default::default() }).unwrap();
        assert!(out.assignment.assignments().iter().all(|&c| c == 0));
        let s = 1.0 / 2f64.sqrt();
        let want = [(1.0 + 0.0 + s) / 3.0, (0.0 + 1.0 + s) / 3.0];
        for (a, b) in out.centroids.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(cluster_of(&out.assignment, 2).unwrap(), 0);
    }

    #[test]
    fn k_equals_rows_gives_singletons() {
        let emb = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]]);
        let ca = kmeans(&emb, &KMeansConfig { k: 4, ..Default::default() }).unwrap();
        for c in 0..4 {
            assert_eq!(ca.members(c).len(), 1);
        }
    }

    #[test]
    fn config_and_input_errors() {
        let emb = matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(kmeans(&emb, &KMeansConfig { k: 3, ..Default::default() }), Err(EbrError::Config(_))));
        let bad = matrix(&[vec![f32::NAN, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(kmeans(&bad, &KMeansConfig { k: 1, ..Default::default() }), Err(EbrError::Input(_))));
    }

    #[test]
    fn empty_clusters_are_repaired() {
        // duplicates force k-means++ to pick coincident seeds
        let emb = matrix(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ca = kmeans(&emb, &KMeansConfig { k: 3, ..Default::default() }).unwrap();
        assert!((0..3).all(|c| !ca.members(c).is_empty()));
    }

    #[test]
    fn objective_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let rows: Vec<Vec<f32>> = (0..300).map(|_| (0..6).map(|_| normal.sample(&mut rng)).collect()).collect();
        let out = kmeans_with_trace(&matrix(&rows), &KMeansConfig { k: 8, tol: 1e-9, ..Default::default() }).unwrap();
        assert!(out.objective_trace.len() > 2);
        for w in out.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", out.objective_trace);
        }
    }

    #[test]
    fn labels_are_renumbered_by_first_appearance() {
        let ca = assign_from_labels(&[Some("A"), Some("B"), Some("A")]).unwrap();
        assert_eq!(ca.k(), 2);
        assert_eq!(ca.members(0), &[0, 2]);
        assert_eq!(ca.members(1), &[1]);
        assert_eq!(assign_from_labels(&[Some(5), Some(5)]).unwrap().k(), 1);
        let err = assign_from_labels(&[Some(1), None, Some(2)]).unwrap_err();
        assert!(err.to_string().contains('1'), "{err}");
    }

    #[test]
    fn cluster_of_bounds() {
        let ca = ClusterAssignment::single(3).unwrap();
        assert!(matches!(cluster_of(&ca, 3), Err(EbrError::Index { index: 3, len: 3 })));
        let ca = ClusterAssignment::from_assign(vec![1, 0, 1, 2], 3).unwrap();
        for c in 0..3 {
            for &i in ca.members(c) {
                assert_eq!(cluster_of(&ca, i as usize).unwrap(), c);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let ca = ClusterAssignment::from_assign(vec![1, 0, 1, 2], 3).unwrap();
        let mut buf = Vec::new();
        ca.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("item_internal_id,cluster_id\n0,1\n"));
        assert_eq!(ClusterAssignment::read_csv(buf.as_slice()).unwrap(), ca);
        let gap = "item_internal_id,cluster_id\n0,0\n2,0\n";
        assert!(ClusterAssignment::read_csv(gap.as_bytes()).is_err());
    }
}

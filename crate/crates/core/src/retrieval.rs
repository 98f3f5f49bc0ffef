//! Exact per-cluster top-k search and quota-merged candidate generation.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingMatrix;
use crate::error::{EbrError, Result};
use crate::itemset::ItemSet;
use crate::linalg::dot_f32;
use crate::partition::ClusterAssignment;

/// Item vectors stored contiguously per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedIndex {
    dim: usize,
    num_items: usize,
    blocks: Vec<Vec<f32>>,
    ids: Vec<Vec<u32>>,
}

pub fn build_index(emb: &EmbeddingMatrix, ca: &ClusterAssignment) -> Result<PartitionedIndex> {
    if emb.rows() != ca.num_items() {
        return Err(EbrError::Input(format!("{} embedding rows for {} assigned items", emb.rows(), ca.num_items())));
    }
    let d = emb.dim();
    let mut blocks = Vec::with_capacity(ca.k());
    let mut ids = Vec::with_capacity(ca.k());
    for k in 0..ca.k() {
        let members = ca.members(k);
        let mut block = Vec::with_capacity(members.len() * d);
        for &i in members {
            block.extend_from_slice(emb.row(i as usize));
        }
        blocks.push(block);
        ids.push(members.to_vec());
    }
    Ok(PartitionedIndex { dim: d, num_items: emb.rows(), blocks, ids })
}

impl PartitionedIndex {
    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn block_items(&self, cluster: usize) -> &[u32] {
        &self.ids[cluster]
    }

    /// Items of `cluster` not in `exclude`.
    pub fn capacity(&self, cluster: usize, exclude: &ItemSet) -> usize {
        self.ids[cluster].iter().filter(|&&i| !exclude.contains(i)).count()
    }
}

/// Candidate ordered so that "greater" means "ranks higher": larger score,
/// then smaller item id.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    score: f32,
    item: u32,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.item.cmp(&self.item))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, heap: BinaryHeap::with_capacity(k + 1) }
    }

    #[inline]
    fn offer(&mut self, item: u32, score: f32) {
        if self.k == 0 {
            return;
        }
        let c = Ranked { score, item };
        if self.heap.len() < self.k {
            self.heap.push(Reverse(c));
        } else if c > self.heap.peek().unwrap().0 {
            self.heap.pop();
            self.heap.push(Reverse(c));
        }
    }

    fn into_sorted(self) -> Vec<(u32, f32)> {
        let mut v: Vec<Ranked> = self.heap.into_iter().map(|r| r.0).collect();
        v.sort_unstable_by(|a, b| b.cmp(a));
        v.into_iter().map(|r| (r.item, r.score)).collect()
    }
}

fn scan(idx: &PartitionedIndex, cluster: usize, e_u: &[f32], exclude: &ItemSet, top: &mut TopK) {
    let d = idx.dim;
    for (row, &item) in idx.blocks[cluster].chunks_exact(d).zip(&idx.ids[cluster]) {
        if !exclude.contains(item) {
            top.offer(item, dot_f32(e_u, row));
        }
    }
}

fn check_vector(idx: &PartitionedIndex, e_u: &[f32]) -> Result<()> {
    if e_u.len() != idx.dim {
        return Err(EbrError::Usage(format!("user vector has dimension {}, index has {}", e_u.len(), idx.dim)));
    }
    Ok(())
}

/// Exact top-`k` by inner product inside one cluster, sorted by descending
/// score with ascending item id on ties.
pub fn topk_in_cluster(idx: &PartitionedIndex, cluster: usize, e_u: &[f32], k: usize, exclude: &ItemSet) -> Result<Vec<(u32, f32)>> {
    if cluster >= idx.k() {
        return Err(EbrError::Index { index: cluster, len: idx.k() });
    }
    check_vector(idx, e_u)?;
    let mut top = TopK::new(k);
    scan(idx, cluster, e_u, exclude, &mut top);
    Ok(top.into_sorted())
}

/// Exact top-`k` over the whole corpus.
pub fn topk_global(idx: &PartitionedIndex, e_u: &[f32], k: usize, exclude: &ItemSet) -> Result<Vec<(u32, f32)>> {
    check_vector(idx, e_u)?;
    let mut top = TopK::new(k);
    for c in 0..idx.k() {
        scan(idx, c, e_u, exclude, &mut top);
    }
    Ok(top.into_sorted())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaPlan {
    pub quotas: Vec<usize>,
    pub total: usize,
    pub alpha: f64,
    pub capacities: Vec<usize>,
}

const SNAP: f64 = 1e-9;

/// Relative weights `p^α / max p^α` over `free` clusters, with `0^0 = 1`;
/// uniform when every free probability is zero.
fn weights(p: &[f64], alpha: f64, free: &[usize]) -> Vec<f64> {
    if alpha == 0.0 {
        return vec![1.0; free.len()];
    }
    let max_ln = free.iter().map(|&k| p[k]).filter(|&v| v > 0.0).map(f64::ln).fold(f64::NEG_INFINITY, f64::max);
    if max_ln == f64::NEG_INFINITY {
        return vec![1.0; free.len()];
    }
    free.iter().map(|&k| if p[k] > 0.0 { (alpha * (p[k].ln() - max_ln)).exp() } else { 0.0 }).collect()
}

/// Splits `budget` over `free` in proportion to `w` by largest remainder;
/// near-equal remainders go to the lower cluster id.
fn largest_remainder(budget: usize, w: &[f64]) -> Vec<usize> {
    let sum: f64 = w.iter().sum();
    let mut out = Vec::with_capacity(w.len());
    let mut rems = Vec::with_capacity(w.len());
    for (j, &wk) in w.iter().enumerate() {
        let raw = budget as f64 * wk / sum;
        let mut fl = raw.floor();
        let mut rem = raw - fl;
        if rem > 1.0 - SNAP {
            fl += 1.0;
            rem = 0.0;
        } else if rem < SNAP {
            rem = 0.0;
        }
        out.push(fl as usize);
        rems.push(((rem / SNAP).round() as i64, j));
    }
    let assigned: usize = out.iter().sum();
    let mut left = budget.saturating_sub(assigned);
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, j) in rems.iter().cycle().take(rems.len() * 2) {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    // floors can overshoot only through snapping; trim from the smallest
    // remainders
    let mut over = out.iter().sum::<usize>().saturating_sub(budget);
    for &(_, j) in rems.iter().rev() {
        while over > 0 && out[j] > 0 {
            out[j] -= 1;
            over -= 1;
        }
    }
    out
}

/// Integer quotas proportional to `p_k^α`, summing to
/// `min(m, Σ capacities)` with no quota above its cluster's capacity.
pub fn compute_quotas(p: &[f64], alpha: f64, m: usize, capacities: &[usize]) -> Result<QuotaPlan> {
    if p.len() != capacities.len() {
        return Err(EbrError::Usage(format!("{} probabilities for {} clusters", p.len(), capacities.len())));
    }
    if !(alpha >= 0.0) || p.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(EbrError::Usage("alpha and probabilities must be non-negative and finite".into()));
    }
    let total = m.min(capacities.iter().sum());
    let mut quotas = vec![0usize; p.len()];
    let mut fixed: Vec<bool> = capacities.iter().map(|&c| c == 0).collect();
    loop {
        let free: Vec<usize> = (0..p.len()).filter(|&k| !fixed[k]).collect();
        let used: usize = (0..p.len()).filter(|&k| fixed[k]).map(|k| quotas[k]).sum();
        let budget = total - used;
        if free.is_empty() {
            break;
        }
        let shares = largest_remainder(budget, &weights(p, alpha, &free));
        let mut clipped = false;
        for (&k, &q) in free.iter().zip(&shares) {
            if q > capacities[k] {
                quotas[k] = capacities[k];
                fixed[k] = true;
                clipped = true;
            } else {
                quotas[k] = q;
            }
        }
        if !clipped {
            break;
        }
    }
    Ok(QuotaPlan { quotas, total, alpha, capacities: capacities.to_vec() })
}

/// User representation(s) for merged retrieval: one shared vector, or one
/// per cluster for task-prompted encoders.
#[derive(Debug, Clone, Copy)]
pub enum UserVectors<'a> {
    Shared(&'a [f32]),
    PerCluster(&'a [Vec<f32>]),
}

impl UserVectors<'_> {
    fn for_cluster(&self, k: usize) -> &[f32] {
        match self {
            UserVectors::Shared(v) => v,
            UserVectors::PerCluster(vs) => &vs[k],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Serial,
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub per_cluster: Vec<Vec<(u32, f32)>>,
    /// Concatenation of the per-cluster lists in cluster order.
    pub merged: Vec<(u32, f32)>,
    pub plan: QuotaPlan,
}

pub fn retrieve_merged(
    idx: &PartitionedIndex,
    users: UserVectors,
    p_u: &[f64],
    alpha: f64,
    m: usize,
    exclude: &ItemSet,
    schedule: Schedule,
) -> Result<RetrievalResult> {
    if p_u.len() != idx.k() {
        return Err(EbrError::Usage(format!("{} intent probabilities for {} clusters", p_u.len(), idx.k())));
    }
    if let UserVectors::PerCluster(vs) = users {
        if vs.len() != idx.k() {
            return Err(EbrError::Usage(format!("{} user vectors for {} clusters", vs.len(), idx.k())));
        }
    }
    for k in 0..idx.k() {
        check_vector(idx, users.for_cluster(k))?;
    }
    let capacities: Vec<usize> = (0..idx.k()).map(|k| idx.capacity(k, exclude)).collect();
    let plan = compute_quotas(p_u, alpha, m, &capacities)?;
    let search = |k: usize| {
        let mut top = TopK::new(plan.quotas[k]);
        if plan.quotas[k] > 0 {
            scan(idx, k, users.for_cluster(k), exclude, &mut top);
        }
        top.into_sorted()
    };
    let per_cluster: Vec<Vec<(u32, f32)>> = match schedule {
        Schedule::Serial => (0..idx.k()).map(search).collect(),
        Schedule::Parallel => (0..idx.k()).into_par_iter().map(search).collect(),
    };
    let merged = per_cluster.iter().flatten().copied().collect();
    Ok(RetrievalResult { per_cluster, merged, plan })
}

/// One line of the candidate output, in external ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLine {
    pub user: i64,
    pub items: Vec<i64>,
    pub scores: Vec<f32>,
    pub quotas: Vec<usize>,
}

pub fn write_candidates<W: Write>(mut w: W, lines: &[CandidateLine]) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut w, line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

use rand::Rng;

use super::NegativeKind;
use crate::error::{EbrError, Result};
use crate::itemset::ItemSet;
use crate::partition::ClusterAssignment;

const MAX_REJECTIONS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeSample {
    Item(u32),
    /// The pool is empty; the caller drops this positive.
    Skip,
}

fn from_pool<R: Rng>(pool: &[u32], hist: &ItemSet, rng: &mut R) -> NegativeSample {
    if pool.is_empty() {
        return NegativeSample::Skip;
    }
    for _ in 0..MAX_REJECTIONS {
        let c = pool[rng.random_range(0..pool.len())];
        if !hist.contains(c) {
            return NegativeSample::Item(c);
        }
    }
    let open: Vec<u32> = pool.iter().copied().filter(|&i| !hist.contains(i)).collect();
    if open.is_empty() {
        NegativeSample::Skip
    } else {
        NegativeSample::Item(open[rng.random_range(0..open.len())])
    }
}

fn global<R: Rng>(num_items: usize, hist: &ItemSet, rng: &mut R) -> NegativeSample {
    if num_items == 0 {
        return NegativeSample::Skip;
    }
    for _ in 0..MAX_REJECTIONS {
        let c = rng.random_range(0..num_items) as u32;
        if !hist.contains(c) {
            return NegativeSample::Item(c);
        }
    }
    let open: Vec<u32> = (0..num_items as u32).filter(|&i| !hist.contains(i)).collect();
    if open.is_empty() {
        NegativeSample::Skip
    } else {
        NegativeSample::Item(open[rng.random_range(0..open.len())])
    }
}

/// Draws one negative for `positive`, uniform over the pool selected by
/// `kind` minus the user's history.
pub fn sample_negative<R: Rng>(
    kind: NegativeKind,
    positive: u32,
    user_hist: &ItemSet,
    num_items: usize,
    ca: Option<&ClusterAssignment>,
    rng: &mut R,
) -> Result<NegativeSample> {
    let within = |rng: &mut R| -> Result<NegativeSample> {
        let ca = ca.ok_or_else(|| EbrError::Usage("cluster assignment required for within-cluster negatives".into()))?;
        if positive as usize >= ca.num_items() {
            return Err(EbrError::Index { index: positive as usize, len: ca.num_items() });
        }
        Ok(from_pool(ca.members(ca.cluster(positive)), user_hist, rng))
    };
    match kind {
        NegativeKind::Global => Ok(global(num_items, user_hist, rng)),
        NegativeKind::WithinCluster => within(rng),
        NegativeKind::Mixed { ratio } => {
            if rng.random::<f64>() < ratio {
                within(rng)
            } else {
                Ok(global(num_items, user_hist, rng))
            }
        }
    }
}

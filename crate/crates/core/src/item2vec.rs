//! Skip-gram with negative sampling over user interaction sequences.
//!
//! Items play the role of words and each user's sequence the role of a
//! sentence. Only center vectors are returned; they feed k-means.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::embedding::EmbeddingMatrix;
use crate::error::{EbrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Item2VecConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives_per_pair: usize,
    pub epochs: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for Item2VecConfig {
    fn default() -> Self {
        Self { dim: 32, window: 5, negatives_per_pair: 5, epochs: 5, lr: 0.025, seed: 42 }
    }
}

impl Item2VecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.negatives_per_pair == 0 {
            return Err(EbrError::Config("item2vec dim, window and negatives_per_pair must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EbrError::Config("item2vec lr must be positive".into()));
        }
        Ok(())
    }
}

/// All `(center, context)` pairs within `window` positions of each other.
pub fn skipgram_pairs(sequence: &[u32], window: usize) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    for p in 0..sequence.len() {
        let lo = p.saturating_sub(window);
        let hi = (p + window).min(sequence.len() - 1);
        for q in lo..=hi {
            if q != p {
                out.push((sequence[p], sequence[q]));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Item2VecOutcome {
    pub embeddings: EmbeddingMatrix,
    /// Mean per-pair loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train_item2vec(d: &Dataset, cfg: &Item2VecConfig) -> Result<EmbeddingMatrix> {
    Ok(train_item2vec_with_stats(d, cfg)?.embeddings)
}

pub fn train_item2vec_with_stats(d: &Dataset, cfg: &Item2VecConfig) -> Result<Item2VecOutcome> {
    cfg.validate()?;
    if d.num_items() == 0 || d.num_interactions() == 0 {
        return Err(EbrError::EmptyDataset);
    }
    let dim = cfg.dim;
    let n = d.num_items();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut center: Vec<f32> = (0..n * dim).map(|_| (rng.random::<f32>() - 0.5) / dim as f32).collect();
    let mut context = vec![0.0f32; n * dim];

    let noise = WeightedIndex::new(d.item_frequencies().iter().map(|&f| (f as f64).powf(0.75)))
        .map_err(|e| EbrError::Input(format!("negative-sampling table: {e}")))?;

    let pairs_per_epoch: usize = d
        .sequences()
        .iter()
        .map(|s| {
            let l = s.len();
            (0..l).map(|p| (p + cfg.window).min(l - 1) - p.saturating_sub(cfg.window)).sum::<usize>()
        })
        .sum();
    let total = (pairs_per_epoch * cfg.epochs).max(1) as f32;

    let mut order: Vec<usize> = (0..d.num_users()).collect();
    let mut grad = vec![0.0f32; dim];
    let mut processed = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut count = 0usize;
        for &u in &order {
            let seq = d.sequence(u);
            for p in 0..seq.len() {
                let lo = p.saturating_sub(cfg.window);
                let hi = (p + cfg.window).min(seq.len() - 1);
                for q in lo..=hi {
                    if q == p {
                        continue;
                    }
                    let lr = cfg.lr * (1.0 - processed as f32 / total).max(1e-4);
                    let c = seq[p] as usize;
                    let o = seq[q] as usize;
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    let mut pair_loss = 0.0f64;
                    let targets = std::iter::once((o, 1.0f32)).chain(
                        (0..cfg.negatives_per_pair)
                            .map(|_| noise.sample(&mut rng))
                            .filter(|&neg| neg != o)
                            .map(|neg| (neg, 0.0f32)),
                    );
                    for (t, label) in targets {
                        let vc = &center[c * dim..(c + 1) * dim];
                        let ut = &mut context[t * dim..(t + 1) * dim];
                        let f: f32 = vc.iter().zip(ut.iter()).map(|(a, b)| a * b).sum();
                        let s = sigmoid(f);
                        pair_loss += if label > 0.5 {
                            -(s.max(1e-30) as f64).ln()
                        } else {
                            -((1.0 - s).max(1e-30) as f64).ln()
                        };
                        let g = (label - s) * lr;
                        for k in 0..dim {
                            grad[k] += g * ut[k];
                            ut[k] += g * vc[k];
                        }
                    }
                    for (v, g) in center[c * dim..(c + 1) * dim].iter_mut().zip(&grad) {
                        *v += g;
                    }
                    if !pair_loss.is_finite() {
                        return Err(EbrError::Diverged { step: processed });
                    }
                    loss_sum += pair_loss;
                    count += 1;
                    processed += 1;
                }
            }
        }
        epoch_losses.push(if count == 0 { 0.0 } else { loss_sum / count as f64 });
    }
    if center.iter().any(|v| !v.is_finite()) {
        return Err(EbrError::Diverged { step: processed });
    }
    Ok(Item2VecOutcome { embeddings: EmbeddingMatrix::new(n, dim, center)?, epoch_losses })
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

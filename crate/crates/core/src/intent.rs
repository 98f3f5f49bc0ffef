//! Next-cluster intent model: a linear softmax head over frozen encoder
//! features, predicting which cluster the user's next item falls in.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Split;
use crate::error::{EbrError, Result};
use crate::optim::Adam;
use crate::partition::ClusterAssignment;
use crate::seqrec::{PromptInput, TrainedModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntentConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Most recent training positions per user used as examples.
    pub positions_per_user: usize,
}

impl Default for IntentConfig {
    fn default() -> Self {
        Self { lr: 1e-2, epochs: 50, batch_size: 256, patience: 5, seed: 42, positions_per_user: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentHead {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub valid_log_likelihood: Vec<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

impl IntentHead {
    pub fn zeros(k: usize, dim: usize) -> Self {
        Self { k, dim, weight: vec![0.0; k * dim], bias: vec![0.0; k], valid_log_likelihood: Vec::new() }
    }

    pub fn logits(&self, features: &[f32]) -> Vec<f64> {
        (0..self.k)
            .map(|c| {
                let w = &self.weight[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(features).map(|(a, &b)| a * b as f64).sum::<f64>()
            })
            .collect()
    }

    /// Cluster distribution for a precomputed feature vector.
    pub fn predict_features(&self, features: &[f32]) -> Vec<f64> {
        let mut z = self.logits(features);
        softmax_in_place(&mut z);
        z
    }

    pub fn to_checkpoint(&self, backbone: &str) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "intent",
            "backbone": backbone,
            "k": self.k,
            "dim": self.dim,
            "valid_log_likelihood": self.valid_log_likelihood,
        }));
        c.push_f64("weight", vec![self.k, self.dim], &self.weight);
        c.push_f64("bias", vec![self.k], &self.bias);
        c
    }

    /// Returns the head and the stored backbone name.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, String)> {
        if c.config.get("kind").and_then(|k| k.as_str()) != Some("intent") {
            return Err(EbrError::Format("not an intent checkpoint".into()));
        }
        let field = |name: &str| c.config.get(name).cloned().ok_or_else(|| EbrError::Format(format!("checkpoint config lacks {name:?}")));
        let k: usize = serde_json::from_value(field("k")?)?;
        let dim: usize = serde_json::from_value(field("dim")?)?;
        let backbone: String = serde_json::from_value(field("backbone")?)?;
        let valid_log_likelihood = serde_json::from_value(field("valid_log_likelihood")?)?;
        let head = Self { k, dim, weight: c.get_f64("weight", k * dim)?, bias: c.get_f64("bias", k)?, valid_log_likelihood };
        Ok((head, backbone))
    }
}

/// `softmax(W · features + b)` with the backbone encoding `history`
/// without any task prompt.
pub fn predict_intent(head: &IntentHead, backbone: &TrainedModel, history: &[u32]) -> Result<Vec<f64>> {
    let f = backbone.encode_with(history, PromptInput::None)?;
    Ok(head.predict_features(&f))
}

struct Examples {
    features: Vec<f32>,
    labels: Vec<u32>,
}

fn training_examples(split: &Split, ca: &ClusterAssignment, backbone: &TrainedModel, per_user: usize) -> Result<Examples> {
    let d = backbone.params.dim;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for u in 0..split.num_users() {
        let seq = split.train.sequence(u);
        if seq.len() < 2 {
            continue;
        }
        let (n, rows) = backbone.encode_positions(&seq[..seq.len() - 1])?;
        let targets = &seq[seq.len() - n..];
        for j in n.saturating_sub(per_user)..n {
            features.extend(rows[j * d..(j + 1) * d].iter().map(|&v| v as f32));
            labels.push(ca.cluster(targets[j]) as u32);
        }
    }
    Ok(Examples { features, labels })
}

fn validation_examples(split: &Split, ca: &ClusterAssignment, backbone: &TrainedModel) -> Result<Examples> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for &u in &split.eligible_users {
        let u = u as usize;
        let (Some(t), hist) = (split.valid_target[u], split.valid_history(u)) else { continue };
        if hist.is_empty() {
            continue;
        }
        features.extend(backbone.encode_with(hist, PromptInput::None)?);
        labels.push(ca.cluster(t) as u32);
    }
    Ok(Examples { features, labels })
}

fn mean_log_likelihood(head: &IntentHead, ex: &Examples) -> f64 {
    if ex.labels.is_empty() {
        return 0.0;
    }
    let total: f64 = ex
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| head.predict_features(&ex.features[r * head.dim..(r + 1) * head.dim])[y as usize].max(1e-300).ln())
        .sum();
    total / ex.labels.len() as f64
}

/// Fits the head by multinomial cross-entropy on next-item clusters with
/// the backbone frozen; keeps the epoch with the best validation
/// log-likelihood.
pub fn train_intent(split: &Split, ca: &ClusterAssignment, backbone: &TrainedModel, cfg: &IntentConfig) -> Result<IntentHead> {
    if ca.num_items() != split.num_items() || backbone.num_items() != split.num_items() {
        return Err(EbrError::Input("backbone, clusters and dataset disagree on the item count".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(EbrError::Config("intent batch_size must be >= 1 and lr finite".into()));
    }
    let (k, d) = (ca.k(), backbone.params.dim);
    let train = training_examples(split, ca, backbone, cfg.positions_per_user.max(1))?;
    let valid = validation_examples(split, ca, backbone)?;
    if train.labels.is_empty() {
        return Err(EbrError::Input("no training positions for the intent model".into()));
    }
    let mut head = IntentHead::zeros(k, d);
    let mut adam = Adam::new(&[k * d, k], cfg.lr, 0.9, 0.999);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.labels.len()).collect();
    let (mut gw, mut gb) = (vec![0.0; k * d], vec![0.0; k]);

    let mut best_ll = mean_log_likelihood(&head, &valid);
    head.valid_log_likelihood.push(best_ll);
    let mut best = head.clone();
    let mut since_best = 0;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            gw.fill(0.0);
            gb.fill(0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &r in batch {
                let x = &train.features[r * d..(r + 1) * d];
                let y = train.labels[r] as usize;
                let mut p = head.predict_features(x);
                loss -= p[y].max(1e-300).ln();
                p[y] -= 1.0;
                for c in 0..k {
                    let g = p[c] * scale;
                    gb[c] += g;
                    for (w, &xf) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *w += g * xf as f64;
                    }
                }
            }
            step += 1;
            if !loss.is_finite() {
                return Err(EbrError::Diverged { step });
            }
            adam.step(vec![&mut head.weight, &mut head.bias], vec![&gw, &gb]);
        }
        let ll = mean_log_likelihood(&head, &valid);
        head.valid_log_likelihood.push(ll);
        if ll > best_ll || valid.labels.is_empty() {
            best_ll = ll;
            best = head.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    best.valid_log_likelihood = head.valid_log_likelihood;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_is_uniform() {
        let h = IntentHead::zeros(4, 3);
        let p = h.predict_features(&[0.3, -2.0, 5.0]);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let one = IntentHead::zeros(1, 3);
        assert_eq!(one.predict_features(&[1.0, 2.0, 3.0]), vec![1.0]);
    }

    #[test]
    fn softmax_is_a_distribution_and_scale_keeps_argmax() {
        let h = IntentHead { k: 3, dim: 2, weight: vec![1.0, -2.0, 0.5, 0.5, -1.0, 3.0], bias: vec![0.1, -0.2, 0.0], valid_log_likelihood: vec![] };
        let x = [0.7f32, -1.3];
        let p = h.predict_features(&x);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|&v| v >= 0.0));
        let argmax = |v: &[f64]| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let mut scaled = h.clone();
        scaled.weight.iter_mut().chain(scaled.bias.iter_mut()).for_each(|v| *v *= 7.5);
        assert_eq!(argmax(&p), argmax(&scaled.predict_features(&x)));
        let large = IntentHead { bias: vec![800.0, -800.0, 0.0], ..h };
        assert!(large.predict_features(&x).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let h = IntentHead { k: 2, dim: 2, weight: vec![1.0, 2.0, 3.0, 4.0], bias: vec![0.5, -0.5], valid_log_likelihood: vec![-0.7] };
        let (back, name) = IntentHead::from_checkpoint(&h.to_checkpoint("global")).unwrap();
        assert_eq!(name, "global");
        assert_eq!(back, h);
    }
}

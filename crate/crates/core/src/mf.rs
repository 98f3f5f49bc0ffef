//! Matrix-factorization baseline: user and item tables scored by inner
//! product, trained on the same binary cross-entropy objective as the
//! sequential encoder with one uniform global negative per interaction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Split;
use crate::embedding::EmbeddingMatrix;
use crate::error::{EbrError, Result};
use crate::itemset::ItemSet;
use crate::linalg::{dot, sigmoid, softplus};
use crate::optim::Adam;
use crate::seqrec::{sample_negative, NegativeKind, NegativeSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    pub early_stop_m: usize,
    pub init_std: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self { dim: 50, lr: 1e-3, batch_size: 1024, epochs: 200, seed: 42, eval_every: 5, patience: 20, early_stop_m: 20, init_std: 0.1 }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(EbrError::Config("mf dim, batch_size and eval_every must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.init_std > 0.0) {
            return Err(EbrError::Config("mf lr must be finite and non-negative, init_std positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfReport {
    pub epoch_losses: Vec<f64>,
    pub validation: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub never_improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfParams {
    pub dim: usize,
    pub num_users: usize,
    pub num_items: usize,
    /// `num_users × dim`.
    pub user_table: Vec<f64>,
    /// `num_items × dim`.
    pub item_table: Vec<f64>,
    pub config: MfConfig,
    pub report: Option<MfReport>,
}

impl MfParams {
    /// Seeded normal initialization: users first, then items.
    pub fn init(num_users: usize, num_items: usize, cfg: &MfConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).unwrap();
        let user_table = (0..num_users * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        let item_table = (0..num_items * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
        Self { dim: cfg.dim, num_users, num_items, user_table, item_table, config: cfg.clone(), report: None }
    }

    pub fn item_embeddings(&self) -> EmbeddingMatrix {
        EmbeddingMatrix::new(self.num_items, self.dim, self.item_table.iter().map(|&v| v as f32).collect()).unwrap()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "mf",
            "config": self.config,
            "num_users": self.num_users,
            "num_items": self.num_items,
            "report": self.report,
        }));
        c.push_f64("user_table", vec![self.num_users, self.dim], &self.user_table);
        c.push_f64("item_table", vec![self.num_items, self.dim], &self.item_table);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.config.get("kind").and_then(|k| k.as_str()) != Some("mf") {
            return Err(EbrError::Format("not a matrix-factorization checkpoint".into()));
        }
        let field = |name: &str| c.config.get(name).cloned().ok_or_else(|| EbrError::Format(format!("checkpoint config lacks {name:?}")));
        let config: MfConfig = serde_json::from_value(field("config")?)?;
        let num_users: usize = serde_json::from_value(field("num_users")?)?;
        let num_items: usize = serde_json::from_value(field("num_items")?)?;
        let report = serde_json::from_value(field("report")?)?;
        Ok(Self {
            dim: config.dim,
            num_users,
            num_items,
            user_table: c.get_f64("user_table", num_users * config.dim)?,
            item_table: c.get_f64("item_table", num_items * config.dim)?,
            config,
            report,
        })
    }
}

pub fn mf_user_vector(p: &MfParams, user: usize) -> Result<Vec<f32>> {
    if user >= p.num_users {
        return Err(EbrError::Index { index: user, len: p.num_users });
    }
    Ok(p.user_table[user * p.dim..(user + 1) * p.dim].iter().map(|&v| v as f32).collect())
}

fn validation_recall(p: &MfParams, split: &Split, m: usize) -> f64 {
    let d = p.dim;
    let (mut hits, mut users) = (0usize, 0usize);
    for &u in &split.eligible_users {
        let u = u as usize;
        let Some(target) = split.valid_target[u] else { continue };
        users += 1;
        let hist = ItemSet::from_items(p.num_items, split.valid_history(u).iter().copied());
        if hist.contains(target) {
            continue;
        }
        let e_u = &p.user_table[u * d..(u + 1) * d];
        let item = |i: usize| &p.item_table[i * d..(i + 1) * d];
        let s_t = dot(e_u, item(target as usize));
        let mut above = 0;
        for c in 0..p.num_items as u32 {
            if c == target || hist.contains(c) {
                continue;
            }
            let s = dot(e_u, item(c as usize));
            if s > s_t || (s == s_t && c < target) {
                above += 1;
                if above >= m {
                    break;
                }
            }
        }
        hits += (above < m) as usize;
    }
    if users == 0 {
        0.0
    } else {
        hits as f64 / users as f64
    }
}

pub fn train_mf(split: &Split, cfg: &MfConfig) -> Result<MfParams> {
    cfg.validate()?;
    let (nu, ni, d) = (split.num_users(), split.num_items(), cfg.dim);
    if ni == 0 || split.train.num_interactions() == 0 {
        return Err(EbrError::EmptyDataset);
    }
    let mut p = MfParams::init(nu, ni, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let hists: Vec<ItemSet> = (0..nu).map(|u| ItemSet::from_items(ni, split.train.sequence(u).iter().copied())).collect();
    let mut pairs: Vec<(u32, u32)> = (0..nu).flat_map(|u| split.train.sequence(u).iter().map(move |&i| (u as u32, i))).collect();
    let mut adam = Adam::new(&[nu * d, ni * d], cfg.lr, 0.9, 0.98);
    let mut gu = vec![0.0; nu * d];
    let mut gi = vec![0.0; ni * d];

    let mut report = MfReport { epoch_losses: Vec::new(), validation: Vec::new(), best_epoch: 0, never_improved: false };
    let baseline = validation_recall(&p, split, cfg.early_stop_m);
    report.validation.push((0, baseline));
    let mut best: Option<(usize, f64, Vec<f64>, Vec<f64>)> = None;
    let (mut best_recall, mut best_epoch) = (baseline, 0);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        pairs.shuffle(&mut rng);
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for batch in pairs.chunks(cfg.batch_size) {
            let mut triples = Vec::with_capacity(batch.len());
            for &(u, i) in batch {
                if let NegativeSample::Item(n) = sample_negative(NegativeKind::Global, i, &hists[u as usize], ni, None, &mut rng)? {
                    triples.push((u as usize, i as usize, n as usize));
                }
            }
            step += 1;
            if triples.is_empty() {
                continue;
            }
            gu.fill(0.0);
            gi.fill(0.0);
            let scale = 1.0 / triples.len() as f64;
            let mut loss = 0.0;
            for &(u, i, n) in &triples {
                let eu = &p.user_table[u * d..(u + 1) * d];
                let ei = &p.item_table[i * d..(i + 1) * d];
                let en = &p.item_table[n * d..(n + 1) * d];
                let (rp, rn) = (dot(eu, ei), dot(eu, en));
                loss += softplus(-rp) + softplus(rn);
                let a = (sigmoid(rp) - 1.0) * scale;
                let b = sigmoid(rn) * scale;
                for f in 0..d {
                    gu[u * d + f] += a * ei[f] + b * en[f];
                    gi[i * d + f] += a * eu[f];
                    gi[n * d + f] += b * eu[f];
                }
            }
            if !loss.is_finite() {
                return Err(EbrError::Diverged { step });
            }
            loss_sum += loss;
            count += triples.len();
            adam.step(vec![&mut p.user_table, &mut p.item_table], vec![&gu, &gi]);
        }
        let loss = if count == 0 { 0.0 } else { loss_sum / count as f64 };
        report.epoch_losses.push(loss);
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let r = validation_recall(&p, split, cfg.early_stop_m);
            report.validation.push((epoch, r));
            log::info!("mf epoch {epoch}: loss {loss:.5}, validation recall@{} {r:.4}", cfg.early_stop_m);
            if r > best_recall {
                best_recall = r;
                best_epoch = epoch;
                best = Some((epoch, r, p.user_table.clone(), p.item_table.clone()));
            } else if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }
    if let Some((epoch, _, users, items)) = best {
        report.best_epoch = epoch;
        p.user_table = users;
        p.item_table = items;
    } else if cfg.epochs > 0 {
        log::warn!("mf validation recall never improved; keeping last parameters");
        report.never_improved = true;
    }
    p.report = Some(report);
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_last_out_split, Dataset, Interaction};

    fn toy() -> Split {
        // user 0 only ever takes item 0, user 1 only item 1
        let v: Vec<Interaction> = (0..2)
            .flat_map(|u| (0..6).map(move |t| Interaction { user_id: u, item_id: u, timestamp: t, weight: None }))
            .collect();
        leave_last_out_split(&Dataset::from_interactions(&v).unwrap()).unwrap()
    }

    #[test]
    fn own_item_outranks_other() {
        let split = toy();
        let cfg = MfConfig { dim: 4, lr: 0.05, epochs: 30, batch_size: 4, eval_every: 100, ..Default::default() };
        let p = train_mf(&split, &cfg).unwrap();
        let s = |u: usize, i: usize| dot(&p.user_table[u * 4..u * 4 + 4], &p.item_table[i * 4..i * 4 + 4]);
        assert!(s(0, 0) > s(0, 1));
        assert!(s(1, 1) > s(1, 0));
        let losses = &p.report.as_ref().unwrap().epoch_losses;
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn user_vector_is_initializer_row() {
        let cfg = MfConfig { dim: 3, seed: 9, ..Default::default() };
        let p = MfParams::init(4, 5, &cfg);
        let v = mf_user_vector(&p, 0).unwrap();
        assert_eq!(v.len(), 3);
        let fresh = MfParams::init(4, 5, &cfg);
        assert_eq!(v, fresh.user_table[..3].iter().map(|&x| x as f32).collect::<Vec<_>>());
        assert!(matches!(mf_user_vector(&p, 4), Err(EbrError::Index { .. })));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let p = MfParams::init(3, 4, &MfConfig { dim: 2, ..Default::default() });
        let back = MfParams::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(back.num_users, 3);
        assert!(back.item_table.iter().zip(&p.item_table).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}

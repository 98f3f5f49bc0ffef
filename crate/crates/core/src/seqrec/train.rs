use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoder::{self, Dropout, PromptInput};
use super::params::EncoderParams;
use super::sampler::{sample_negative, NegativeSample};
use super::{EncoderConfig, NegativeKind, PromptKind, TrainedModel, TrainingMode};
use crate::corpus::Split;
use crate::error::{EbrError, Result};
use crate::itemset::ItemSet;
use crate::linalg::{dot, sigmoid, softplus};
use crate::optim;
use crate::partition::ClusterAssignment;

/// Fixed number of gradient shards per step; shards are summed in order so
/// results do not depend on the thread count.
const GRAD_SHARDS: usize = 8;

fn prompt_for(mode: TrainingMode, task: Option<u32>) -> PromptInput {
    match (mode.prompt, task) {
        (PromptKind::Prefix, Some(k)) => PromptInput::Prefix(k as usize),
        (PromptKind::Hadamard, Some(k)) => PromptInput::Hadamard(k as usize),
        _ => PromptInput::None,
    }
}

/// Optimizer bound to the encoder's tensor layout.
#[derive(Debug, Clone)]
pub struct Adam(optim::Adam);

impl Adam {
    pub fn new(params: &EncoderParams, lr: f64, beta1: f64, beta2: f64) -> Self {
        let lens: Vec<usize> = params.tensors().iter().map(|(_, _, t)| t.len()).collect();
        Self(optim::Adam::new(&lens, lr, beta1, beta2))
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        let g: Vec<&[f64]> = grads.tensors().into_iter().map(|(_, _, t)| t).collect();
        self.0.step(params.tensors_mut(), g);
    }
}

/// Forward and backward pass for one sequence. `positives` holds
/// `(position, positive item, negative item)` triples, positions indexing
/// `inputs`. Gradients of `scale · Σ loss` are accumulated into `grads`;
/// the unscaled loss sum is returned.
pub(crate) fn accumulate_sequence(
    params: &EncoderParams,
    inputs: &[u32],
    prompt: PromptInput,
    positives: &[(usize, u32, u32)],
    scale: f64,
    drop: Dropout,
    grads: &mut EncoderParams,
) -> f64 {
    let d = params.dim;
    let cache = encoder::forward(params, inputs, prompt, drop);
    let mut d_out = vec![0.0; cache.len * d];
    let mut loss = 0.0;
    for &(j, pos, neg) in positives {
        let row = cache.offset + j;
        let h = &cache.out[row * d..(row + 1) * d];
        let (p, n) = (pos as usize + 1, neg as usize + 1);
        let ep = &params.item_table[p * d..(p + 1) * d];
        let en = &params.item_table[n * d..(n + 1) * d];
        let (rp, rn) = (dot(h, ep), dot(h, en));
        loss += softplus(-rp) + softplus(rn);
        let gp = (sigmoid(rp) - 1.0) * scale;
        let gn = sigmoid(rn) * scale;
        let dh = &mut d_out[row * d..(row + 1) * d];
        for f in 0..d {
            dh[f] += gp * ep[f] + gn * en[f];
        }
        for f in 0..d {
            grads.item_table[p * d + f] += gp * h[f];
        }
        for f in 0..d {
            grads.item_table[n * d + f] += gn * h[f];
        }
    }
    encoder::backward(params, &cache, &d_out, grads);
    loss
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    user: u32,
    task: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean loss over the step's positives.
    pub loss: f64,
    pub positives: usize,
    /// Encoder passes in the step.
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// `(epoch, validation recall)`; epoch 0 is the untrained baseline.
    pub validation: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_recall: f64,
    /// No validation pass beat the baseline; the last parameters are kept.
    pub never_improved: bool,
    pub steps: usize,
    pub samples: usize,
    pub train_secs: f64,
}

/// Stepwise training driver. One sample is one encoder pass: a user's
/// training window, or for prompted modes a (user, task) pair whose loss
/// covers only the positives of that task.
pub struct Trainer<'a> {
    split: &'a Split,
    ca: Option<&'a ClusterAssignment>,
    cfg: EncoderConfig,
    mode: TrainingMode,
    params: EncoderParams,
    /// Per-shard gradient buffers; shard 0 receives the sum.
    shards: Vec<EncoderParams>,
    adam: Adam,
    rng: ChaCha8Rng,
    hists: Vec<ItemSet>,
    samples: Vec<Sample>,
    cursor: usize,
    steps: usize,
    samples_seen: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(split: &'a Split, ca: Option<&'a ClusterAssignment>, cfg: &EncoderConfig, mode: TrainingMode) -> Result<Self> {
        cfg.validate()?;
        mode.validate()?;
        let n = split.num_items();
        if n == 0 || split.train.num_interactions() == 0 {
            return Err(EbrError::EmptyDataset);
        }
        let ca = if mode.needs_clusters() {
            let ca = ca.ok_or_else(|| EbrError::Usage("training mode requires a cluster assignment".into()))?;
            if ca.num_items() != n {
                return Err(EbrError::Input(format!("cluster assignment covers {} items, dataset has {n}", ca.num_items())));
            }
            Some(ca)
        } else {
            ca
        };
        let num_tasks = if mode.prompt == PromptKind::None { 0 } else { ca.map_or(0, |c| c.k()) };
        let params = EncoderParams::init(cfg, n, mode.prompt, num_tasks);
        let slots = if mode.prompt == PromptKind::Prefix { 1 } else { 0 };
        if cfg.max_len <= slots {
            return Err(EbrError::Config("max_len must leave room for at least one item".into()));
        }
        let cap = cfg.max_len - slots;
        let mut samples = Vec::new();
        let mut hists = Vec::with_capacity(split.num_users());
        for u in 0..split.num_users() {
            let seq = split.train.sequence(u);
            hists.push(ItemSet::from_items(n, seq.iter().copied()));
            if seq.len() < 2 {
                continue;
            }
            if mode.prompt == PromptKind::None {
                samples.push(Sample { user: u as u32, task: None });
            } else {
                let ca = ca.expect("checked above");
                let start = (seq.len() - 1).saturating_sub(cap);
                let mut tasks: Vec<u32> = seq[start + 1..].iter().map(|&i| ca.cluster(i) as u32).collect();
                tasks.sort_unstable();
                tasks.dedup();
                samples.extend(tasks.into_iter().map(|k| Sample { user: u as u32, task: Some(k) }));
            }
        }
        if samples.is_empty() {
            return Err(EbrError::Input("no user has two or more training interactions".into()));
        }
        let shards = vec![params.zeros_like(); GRAD_SHARDS];
        let adam = Adam::new(&params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Self {
            split,
            ca,
            cfg: cfg.clone(),
            mode,
            params,
            shards,
            adam,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            hists,
            samples,
            cursor: 0,
            steps: 0,
            samples_seen: 0,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// One optimization step over the next batch; reshuffles at epoch
    /// boundaries.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.cursor == 0 {
            self.samples.shuffle(&mut self.rng);
        }
        let end = (self.cursor + self.cfg.batch_size).min(self.samples.len());
        let n = self.split.num_items();
        let cap = self.cfg.max_len - self.mode.prompt_slots();

        let mut planned = Vec::with_capacity(end - self.cursor);
        let mut total = 0usize;
        for s in &self.samples[self.cursor..end] {
            let seq = self.split.train.sequence(s.user as usize);
            let start = (seq.len() - 1).saturating_sub(cap);
            let targets = &seq[start + 1..];
            let mut triples = Vec::with_capacity(targets.len());
            for (j, &pos) in targets.iter().enumerate() {
                if let Some(k) = s.task {
                    if self.ca.expect("prompted modes carry clusters").cluster(pos) as u32 != k {
                        continue;
                    }
                }
                let hist = &self.hists[s.user as usize];
                if let NegativeSample::Item(neg) = sample_negative(self.mode.negatives, pos, hist, n, self.ca, &mut self.rng)? {
                    triples.push((j, pos, neg));
                }
            }
            total += triples.len();
            let dropout_seed: u64 = self.rng.random();
            planned.push((s.user, s.task, start, triples, dropout_seed));
        }
        self.cursor = if end == self.samples.len() { 0 } else { end };

        let samples = planned.len();
        self.steps += 1;
        self.samples_seen += samples;
        if total == 0 {
            return Ok(StepStats { loss: 0.0, positives: 0, samples });
        }
        let scale = 1.0 / total as f64;
        let shard_len = planned.len().div_ceil(GRAD_SHARDS);
        let (params, split, rate, mode) = (&self.params, self.split, self.cfg.dropout, self.mode);
        let losses: Vec<f64> = self
            .shards
            .par_iter_mut()
            .zip(planned.par_chunks(shard_len))
            .map(|(g, chunk)| {
                g.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
                let mut loss = 0.0;
                for (user, task, start, triples, seed) in chunk {
                    if triples.is_empty() {
                        continue;
                    }
                    let seq = split.train.sequence(*user as usize);
                    let inputs = &seq[*start..seq.len() - 1];
                    let mut drng = ChaCha8Rng::seed_from_u64(*seed);
                    let drop = Dropout { rate, rng: Some(&mut drng) };
                    loss += accumulate_sequence(params, inputs, prompt_for(mode, *task), triples, scale, drop, g);
                }
                loss
            })
            .collect();
        let used = losses.len();
        let loss: f64 = losses.iter().sum();
        let (first, rest) = self.shards.split_at_mut(1);
        let mut acc = first[0].tensors_mut();
        for shard in &rest[..used - 1] {
            for (a, (_, _, b)) in acc.iter_mut().zip(shard.tensors()) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
        let loss = loss / total as f64;
        if !loss.is_finite() {
            return Err(EbrError::Diverged { step: self.steps });
        }
        self.adam.step(&mut self.params, &self.shards[0]);
        Ok(StepStats { loss, positives: total, samples })
    }

    /// Runs steps until the sample list has been consumed once; returns the
    /// positive-weighted mean loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        let (mut sum, mut count) = (0.0, 0usize);
        loop {
            let s = self.step()?;
            sum += s.loss * s.positives as f64;
            count += s.positives;
            if self.cursor == 0 {
                break;
            }
        }
        if !self.params.is_finite() {
            return Err(EbrError::Diverged { step: self.steps });
        }
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Validation Recall@`early_stop_m`: global ranking for global and
    /// mixed negatives, ranking inside the target's cluster otherwise.
    pub fn validate(&self) -> f64 {
        validation_recall(&self.params, self.split, self.ca, self.mode, &self.cfg)
    }

    fn into_model(self, params: EncoderParams, report: TrainReport) -> TrainedModel {
        TrainedModel { params, config: self.cfg, mode: self.mode, report }
    }
}

impl TrainingMode {
    fn prompt_slots(&self) -> usize {
        (self.prompt == PromptKind::Prefix) as usize
    }
}

fn validation_users(split: &Split, cap: usize) -> Vec<u32> {
    let users: Vec<u32> = split
        .eligible_users
        .iter()
        .copied()
        .filter(|&u| split.valid_target[u as usize].is_some() && !split.valid_history(u as usize).is_empty())
        .collect();
    if cap == 0 || users.len() <= cap {
        return users;
    }
    (0..cap).map(|i| users[i * users.len() / cap]).collect()
}

fn validation_recall(params: &EncoderParams, split: &Split, ca: Option<&ClusterAssignment>, mode: TrainingMode, cfg: &EncoderConfig) -> f64 {
    let users = validation_users(split, cfg.valid_users);
    if users.is_empty() {
        return 0.0;
    }
    let d = params.dim;
    let n = params.num_items;
    let all: Vec<u32> = (0..n as u32).collect();
    let within = mode.negatives == NegativeKind::WithinCluster;
    let mut hits = 0usize;
    for &u in &users {
        let u = u as usize;
        let target = split.valid_target[u].expect("filtered");
        let hist = split.valid_history(u);
        let (candidates, prompt) = match (within, ca) {
            (true, Some(ca)) => {
                let k = ca.cluster(target);
                let prompt = match mode.prompt {
                    PromptKind::None => PromptInput::None,
                    PromptKind::Prefix => PromptInput::Prefix(k),
                    PromptKind::Hadamard => PromptInput::Hadamard(k),
                };
                (ca.members(k), prompt)
            }
            _ => (&all[..], PromptInput::None),
        };
        let e_u = encoder::encode_last(params, hist, prompt);
        let excluded = ItemSet::from_items(n, hist.iter().copied());
        let item = |i: u32| &params.item_table[(i as usize + 1) * d..(i as usize + 2) * d];
        if excluded.contains(target) {
            continue;
        }
        let s_t = dot(&e_u, item(target));
        let mut above = 0usize;
        for &c in candidates {
            if c == target || excluded.contains(c) {
                continue;
            }
            let s = dot(&e_u, item(c));
            if s > s_t || (s == s_t && c < target) {
                above += 1;
                if above >= cfg.early_stop_m {
                    break;
                }
            }
        }
        hits += (above < cfg.early_stop_m) as usize;
    }
    hits as f64 / users.len() as f64
}

/// Trains with early stopping on validation recall and returns the
/// best-validation parameters.
pub fn train(split: &Split, ca: Option<&ClusterAssignment>, cfg: &EncoderConfig, mode: TrainingMode) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(split, ca, cfg, mode)?;
    let started = Instant::now();
    let mut report = TrainReport::default();
    let baseline = trainer.validate();
    report.validation.push((0, baseline));
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    let mut best_recall = baseline;
    let mut best_epoch = 0;
    for epoch in 1..=cfg.epochs {
        let loss = trainer.run_epoch()?;
        report.epoch_losses.push(loss);
        log::debug!("epoch {epoch}: loss {loss:.5}");
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let r = trainer.validate();
            report.validation.push((epoch, r));
            log::info!("epoch {epoch}: loss {loss:.5}, validation recall@{} {r:.4}", cfg.early_stop_m);
            if r > best_recall {
                best_recall = r;
                best_epoch = epoch;
                best = Some((epoch, r, trainer.params.clone()));
            } else if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
    }
    report.steps = trainer.steps;
    report.samples = trainer.samples_seen;
    report.train_secs = started.elapsed().as_secs_f64();
    let params = match best {
        Some((epoch, r, p)) => {
            report.best_epoch = epoch;
            report.best_recall = r;
            p
        }
        None => {
            if cfg.epochs > 0 {
                log::warn!("validation recall never improved on the untrained baseline; keeping last parameters");
                report.never_improved = true;
            }
            report.best_recall = baseline;
            trainer.params.clone()
        }
    };
    Ok(trainer.into_model(params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_last_out_split, Dataset, Interaction};
    use crate::seqrec::TrainingMode;

    fn toy() -> Split {
        let seqs: [&[i64]; 3] = [&[1, 2, 3, 4, 5, 6, 7, 8], &[3, 4, 5, 6, 7, 8, 9, 10], &[5, 6, 7, 8, 9, 10, 11, 12]];
        let v: Vec<Interaction> = seqs
            .iter()
            .enumerate()
            .flat_map(|(u, s)| s.iter().enumerate().map(move |(t, &i)| Interaction { user_id: u as i64, item_id: i, timestamp: t as i64, weight: None }))
            .collect();
        leave_last_out_split(&Dataset::from_interactions(&v).unwrap()).unwrap()
    }

    fn small_cfg() -> EncoderConfig {
        EncoderConfig { max_len: 8, dim: 8, blocks: 1, dropout: 0.0, lr: 1e-2, batch_size: 2, epochs: 2, eval_every: 1, early_stop_m: 2, ..Default::default() }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let split = toy();
        let cfg = EncoderConfig { lr: 0.0, ..small_cfg() };
        let mut t = Trainer::new(&split, None, &cfg, TrainingMode::GLOBAL).unwrap();
        let before = t.params().clone();
        t.run_epoch().unwrap();
        let same = before.tensors().iter().zip(t.params().tensors()).all(|((_, _, a), (_, _, b))| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(same);
    }

    #[test]
    fn toy_loss_decreases() {
        let split = toy();
        let mut t = Trainer::new(&split, None, &small_cfg(), TrainingMode::GLOBAL).unwrap();
        let l1 = t.run_epoch().unwrap();
        let l2 = t.run_epoch().unwrap();
        assert!(l2 < l1, "{l1} -> {l2}");
    }

    #[test]
    fn padding_row_never_moves() {
        let split = toy();
        let ca = ClusterAssignment::from_assign((0..12).map(|i| i / 4).collect(), 3).unwrap();
        let cfg = EncoderConfig { dropout: 0.3, ..small_cfg() };
        let mut t = Trainer::new(&split, Some(&ca), &cfg, TrainingMode::prompted(PromptKind::Hadamard)).unwrap();
        t.run_epoch().unwrap();
        assert!(t.shards[0].item_table[..8].iter().all(|&g| g == 0.0));
        assert!(t.params().item_table[..8].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_cluster_within_matches_global() {
        let split = toy();
        let ca = ClusterAssignment::single(split.num_items()).unwrap();
        let cfg = EncoderConfig { epochs: 3, ..small_cfg() };
        let g = train(&split, None, &cfg, TrainingMode::GLOBAL).unwrap();
        let w = train(&split, Some(&ca), &cfg, TrainingMode::WITHIN_CLUSTER).unwrap();
        assert_eq!(g.report.validation, w.report.validation);
        assert_eq!(g.params, w.params);
    }

    #[test]
    fn mode_requires_clusters() {
        let split = toy();
        assert!(matches!(Trainer::new(&split, None, &small_cfg(), TrainingMode::WITHIN_CLUSTER), Err(EbrError::Usage(_))));
    }

    #[test]
    fn prompted_samples_split_by_task() {
        let split = toy();
        let ca = ClusterAssignment::from_assign((0..12).map(|i| i / 4).collect(), 3).unwrap();
        let t = Trainer::new(&split, Some(&ca), &small_cfg(), TrainingMode::prompted(PromptKind::Prefix)).unwrap();
        // each user's training targets touch exactly two clusters
        assert_eq!(t.num_samples(), 6);
    }
}

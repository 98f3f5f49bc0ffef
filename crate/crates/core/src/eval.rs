//! Leave-one-out recall evaluation, throughput measurement, and the
//! metrics report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Split;
use crate::error::{EbrError, Result};
use crate::intent::IntentHead;
use crate::itemset::ItemSet;
use crate::mf::{mf_user_vector, MfParams};
use crate::partition::ClusterAssignment;
use crate::retrieval::{retrieve_merged, topk_global, topk_in_cluster, PartitionedIndex, Schedule, UserVectors};
use crate::seqrec::{PromptInput, Trainer, TrainedModel};

/// 1 if `target` is among `candidates`, else 0.
pub fn recall_at_m(candidates: &[u32], target: u32) -> f64 {
    candidates.contains(&target) as u8 as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// Target = validation item, history = training items.
    Valid,
    /// Target = test item, history = training items plus the validation item.
    Test,
}

/// Source of user vectors.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a> {
    Seq(&'a TrainedModel),
    Mf(&'a MfParams),
}

impl Scorer<'_> {
    fn vector(&self, user: usize, history: &[u32], task: Option<usize>) -> Result<Vec<f32>> {
        match self {
            Scorer::Seq(m) => match task {
                Some(k) if m.has_prompts() => m.encode_user(history, Some(k)),
                _ => m.encode_with(history, PromptInput::None),
            },
            Scorer::Mf(p) => mf_user_vector(p, user),
        }
    }

    fn has_prompts(&self) -> bool {
        matches!(self, Scorer::Seq(m) if m.has_prompts())
    }
}

/// Quota-merged retrieval settings.
#[derive(Debug, Clone, Copy)]
pub struct Divided<'a> {
    pub intent: &'a IntentHead,
    /// Model whose prompt-free encoding feeds the intent head.
    pub backbone: &'a TrainedModel,
    pub alpha: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecall {
    pub cluster: usize,
    pub users: usize,
    pub recall: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub users: usize,
    pub recall: BTreeMap<usize, f64>,
    /// Breakdown by the cluster of the target item.
    pub per_cluster: Vec<ClusterRecall>,
}

struct UserCase {
    user: usize,
    target: u32,
    history: Vec<u32>,
}

fn cases(split: &Split, which: EvalSplit) -> Vec<UserCase> {
    split
        .eligible_users
        .iter()
        .filter_map(|&u| {
            let u = u as usize;
            let (target, history) = match which {
                EvalSplit::Valid => (split.valid_target[u]?, split.valid_history(u).to_vec()),
                EvalSplit::Test => (split.test_target[u]?, split.test_history(u)),
            };
            (!history.is_empty()).then_some(UserCase { user: u, target, history })
        })
        .collect()
}

fn cluster_map(idx: &PartitionedIndex) -> Vec<usize> {
    let mut map = vec![0; idx.num_items()];
    for k in 0..idx.k() {
        for &i in idx.block_items(k) {
            map[i as usize] = k;
        }
    }
    map
}

fn aggregate(hits: &[(usize, Vec<bool>)], ms: &[usize], k: usize) -> RecallReport {
    let n = hits.len();
    let mut totals = vec![0usize; ms.len()];
    let mut per = vec![(0usize, vec![0usize; ms.len()]); k];
    for (cluster, h) in hits {
        per[*cluster].0 += 1;
        for (j, &hit) in h.iter().enumerate() {
            totals[j] += hit as usize;
            per[*cluster].1[j] += hit as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    RecallReport {
        users: n,
        recall: ms.iter().zip(&totals).map(|(&m, &t)| (m, ratio(t, n))).collect(),
        per_cluster: per
            .into_iter()
            .enumerate()
            .map(|(cluster, (users, t))| ClusterRecall { cluster, users, recall: ms.iter().zip(&t).map(|(&m, &c)| (m, ratio(c, users))).collect() })
            .collect(),
    }
}

fn check_ms(ms: &[usize]) -> Result<usize> {
    ms.iter().copied().max().filter(|&m| m > 0).ok_or_else(|| EbrError::Usage("at least one positive cutoff M is required".into()))
}

/// Recall over the full corpus: exact global top-M, or quota-merged
/// retrieval when `divided` is given.
pub fn evaluate_overall(scorer: Scorer, idx: &PartitionedIndex, divided: Option<&Divided>, split: &Split, ms: &[usize], which: EvalSplit) -> Result<RecallReport> {
    let max_m = check_ms(ms)?;
    let clusters = cluster_map(idx);
    let n = idx.num_items();
    let hits: Vec<(usize, Vec<bool>)> = cases(split, which)
        .par_iter()
        .map(|c| -> Result<(usize, Vec<bool>)> {
            let exclude = ItemSet::from_items(n, c.history.iter().copied());
            let hit = match divided {
                None => {
                    let e_u = scorer.vector(c.user, &c.history, None)?;
                    let top = topk_global(idx, &e_u, max_m, &exclude)?;
                    let items: Vec<u32> = top.iter().map(|x| x.0).collect();
                    ms.iter().map(|&m| recall_at_m(&items[..m.min(items.len())], c.target) > 0.0).collect()
                }
                Some(dv) => {
                    let p_u = crate::intent::predict_intent(dv.intent, dv.backbone, &c.history)?;
                    let vectors: Vec<Vec<f32>> = if scorer.has_prompts() {
                        (0..idx.k()).map(|k| scorer.vector(c.user, &c.history, Some(k))).collect::<Result<_>>()?
                    } else {
                        vec![scorer.vector(c.user, &c.history, None)?]
                    };
                    let users = if scorer.has_prompts() { UserVectors::PerCluster(&vectors) } else { UserVectors::Shared(&vectors[0]) };
                    ms.iter()
                        .map(|&m| {
                            let r = retrieve_merged(idx, users, &p_u, dv.alpha, m, &exclude, dv.schedule)?;
                            Ok(r.merged.iter().any(|x| x.0 == c.target))
                        })
                        .collect::<Result<Vec<bool>>>()?
                }
            };
            Ok((clusters[c.target as usize], hit))
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(&hits, ms, idx.k()))
}

/// Recall when only the target's own cluster is searched, with that
/// cluster's prompt for prompted models.
pub fn evaluate_within_cluster(scorer: Scorer, idx: &PartitionedIndex, ca: &ClusterAssignment, split: &Split, ms: &[usize], which: EvalSplit) -> Result<RecallReport> {
    let max_m = check_ms(ms)?;
    if ca.num_items() != idx.num_items() || ca.k() != idx.k() {
        return Err(EbrError::Input("cluster assignment does not match the index".into()));
    }
    let n = idx.num_items();
    let hits: Vec<(usize, Vec<bool>)> = cases(split, which)
        .par_iter()
        .map(|c| -> Result<(usize, Vec<bool>)> {
            let k = ca.cluster(c.target);
            let exclude = ItemSet::from_items(n, c.history.iter().copied());
            let e_u = scorer.vector(c.user, &c.history, Some(k))?;
            let top = topk_in_cluster(idx, k, &e_u, max_m, &exclude)?;
            let items: Vec<u32> = top.iter().map(|x| x.0).collect();
            Ok((k, ms.iter().map(|&m| recall_at_m(&items[..m.min(items.len())], c.target) > 0.0).collect()))
        })
        .collect::<Result<_>>()?;
    Ok(aggregate(&hits, ms, idx.k()))
}

/// Picks the quota exponent with the best validation Recall@`m` for the
/// divided pipeline; ties go to the earlier grid entry. Returns
/// `(alpha, recall)`.
pub fn select_alpha(scorer: Scorer, idx: &PartitionedIndex, intent: &IntentHead, backbone: &TrainedModel, split: &Split, grid: &[f64], m: usize, schedule: Schedule) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &alpha in grid {
        let dv = Divided { intent, backbone, alpha, schedule };
        let r = evaluate_overall(scorer, idx, Some(&dv), split, &[m], EvalSplit::Valid)?.recall[&m];
        log::debug!("alpha {alpha}: validation R@{m} {r:.4}");
        if best.is_none_or(|(_, b)| r > b) {
            best = Some((alpha, r));
        }
    }
    best.ok_or_else(|| EbrError::Usage("empty alpha grid".into()))
}

/// Steady-state training samples per second: median over `windows`
/// windows of at least `window` each, after a two-step warm-up.
pub fn measure_throughput(trainer: &mut Trainer, window: Duration, windows: usize) -> Result<f64> {
    for _ in 0..2 {
        trainer.step()?;
    }
    let mut rates = Vec::with_capacity(windows.max(1));
    for _ in 0..windows.max(1) {
        let start = Instant::now();
        let mut samples = 0usize;
        while start.elapsed() < window || samples == 0 {
            samples += trainer.step()?.samples;
        }
        rates.push(samples as f64 / start.elapsed().as_secs_f64());
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[rates.len() / 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub name: String,
    #[serde(default)]
    pub overall: Option<RecallReport>,
    #[serde(default)]
    pub within: Option<RecallReport>,
    /// Training samples per second.
    #[serde(default)]
    pub throughput: Option<f64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Within-cluster negative ratio of a mixed model.
    #[serde(default)]
    pub ratio: Option<f64>,
    /// Chosen on validation among models of the same family.
    #[serde(default)]
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: EvalSplit,
    pub methods: Vec<MethodMetrics>,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricsReport {
    /// Plain-text tables: overall recall, within-cluster recall, and
    /// throughput, one row per method.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let section = |out: &mut String, title: &str, pick: &dyn Fn(&MethodMetrics) -> Option<&RecallReport>| {
            let ms: Vec<usize> = self.methods.iter().filter_map(pick).flat_map(|r| r.recall.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            if ms.is_empty() {
                return;
            }
            let _ = writeln!(out, "{title}");
            let mut header = format!("{:<28}", "method");
            for m in &ms {
                header += &format!("{:>10}", format!("R@{m}"));
            }
            let _ = writeln!(out, "{header}");
            for method in &self.methods {
                let Some(r) = pick(method) else { continue };
                let label = if method.selected { format!("{} *", method.name) } else { method.name.clone() };
                let mut row = format!("{label:<28}");
                for m in &ms {
                    row += &match r.recall.get(m) {
                        Some(v) => format!("{v:>10.4}"),
                        None => format!("{:>10}", "-"),
                    };
                }
                let _ = writeln!(out, "{row}");
            }
            out.push('\n');
        };
        section(&mut out, "Overall recall", &|m| m.overall.as_ref());
        section(&mut out, "Within-cluster recall", &|m| m.within.as_ref());
        if self.methods.iter().any(|m| m.throughput.is_some()) {
            let _ = writeln!(out, "Training throughput");
            let _ = writeln!(out, "{:<28}{:>14}", "method", "samples/sec");
            for m in self.methods.iter().filter(|m| m.throughput.is_some()) {
                let _ = writeln!(out, "{:<28}{:>14.1}", m.name, m.throughput.unwrap());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_m(&[1, 2, 3], 2), 1.0);
        assert_eq!(recall_at_m(&[1, 2, 3], 4), 0.0);
        assert_eq!(recall_at_m(&[], 4), 0.0);
    }

    #[test]
    fn table_lists_every_method_and_cutoff() {
        let rep = |v: f64| RecallReport { users: 3, recall: [(20, v), (50, v + 0.1)].into_iter().collect(), per_cluster: vec![] };
        let report = MetricsReport {
            split: EvalSplit::Test,
            methods: vec![
                MethodMetrics { name: "mf".into(), overall: Some(rep(0.1)), within: None, throughput: None, alpha: None, ratio: None, selected: false },
                MethodMetrics { name: "global".into(), overall: Some(rep(0.2)), within: Some(rep(0.3)), throughput: Some(1234.5), alpha: None, ratio: None, selected: true },
            ],
            fingerprint: "abc".into(),
            seed: 1,
        };
        let t = report.render_table();
        assert!(t.contains("R@20") && t.contains("R@50"));
        assert!(t.contains("0.1000") && t.contains("0.3000") && t.contains("1234.5"));
        assert_eq!(t.matches("global").count(), 3);
        assert!(t.contains("global *"));
        let json = serde_json::to_string(&report).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), report);
    }
}

//! Self-attentive sequential user encoder and its training regimes.
//!
//! Negatives come from the whole corpus, from the positive's own cluster,
//! or from a mix of both. Within-cluster training can attach a trainable
//! vector per cluster ("task"), either prepended as an extra token or
//! multiplied element-wise into every input token embedding.

mod encoder;
mod gradcheck;
mod params;
mod sampler;
mod train;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::embedding::EmbeddingMatrix;
use crate::error::{EbrError, Result};
use crate::linalg::softplus;

pub use encoder::PromptInput;
pub use gradcheck::{gradient_check, gradient_errors, GradientProbe, ProbeSequence};
pub use params::{BlockParams, EncoderParams};
pub use sampler::{sample_negative, NegativeSample};
pub use train::{train, Adam, TrainReport, Trainer, StepStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Sequence window `n`.
    pub max_len: usize,
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate validation recall every this many epochs.
    pub eval_every: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Cutoff `M` of the validation recall used for early stopping.
    pub early_stop_m: usize,
    /// Cap on users scored per validation pass (0 = all eligible users).
    pub valid_users: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            max_len: 200,
            dim: 50,
            blocks: 2,
            heads: 1,
            dropout: 0.2,
            lr: 1e-3,
            batch_size: 128,
            epochs: 200,
            seed: 42,
            eval_every: 5,
            patience: 20,
            early_stop_m: 20,
            valid_users: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EbrError::Config(m.to_string()));
        if self.max_len == 0 || self.dim == 0 || self.blocks == 0 || self.heads == 0 {
            return bad("max_len, dim, blocks and heads must be >= 1");
        }
        if self.dim % self.heads != 0 {
            return bad("heads must divide dim");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.batch_size == 0 || self.eval_every == 0 {
            return bad("lr must be finite and non-negative; batch_size and eval_every >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NegativeKind {
    /// Uniform over items the user has not interacted with.
    Global,
    /// Within-cluster pool with probability `ratio`, else the global pool.
    Mixed { ratio: f64 },
    /// Uniform over the positive's cluster minus the user's items.
    WithinCluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    #[default]
    None,
    Prefix,
    Hadamard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingMode {
    pub negatives: NegativeKind,
    #[serde(default)]
    pub prompt: PromptKind,
}

impl TrainingMode {
    pub const GLOBAL: Self = Self { negatives: NegativeKind::Global, prompt: PromptKind::None };
    pub const WITHIN_CLUSTER: Self = Self { negatives: NegativeKind::WithinCluster, prompt: PromptKind::None };

    pub fn mixed(ratio: f64) -> Self {
        Self { negatives: NegativeKind::Mixed { ratio }, prompt: PromptKind::None }
    }

    pub fn prompted(prompt: PromptKind) -> Self {
        Self { negatives: NegativeKind::WithinCluster, prompt }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt != PromptKind::None && self.negatives != NegativeKind::WithinCluster {
            return Err(EbrError::Config("task prompts require within-cluster negatives".into()));
        }
        if let NegativeKind::Mixed { ratio } = self.negatives {
            if !(0.0..=1.0).contains(&ratio) {
                return Err(EbrError::Config(format!("mix ratio {ratio} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn needs_clusters(&self) -> bool {
        self.negatives != NegativeKind::Global
    }
}

/// Trained encoder plus the configuration it was trained under.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: EncoderParams,
    pub config: EncoderConfig,
    pub mode: TrainingMode,
    pub report: TrainReport,
}

impl TrainedModel {
    pub fn num_items(&self) -> usize {
        self.params.num_items
    }

    pub fn num_tasks(&self) -> usize {
        self.params.num_tasks()
    }

    pub fn has_prompts(&self) -> bool {
        self.mode.prompt != PromptKind::None
    }

    /// Full item table including the padding row 0.
    pub fn item_out(&self) -> EmbeddingMatrix {
        let d = self.params.dim;
        let values = self.params.item_table.iter().map(|&v| v as f32).collect();
        EmbeddingMatrix::new(self.params.num_items + 1, d, values).unwrap()
    }

    /// Item representations indexed by internal item id (padding dropped).
    pub fn item_embeddings(&self) -> EmbeddingMatrix {
        let d = self.params.dim;
        let values = self.params.item_table[d..].iter().map(|&v| v as f32).collect();
        EmbeddingMatrix::new(self.params.num_items, d, values).unwrap()
    }

    /// Prompt usage for a task id (or the prompt-free path when `None`).
    pub fn prompt_input(&self, task: Option<usize>) -> PromptInput {
        match (self.mode.prompt, task) {
            (PromptKind::Prefix, Some(k)) => PromptInput::Prefix(k),
            (PromptKind::Hadamard, Some(k)) => PromptInput::Hadamard(k),
            _ => PromptInput::None,
        }
    }

    /// Hidden state at the last position. `task` must be given iff the
    /// model was trained with prompts.
    pub fn encode_user(&self, history: &[u32], task: Option<usize>) -> Result<Vec<f32>> {
        if history.is_empty() {
            return Err(EbrError::Usage("history must be non-empty".into()));
        }
        match (self.has_prompts(), task) {
            (true, None) => return Err(EbrError::Usage("task id required for a prompted model".into())),
            (false, Some(_)) => return Err(EbrError::Usage("task id given for a model without prompts".into())),
            (true, Some(k)) if k >= self.num_tasks() => {
                return Err(EbrError::Usage(format!("task {k} out of range (K={})", self.num_tasks())))
            }
            _ => {}
        }
        self.encode_with(history, self.prompt_input(task))
    }

    /// Encoding with explicit prompt control; `PromptInput::None` on a
    /// prompted model runs the shared backbone without any task vector.
    pub fn encode_with(&self, history: &[u32], prompt: PromptInput) -> Result<Vec<f32>> {
        if history.is_empty() {
            return Err(EbrError::Usage("history must be non-empty".into()));
        }
        if let Some(&bad) = history.iter().find(|&&i| i as usize >= self.num_items()) {
            return Err(EbrError::Index { index: bad as usize, len: self.num_items() });
        }
        Ok(encoder::encode_last(&self.params, history, prompt).into_iter().map(|v| v as f32).collect())
    }

    /// Prompt-free hidden states at every position of the window over
    /// `inputs`: returns `(n, rows)` where row `j` follows input
    /// `inputs[inputs.len() - n + j]`.
    pub fn encode_positions(&self, inputs: &[u32]) -> Result<(usize, Vec<f64>)> {
        if inputs.is_empty() {
            return Err(EbrError::Usage("history must be non-empty".into()));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i as usize >= self.num_items()) {
            return Err(EbrError::Index { index: bad as usize, len: self.num_items() });
        }
        Ok(encoder::encode_all(&self.params, inputs, PromptInput::None))
    }
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "kind": "seqrec",
            "encoder": self.config,
            "mode": self.mode,
            "num_items": self.params.num_items,
            "num_tasks": self.num_tasks(),
            "report": self.report,
        });
        let mut c = Checkpoint::new(config);
        for (name, shape, values) in self.params.tensors() {
            c.push_f64(name, shape, values);
        }
        Ok(c)
    }

    /// Inverse of [`to_checkpoint`](Self::to_checkpoint); weights come back
    /// rounded to f32.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.config.get("kind").and_then(|k| k.as_str()) != Some("seqrec") {
            return Err(EbrError::Format("not a sequential-encoder checkpoint".into()));
        }
        let field = |name: &str| c.config.get(name).cloned().ok_or_else(|| EbrError::Format(format!("checkpoint config lacks {name:?}")));
        let config: EncoderConfig = serde_json::from_value(field("encoder")?)?;
        let mode: TrainingMode = serde_json::from_value(field("mode")?)?;
        let num_items: usize = serde_json::from_value(field("num_items")?)?;
        let num_tasks: usize = serde_json::from_value(field("num_tasks")?)?;
        let report: TrainReport = serde_json::from_value(field("report")?)?;
        config.validate()?;
        let mut params = EncoderParams::init(&config, num_items, mode.prompt, num_tasks);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            let values = c.get_f64(name, t.len())?;
            t.copy_from_slice(&values);
        }
        Ok(Self { params, config, mode, report })
    }
}

/// Inner-product relevance.
pub fn score(e_u: &[f32], e_i: &[f32]) -> Result<f64> {
    if e_u.len() != e_i.len() {
        return Err(EbrError::Usage(format!("dimension mismatch: {} vs {}", e_u.len(), e_i.len())));
    }
    Ok(e_u.iter().zip(e_i).map(|(&a, &b)| a as f64 * b as f64).sum())
}

/// `-[log σ(r_pos) + mean_neg log(1 - σ(r_neg))]`, evaluated with softplus
/// so it stays finite for any finite input.
pub fn bce_loss(r_pos: f64, r_negs: &[f64]) -> f64 {
    let neg = if r_negs.is_empty() {
        0.0
    } else {
        r_negs.iter().map(|&r| softplus(r)).sum::<f64>() / r_negs.len() as f64
    };
    softplus(-r_pos) + neg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_examples() {
        assert_eq!(score(&[0.0, 0.0], &[5.0, -2.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, -1.0]).unwrap(), 1.0);
        assert!(matches!(score(&[1.0], &[1.0, 2.0]), Err(EbrError::Usage(_))));
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.0, &[0.0]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(bce_loss(30.0, &[-30.0]) <= 1e-9);
        // stabilized form against 2·(30 + ln(1 + e^-30)) expanded by hand
        let exact = 60.0 + 2.0 * (-30f64).exp();
        assert!((bce_loss(-30.0, &[30.0]) - exact).abs() < 1e-6);
        assert!(bce_loss(-1e6, &[1e6]).is_finite());
    }

    #[test]
    fn bce_decreases_in_positive_score() {
        let negs = [0.3, -1.2];
        let mut prev = f64::INFINITY;
        for step in -40..=40 {
            let l = bce_loss(step as f64 * 0.25, &negs);
            assert!(l >= 0.0 && l < prev);
            prev = l;
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let config = EncoderConfig { dim: 4, max_len: 3, blocks: 1, ..Default::default() };
        let mode = TrainingMode::prompted(PromptKind::Hadamard);
        let params = EncoderParams::init(&config, 6, mode.prompt, 2);
        let m = TrainedModel { params, config, mode, report: TrainReport::default() };
        let mut buf = Vec::new();
        m.to_checkpoint().unwrap().write(&mut buf).unwrap();
        let back = TrainedModel::from_checkpoint(&Checkpoint::read(&buf[..]).unwrap()).unwrap();
        assert_eq!(back.mode, m.mode);
        assert_eq!(back.num_tasks(), 2);
        let a = m.encode_user(&[1, 2], Some(1)).unwrap();
        let b = back.encode_user(&[1, 2], Some(1)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
        assert_eq!(back.item_out().rows(), 7);
    }

    #[test]
    fn mode_validation() {
        assert!(TrainingMode { negatives: NegativeKind::Global, prompt: PromptKind::Hadamard }.validate().is_err());
        assert!(TrainingMode::mixed(1.5).validate().is_err());
        assert!(TrainingMode::prompted(PromptKind::Prefix).validate().is_ok());
        let cfg = EncoderConfig { dim: 10, heads: 3, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}

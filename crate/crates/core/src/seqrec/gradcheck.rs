use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::{Dropout, PromptInput};
use super::params::EncoderParams;
use super::train::accumulate_sequence;
use super::{EncoderConfig, PromptKind, TrainingMode};

const FD_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-4;

/// One sequence of a gradient-check batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSequence {
    pub inputs: Vec<u32>,
    /// Task id; used only by prompted modes.
    pub task: usize,
    /// `(position, positive, negative)` triples.
    pub positives: Vec<(usize, u32, u32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientProbe {
    pub num_items: usize,
    pub num_tasks: usize,
    pub sequences: Vec<ProbeSequence>,
    /// Seed of the random parameter perturbation applied before checking.
    pub seed: u64,
}

impl GradientProbe {
    /// A deterministic random batch that fits `cfg` under `prompt`.
    pub fn random(cfg: &EncoderConfig, prompt: PromptKind, num_items: usize, num_tasks: usize, seqs: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cap = cfg.max_len - (prompt == PromptKind::Prefix) as usize;
        let sequences = (0..seqs)
            .map(|_| {
                let len = rng.random_range(1..=cap);
                let inputs: Vec<u32> = (0..len).map(|_| rng.random_range(0..num_items as u32)).collect();
                let mut positives = Vec::new();
                for j in 0..len {
                    if rng.random_bool(0.7) {
                        positives.push((j, rng.random_range(0..num_items as u32), rng.random_range(0..num_items as u32)));
                    }
                }
                ProbeSequence { inputs, task: rng.random_range(0..num_tasks.max(1)), positives }
            })
            .collect();
        Self { num_items, num_tasks, sequences, seed }
    }
}

fn prompt_input(kind: PromptKind, task: usize) -> PromptInput {
    match kind {
        PromptKind::None => PromptInput::None,
        PromptKind::Prefix => PromptInput::Prefix(task),
        PromptKind::Hadamard => PromptInput::Hadamard(task),
    }
}

fn batch_loss(p: &EncoderParams, probe: &GradientProbe, kind: PromptKind, scale: f64, grads: &mut EncoderParams) -> f64 {
    probe
        .sequences
        .iter()
        .map(|s| accumulate_sequence(p, &s.inputs, prompt_input(kind, s.task), &s.positives, scale, Dropout::off(), grads))
        .sum::<f64>()
        * scale
}

/// Per-tensor maximum relative error between the analytic gradient of the
/// batch's mean loss and central finite differences.
pub fn gradient_errors(cfg: &EncoderConfig, mode: TrainingMode, probe: &GradientProbe) -> Vec<(String, f64)> {
    let cfg = EncoderConfig { dropout: 0.0, ..cfg.clone() };
    let kind = mode.prompt;
    let mut params = EncoderParams::init(&cfg, probe.num_items, kind, probe.num_tasks);
    // move off the structured initialization (unit scales, zero biases,
    // constant prompts) so every gradient path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    for t in params.tensors_mut().into_iter().skip(1) {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let d = params.dim;
    params.item_table[d..].iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));

    let total: usize = probe.sequences.iter().map(|s| s.positives.len()).sum();
    let scale = 1.0 / total.max(1) as f64;
    let mut analytic = params.zeros_like();
    batch_loss(&params, probe, kind, scale, &mut analytic);

    let names: Vec<String> = params.tensors().into_iter().map(|(n, _, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, _, t)| t.to_vec()).collect();
    let mut scratch = params.zeros_like();
    let mut out = Vec::with_capacity(names.len());
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = params.tensors_mut()[ti][i];
            params.tensors_mut()[ti][i] = orig + FD_STEP;
            let up = batch_loss(&params, probe, kind, scale, &mut scratch);
            params.tensors_mut()[ti][i] = orig - FD_STEP;
            let down = batch_loss(&params, probe, kind, scale, &mut scratch);
            params.tensors_mut()[ti][i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
        }
        out.push((name, worst));
    }
    out
}

/// Maximum relative error over every parameter tensor.
pub fn gradient_check(cfg: &EncoderConfig, mode: TrainingMode, probe: &GradientProbe) -> f64 {
    gradient_errors(cfg, mode, probe).into_iter().map(|(_, e)| e).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig { max_len: 5, dim: 4, blocks: 2, heads: 2, dropout: 0.0, ..Default::default() }
    }

    fn check(prompt: PromptKind) {
        let c = cfg();
        let probe = GradientProbe::random(&c, prompt, 7, 3, 3, 11);
        let errs = gradient_errors(&c, TrainingMode::prompted(prompt), &probe);
        for (name, e) in &errs {
            assert!(*e <= 1e-3, "{name}: {e}");
        }
        if prompt != PromptKind::None {
            assert!(errs.iter().any(|(n, _)| n == "prompt_table"));
        }
    }

    #[test]
    fn gradients_without_prompt() {
        check(PromptKind::None);
    }

    #[test]
    fn gradients_with_prefix_prompt() {
        check(PromptKind::Prefix);
    }

    #[test]
    fn gradients_with_hadamard_prompt() {
        check(PromptKind::Hadamard);
    }
}

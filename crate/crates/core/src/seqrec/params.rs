use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{EncoderConfig, PromptKind};

/// One self-attention block. Matrices are `dim × dim`, row-major, applied
/// as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_attn_scale: Vec<f64>,
    pub ln_attn_offset: Vec<f64>,
    pub w_query: Vec<f64>,
    pub w_key: Vec<f64>,
    pub w_value: Vec<f64>,
    pub w_out: Vec<f64>,
    pub ln_ffn_scale: Vec<f64>,
    pub ln_ffn_offset: Vec<f64>,
    pub ffn_w1: Vec<f64>,
    pub ffn_b1: Vec<f64>,
    pub ffn_w2: Vec<f64>,
    pub ffn_b2: Vec<f64>,
}

/// Every trainable tensor of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub max_len: usize,
    pub heads: usize,
    pub num_items: usize,
    /// `(num_items + 1) × dim`; row 0 is padding and is never read.
    pub item_table: Vec<f64>,
    /// `max_len × dim`.
    pub pos_table: Vec<f64>,
    pub blocks: Vec<BlockParams>,
    pub ln_final_scale: Vec<f64>,
    pub ln_final_offset: Vec<f64>,
    /// `K × dim` task vectors, present iff the model is prompted.
    pub prompt_table: Option<Vec<f64>>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    (0..rows * cols).map(|_| normal.sample(rng)).collect()
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, num_items: usize, prompt: PromptKind, num_tasks: usize) -> Self {
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e1c0);
        let mut item_table = xavier(&mut rng, num_items + 1, d);
        item_table[..d].iter_mut().for_each(|v| *v = 0.0);
        let pos_table = xavier(&mut rng, cfg.max_len, d);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln_attn_scale: vec![1.0; d],
                ln_attn_offset: vec![0.0; d],
                w_query: xavier(&mut rng, d, d),
                w_key: xavier(&mut rng, d, d),
                w_value: xavier(&mut rng, d, d),
                w_out: xavier(&mut rng, d, d),
                ln_ffn_scale: vec![1.0; d],
                ln_ffn_offset: vec![0.0; d],
                ffn_w1: xavier(&mut rng, d, d),
                ffn_b1: vec![0.0; d],
                ffn_w2: xavier(&mut rng, d, d),
                ffn_b2: vec![0.0; d],
            })
            .collect();
        let prompt_table = match prompt {
            PromptKind::None => None,
            PromptKind::Hadamard => Some(vec![1.0; num_tasks * d]),
            PromptKind::Prefix => Some(vec![0.0; num_tasks * d]),
        };
        Self {
            dim: d,
            max_len: cfg.max_len,
            heads: cfg.heads,
            num_items,
            item_table,
            pos_table,
            blocks,
            ln_final_scale: vec![1.0; d],
            ln_final_offset: vec![0.0; d],
            prompt_table,
        }
    }

    /// Same shapes, all zeros. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn num_tasks(&self) -> usize {
        self.prompt_table.as_ref().map_or(0, |t| t.len() / self.dim)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// `(name, shape, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let d = self.dim;
        let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![
            ("item_table".into(), vec![self.num_items + 1, d], &self.item_table),
            ("pos_table".into(), vec![self.max_len, d], &self.pos_table),
        ];
        for (b, blk) in self.blocks.iter().enumerate() {
            let named: [(&str, &Vec<f64>, bool); 12] = [
                ("ln_attn_scale", &blk.ln_attn_scale, false),
                ("ln_attn_offset", &blk.ln_attn_offset, false),
                ("w_query", &blk.w_query, true),
                ("w_key", &blk.w_key, true),
                ("w_value", &blk.w_value, true),
                ("w_out", &blk.w_out, true),
                ("ln_ffn_scale", &blk.ln_ffn_scale, false),
                ("ln_ffn_offset", &blk.ln_ffn_offset, false),
                ("ffn_w1", &blk.ffn_w1, true),
                ("ffn_b1", &blk.ffn_b1, false),
                ("ffn_w2", &blk.ffn_w2, true),
                ("ffn_b2", &blk.ffn_b2, false),
            ];
            for (name, t, square) in named {
                let shape = if square { vec![d, d] } else { vec![d] };
                out.push((format!("block{b}.{name}"), shape, t));
            }
        }
        out.push(("ln_final_scale".into(), vec![d], &self.ln_final_scale));
        out.push(("ln_final_offset".into(), vec![d], &self.ln_final_offset));
        if let Some(p) = &self.prompt_table {
            out.push(("prompt_table".into(), vec![p.len() / d, d], p));
        }
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.item_table, &mut self.pos_table];
        for blk in &mut self.blocks {
            out.extend([
                &mut blk.ln_attn_scale[..],
                &mut blk.ln_attn_offset,
                &mut blk.w_query,
                &mut blk.w_key,
                &mut blk.w_value,
                &mut blk.w_out,
                &mut blk.ln_ffn_scale,
                &mut blk.ln_ffn_offset,
                &mut blk.ffn_w1,
                &mut blk.ffn_b1,
                &mut blk.ffn_w2,
                &mut blk.ffn_b2,
            ]);
        }
        out.push(&mut self.ln_final_scale);
        out.push(&mut self.ln_final_offset);
        if let Some(p) = &mut self.prompt_table {
            out.push(p);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

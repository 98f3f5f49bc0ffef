//! Forward and reverse-mode passes of the causal self-attention encoder.
//!
//! A sequence of `L <= max_len` tokens occupies the last `L` positional
//! slots, which is the left-padded layout with padded keys masked out; the
//! padding rows themselves are never materialized.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{BlockParams, EncoderParams};
use crate::linalg::gemm;

const LN_EPS: f64 = 1e-8;

/// How the task vector enters the encoder for one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptInput {
    None,
    /// Task vector prepended as an extra token (uses one window slot).
    Prefix(usize),
    /// Every item embedding multiplied element-wise by the task vector
    /// before positional embeddings are added.
    Hadamard(usize),
}

impl PromptInput {
    pub fn slots(self) -> usize {
        matches!(self, PromptInput::Prefix(_)) as usize
    }
}

/// Dropout source; `rng == None` or `rate == 0` disables it.
pub(crate) struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    fn mask(&mut self, n: usize) -> Option<Vec<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        Some((0..n).map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep }).collect())
    }
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

struct LnCache {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

fn layer_norm(x: &[f64], rows: usize, d: usize, scale: &[f64], offset: &[f64], out: &mut [f64]) -> LnCache {
    let mut xhat = vec![0.0; rows * d];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for f in 0..d {
            let h = (row[f] - mean) * rs;
            xhat[r * d + f] = h;
            out[r * d + f] = h * scale[f] + offset[f];
        }
    }
    LnCache { xhat, rstd }
}

/// Adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
    scale: &[f64],
    dscale: &mut [f64],
    doffset: &mut [f64],
    dx: &mut [f64],
) {
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let (mut m1, mut m2) = (0.0, 0.0);
        for f in 0..d {
            dscale[f] += g[f] * xh[f];
            doffset[f] += g[f];
            dxhat[f] = g[f] * scale[f];
            m1 += dxhat[f];
            m2 += dxhat[f] * xh[f];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        let rs = cache.rstd[r];
        for f in 0..d {
            dx[r * d + f] += rs * (dxhat[f] - m1 - xh[f] * m2);
        }
    }
}

struct BlockCache {
    x: Vec<f64>,
    ln_attn: LnCache,
    q_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × L × L` attention probabilities (zero above the diagonal).
    probs: Vec<f64>,
    ctx: Vec<f64>,
    drop_attn: Option<Vec<f64>>,
    ln_ffn: LnCache,
    f_in: Vec<f64>,
    z: Vec<f64>,
    hidden: Vec<f64>,
    drop_hidden: Option<Vec<f64>>,
    drop_out: Option<Vec<f64>>,
}

pub(crate) struct ForwardCache {
    pub len: usize,
    pub offset: usize,
    start: usize,
    items: Vec<u32>,
    prompt: PromptInput,
    drop_in: Option<Vec<f64>>,
    blocks: Vec<BlockCache>,
    ln_final: LnCache,
    /// `L × dim` final hidden states.
    pub out: Vec<f64>,
}

fn gather_head(src: &[f64], l: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..l {
        dst[t * dh..(t + 1) * dh].copy_from_slice(&src[t * d + h * dh..t * d + (h + 1) * dh]);
    }
}

fn scatter_head(src: &[f64], l: usize, d: usize, h: usize, dh: usize, dst: &mut [f64]) {
    for t in 0..l {
        dst[t * d + h * dh..t * d + (h + 1) * dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn add_col_sums(x: &[f64], out: &mut [f64]) {
    for row in x.chunks_exact(out.len()) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
}

fn block_forward(blk: &BlockParams, x: Vec<f64>, l: usize, d: usize, heads: usize, drop: &mut Dropout) -> (Vec<f64>, BlockCache) {
    let mut q_in = vec![0.0; l * d];
    let ln_attn = layer_norm(&x, l, d, &blk.ln_attn_scale, &blk.ln_attn_offset, &mut q_in);
    let mut q = vec![0.0; l * d];
    let mut k = vec![0.0; l * d];
    let mut v = vec![0.0; l * d];
    gemm(l, d, d, &q_in, false, &blk.w_query, false, &mut q, false);
    gemm(l, d, d, &x, false, &blk.w_key, false, &mut k, false);
    gemm(l, d, d, &x, false, &blk.w_value, false, &mut v, false);

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; heads * l * l];
    let mut ctx = vec![0.0; l * d];
    let (mut qh, mut kh, mut vh, mut ch) = (vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh]);
    for h in 0..heads {
        gather_head(&q, l, d, h, dh, &mut qh);
        gather_head(&k, l, d, h, dh, &mut kh);
        gather_head(&v, l, d, h, dh, &mut vh);
        let p = &mut probs[h * l * l..(h + 1) * l * l];
        gemm(l, dh, l, &qh, false, &kh, true, p, false);
        for i in 0..l {
            let row = &mut p[i * l..(i + 1) * l];
            let mut max = f64::NEG_INFINITY;
            for s in row[..=i].iter_mut() {
                *s *= scale;
                max = max.max(*s);
            }
            let mut sum = 0.0;
            for s in row[..=i].iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            row[..=i].iter_mut().for_each(|s| *s /= sum);
            row[i + 1..].iter_mut().for_each(|s| *s = 0.0);
        }
        gemm(l, l, dh, p, false, &vh, false, &mut ch, false);
        scatter_head(&ch, l, d, h, dh, &mut ctx);
    }

    let mut h1 = vec![0.0; l * d];
    gemm(l, d, d, &ctx, false, &blk.w_out, false, &mut h1, false);
    let drop_attn = drop.mask(l * d);
    apply_mask(&mut h1, &drop_attn);
    h1.iter_mut().zip(&q_in).for_each(|(a, b)| *a += b);

    let mut f_in = vec![0.0; l * d];
    let ln_ffn = layer_norm(&h1, l, d, &blk.ln_ffn_scale, &blk.ln_ffn_offset, &mut f_in);
    let mut z = vec![0.0; l * d];
    gemm(l, d, d, &f_in, false, &blk.ffn_w1, false, &mut z, false);
    add_row_bias(&mut z, &blk.ffn_b1);
    let mut hidden: Vec<f64> = z.iter().map(|&v| v.max(0.0)).collect();
    let drop_hidden = drop.mask(l * d);
    apply_mask(&mut hidden, &drop_hidden);
    let mut y = vec![0.0; l * d];
    gemm(l, d, d, &hidden, false, &blk.ffn_w2, false, &mut y, false);
    add_row_bias(&mut y, &blk.ffn_b2);
    let drop_out = drop.mask(l * d);
    apply_mask(&mut y, &drop_out);
    y.iter_mut().zip(&f_in).for_each(|(a, b)| *a += b);

    let cache = BlockCache { x, ln_attn, q_in, q, k, v, probs, ctx, drop_attn, ln_ffn, f_in, z, hidden, drop_hidden, drop_out };
    (y, cache)
}

/// Returns the gradient with respect to the block input.
fn block_backward(blk: &BlockParams, c: &BlockCache, dx_next: &[f64], l: usize, d: usize, heads: usize, g: &mut BlockParams) -> Vec<f64> {
    // feed-forward sublayer: x_next = f_in + drop(relu(f_in W1 + b1) W2 + b2)
    let mut dy = dx_next.to_vec();
    apply_mask(&mut dy, &c.drop_out);
    add_col_sums(&dy, &mut g.ffn_b2);
    gemm(d, l, d, &c.hidden, true, &dy, false, &mut g.ffn_w2, true);
    let mut dz = vec![0.0; l * d];
    gemm(l, d, d, &dy, false, &blk.ffn_w2, true, &mut dz, false);
    apply_mask(&mut dz, &c.drop_hidden);
    dz.iter_mut().zip(&c.z).for_each(|(v, &z)| {
        if z <= 0.0 {
            *v = 0.0
        }
    });
    add_col_sums(&dz, &mut g.ffn_b1);
    gemm(d, l, d, &c.f_in, true, &dz, false, &mut g.ffn_w1, true);
    let mut df_in = dx_next.to_vec();
    gemm(l, d, d, &dz, false, &blk.ffn_w1, true, &mut df_in, true);
    let mut dh1 = vec![0.0; l * d];
    layer_norm_backward(&df_in, &c.ln_ffn, l, d, &blk.ln_ffn_scale, &mut g.ln_ffn_scale, &mut g.ln_ffn_offset, &mut dh1);

    // attention sublayer: h1 = q_in + drop(attn(q_in Wq, x Wk, x Wv) Wo)
    let mut dq_in = dh1.clone();
    let mut d_o = dh1;
    apply_mask(&mut d_o, &c.drop_attn);
    gemm(d, l, d, &c.ctx, true, &d_o, false, &mut g.w_out, true);
    let mut dctx = vec![0.0; l * d];
    gemm(l, d, d, &d_o, false, &blk.w_out, true, &mut dctx, false);

    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut dq, mut dk, mut dv) = (vec![0.0; l * d], vec![0.0; l * d], vec![0.0; l * d]);
    let (mut qh, mut kh, mut vh, mut dch) = (vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh]);
    let (mut dqh, mut dkh, mut dvh) = (vec![0.0; l * dh], vec![0.0; l * dh], vec![0.0; l * dh]);
    let mut ds = vec![0.0; l * l];
    for h in 0..heads {
        gather_head(&c.q, l, d, h, dh, &mut qh);
        gather_head(&c.k, l, d, h, dh, &mut kh);
        gather_head(&c.v, l, d, h, dh, &mut vh);
        gather_head(&dctx, l, d, h, dh, &mut dch);
        let p = &c.probs[h * l * l..(h + 1) * l * l];
        gemm(l, dh, l, &dch, false, &vh, true, &mut ds, false);
        gemm(l, l, dh, p, true, &dch, false, &mut dvh, false);
        for i in 0..l {
            let pr = &p[i * l..(i + 1) * l];
            let dr = &mut ds[i * l..(i + 1) * l];
            let inner: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
            for j in 0..=i {
                dr[j] = pr[j] * (dr[j] - inner) * scale;
            }
            dr[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        gemm(l, l, dh, &ds, false, &kh, false, &mut dqh, false);
        gemm(l, l, dh, &ds, true, &qh, false, &mut dkh, false);
        scatter_head(&dqh, l, d, h, dh, &mut dq);
        scatter_head(&dkh, l, d, h, dh, &mut dk);
        scatter_head(&dvh, l, d, h, dh, &mut dv);
    }
    gemm(d, l, d, &c.q_in, true, &dq, false, &mut g.w_query, true);
    gemm(l, d, d, &dq, false, &blk.w_query, true, &mut dq_in, true);
    gemm(d, l, d, &c.x, true, &dk, false, &mut g.w_key, true);
    gemm(d, l, d, &c.x, true, &dv, false, &mut g.w_value, true);
    let mut dx = vec![0.0; l * d];
    gemm(l, d, d, &dk, false, &blk.w_key, true, &mut dx, false);
    gemm(l, d, d, &dv, false, &blk.w_value, true, &mut dx, true);
    layer_norm_backward(&dq_in, &c.ln_attn, l, d, &blk.ln_attn_scale, &mut g.ln_attn_scale, &mut g.ln_attn_offset, &mut dx);
    dx
}

/// Runs the encoder over `items` (already truncated to fit the window).
pub(crate) fn forward(p: &EncoderParams, items: &[u32], prompt: PromptInput, mut drop: Dropout) -> ForwardCache {
    let d = p.dim;
    let offset = prompt.slots();
    let l = items.len() + offset;
    assert!(l >= 1 && l <= p.max_len, "sequence of {l} tokens does not fit window {}", p.max_len);
    let start = p.max_len - l;
    let sqrt_d = (d as f64).sqrt();
    let mut x = vec![0.0; l * d];
    for t in 0..l {
        let row = &mut x[t * d..(t + 1) * d];
        match (t < offset, prompt) {
            (true, PromptInput::Prefix(k)) => {
                row.copy_from_slice(&p.prompt_table.as_ref().expect("prefix prompt without prompt table")[k * d..(k + 1) * d]);
            }
            _ => {
                let item = items[t - offset] as usize + 1;
                let e = &p.item_table[item * d..(item + 1) * d];
                match prompt {
                    PromptInput::Hadamard(k) => {
                        let tk = &p.prompt_table.as_ref().expect("hadamard prompt without prompt table")[k * d..(k + 1) * d];
                        for f in 0..d {
                            row[f] = e[f] * sqrt_d * tk[f];
                        }
                    }
                    _ => {
                        for f in 0..d {
                            row[f] = e[f] * sqrt_d;
                        }
                    }
                }
            }
        }
        row.iter_mut().zip(&p.pos_table[(start + t) * d..(start + t + 1) * d]).for_each(|(a, b)| *a += b);
    }
    let drop_in = drop.mask(l * d);
    apply_mask(&mut x, &drop_in);

    let mut blocks = Vec::with_capacity(p.blocks.len());
    for blk in &p.blocks {
        let (next, cache) = block_forward(blk, x, l, d, p.heads, &mut drop);
        blocks.push(cache);
        x = next;
    }
    let mut out = vec![0.0; l * d];
    let ln_final = layer_norm(&x, l, d, &p.ln_final_scale, &p.ln_final_offset, &mut out);
    ForwardCache { len: l, offset, start, items: items.to_vec(), prompt, drop_in, blocks, ln_final, out }
}

/// Accumulates parameter gradients for `d_out = ∂loss/∂out` into `g`.
pub(crate) fn backward(p: &EncoderParams, c: &ForwardCache, d_out: &[f64], g: &mut EncoderParams) {
    let (l, d) = (c.len, p.dim);
    let mut dx = vec![0.0; l * d];
    layer_norm_backward(d_out, &c.ln_final, l, d, &p.ln_final_scale, &mut g.ln_final_scale, &mut g.ln_final_offset, &mut dx);
    for (b, blk) in p.blocks.iter().enumerate().rev() {
        dx = block_backward(blk, &c.blocks[b], &dx, l, d, p.heads, &mut g.blocks[b]);
    }
    apply_mask(&mut dx, &c.drop_in);
    let sqrt_d = (d as f64).sqrt();
    for t in 0..l {
        let dr = &dx[t * d..(t + 1) * d];
        let pos = c.start + t;
        g.pos_table[pos * d..(pos + 1) * d].iter_mut().zip(dr).for_each(|(a, b)| *a += b);
        if t < c.offset {
            if let PromptInput::Prefix(k) = c.prompt {
                let gt = &mut g.prompt_table.as_mut().unwrap()[k * d..(k + 1) * d];
                gt.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
            }
            continue;
        }
        let item = c.items[t - c.offset] as usize + 1;
        match c.prompt {
            PromptInput::Hadamard(k) => {
                let tk = &p.prompt_table.as_ref().unwrap()[k * d..(k + 1) * d];
                let e = &p.item_table[item * d..(item + 1) * d];
                let ge = &mut g.item_table[item * d..(item + 1) * d];
                for f in 0..d {
                    ge[f] += dr[f] * sqrt_d * tk[f];
                }
                let gt = &mut g.prompt_table.as_mut().unwrap()[k * d..(k + 1) * d];
                for f in 0..d {
                    gt[f] += dr[f] * sqrt_d * e[f];
                }
            }
            _ => {
                let ge = &mut g.item_table[item * d..(item + 1) * d];
                for f in 0..d {
                    ge[f] += dr[f] * sqrt_d;
                }
            }
        }
    }
}

/// Window of `history` that fits alongside the prompt slot, most recent last.
pub(crate) fn truncate(history: &[u32], max_len: usize, prompt: PromptInput) -> &[u32] {
    let cap = max_len - prompt.slots();
    &history[history.len().saturating_sub(cap)..]
}

/// Final hidden state at the last position, no dropout.
pub(crate) fn encode_last(p: &EncoderParams, history: &[u32], prompt: PromptInput) -> Vec<f64> {
    let items = truncate(history, p.max_len, prompt);
    let c = forward(p, items, prompt, Dropout::off());
    c.out[(c.len - 1) * p.dim..].to_vec()
}

/// Final hidden states at every item position of one forward pass; row `j`
/// encodes `history[..=j]` of the truncated window.
pub(crate) fn encode_all(p: &EncoderParams, history: &[u32], prompt: PromptInput) -> (usize, Vec<f64>) {
    let items = truncate(history, p.max_len, prompt);
    let c = forward(p, items, prompt, Dropout::off());
    let skip = c.offset * p.dim;
    (items.len(), c.out[skip..].to_vec())
}

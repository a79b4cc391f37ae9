//! Pre-LayerNorm transformer encoder.

use crate::error::{Error, Result};
use crate::features::projection::LAYER_NORM_EPS;
use crate::numeric::{dropout, RngStream, Tape, Tensor, Var};

/// Tape handles for one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerVars {
    pub attn_norm_gain: Var,
    pub attn_norm_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ffn_norm_gain: Var,
    pub ffn_norm_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderOptions {
    pub heads: usize,
    pub dropout: f64,
}

/// Attention probabilities, indexed `[layer][head]`, each `L×L`.
#[derive(Clone, Debug, Default)]
pub struct EncoderTrace {
    pub attention: Vec<Vec<Var>>,
}

fn key_mask(mask: Option<&[bool]>, len: usize) -> Result<Option<Tensor>> {
    match mask {
        None => Ok(None),
        Some(m) if m.len() != len => Err(Error::shape(format!("mask of {} for length {len}", m.len()))),
        Some(m) if m.iter().all(|&k| k) => Ok(None),
        Some(m) if !m.iter().any(|&k| k) => Err(Error::invalid("every key position is masked")),
        Some(m) => {
            let row: Vec<f64> = m.iter().map(|&k| if k { 0.0 } else { f64::NEG_INFINITY }).collect();
            Ok(Some(Tensor::from_parts(vec![len, len], row.repeat(len))))
        }
    }
}

/// Multi-head self-attention over an already normalized `L×d` input.
/// Returns the projected output and the per-head attention probabilities.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    layer: &EncoderLayerVars,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let (len, d) = (tape.value(x).rows(), tape.value(x).cols());
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("width {d} not divisible by {heads} heads")));
    }
    let head_dim = d / heads;
    let additive = key_mask(mask, len)?;
    let q = tape.linear(x, layer.wq, layer.bq)?;
    let k = tape.linear(x, layer.wk, layer.bk)?;
    let v = tape.linear(x, layer.wv, layer.bv)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut contexts = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let start = h * head_dim;
        let qh = tape.slice_cols(q, start, head_dim)?;
        let kh = tape.slice_cols(k, start, head_dim)?;
        let vh = tape.slice_cols(v, start, head_dim)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = &additive {
            scores = tape.add_const(scores, m)?;
        }
        let p = tape.softmax(scores);
        contexts.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads == 1 { contexts[0] } else { tape.concat_cols(&contexts)? };
    Ok((tape.linear(joined, layer.wo, layer.bo)?, probs))
}

/// One block: `A = H + MHSA(LN(H))`, then `A + FFN(LN(A))`.
pub fn encoder_layer(
    tape: &mut Tape,
    h: Var,
    layer: &EncoderLayerVars,
    opts: EncoderOptions,
    mask: Option<&[bool]>,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Var, Vec<Var>)> {
    let normed = tape.layer_norm(h, layer.attn_norm_gain, layer.attn_norm_bias, LAYER_NORM_EPS)?;
    let (attn, probs) = multi_head_attention(tape, normed, layer, opts.heads, mask)?;
    let attn = dropout(tape, attn, opts.dropout, rng, training)?;
    let a = tape.add(h, attn)?;

    let normed = tape.layer_norm(a, layer.ffn_norm_gain, layer.ffn_norm_bias, LAYER_NORM_EPS)?;
    let hidden = tape.linear(normed, layer.w1, layer.b1)?;
    let hidden = tape.gelu(hidden);
    let hidden = dropout(tape, hidden, opts.dropout, rng, training)?;
    let ffn = tape.linear(hidden, layer.w2, layer.b2)?;
    let ffn = dropout(tape, ffn, opts.dropout, rng, training)?;
    Ok((tape.add(a, ffn)?, probs))
}

/// Applies the blocks in order. Masked key positions receive zero attention.
pub fn transformer_encode(
    tape: &mut Tape,
    x: Var,
    mask: Option<&[bool]>,
    layers: &[EncoderLayerVars],
    opts: EncoderOptions,
    rng: &mut RngStream,
    training: bool,
) -> Result<(Var, EncoderTrace)> {
    let mut trace = EncoderTrace::default();
    let mut h = x;
    for layer in layers {
        let (next, probs) = encoder_layer(tape, h, layer, opts, mask, rng, training)?;
        trace.attention.push(probs);
        h = next;
    }
    Ok((h, trace))
}

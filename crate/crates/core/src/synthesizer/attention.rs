//! Attention primitives on the tape: ALiBi biases, multi-head attention over
//! a key sequence, and the per-frame causal attention of the sub-decoder.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::numerics::{Bound, ParamStore, Tape, Tensor, Var};

/// Geometric ALiBi slopes `2^(-8h/H)` for `h = 1..=H`.
pub fn alibi_slopes(heads: usize) -> Vec<f64> {
    (1..=heads).map(|h| 2f64.powf(-8.0 * h as f64 / heads as f64)).collect()
}

/// Bias between query position `i` and key position `j` for one slope.
/// The causal variant masks `j > i` with `-inf`.
pub fn alibi_entry(slope: f64, i: usize, j: usize, causal: bool) -> f64 {
    if causal {
        if j > i {
            f64::NEG_INFINITY
        } else {
            -slope * (i - j) as f64
        }
    } else {
        -slope * i.abs_diff(j) as f64
    }
}

/// One `[q_len, k_len]` bias matrix per head; query `r` sits at absolute
/// position `q_offset + r`.
pub fn alibi_bias(q_len: usize, k_len: usize, q_offset: usize, heads: usize, causal: bool) -> Result<Vec<Tensor>> {
    if q_len == 0 || k_len == 0 {
        return Err(Error::Input("ALiBi bias needs at least one position".into()));
    }
    alibi_slopes(heads)
        .into_iter()
        .map(|m| {
            let data = (0..q_len)
                .flat_map(|r| (0..k_len).map(move |j| alibi_entry(m, q_offset + r, j, causal)))
                .collect();
            Tensor::new([q_len, k_len], data)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), dim, dim, false, rng),
            wk: Linear::new(store, &format!("{name}.k"), dim, dim, false, rng),
            wv: Linear::new(store, &format!("{name}.v"), dim, dim, false, rng),
            wo: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng),
            heads,
        }
    }

    pub fn project_kv(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Var)> {
        Ok((self.wk.forward(tape, p, x)?, self.wv.forward(tape, p, x)?))
    }

    /// Attends queries from `x` over projected keys/values. Returns the
    /// output and the per-head scaled logits (bias included).
    pub fn attend(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        k: Var,
        v: Var,
        bias: Option<&[Tensor]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.wq.forward(tape, p, x)?;
        let dim = tape.shape(q)[1];
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut logits = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let mut s = tape.scale(s, scale);
            if let Some(b) = bias {
                let bv = tape.constant(b[h].clone());
                s = tape.add(s, bv)?;
            }
            let w = tape.softmax(s, 1)?;
            outs.push(tape.matmul(w, vh)?);
            logits.push(s);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.wo.forward(tape, p, o)?, logits))
    }
}

/// Self-attention over the `N` positions of each frame independently.
/// `xs[j]` holds position `j` of every frame as a `[frames, dim]` matrix;
/// position `j` attends to positions `0..=j` of its own frame only. No
/// positional information enters.
pub fn frame_causal_attention(tape: &mut Tape, p: &Bound, attn: &MultiHeadAttention, xs: &[Var]) -> Result<Vec<Var>> {
    let n = xs.len();
    let rows = tape.shape(xs[0])[0];
    let dim = tape.shape(xs[0])[1];
    let dh = dim / attn.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut qs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    for &x in xs {
        qs.push(attn.wq.forward(tape, p, x)?);
        ks.push(attn.wk.forward(tape, p, x)?);
        vs.push(attn.wv.forward(tape, p, x)?);
    }
    let ones_col = tape.constant(Tensor::full([dh, 1], 1.0));
    let ones_row = tape.constant(Tensor::full([1, dh], 1.0));
    let mut outs = Vec::with_capacity(n);
    for j in 0..n {
        let mut heads = Vec::with_capacity(attn.heads);
        for h in 0..attn.heads {
            let qh = tape.slice_cols(qs[j], h * dh, dh)?;
            let mut scores = Vec::with_capacity(j + 1);
            let mut values = Vec::with_capacity(j + 1);
            for l in 0..=j {
                let kh = tape.slice_cols(ks[l], h * dh, dh)?;
                let prod = tape.mul(qh, kh)?;
                let s = tape.matmul(prod, ones_col)?;
                scores.push(tape.scale(s, scale));
                values.push(tape.slice_cols(vs[l], h * dh, dh)?);
            }
            let s = if scores.len() == 1 { scores[0] } else { tape.concat_cols(&scores)? };
            let w = tape.softmax(s, 1)?;
            let mut acc: Option<Var> = None;
            for (l, &vh) in values.iter().enumerate() {
                let wl = if j == 0 { w } else { tape.slice_cols(w, l, 1)? };
                let wb = tape.matmul(wl, ones_row)?;
                let term = tape.mul(wb, vh)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => tape.add(a, term)?,
                });
            }
            heads.push(acc.expect("at least one key"));
        }
        let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        debug_assert_eq!(tape.shape(o), [rows, dim]);
        outs.push(attn.wo.forward(tape, p, o)?);
    }
    Ok(outs)
}

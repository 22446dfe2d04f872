//! Scaled dot-product self-attention in global and windowed-local form.
//!
//! The local kernel follows the symmetric sliding-window convention: with a
//! window of `k` tokens, query `i` sees keys `j` with `|i - j| <= k/2`,
//! clipped at the sequence edges. Only visible scores are ever computed, so
//! the work is `O(n·k)` instead of `O(n²)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, real, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum AttentionMode {
    Global,
    Local { window_k: usize },
}

impl AttentionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMode::Global => Ok(()),
            AttentionMode::Local { window_k } if window_k >= 2 && window_k % 2 == 0 => Ok(()),
            AttentionMode::Local { window_k } => {
                Err(Error::Config(format!("local attention window must be even and >= 2, got {window_k}")))
            }
        }
    }

    /// Number of keys visible on each side of a query, `None` for global.
    pub fn half_width(&self) -> Option<usize> {
        match *self {
            AttentionMode::Global => None,
            AttentionMode::Local { window_k } => Some(window_k / 2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub mode: AttentionMode,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionSpec {
    pub fn new(mode: AttentionMode, num_heads: usize, head_dim: usize) -> Result<Self> {
        mode.validate()?;
        if num_heads == 0 || head_dim == 0 {
            return Err(Error::Config("num_heads and head_dim must be positive".into()));
        }
        Ok(Self { mode, num_heads, head_dim })
    }

    pub fn embed_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }
}

/// Half-open key range `[lo, hi)` visible from query `i` in a length-`n` sequence.
#[inline]
pub fn visible_range(i: usize, n: usize, half_width: Option<usize>) -> (usize, usize) {
    match half_width {
        None => (0, n),
        Some(w) => (i.saturating_sub(w), (i + w + 1).min(n)),
    }
}

/// Attention weights of one query row over its visible key range.
#[derive(Debug, Clone)]
pub struct RowWeights<T> {
    pub start: usize,
    /// One weight per key in `start..start + weights.len()`; masked keys hold zero.
    pub weights: Vec<T>,
}

/// Result of a single-head attention pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    pub out: Tensor<T>,
    /// Empty rows for padded queries.
    pub rows: Vec<RowWeights<T>>,
    /// Query–key score evaluations actually performed.
    pub score_ops: u64,
}

fn check_qkv<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, pad_mask: &[bool]) -> Result<(usize, usize)> {
    if q.rank() != 2 || q.dims() != k.dims() || q.dims() != v.dims() {
        return Err(Error::Shape(format!("q/k/v must be equal-shape matrices, got {:?} {:?} {:?}", q.dims(), k.dims(), v.dims())));
    }
    let (n, d) = (q.dims()[0], q.dims()[1]);
    if pad_mask.len() != n {
        return Err(Error::Shape(format!("pad mask has {} entries for {n} positions", pad_mask.len())));
    }
    if pad_mask.iter().all(|&m| m) {
        return Err(Error::Contract("every position is masked".into()));
    }
    Ok((n, d))
}

/// Single-head attention over `q, k, v: [n×d]`. `pad_mask[j] == true` marks
/// padding; padded keys are never attended and padded queries output zeros.
pub fn attend<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, pad_mask: &[bool], mode: AttentionMode) -> Result<HeadOutput<T>> {
    mode.validate()?;
    let (n, d) = check_qkv(q, k, v, pad_mask)?;
    let scale = T::one() / real::<T>(d as f64).sqrt();
    let half = mode.half_width();
    let mut out = Tensor::zeros(&[n, d]);
    let mut rows = Vec::with_capacity(n);
    let mut score_ops = 0u64;
    for i in 0..n {
        if pad_mask[i] {
            rows.push(RowWeights { start: i, weights: Vec::new() });
            continue;
        }
        let (lo, hi) = visible_range(i, n, half);
        let qi = q.row(i);
        let mut weights = vec![T::zero(); hi - lo];
        let mut max = T::neg_infinity();
        for j in lo..hi {
            if pad_mask[j] {
                continue;
            }
            let s = dot(qi, k.row(j)) * scale;
            score_ops += 1;
            weights[j - lo] = s;
            max = max.max(s);
        }
        if max == T::neg_infinity() {
            return Err(Error::Contract(format!("query {i} has no unmasked key in its window")));
        }
        let mut total = T::zero();
        for j in lo..hi {
            let w = &mut weights[j - lo];
            *w = if pad_mask[j] { T::zero() } else { (*w - max).exp() };
            total += *w;
        }
        let o = out.row_mut(i);
        for j in lo..hi {
            let w = &mut weights[j - lo];
            *w /= total;
            if *w != T::zero() {
                for (x, &vj) in o.iter_mut().zip(v.row(j)) {
                    *x += *w * vj;
                }
            }
        }
        rows.push(RowWeights { start: lo, weights });
    }
    debug_assert!(out.is_finite());
    Ok(HeadOutput { out, rows, score_ops })
}

/// Gradients `(dq, dk, dv)` of a single-head pass given `d_out`.
pub fn attend_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    rows: &[RowWeights<T>],
    d_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = q.last_dim();
    let scale = T::one() / real::<T>(d as f64).sqrt();
    let mut dq = Tensor::zeros(q.dims());
    let mut dk = Tensor::zeros(k.dims());
    let mut dv = Tensor::zeros(v.dims());
    let mut dscore = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.weights.is_empty() {
            continue;
        }
        let go = d_out.row(i);
        dscore.clear();
        let mut weighted = T::zero();
        for (off, &p) in row.weights.iter().enumerate() {
            let dp = dot(go, v.row(row.start + off));
            dscore.push(dp);
            weighted += p * dp;
        }
        for (off, &p) in row.weights.iter().enumerate() {
            if p == T::zero() {
                continue;
            }
            let j = row.start + off;
            for (x, &g) in dv.row_mut(j).iter_mut().zip(go) {
                *x += p * g;
            }
            let ds = p * (dscore[off] - weighted) * scale;
            for (x, &kv) in dq.row_mut(i).iter_mut().zip(k.row(j)) {
                *x += ds * kv;
            }
            for (x, &qv) in dk.row_mut(j).iter_mut().zip(q.row(i)) {
                *x += ds * qv;
            }
        }
    }
    (dq, dk, dv)
}

/// Every query attends to every unmasked key.
pub fn global_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, pad_mask: &[bool]) -> Result<Tensor<T>> {
    Ok(attend(q, k, v, pad_mask, AttentionMode::Global)?.out)
}

/// Every query attends to unmasked keys within `window_k / 2` positions.
pub fn local_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, pad_mask: &[bool], window_k: usize) -> Result<Tensor<T>> {
    Ok(attend(q, k, v, pad_mask, AttentionMode::Local { window_k })?.out)
}

/// Number of query–key scores the kernel evaluates on an unpadded length-`n`
/// sequence under `spec`, summed over heads' shared pattern (one head).
pub fn score_op_count(n: usize, spec: &AttentionSpec) -> u64 {
    let half = spec.mode.half_width();
    (0..n)
        .map(|i| {
            let (lo, hi) = visible_range(i, n, half);
            (hi - lo) as u64
        })
        .sum()
}

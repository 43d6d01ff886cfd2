//! Structure-aware graph-text attention: cross-modal rotary positions,
//! shortest-path distance and edge-description biases, and the directional
//! attention mask.

mod attention;
mod bias;

pub use attention::{attend, AttendOutput, AttentionParams, LowRankAdapter, Projection};
pub use bias::{
    bucket, distance_bias, edge_bias, edge_mlp_forward, graph_head_biases, path_weight_matrix, BiasTables, EdgeMlp,
    MAX_DIST_BUCKET,
};

use std::sync::Arc;

use serde::Serialize;

use crate::numerics::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Position value of the first text token. Graph tokens share the learnable
/// position `p_g` instead.
pub const TEXT_POSITION_BASE: f64 = 1.0;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Graph,
    Text,
    Align,
}

/// Modality tags and position values for a `[graph; text; align]` sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAssignment {
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub modality: Vec<Modality>,
    /// Positions of the text and alignment tokens, in sequence order.
    pub fixed: Vec<f64>,
}

pub fn assign_positions(n: usize, l: usize, m: usize) -> PositionAssignment {
    let modality = std::iter::repeat_n(Modality::Graph, n)
        .chain(std::iter::repeat_n(Modality::Text, l))
        .chain(std::iter::repeat_n(Modality::Align, m))
        .collect();
    let fixed = (0..l + m).map(|t| TEXT_POSITION_BASE + t as f64).collect();
    PositionAssignment { n, l, m, modality, fixed }
}

impl PositionAssignment {
    pub fn len(&self) -> usize {
        self.n + self.l + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self, p_g: f64) -> Vec<f64> {
        std::iter::repeat_n(p_g, self.n).chain(self.fixed.iter().copied()).collect()
    }

    /// Relative offset `pos(i) - pos(j)` as seen by the rotary score.
    pub fn offset(&self, i: usize, j: usize, p_g: f64) -> f64 {
        let v = |k: usize| if k < self.n { p_g } else { self.fixed[k - self.n] };
        v(i) - v(j)
    }

    /// Position vector on the tape, with every graph entry tied to `p_g`.
    pub fn on_tape<T: Real>(&self, tape: &mut Tape<T>, p_g: Var) -> Result<Var> {
        let fixed = Tensor::new(vec![self.fixed.len()], self.fixed.iter().map(|&v| T::of(v)).collect())?;
        if self.n == 0 {
            return Ok(tape.constant(fixed));
        }
        let g = tape.expand(p_g, self.n)?;
        let g = tape.reshape(g, &[self.n, 1])?;
        if self.fixed.is_empty() {
            return tape.reshape(g, &[self.n]);
        }
        let f = tape.constant(fixed.reshaped(&[self.l + self.m, 1])?);
        let all = tape.concat_rows(&[g, f])?;
        tape.reshape(all, &[self.len()])
    }
}

/// Rotary frequencies `base^(-2k/d)` for one head of even width `d`.
pub fn rotary_freqs(d_head: usize) -> Result<Vec<f64>> {
    if d_head % 2 != 0 || d_head == 0 {
        return Err(Error::Invalid(format!("rotary width must be even and positive, got {d_head}")));
    }
    Ok((0..d_head / 2).map(|k| ROPE_BASE.powf(-2.0 * k as f64 / d_head as f64)).collect())
}

/// Frequencies for a `[tokens, heads * d_head]` projection: each head's
/// slice is rotated with the same per-head set.
pub fn head_freqs<T: Real>(d_k: usize, heads: usize) -> Result<Arc<[T]>> {
    if heads == 0 || d_k % heads != 0 {
        return Err(Error::Invalid(format!("d_k {d_k} not divisible by {heads} heads")));
    }
    let per = rotary_freqs(d_k / heads)?;
    Ok((0..heads).flat_map(|_| per.iter().map(|&f| T::of(f))).collect())
}

/// Rotates consecutive pairs of `x` by `pos * freqs[k]`.
pub fn rotate(x: &[f64], pos: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for (k, pair) in out.chunks_mut(2).enumerate() {
        let (s, c) = (pos * freqs[k]).sin_cos();
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * c - b * s;
        pair[1] = a * s + b * c;
    }
    out
}

/// `<rotate(q, p + offset), rotate(k, p)>` for any `p`, computed from the
/// offset alone.
pub fn rope_score(q: &[f64], k: &[f64], offset: f64, freqs: &[f64]) -> Result<f64> {
    if q.len() != k.len() || q.len() % 2 != 0 || freqs.len() != q.len() / 2 {
        return Err(Error::Shape { op: "rope_score", lhs: vec![q.len()], rhs: vec![k.len(), freqs.len()] });
    }
    let mut s = 0.0;
    for (i, f) in freqs.iter().enumerate() {
        let (a, b, c, d) = (q[2 * i], q[2 * i + 1], k[2 * i], k[2 * i + 1]);
        let (sin, cos) = (offset * f).sin_cos();
        s += (a * c + b * d) * cos + (a * d - b * c) * sin;
    }
    Ok(s)
}

/// Which query may attend to which key, for a `[graph; text; align]`
/// sequence. Rows are queries, columns keys.
///
/// Graph queries see every graph and text key but no alignment key; text
/// queries see earlier-or-equal text keys only; alignment queries see every
/// key up to their own index.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub n: usize,
    pub l: usize,
    pub m: usize,
    pub allowed: Arc<[bool]>,
}

pub fn build_mask(n: usize, l: usize, m: usize) -> MaskSpec {
    let total = n + l + m;
    let mut allowed = vec![false; total * total];
    for q in 0..total {
        for k in 0..total {
            allowed[q * total + k] = if q < n {
                k < n + l
            } else if q < n + l {
                k >= n && k <= q
            } else {
                k <= q
            };
        }
    }
    MaskSpec { n, l, m, allowed: allowed.into() }
}

impl MaskSpec {
    pub fn len(&self) -> usize {
        self.n + self.l + self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.len() + key]
    }
}

//! Bi-channel attention over past temporary contexts and the bilinear
//! next-item decoder.
//!
//! Both channels weight the temporary contexts `h_j`, `j <= t`. The local
//! channel scores pairs of local contexts with a scaled dot product, the
//! temporary channel scores pairs of temporary contexts additively. The
//! decoder shares the item embedding table:
//! `ŷ = softmax([h, h^(c), h^(h)] · W_B · W_embᵀ)`.
//!
//! Everything is batched over `[batch, steps, dim]` stacks. A query is a
//! `(row, step)` pair; causality comes from an additive mask that removes
//! every key after the query step.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};

/// Added to masked scores; `exp` of it underflows to exactly zero.
const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    /// Decode from `h_t` alone.
    #[default]
    None,
    /// Decode from `[h_t, h^(c)_t, h^(h)_t]`.
    Bi,
}

impl AttentionMode {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMode::None => "none",
            AttentionMode::Bi => "bi",
        }
    }

    /// Width of the decoder input for hidden size `h`.
    pub fn feature_dim(self, h: usize) -> usize {
        match self {
            AttentionMode::None => h,
            AttentionMode::Bi => 3 * h,
        }
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttentionMode::None),
            "bi" => Ok(AttentionMode::Bi),
            _ => Err(Error::Input(format!("unknown attention `{s}` (expected none or bi)"))),
        }
    }
}

/// Attention weights (`context` is the width of `c`) plus the decoder map.
pub fn param_specs(mode: AttentionMode, context: usize, h: usize, d: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if mode == AttentionMode::Bi {
        specs.push(ParamSpec::new("att_c1", &[context, h], Init::Uniform));
        specs.push(ParamSpec::new("att_c2", &[context, h], Init::Uniform));
        specs.push(ParamSpec::new("att_h1", &[h, h], Init::Uniform));
        specs.push(ParamSpec::new("att_h2", &[h, h], Init::Uniform));
        specs.push(ParamSpec::new("att_v", &[h, 1], Init::Uniform));
    }
    specs.push(ParamSpec::new("w_b", &[mode.feature_dim(h), d], Init::Uniform));
    specs
}

/// Stacks per-step `[batch, n]` nodes into `[batch, steps, n]`.
pub fn stack_steps(g: &mut Graph, steps: &[Var]) -> Result<Var> {
    let first = steps.first().ok_or_else(|| Error::Contract("stack of no steps".into()))?;
    let (batch, n) = (g.shape(*first)[0], g.shape(*first)[1]);
    let flat = g.concat(steps)?;
    g.reshape(flat, &[batch, steps.len(), n])
}

/// Rows `positions[b]` of each `[steps, n]` slice: `[batch, queries, n]`.
fn gather_steps(g: &mut Graph, stack: Var, positions: &[Vec<usize>]) -> Result<Var> {
    let s = g.shape(stack).to_vec();
    let (batch, steps, n) = (s[0], s[1], s[2]);
    let nq = query_count(positions, batch)?;
    let mut ids = Vec::with_capacity(batch * nq);
    for (b, row) in positions.iter().enumerate() {
        for &t in row {
            if t >= steps {
                return Err(Error::Contract(format!("query step {t} out of range 0..{steps}")));
            }
            ids.push(b * steps + t);
        }
    }
    let flat = g.reshape(stack, &[batch * steps, n])?;
    let rows = g.gather_rows(flat, &ids)?;
    g.reshape(rows, &[batch, nq, n])
}

fn query_count(positions: &[Vec<usize>], batch: usize) -> Result<usize> {
    if positions.len() != batch {
        return Err(Error::Shape(format!("{} query rows for a batch of {batch}", positions.len())));
    }
    let nq = positions.first().map_or(0, Vec::len);
    if nq == 0 || positions.iter().any(|p| p.len() != nq) {
        return Err(Error::Contract("every row needs the same nonzero number of queries".into()));
    }
    Ok(nq)
}

/// Additive `[batch, queries, steps]` mask keeping keys `j <= t`.
fn causal_mask(g: &mut Graph, positions: &[Vec<usize>], steps: usize) -> Result<Var> {
    let nq = query_count(positions, positions.len())?;
    let mut data = Vec::with_capacity(positions.len() * nq * steps);
    for row in positions {
        for &t in row {
            data.extend((0..steps).map(|j| if j <= t { 0.0 } else { MASKED }));
        }
    }
    Ok(g.constant(Tensor::new(&[positions.len(), nq, steps], data)?))
}

/// `x · W` for a `[batch, steps, n]` stack.
fn project(g: &mut Graph, x: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]])?;
    let p = g.matmul(flat, w)?;
    let out = g.shape(p)[1];
    g.reshape(p, &[s[0], s[1], out])
}

/// Local channel: `softmax_j((c_t W_c1)(c_j W_c2)ᵀ / √H)` over `j <= t`.
/// `c_all` is `[batch, steps, context]`; returns `[batch, queries, steps]`.
pub fn local_attention(g: &mut Graph, w: &Bound, c_all: Var, positions: &[Vec<usize>]) -> Result<Var> {
    let steps = g.shape(c_all)[1];
    let queries = gather_steps(g, c_all, positions)?;
    let q = project(g, queries, w.get("att_c1")?)?;
    let k = project(g, c_all, w.get("att_c2")?)?;
    let h = g.shape(q)[2];
    let kt = g.transpose(k)?;
    let scores = g.bmm(q, kt)?;
    let scores = g.scale(scores, 1.0 / (h as f64).sqrt())?;
    let mask = causal_mask(g, positions, steps)?;
    let scores = g.add(scores, mask)?;
    g.softmax(scores)
}

/// Temporary channel: `softmax_j(v_hᵀ σ(h_t W_h1 + h_j W_h2))` over `j <= t`.
/// `h_all` is `[batch, steps, H]`; returns `[batch, queries, steps]`.
pub fn temporary_attention(g: &mut Graph, w: &Bound, h_all: Var, positions: &[Vec<usize>]) -> Result<Var> {
    let s = g.shape(h_all).to_vec();
    let (batch, steps) = (s[0], s[1]);
    let queries = gather_steps(g, h_all, positions)?;
    let nq = g.shape(queries)[1];
    let q = project(g, queries, w.get("att_h1")?)?;
    let k = project(g, h_all, w.get("att_h2")?)?;
    let a = g.shape(q)[2];
    let q = g.reshape(q, &[batch, nq, 1, a])?;
    let k = g.reshape(k, &[batch, 1, steps, a])?;
    let pre = g.add(q, k)?;
    let act = g.sigmoid(pre)?;
    let act = g.reshape(act, &[batch * nq * steps, a])?;
    let scores = g.matmul(act, w.get("att_v")?)?;
    let scores = g.reshape(scores, &[batch, nq, steps])?;
    let mask = causal_mask(g, positions, steps)?;
    let scores = g.add(scores, mask)?;
    g.softmax(scores)
}

/// Decoder inputs for every query, flattened to `[batch · queries, F]`,
/// plus the two attention maps when the mode is [`AttentionMode::Bi`].
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub features: Var,
    pub local: Option<Var>,
    pub temporary: Option<Var>,
}

/// Builds decoder inputs at `positions` from the stacked temporary contexts
/// and, for bi-channel attention, the stacked local contexts.
pub fn attend(
    g: &mut Graph,
    w: &Bound,
    mode: AttentionMode,
    h_all: Var,
    c_all: Option<Var>,
    positions: &[Vec<usize>],
) -> Result<Attended> {
    let s = g.shape(h_all).to_vec();
    let (batch, h) = (s[0], s[2]);
    let nq = query_count(positions, batch)?;
    let h_q = gather_steps(g, h_all, positions)?;
    let (features, local, temporary) = match mode {
        AttentionMode::None => (h_q, None, None),
        AttentionMode::Bi => {
            let c_all = c_all.ok_or_else(|| Error::Contract("bi-channel attention needs local contexts".into()))?;
            let alpha_c = local_attention(g, w, c_all, positions)?;
            let alpha_h = temporary_attention(g, w, h_all, positions)?;
            let h_c = g.bmm(alpha_c, h_all)?;
            let h_h = g.bmm(alpha_h, h_all)?;
            (g.concat(&[h_q, h_c, h_h])?, Some(alpha_c), Some(alpha_h))
        }
    };
    let width = g.shape(features)[2];
    debug_assert_eq!(width, mode.feature_dim(h));
    let features = g.reshape(features, &[batch * nq, width])?;
    Ok(Attended { features, local, temporary })
}

/// Bilinear decoder without bias. Returns `(logits, ŷ)`, both `[n, |I|]`.
pub fn decode(g: &mut Graph, w: &Bound, features: Var) -> Result<(Var, Var)> {
    let proj = g.matmul(features, w.get("w_b")?)?;
    let table = g.transpose(w.get("embedding")?)?;
    let logits = g.matmul(proj, table)?;
    let probs = g.softmax(logits)?;
    Ok((logits, probs))
}

/// Attention rows of one sequence; row `t` holds weights over `j = 0..=t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub alpha_c: Vec<Vec<f64>>,
    pub alpha_h: Vec<Vec<f64>>,
}

impl AttentionTrace {
    /// Reads row `b` of `[batch, queries, steps]` attention maps whose
    /// queries were `positions`.
    pub fn from_maps(local: &Tensor, temporary: &Tensor, b: usize, positions: &[usize]) -> Self {
        let read = |m: &Tensor| {
            let (nq, steps) = (m.shape()[1], m.shape()[2]);
            positions
                .iter()
                .enumerate()
                .map(|(q, &t)| {
                    let start = (b * nq + q) * steps;
                    m.data()[start..start + t + 1].to_vec()
                })
                .collect()
        };
        Self { alpha_c: read(local), alpha_h: read(temporary) }
    }
}

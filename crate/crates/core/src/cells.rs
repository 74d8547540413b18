//! Recurrent cells: LSTM with peepholes, GRU and the three hierarchical
//! context cells.
//!
//! All step functions are batched: inputs are `[batch, dim]` graph nodes and
//! weights are row-major `[in, out]`, so a projection is `x · W`. The
//! hierarchical cells keep two recurrent vectors, a slow local context `c`
//! of size `D` built from the global memory, and a temporary context `h` of
//! size `H` that only meets `c` through gates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::global_context::GlobalContext;
use crate::params::{Bound, Init, ParamSpec, Params};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
    Hcrnn1,
    Hcrnn2,
    Hcrnn3,
}

impl CellKind {
    pub const ALL: [CellKind; 5] =
        [CellKind::Lstm, CellKind::Gru, CellKind::Hcrnn1, CellKind::Hcrnn2, CellKind::Hcrnn3];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Hcrnn1 => "hcrnn1",
            CellKind::Hcrnn2 => "hcrnn2",
            CellKind::Hcrnn3 => "hcrnn3",
        }
    }

    /// Uses the global memory and the variational proportion `θ`.
    pub fn is_hierarchical(self) -> bool {
        matches!(self, CellKind::Hcrnn1 | CellKind::Hcrnn2 | CellKind::Hcrnn3)
    }

    /// Carries `W_d >= 0`.
    pub fn has_drift_weight(self) -> bool {
        matches!(self, CellKind::Hcrnn2 | CellKind::Hcrnn3)
    }

    /// Width of the second recurrent vector `c`, if the cell has one.
    pub fn context_dim(self, embed_dim: usize, hidden_dim: usize) -> Option<usize> {
        match self {
            CellKind::Gru => None,
            CellKind::Lstm => Some(hidden_dim),
            _ => Some(embed_dim),
        }
    }

    pub fn param_specs(self, d: usize, h: usize, k: usize) -> Vec<ParamSpec> {
        use Init::*;
        let p = ParamSpec::new;
        let mut specs = Vec::new();
        match self {
            CellKind::Lstm => {
                for (wx, wh, wc, b) in [
                    ("w_xi", "w_hi", "w_ci", "b_i"),
                    ("w_xf", "w_hf", "w_cf", "b_f"),
                    ("w_xo", "w_ho", "w_co", "b_o"),
                ] {
                    specs.push(p(wx, &[d, h], Uniform));
                    specs.push(p(wh, &[h, h], Uniform));
                    specs.push(p(wc, &[h], Uniform));
                    specs.push(p(b, &[h], Zeros));
                }
                specs.push(p("w_xc", &[d, h], Uniform));
                specs.push(p("w_hc", &[h, h], Uniform));
                specs.push(p("b_c", &[h], Zeros));
            }
            CellKind::Gru => {
                for (wx, wh, b) in [("w_xz", "w_hz", "b_z"), ("w_xr", "w_hr", "b_r"), ("w_xh", "w_hh", "b_h")] {
                    specs.push(p(wx, &[d, h], Uniform));
                    specs.push(p(wh, &[h, h], Uniform));
                    specs.push(p(b, &[h], Zeros));
                }
            }
            CellKind::Hcrnn1 | CellKind::Hcrnn2 | CellKind::Hcrnn3 => {
                specs.push(p("memory", &[k, d], Uniform));
                specs.push(p("mem_w_h", &[h, h], Uniform));
                specs.push(p("mem_w_theta", &[d, h], Uniform));
                specs.push(p("mem_v", &[h, 1], Uniform));
                specs.push(p("w_xl", &[d, d], Uniform));
                specs.push(p("w_hl", &[h, d], Uniform));
                specs.push(p("w_cl", &[d, d], Uniform));
                specs.push(p("b_l", &[d], Zeros));
                for (wx, wh, b) in [("w_xz", "w_hz", "b_z"), ("w_xr", "w_hr", "b_r"), ("w_xh", "w_hh", "b_h")] {
                    specs.push(p(wx, &[d, h], Uniform));
                    specs.push(p(wh, &[h, h], Uniform));
                    specs.push(p(b, &[h], Zeros));
                }
                specs.push(p("w_cz", &[d, h], Uniform));
                match self {
                    CellKind::Hcrnn1 => specs.push(p("w_cr", &[d, h], Uniform)),
                    CellKind::Hcrnn2 => specs.push(p("w_d", &[d, h], AbsUniform)),
                    _ => {
                        specs.push(p("w_d", &[d, h], AbsUniform));
                        specs.push(p("b_d", &[h], Zeros));
                    }
                }
            }
        }
        specs
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CellKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Input(format!("unknown cell `{s}` (expected lstm, gru, hcrnn1, hcrnn2 or hcrnn3)")))
    }
}

/// Recurrent state of a batch on the graph.
#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    /// Temporary context `h_t`, `[batch, H]`.
    pub h: Var,
    /// Local context (or LSTM cell state), absent for the GRU.
    pub c: Option<Var>,
}

impl StateVars {
    pub fn zeros(g: &mut Graph, batch: usize, hidden: usize, context: Option<usize>) -> Self {
        let h = g.constant(Tensor::zeros(&[batch, hidden]));
        let c = context.map(|d| g.constant(Tensor::zeros(&[batch, d])));
        Self { h, c }
    }
}

/// Gate activations of one step, as graph nodes.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepGates {
    pub input: Option<Var>,
    pub forget: Option<Var>,
    pub output: Option<Var>,
    pub update: Option<Var>,
    pub reset: Option<Var>,
    pub local: Option<Var>,
    pub drift: Option<Var>,
    pub memory_attention: Option<Var>,
}

/// Per-step gate record of a single sequence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub input: Option<Vec<f64>>,
    pub forget: Option<Vec<f64>>,
    pub output: Option<Vec<f64>>,
    /// `z_t`
    pub update: Option<Vec<f64>>,
    /// `r_t`
    pub reset: Option<Vec<f64>>,
    /// `G_t^(c)`
    pub local: Option<Vec<f64>>,
    /// `G_t^(d)`
    pub drift: Option<Vec<f64>>,
    /// Attention over the `K` global memory rows.
    pub memory_attention: Option<Vec<f64>>,
    /// Mean absolute change of `h` over this step.
    pub delta_h: f64,
    /// Mean absolute change of `c` over this step.
    pub delta_c: Option<f64>,
}

impl StepTrace {
    /// Effective retention applied to `h_{t-1}` inside the candidate:
    /// `r ⊙ G^(d)` when a drift gate exists, else `r`.
    pub fn retention(&self) -> Option<Vec<f64>> {
        let r = self.reset.as_ref()?;
        Some(match &self.drift {
            Some(d) => r.iter().zip(d).map(|(a, b)| a * b).collect(),
            None => r.clone(),
        })
    }

    /// Every recorded sigmoid gate.
    pub fn gates(&self) -> impl Iterator<Item = &Vec<f64>> {
        [&self.input, &self.forget, &self.output, &self.update, &self.reset, &self.local, &self.drift]
            .into_iter()
            .flatten()
    }
}

fn row_of(g: &Graph, v: Option<Var>, row: usize) -> Option<Vec<f64>> {
    v.map(|v| g.value(v).row(row).to_vec())
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

impl StepGates {
    /// Values for one batch row, with the state change from `prev` to `cur`.
    pub fn trace(&self, g: &Graph, row: usize, prev: &StateVars, cur: &StateVars) -> StepTrace {
        let delta_h = mean_abs_diff(g.value(prev.h).row(row), g.value(cur.h).row(row));
        let delta_c = match (prev.c, cur.c) {
            (Some(p), Some(c)) => Some(mean_abs_diff(g.value(p).row(row), g.value(c).row(row))),
            _ => None,
        };
        StepTrace {
            input: row_of(g, self.input, row),
            forget: row_of(g, self.forget, row),
            output: row_of(g, self.output, row),
            update: row_of(g, self.update, row),
            reset: row_of(g, self.reset, row),
            local: row_of(g, self.local, row),
            drift: row_of(g, self.drift, row),
            memory_attention: row_of(g, self.memory_attention, row),
            delta_h,
            delta_c,
        }
    }
}

/// `Σ x_i · W_i (+ b)`
pub(crate) fn linear(g: &mut Graph, terms: &[(Var, Var)], bias: Option<Var>) -> Result<Var> {
    let (&(x0, w0), rest) = terms.split_first().ok_or_else(|| Error::Contract("empty linear map".into()))?;
    let mut acc = g.matmul(x0, w0)?;
    for &(x, w) in rest {
        let p = g.matmul(x, w)?;
        acc = g.add(acc, p)?;
    }
    match bias {
        Some(b) => g.add(acc, b),
        None => Ok(acc),
    }
}

/// `(1 - gate) ⊙ prev + gate ⊙ cand`
fn mix(g: &mut Graph, gate: Var, prev: Var, cand: Var) -> Result<Var> {
    let keep = g.one_minus(gate)?;
    let a = g.mul(keep, prev)?;
    let b = g.mul(gate, cand)?;
    g.add(a, b)
}

fn check_nonnegative(g: &Graph, w_d: Var) -> Result<()> {
    if let Some(v) = g.value(w_d).data().iter().find(|v| **v < 0.0) {
        return Err(Error::Invariant(format!("W_d has negative entry {v}")));
    }
    Ok(())
}

/// One LSTM step with peephole connections on the input, forget and
/// output gates.
pub fn lstm_peephole_step(g: &mut Graph, w: &Bound, x: Var, state: &StateVars) -> Result<(StateVars, StepGates)> {
    let h = state.h;
    let c = state.c.ok_or_else(|| Error::Contract("LSTM state without cell vector".into()))?;
    let gate = |g: &mut Graph, wx: &str, wh: &str, wc: &str, b: &str, cell: Var| -> Result<Var> {
        let lin = linear(g, &[(x, w.get(wx)?), (h, w.get(wh)?)], Some(w.get(b)?))?;
        let peep = g.mul(cell, w.get(wc)?)?;
        let pre = g.add(lin, peep)?;
        g.sigmoid(pre)
    };
    let i = gate(g, "w_xi", "w_hi", "w_ci", "b_i", c)?;
    let f = gate(g, "w_xf", "w_hf", "w_cf", "b_f", c)?;
    let cand = linear(g, &[(x, w.get("w_xc")?), (h, w.get("w_hc")?)], Some(w.get("b_c")?))?;
    let cand = g.tanh(cand)?;
    let kept = g.mul(f, c)?;
    let written = g.mul(i, cand)?;
    let c_new = g.add(kept, written)?;
    let o = gate(g, "w_xo", "w_ho", "w_co", "b_o", c_new)?;
    let squashed = g.tanh(c_new)?;
    let h_new = g.mul(o, squashed)?;
    let gates = StepGates { input: Some(i), forget: Some(f), output: Some(o), ..Default::default() };
    Ok((StateVars { h: h_new, c: Some(c_new) }, gates))
}

/// One GRU step.
pub fn gru_step(g: &mut Graph, w: &Bound, x: Var, state: &StateVars) -> Result<(StateVars, StepGates)> {
    let h = state.h;
    let z = linear(g, &[(x, w.get("w_xz")?), (h, w.get("w_hz")?)], Some(w.get("b_z")?))?;
    let z = g.sigmoid(z)?;
    let r = linear(g, &[(x, w.get("w_xr")?), (h, w.get("w_hr")?)], Some(w.get("b_r")?))?;
    let r = g.sigmoid(r)?;
    let rh = g.mul(r, h)?;
    let h_new = temporary_update(g, w, x, h, rh, z)?;
    let gates = StepGates { update: Some(z), reset: Some(r), ..Default::default() };
    Ok((StateVars { h: h_new, c: None }, gates))
}

/// `h_t = (1 - z) ⊙ h_{t-1} + z ⊙ tanh(retained · W_hh + x · W_xh + b_h)`
fn temporary_update(g: &mut Graph, w: &Bound, x: Var, h_prev: Var, retained: Var, z: Var) -> Result<Var> {
    let cand = linear(g, &[(retained, w.get("w_hh")?), (x, w.get("w_xh")?)], Some(w.get("b_h")?))?;
    let cand = g.tanh(cand)?;
    mix(g, z, h_prev, cand)
}

/// Sequence-constant inputs of the global memory attention.
#[derive(Clone, Copy, Debug)]
pub struct MemoryInputs {
    /// `M_global`, `[K, D]`.
    pub memory: Var,
    /// `(θ^(k) M^(k)) W_θα` for every row and component, `[batch, K, H]`.
    pub weighted_memory: Var,
}

impl MemoryInputs {
    /// `theta` is `[batch, K]`.
    pub fn new(g: &mut Graph, w: &Bound, theta: Var) -> Result<Self> {
        let memory = w.get("memory")?;
        let k = g.shape(memory)[0];
        let (batch, tk) = (g.shape(theta)[0], g.shape(theta)[1]);
        if tk != k {
            return Err(Error::Shape(format!("theta has {tk} components, memory has {k} rows")));
        }
        // θ_k scales a whole row, so (θ_k M_k) W = θ_k (M_k W).
        let projected = g.matmul(memory, w.get("mem_w_theta")?)?;
        let a = g.shape(projected)[1];
        let projected = g.reshape(projected, &[1, k, a])?;
        let theta3 = g.reshape(theta, &[batch, k, 1])?;
        let weighted_memory = g.mul(theta3, projected)?;
        Ok(Self { memory, weighted_memory })
    }
}

/// Attention over the global memory rows and the resulting local context
/// candidate `c̃_t = Σ_k α_k M^(k)`.
pub fn hcrnn_memory_attention(g: &mut Graph, w: &Bound, h_prev: Var, mem: &MemoryInputs) -> Result<(Var, Var)> {
    let s = g.shape(mem.weighted_memory).to_vec();
    let (batch, k, a) = (s[0], s[1], s[2]);
    let hp = g.matmul(h_prev, w.get("mem_w_h")?)?;
    let hp = g.reshape(hp, &[batch, 1, a])?;
    let pre = g.add(mem.weighted_memory, hp)?;
    let act = g.sigmoid(pre)?;
    let act = g.reshape(act, &[batch * k, a])?;
    let scores = g.matmul(act, w.get("mem_v")?)?;
    let scores = g.reshape(scores, &[batch, k])?;
    let alpha = g.softmax(scores)?;
    let c_tilde = g.matmul(alpha, mem.memory)?;
    Ok((alpha, c_tilde))
}

/// Local gate and local context:
/// `c_t = (1 - G^(c)) ⊙ c_{t-1} + G^(c) ⊙ c̃_t`.
pub fn hcrnn_local_update(
    g: &mut Graph,
    w: &Bound,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    c_tilde: Var,
) -> Result<(Var, Var)> {
    let pre = linear(g, &[(x, w.get("w_xl")?), (h_prev, w.get("w_hl")?), (c_prev, w.get("w_cl")?)], Some(w.get("b_l")?))?;
    let gate = g.sigmoid(pre)?;
    let c = mix(g, gate, c_prev, c_tilde)?;
    Ok((gate, c))
}

fn hcrnn_update_gate(g: &mut Graph, w: &Bound, x: Var, h_prev: Var, c: Var) -> Result<Var> {
    let pre = linear(g, &[(x, w.get("w_xz")?), (h_prev, w.get("w_hz")?), (c, w.get("w_cz")?)], Some(w.get("b_z")?))?;
    g.sigmoid(pre)
}

/// Update and reset gates reading the current local context, then the
/// GRU-style temporary update. Returns `(z, r, h_t)`.
pub fn hcrnn1_temporal_update(g: &mut Graph, w: &Bound, x: Var, h_prev: Var, c: Var) -> Result<(Var, Var, Var)> {
    let z = hcrnn_update_gate(g, w, x, h_prev, c)?;
    let pre = linear(g, &[(x, w.get("w_xr")?), (h_prev, w.get("w_hr")?), (c, w.get("w_cr")?)], Some(w.get("b_r")?))?;
    let r = g.sigmoid(pre)?;
    let rh = g.mul(r, h_prev)?;
    let h = temporary_update(g, w, x, h_prev, rh, z)?;
    Ok((z, r, h))
}

/// Reset gate driven by the agreement `x_t ⊙ c_t` through `W_d >= 0`.
pub fn hcrnn2_reset(g: &mut Graph, w: &Bound, x: Var, h_prev: Var, c: Var) -> Result<Var> {
    let w_d = w.get("w_d")?;
    check_nonnegative(g, w_d)?;
    let agree = g.mul(x, c)?;
    let pre = linear(g, &[(x, w.get("w_xr")?), (h_prev, w.get("w_hr")?), (agree, w_d)], Some(w.get("b_r")?))?;
    g.sigmoid(pre)
}

/// Outputs of the drift-gated temporary update.
#[derive(Clone, Copy, Debug)]
pub struct DriftStep {
    pub drift: Var,
    pub reset: Var,
    pub update: Var,
    pub h: Var,
}

/// Drift gate `G^(d) = σ((x_t ⊙ c_t) W_d + b_d)` multiplying `h_{t-1}` next
/// to a plain reset gate inside the candidate.
pub fn hcrnn3_drift_step(g: &mut Graph, w: &Bound, x: Var, h_prev: Var, c: Var) -> Result<DriftStep> {
    let w_d = w.get("w_d")?;
    check_nonnegative(g, w_d)?;
    let agree = g.mul(x, c)?;
    let pre = linear(g, &[(agree, w_d)], Some(w.get("b_d")?))?;
    let drift = g.sigmoid(pre)?;
    let pre = linear(g, &[(x, w.get("w_xr")?), (h_prev, w.get("w_hr")?)], Some(w.get("b_r")?))?;
    let reset = g.sigmoid(pre)?;
    let update = hcrnn_update_gate(g, w, x, h_prev, c)?;
    let gated = g.mul(drift, h_prev)?;
    let retained = g.mul(reset, gated)?;
    let h = temporary_update(g, w, x, h_prev, retained, update)?;
    Ok(DriftStep { drift, reset, update, h })
}

/// One step of any cell. Hierarchical cells run memory attention, then the
/// local update, then gates and the temporary update.
pub fn step(
    kind: CellKind,
    g: &mut Graph,
    w: &Bound,
    x: Var,
    state: &StateVars,
    memory: Option<&MemoryInputs>,
) -> Result<(StateVars, StepGates)> {
    match kind {
        CellKind::Lstm => lstm_peephole_step(g, w, x, state),
        CellKind::Gru => gru_step(g, w, x, state),
        _ => {
            let mem = memory.ok_or_else(|| Error::Contract(format!("{kind} needs the global context")))?;
            let c_prev = state.c.ok_or_else(|| Error::Contract(format!("{kind} state without local context")))?;
            let h_prev = state.h;
            let (alpha, c_tilde) = hcrnn_memory_attention(g, w, h_prev, mem)?;
            let (local, c) = hcrnn_local_update(g, w, x, h_prev, c_prev, c_tilde)?;
            let mut gates = StepGates { local: Some(local), memory_attention: Some(alpha), ..Default::default() };
            let h = match kind {
                CellKind::Hcrnn1 => {
                    let (z, r, h) = hcrnn1_temporal_update(g, w, x, h_prev, c)?;
                    gates.update = Some(z);
                    gates.reset = Some(r);
                    h
                }
                CellKind::Hcrnn2 => {
                    let z = hcrnn_update_gate(g, w, x, h_prev, c)?;
                    let r = hcrnn2_reset(g, w, x, h_prev, c)?;
                    let rh = g.mul(r, h_prev)?;
                    gates.update = Some(z);
                    gates.reset = Some(r);
                    temporary_update(g, w, x, h_prev, rh, z)?
                }
                _ => {
                    let d = hcrnn3_drift_step(g, w, x, h_prev, c)?;
                    gates.update = Some(d.update);
                    gates.reset = Some(d.reset);
                    gates.drift = Some(d.drift);
                    d.h
                }
            };
            Ok((StateVars { h, c: Some(c) }, gates))
        }
    }
}

/// States after each step, plus the zero initial state.
#[derive(Clone, Debug)]
pub struct Unrolled {
    pub initial: StateVars,
    pub states: Vec<StateVars>,
    pub gates: Vec<StepGates>,
}

impl Unrolled {
    /// State before step `t`.
    pub fn prev(&self, t: usize) -> &StateVars {
        if t == 0 {
            &self.initial
        } else {
            &self.states[t - 1]
        }
    }

    pub fn traces(&self, g: &Graph, row: usize, len: usize) -> Vec<StepTrace> {
        (0..len).map(|t| self.gates[t].trace(g, row, self.prev(t), &self.states[t])).collect()
    }
}

/// Runs a cell over `[batch, D]` inputs from a zero state.
pub fn unroll(
    kind: CellKind,
    g: &mut Graph,
    w: &Bound,
    xs: &[Var],
    hidden: usize,
    memory: Option<&MemoryInputs>,
) -> Result<Unrolled> {
    let first = xs.first().ok_or_else(|| Error::Input("empty sequence".into()))?;
    let (batch, d) = (g.shape(*first)[0], g.shape(*first)[1]);
    let initial = StateVars::zeros(g, batch, hidden, kind.context_dim(d, hidden));
    let mut state = initial;
    let mut states = Vec::with_capacity(xs.len());
    let mut gates = Vec::with_capacity(xs.len());
    for &x in xs {
        let (next, gate) = step(kind, g, w, x, &state, memory)?;
        states.push(next);
        gates.push(gate);
        state = next;
    }
    Ok(Unrolled { initial, states, gates })
}

/// Values of one recurrent state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellState {
    pub h: Vec<f64>,
    pub c: Option<Vec<f64>>,
}

/// Unrolls one item sequence through the cell stored in `params`, reading
/// inputs from the `embedding` table. Hierarchical cells need `global`.
pub fn unroll_sequence(
    items: &[usize],
    kind: CellKind,
    global: Option<&GlobalContext>,
    params: &Params,
) -> Result<(Vec<CellState>, Vec<StepTrace>)> {
    if items.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    let emb = params.get("embedding")?;
    let vocab = emb.shape()[0];
    if let Some(&bad) = items.iter().find(|&&i| i >= vocab) {
        return Err(Error::Input(format!("item id {bad} outside vocabulary of {vocab}")));
    }
    let hidden = params.get("w_hh").or_else(|_| params.get("w_hi"))?.shape()[0];
    let mut g = Graph::new();
    let mut w = params.bind(&mut g, false);
    let xs = items
        .iter()
        .map(|&i| g.gather_rows(w.get("embedding")?, &[i]))
        .collect::<Result<Vec<_>>>()?;
    let memory = if kind.is_hierarchical() {
        let global = global.ok_or_else(|| Error::Contract(format!("{kind} needs a global context")))?;
        let k = global.theta.len();
        let theta = g.constant(Tensor::new(&[1, k], global.theta.clone())?);
        let mem = g.constant(global.memory.clone());
        w = w.with("memory", mem);
        Some(MemoryInputs::new(&mut g, &w, theta)?)
    } else {
        None
    };
    let unrolled = unroll(kind, &mut g, &w, &xs, hidden, memory.as_ref())?;
    let states = unrolled
        .states
        .iter()
        .map(|s| CellState { h: g.value(s.h).row(0).to_vec(), c: s.c.map(|c| g.value(c).row(0).to_vec()) })
        .collect();
    Ok((states, unrolled.traces(&g, 0, items.len())))
}

/// Clamps every negative entry to zero.
pub fn project_nonnegative(w: &mut Tensor) {
    for v in w.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests;

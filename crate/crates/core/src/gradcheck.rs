//! Finite-difference checks of every differentiable component at small
//! sizes, shared by the test suite and the `gradcheck` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{self, AttentionMode};
use crate::autodiff::{check_gradients, Graph, Tensor, Var};
use crate::cells::{self, CellKind, MemoryInputs};
use crate::data::Instance;
use crate::error::Result;
use crate::global_context::{kl_to_standard_normal, mean_pool, posterior_heads, sample_theta};
use crate::model::{ForwardOptions, Model, ModelSpec, Readout, ThetaMode};
use crate::params::{Bound, Params};
use crate::training::{event_targets, total_loss};

pub const DIM: usize = 6;
pub const CONTEXTS: usize = 4;
pub const ITEMS: usize = 9;
pub const STEPS: usize = 4;
pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub component: String,
    pub scalars: usize,
    pub max_rel_error: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn spec(cell: CellKind, attention: AttentionMode) -> ModelSpec {
    ModelSpec { cell, attention, num_items: ITEMS, embed_dim: DIM, hidden_dim: DIM, num_contexts: CONTEXTS }
}

/// Model parameters drawn wider than the initializer so that gates leave
/// their linear range.
fn wide_params(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::new();
    for s in spec.param_specs() {
        let mut t = Tensor::uniform(&s.shape, 0.9, rng);
        if s.name == "w_d" {
            t = t.map(|v| v.abs() + 0.05);
        }
        p.insert(s.name, t);
    }
    p
}

fn keep(p: &Params, names: impl Fn(&str) -> bool) -> Params {
    let mut out = Params::new();
    for (n, t) in p.iter().filter(|(n, _)| names(n)) {
        out.insert(n, t.clone());
    }
    out
}

/// Worst relative error over every scalar of `params` for the scalar
/// function `f` of the bound parameters.
fn check(component: &str, params: &Params, f: impl Fn(&mut Graph, &Bound) -> Result<Var>) -> Result<GradcheckRow> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let tensors: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let errs = check_gradients(
        |g, vars| {
            let mut w = Params::new().bind(g, false);
            for (n, &v) in names.iter().zip(vars) {
                w = w.with(n, v);
            }
            f(g, &w)
        },
        &tensors,
        EPS,
    )?;
    Ok(GradcheckRow {
        component: component.to_string(),
        scalars: params.num_scalars(),
        max_rel_error: errs.into_iter().fold(0.0, f64::max),
    })
}

/// `Σ x ⊙ weights` with fixed pseudo-random weights, so every output
/// coordinate reaches the root with a distinct factor.
fn project_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(x), 1.0, &mut rng));
    let y = g.mul(x, w)?;
    g.sum(y)
}

const SEQS: [&[usize]; 2] = [&[1, 4, 2, 8], &[7, 3, 3]];

fn check_cell(kind: CellKind, rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let s = spec(kind, AttentionMode::None);
    let all = wide_params(&s, rng);
    let params = keep(&all, |n| !n.starts_with("inf_") && !n.starts_with("q_") && n != "w_b");
    let theta = Tensor::uniform(&[2, CONTEXTS], 1.5, rng);
    check(&format!("cell {kind}"), &params, |g, w| {
        let emb = w.get("embedding")?;
        let xs = (0..STEPS)
            .map(|t| g.gather_rows(emb, &[SEQS[0][t], SEQS[0][(t + 1) % STEPS]]))
            .collect::<Result<Vec<_>>>()?;
        let memory = if kind.is_hierarchical() {
            let tt = g.constant(theta.clone());
            let th = g.softmax(tt)?;
            Some(MemoryInputs::new(g, w, th)?)
        } else {
            None
        };
        let un = cells::unroll(kind, g, w, &xs, DIM, memory.as_ref())?;
        let mut parts = Vec::new();
        for (t, st) in un.states.iter().enumerate() {
            parts.push(project_sum(g, st.h, 10 + t as u64)?);
            if let Some(c) = st.c {
                parts.push(project_sum(g, c, 20 + t as u64)?);
            }
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok(total)
    })
}

fn check_attention(rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let mut params = keep(&wide_params(&spec(CellKind::Hcrnn3, AttentionMode::Bi), rng), |n| n.starts_with("att_"));
    let context = params.get("att_c1")?.shape()[0];
    params.insert("h_all", Tensor::uniform(&[2, STEPS, DIM], 1.0, rng));
    params.insert("c_all", Tensor::uniform(&[2, STEPS, context], 1.0, rng));
    let positions = vec![(0..STEPS).collect::<Vec<_>>(); 2];
    check("bi-channel attention", &params, |g, w| {
        let a = attention::attend(g, w, AttentionMode::Bi, w.get("h_all")?, Some(w.get("c_all")?), &positions)?;
        project_sum(g, a.features, 30)
    })
}

fn check_decoder(rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let mut params = keep(&wide_params(&spec(CellKind::Hcrnn3, AttentionMode::Bi), rng), |n| n == "w_b" || n == "embedding");
    params.insert("features", Tensor::uniform(&[3, AttentionMode::Bi.feature_dim(DIM)], 1.0, rng));
    check("decoder", &params, |g, w| {
        let (_, probs) = attention::decode(g, w, w.get("features")?)?;
        let picked = g.pick(probs, &[2, 0, 8])?;
        let logp = g.log(picked)?;
        g.sum(logp)
    })
}

fn check_inference(rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let all = wide_params(&spec(CellKind::Hcrnn3, AttentionMode::None), rng);
    let params = keep(&all, |n| n.starts_with("inf_") || n.starts_with("q_") || n == "embedding");
    let noise = Tensor::uniform(&[2, CONTEXTS], 1.5, rng);
    check("inference net", &params, |g, w| {
        let pooled = mean_pool(g, w.get("embedding")?, &SEQS)?;
        let (mu, log_sigma) = posterior_heads(g, w, pooled)?;
        let (_, theta) = sample_theta(g, mu, log_sigma, noise.clone())?;
        let kl = kl_to_standard_normal(g, mu, log_sigma)?;
        let a = project_sum(g, theta, 40)?;
        let b = g.sum(kl)?;
        g.add(a, b)
    })
}

fn check_total_loss(rng: &mut ChaCha8Rng) -> Result<GradcheckRow> {
    let s = spec(CellKind::Hcrnn3, AttentionMode::Bi);
    let model = Model { spec: s, params: wide_params(&s, rng) };
    let instances: Vec<Instance> = SEQS
        .iter()
        .map(|q| Instance { input: q[..q.len() - 1].to_vec(), targets: q[1..].to_vec() })
        .chain([Instance { input: vec![5, 6, 0, 2], targets: vec![6, 0, 2, 1] }])
        .collect();
    let refs: Vec<&Instance> = instances.iter().collect();
    let targets = event_targets(&refs, Readout::All);
    let seqs: Vec<&[usize]> = instances.iter().map(|i| i.input.as_slice()).collect();
    check("total loss", &model.params, |g, w| {
        // A fresh stream per call keeps the sampled θ̃ fixed across probes.
        let mut noise = ChaCha8Rng::seed_from_u64(50);
        let opts = ForwardOptions {
            readout: Readout::All,
            theta: ThetaMode::Sample,
            input_dropout: 0.0,
            output_dropout: 0.0,
            rng: Some(&mut noise),
        };
        let fwd = model.forward(g, w, &seqs, opts)?;
        Ok(total_loss(g, &fwd, &targets, 1.0)?.0)
    })
}

/// Every component check, in a fixed order.
pub fn run_gradchecks(seed: u64) -> Result<Vec<GradcheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for kind in CellKind::ALL {
        rows.push(check_cell(kind, &mut rng)?);
    }
    rows.push(check_attention(&mut rng)?);
    rows.push(check_decoder(&mut rng)?);
    rows.push(check_inference(&mut rng)?);
    rows.push(check_total_loss(&mut rng)?);
    Ok(rows)
}

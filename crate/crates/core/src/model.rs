//! Full recommender: embedding, optional global context, recurrent cell,
//! optional bi-channel attention and the bilinear decoder.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionMode, AttentionTrace, Attended};
use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::{self, CellKind, MemoryInputs, StepTrace, Unrolled};
use crate::error::{Error, Result};
use crate::global_context::{self, kl_to_standard_normal, mean_pool, posterior_heads, sample_theta};
use crate::params::{Bound, Init, ParamSpec, Params};

/// Architecture of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub cell: CellKind,
    pub attention: AttentionMode,
    pub num_items: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// `K`, the number of global memory rows.
    pub num_contexts: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_items == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Input("item count and dimensions must be positive".into()));
        }
        if self.cell.is_hierarchical() && self.num_contexts == 0 {
            return Err(Error::Contract("hierarchical cells need at least one global context".into()));
        }
        if self.cell == CellKind::Gru && self.attention == AttentionMode::Bi {
            return Err(Error::Input("bi-channel attention needs a local context; the GRU has none".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, h, k) = (self.embed_dim, self.hidden_dim, self.num_contexts);
        let mut specs = vec![ParamSpec::new("embedding", &[self.num_items, d], Init::Uniform)];
        specs.extend(self.cell.param_specs(d, h, k));
        if self.cell.is_hierarchical() {
            specs.extend(global_context::posterior_param_specs(d, h, k));
        }
        let context = self.cell.context_dim(d, h).unwrap_or(h);
        specs.extend(attention::param_specs(self.attention, context, h, d));
        specs
    }
}

/// Which steps are decoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Every real step of every sequence.
    All,
    /// Only the last step of each sequence.
    #[default]
    Last,
}

/// Source of `θ̃` for hierarchical cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum ThetaMode {
    /// `θ̃ = μ`.
    #[default]
    Mean,
    /// One reparameterized draw per sequence.
    Sample,
    /// Caller-supplied `θ̃`, `[batch, K]`; the posterior is still computed.
    Fixed(Tensor),
}

/// Stochastic parts of a forward pass.
pub struct ForwardOptions<'a> {
    pub readout: Readout,
    pub theta: ThetaMode,
    pub input_dropout: f64,
    pub output_dropout: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl ForwardOptions<'_> {
    /// Deterministic inference: `θ̃ = μ`, no dropout.
    pub fn eval(readout: Readout) -> Self {
        Self { readout, theta: ThetaMode::Mean, input_dropout: 0.0, output_dropout: 0.0, rng: None }
    }
}

/// Posterior nodes of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mu: Var,
    pub log_sigma: Var,
    pub theta_tilde: Var,
    pub theta: Var,
    /// Per-sequence KL to the prior, `[batch]`.
    pub kl: Var,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub batch: usize,
    pub steps: usize,
    /// Decoded steps of each row.
    pub positions: Vec<Vec<usize>>,
    /// `(row, step)` of each decoded row, in row-major order.
    pub events: Vec<(usize, usize)>,
    /// `[events, |I|]`
    pub logits: Var,
    /// `[events, |I|]`
    pub probs: Var,
    pub unrolled: Unrolled,
    pub posterior: Option<Posterior>,
    pub attended: Attended,
}

/// Per-step record of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub items: Vec<usize>,
    pub steps: Vec<StepTrace>,
    pub attention: Option<AttentionTrace>,
    pub theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
}

fn rng_of<'a, 'b>(rng: &'a mut Option<&'b mut dyn RngCore>, what: &str) -> Result<&'a mut &'b mut dyn RngCore> {
    rng.as_mut().ok_or_else(|| Error::Contract(format!("{what} needs a random source")))
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for s in spec.param_specs() {
            params.insert(s.name, s.init.sample(&s.shape, &mut rng));
        }
        Ok(Self { spec, params })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(spec: ModelSpec, params: Params) -> Result<Self> {
        spec.validate()?;
        let specs = spec.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameters, found {}", specs.len(), params.len())));
        }
        for s in &specs {
            let t = params.get(s.name).map_err(|_| Error::Format(format!("missing parameter `{}`", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Format(format!("parameter `{}` has shape {:?}, expected {:?}", s.name, t.shape(), s.shape)));
            }
        }
        Ok(Self { spec, params })
    }

    /// Keeps `W_d` nonnegative.
    pub fn project(&mut self) {
        if let Ok(w) = self.params.get_mut("w_d") {
            cells::project_nonnegative(w);
        }
    }

    /// Runs a padded batch of sequences. Padding steps are computed but
    /// never decoded, and attention never looks past a query step.
    pub fn forward(&self, g: &mut Graph, w: &Bound, seqs: &[&[usize]], mut opts: ForwardOptions<'_>) -> Result<Forward> {
        let spec = &self.spec;
        let batch = seqs.len();
        if batch == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("empty sequence in batch".into()));
        }
        if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&i| i >= spec.num_items) {
            return Err(Error::Input(format!("item id {bad} outside vocabulary of {}", spec.num_items)));
        }
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let embedding = w.get("embedding")?;

        let posterior = if spec.cell.is_hierarchical() {
            let pooled = mean_pool(g, embedding, seqs)?;
            let (mu, log_sigma) = posterior_heads(g, w, pooled)?;
            let k = spec.num_contexts;
            let noise = match &opts.theta {
                ThetaMode::Mean => Tensor::zeros(&[batch, k]),
                ThetaMode::Sample => {
                    let rng = rng_of(&mut opts.rng, "sampling θ")?;
                    let eps = (0..batch * k).map(|_| StandardNormal.sample(&mut **rng)).collect();
                    Tensor::new(&[batch, k], eps)?
                }
                ThetaMode::Fixed(_) => Tensor::zeros(&[batch, k]),
            };
            let (mut theta_tilde, mut theta) = sample_theta(g, mu, log_sigma, noise)?;
            if let ThetaMode::Fixed(t) = &opts.theta {
                if t.shape() != [batch, k] {
                    return Err(Error::Shape(format!("fixed θ̃ {:?} for batch {batch}, K {k}", t.shape())));
                }
                theta_tilde = g.constant(t.clone());
                theta = g.softmax(theta_tilde)?;
            }
            let kl = kl_to_standard_normal(g, mu, log_sigma)?;
            Some(Posterior { mu, log_sigma, theta_tilde, theta, kl })
        } else {
            None
        };

        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(0)).collect();
            let x = g.gather_rows(embedding, &ids)?;
            let x = if opts.input_dropout > 0.0 {
                let rng = rng_of(&mut opts.rng, "input dropout")?;
                g.dropout(x, opts.input_dropout, &mut **rng)?
            } else {
                x
            };
            xs.push(x);
        }
        let memory = match &posterior {
            Some(p) => Some(MemoryInputs::new(g, w, p.theta)?),
            None => None,
        };
        let unrolled = cells::unroll(spec.cell, g, w, &xs, spec.hidden_dim, memory.as_ref())?;

        let hs: Vec<Var> = unrolled.states.iter().map(|s| s.h).collect();
        let h_all = attention::stack_steps(g, &hs)?;
        let c_all = match spec.attention {
            AttentionMode::Bi => {
                let cs = unrolled
                    .states
                    .iter()
                    .map(|s| s.c.ok_or_else(|| Error::Contract("bi-channel attention needs local contexts".into())))
                    .collect::<Result<Vec<_>>>()?;
                Some(attention::stack_steps(g, &cs)?)
            }
            AttentionMode::None => None,
        };
        let positions: Vec<Vec<usize>> = match opts.readout {
            Readout::All => vec![(0..steps).collect(); batch],
            Readout::Last => seqs.iter().map(|s| vec![s.len() - 1]).collect(),
        };
        let attended = attention::attend(g, w, spec.attention, h_all, c_all, &positions)?;

        let (events, features) = match opts.readout {
            Readout::Last => (seqs.iter().enumerate().map(|(b, s)| (b, s.len() - 1)).collect(), attended.features),
            Readout::All => {
                let events: Vec<(usize, usize)> =
                    seqs.iter().enumerate().flat_map(|(b, s)| (0..s.len()).map(move |t| (b, t))).collect();
                let rows: Vec<usize> = events.iter().map(|&(b, t)| b * steps + t).collect();
                let f = if rows.len() == batch * steps { attended.features } else { g.gather_rows(attended.features, &rows)? };
                (events, f)
            }
        };
        let features = if opts.output_dropout > 0.0 {
            let rng = rng_of(&mut opts.rng, "output dropout")?;
            g.dropout(features, opts.output_dropout, &mut **rng)?
        } else {
            features
        };
        let (logits, probs) = attention::decode(g, w, features)?;
        Ok(Forward { batch, steps, positions, events, logits, probs, unrolled, posterior, attended })
    }

    /// Deterministic next-item logits, one row per decoded event.
    pub fn scores(&self, seqs: &[&[usize]], readout: Readout) -> Result<(Vec<(usize, usize)>, Tensor)> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &w, seqs, ForwardOptions::eval(readout))?;
        Ok((f.events, g.value(f.logits).clone()))
    }

    /// Gate, context and attention record of one whole sequence, with
    /// `θ̃ = μ` of that sequence.
    pub fn trace(&self, items: &[usize]) -> Result<SequenceTrace> {
        let mut g = Graph::new();
        let w = self.params.bind(&mut g, false);
        let f = self.forward(&mut g, &w, &[items], ForwardOptions::eval(Readout::All))?;
        let steps = f.unrolled.traces(&g, 0, items.len());
        let attention = match (f.attended.local, f.attended.temporary) {
            (Some(a), Some(b)) => Some(AttentionTrace::from_maps(g.value(a), g.value(b), 0, &f.positions[0])),
            _ => None,
        };
        let theta = f.posterior.map(|p| g.value(p.theta).row(0).to_vec());
        Ok(SequenceTrace { items: items.to_vec(), steps, attention, theta })
    }
}

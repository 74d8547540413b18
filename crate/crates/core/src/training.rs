//! Loss assembly, Adam with the `W_d` projection, the epoch loop with early
//! stopping, and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::CellKind;
use crate::data::{augment_prefixes, split_validation, Instance, SessionCorpus};
use crate::error::{Error, Result};
use crate::eval::{self, Metrics};
use crate::model::{Forward, ForwardOptions, Model, ModelSpec, Readout, ThetaMode};
use crate::params::Params;

/// Instances per graph. Batches are cut into chunks of this size no matter
/// how many workers run, so results do not depend on the worker count.
pub const CHUNK: usize = 64;

/// Floor inside the log of the target probability.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_contexts: usize,
    pub input_dropout: f64,
    pub output_dropout: f64,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub max_epochs: usize,
    pub grad_clip_norm: f64,
    pub patience: usize,
    /// Share of training sequences held out for early stopping; 0 keeps
    /// every sequence and the last epoch's parameters.
    pub valid_fraction: f64,
    /// Which steps of a prefix instance carry a loss.
    pub target_mode: Readout,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            embed_dim: 100,
            hidden_dim: 100,
            num_contexts: 50,
            input_dropout: 0.25,
            output_dropout: 0.5,
            learning_rate: 0.001,
            kl_weight: 1.0,
            max_epochs: 100,
            grad_clip_norm: 5.0,
            patience: 10,
            valid_fraction: 0.1,
            target_mode: Readout::Last,
            seed: 0,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so that NaN fails too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        if !(0.0..1.0).contains(&self.input_dropout) || !(0.0..1.0).contains(&self.output_dropout) {
            return bad("dropout rates must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.kl_weight >= 0.0) || !(self.grad_clip_norm > 0.0) {
            return bad("kl_weight must be nonnegative and grad_clip_norm positive");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Input(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `.json` as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn model_spec(&self, cell: CellKind, attention: AttentionMode, num_items: usize) -> ModelSpec {
        ModelSpec {
            cell,
            attention,
            num_items,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_contexts: self.num_contexts,
        }
    }
}

/// Targets of each decoded event, in the order of `Forward::events`.
pub fn event_targets(instances: &[&Instance], readout: Readout) -> Vec<usize> {
    match readout {
        Readout::Last => instances.iter().map(|i| *i.targets.last().expect("nonempty instance")).collect(),
        Readout::All => instances.iter().flat_map(|i| i.targets.iter().copied()).collect(),
    }
}

/// `(Σ_events −log max(ŷ[target], 1e-12) + kl_weight · Σ_rows KL) / rows`.
/// Returns the scalar root and the `(cross-entropy, KL)` sums.
pub fn total_loss(g: &mut Graph, fwd: &Forward, targets: &[usize], kl_weight: f64) -> Result<(Var, f64, f64)> {
    if fwd.batch == 0 || targets.len() != fwd.events.len() {
        return Err(Error::Contract(format!("{} targets for {} events", targets.len(), fwd.events.len())));
    }
    let picked = g.pick(fwd.probs, targets)?;
    let floored = g.clamp_min(picked, PROB_FLOOR)?;
    let logp = g.log(floored)?;
    let nll = g.sum(logp)?;
    let ce = -g.value(nll).item();
    let mut total = g.scale(nll, -1.0)?;
    let mut kl = 0.0;
    if let Some(p) = &fwd.posterior {
        let kl_sum = g.sum(p.kl)?;
        kl = g.value(kl_sum).item();
        if kl_weight != 0.0 {
            let weighted = g.scale(kl_sum, kl_weight)?;
            total = g.add(total, weighted)?;
        }
    }
    let root = g.scale(total, 1.0 / fwd.batch as f64)?;
    if !g.value(root).is_finite() {
        return Err(Error::NonFinite(format!("loss with cross-entropy {ce} and KL {kl}")));
    }
    Ok((root, ce, kl))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(lr: f64, params: &Params) -> Self {
        let zeros = |p: &Params| {
            let mut z = Params::new();
            for (n, t) in p.iter() {
                z.insert(n, Tensor::zeros(t.shape()));
            }
            z
        };
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(params), v: zeros(params) }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name)?;
            let m = self.m.get_mut(name)?.data_mut();
            for (mk, gk) in m.iter_mut().zip(g.data()) {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
            }
            let v = self.v.get_mut(name)?.data_mut();
            for (vk, gk) in v.iter_mut().zip(g.data()) {
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
            }
            let (m, v) = (self.m.get(name)?.data(), self.v.get(name)?.data());
            for ((pk, mk), vk) in p.data_mut().iter_mut().zip(m).zip(v) {
                *pk -= self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` so that their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, t)| t.data().iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One Adam step followed by the nonnegativity projection.
pub fn optimizer_step(model: &mut Model, adam: &mut Adam, grads: &Params) -> Result<()> {
    adam.step(&mut model.params, grads)?;
    model.project();
    Ok(())
}

/// Worker count: `HCRNN_THREADS` if set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("HCRNN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every job on up to `workers` threads and returns the
/// results in job order.
pub fn parallel_map<T: Sync, R: Send>(jobs: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().enumerate().map(|(i, j)| f(i, j)).collect();
    }
    let mut slots: Vec<Option<R>> = (0..jobs.len()).map(|_| None).collect();
    thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                s.spawn(move || {
                    (w..jobs.len()).step_by(workers).map(|i| (i, f(i, &jobs[i]))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent stream for one `(seed, a, b, c)` coordinate.
pub fn stream_rng(seed: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ splitmix(a)) ^ b) ^ c))
}

/// Loss sums and gradient of one chunk, scaled as part of a batch of
/// `batch_len` instances.
struct ChunkResult {
    loss: f64,
    ce: f64,
    kl: f64,
    grads: Params,
}

fn chunk_gradients(model: &Model, chunk: &[&Instance], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<ChunkResult> {
    let mut g = Graph::new();
    let w = model.params.bind(&mut g, true);
    let seqs: Vec<&[usize]> = chunk.iter().map(|i| i.input.as_slice()).collect();
    let opts = ForwardOptions {
        readout: cfg.target_mode,
        theta: ThetaMode::Sample,
        input_dropout: cfg.input_dropout,
        output_dropout: cfg.output_dropout,
        rng: Some(rng),
    };
    let fwd = model.forward(&mut g, &w, &seqs, opts)?;
    let targets = event_targets(chunk, cfg.target_mode);
    let (root, ce, kl) = total_loss(&mut g, &fwd, &targets, cfg.kl_weight)?;
    let loss = g.value(root).item() * chunk.len() as f64;
    g.backward(root)?;
    Ok(ChunkResult { loss, ce, kl, grads: w.grads(&g) })
}

/// Summed loss parts and the mean gradient of one batch.
pub struct BatchResult {
    pub loss: f64,
    pub ce: f64,
    pub kl: f64,
    pub grads: Params,
}

pub fn batch_gradients(
    model: &Model,
    batch: &[&Instance],
    cfg: &TrainConfig,
    stream: (u64, u64),
    workers: usize,
) -> Result<BatchResult> {
    let chunks: Vec<&[&Instance]> = batch.chunks(CHUNK).collect();
    let results = parallel_map(&chunks, workers, |i, c| {
        let mut rng = stream_rng(cfg.seed, stream.0, stream.1, i as u64);
        chunk_gradients(model, c, cfg, &mut rng)
    });
    let n = batch.len() as f64;
    let mut out: Option<BatchResult> = None;
    for (r, c) in results.into_iter().zip(&chunks) {
        let r = r?;
        let weight = c.len() as f64 / n;
        match &mut out {
            None => {
                let mut grads = r.grads;
                grads.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= weight));
                out = Some(BatchResult { loss: r.loss, ce: r.ce, kl: r.kl, grads });
            }
            Some(acc) => {
                acc.loss += r.loss;
                acc.ce += r.ce;
                acc.kl += r.kl;
                for (name, t) in acc.grads.iter_mut() {
                    let src = r.grads.get(name)?;
                    t.data_mut().iter_mut().zip(src.data()).for_each(|(a, b)| *a += weight * b);
                }
            }
        }
    }
    out.ok_or_else(|| Error::Input("empty batch".into()))
}

/// Batches of instances with similar lengths, in seeded random order.
pub fn make_batches<'a>(instances: &'a [Instance], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<&'a Instance>> {
    let mut order: Vec<&Instance> = instances.iter().collect();
    order.shuffle(rng);
    order.sort_by_key(|i| i.len());
    let mut batches: Vec<Vec<&Instance>> = order.chunks(batch_size).map(<[_]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss per instance.
    pub loss: f64,
    /// Mean cross-entropy per instance.
    pub cross_entropy: f64,
    /// Mean KL per instance.
    pub kl: f64,
    pub valid_recall_20: Option<f64>,
    pub valid_mrr_20: Option<f64>,
}

/// Trained parameters with everything needed to use them again.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    /// Epoch whose parameters are stored.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    spec: ModelSpec,
    config: TrainConfig,
    vocab: Vec<String>,
    epoch: usize,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

const MAGIC: &[u8; 8] = b"HCRNNCKP";
const VERSION: u32 = 1;

impl Checkpoint {
    /// `MAGIC | version u32 | meta length u64 | JSON meta | f64 data`, all
    /// little-endian, tensors in the order listed in the metadata.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self
            .model
            .params
            .iter()
            .map(|(n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() })
            .collect();
        let meta = CheckpointMeta {
            spec: self.model.spec,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint metadata".into()));
        }
        let (json, mut data) = r.split_at(len);
        let meta: CheckpointMeta = serde_json::from_slice(json)?;
        let mut params = Params::new();
        for e in meta.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Format(format!("truncated data for `{}`", e.name)));
            }
            let (chunk, rest) = data.split_at(8 * n);
            let values = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
            params.insert(e.name, Tensor::new(&e.shape, values)?);
            data = rest;
        }
        if !data.is_empty() {
            return Err(Error::Format("trailing bytes after tensor data".into()));
        }
        if meta.vocab.len() != meta.spec.num_items {
            return Err(Error::Format("vocabulary size differs from the model".into()));
        }
        Ok(Self {
            model: Model::from_params(meta.spec, params)?,
            config: meta.config,
            vocab: meta.vocab,
            epoch: meta.epoch,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// `epoch,loss,cross_entropy,kl,valid_recall_20,valid_mrr_20`
    pub fn loss_log_csv(&self) -> String {
        let mut out = String::from("epoch,loss,cross_entropy,kl,valid_recall_20,valid_mrr_20\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch,
                r.loss,
                r.cross_entropy,
                r.kl,
                opt(r.valid_recall_20),
                opt(r.valid_mrr_20)
            ));
        }
        out
    }
}

/// Result of [`train`]. `diverged` is set when a non-finite value stopped
/// training; the checkpoint then holds the last finite parameters.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub diverged: Option<String>,
}

/// Trains `cell` with `attention` on the training sequences of `corpus`.
/// `on_epoch` sees every epoch record as soon as it is known.
pub fn train(
    corpus: &SessionCorpus,
    cfg: &TrainConfig,
    cell: CellKind,
    attention: AttentionMode,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.model_spec(cell, attention, corpus.num_items());
    let (train_seqs, valid_seqs) = if cfg.valid_fraction > 0.0 {
        split_validation(corpus.sequences.clone(), cfg.valid_fraction, cfg.seed)?
    } else {
        (corpus.sequences.clone(), Vec::new())
    };
    let instances = augment_prefixes(&train_seqs);
    if instances.is_empty() {
        return Err(Error::Input("no training instances".into()));
    }
    let workers = worker_count();
    let mut model = Model::init(spec, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, &model.params);
    let mut shuffle = stream_rng(cfg.seed, u64::MAX, 0, 0);

    let vocab = corpus.vocab.items().to_vec();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut since_best = 0;
    let mut diverged = None;
    let mut last_good = (0, model.params.clone());

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(&instances, cfg.batch_size, &mut shuffle);
        let (mut loss, mut ce, mut kl) = (0.0, 0.0, 0.0);
        let mut failed = None;
        for (b, batch) in batches.iter().enumerate() {
            let step = batch_gradients(&model, batch, cfg, (epoch as u64, b as u64), workers).and_then(|mut r| {
                clip_gradients(&mut r.grads, cfg.grad_clip_norm);
                optimizer_step(&mut model, &mut adam, &r.grads)?;
                if model.params.iter().all(|(_, t)| t.is_finite()) {
                    Ok(r)
                } else {
                    Err(Error::NonFinite("parameters after optimizer step".into()))
                }
            });
            match step {
                Ok(r) => {
                    loss += r.loss;
                    ce += r.ce;
                    kl += r.kl;
                }
                Err(e @ Error::NonFinite(_)) => {
                    failed = Some(format!("epoch {epoch}, batch {b}: {e}"));
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(msg) = failed {
            diverged = Some(msg);
            model.params = last_good.1.clone();
            break;
        }
        let n = instances.len() as f64;
        let (valid_recall_20, valid_mrr_20) = if valid_seqs.is_empty() {
            (None, None)
        } else {
            let m = eval::evaluate_model(&model, &valid_seqs)?;
            (Some(m.recall(20)?), Some(m.mrr(20)?))
        };
        let record = EpochRecord { epoch, loss: loss / n, cross_entropy: ce / n, kl: kl / n, valid_recall_20, valid_mrr_20 };
        on_epoch(&record);
        history.push(record);
        last_good = (epoch, model.params.clone());
        if let Some(r) = valid_recall_20 {
            if best.as_ref().is_none_or(|(b, _, _)| r > *b) {
                best = Some((r, epoch, model.params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        }
    }
    let (epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => last_good,
    };
    model.params = params;
    Ok(TrainOutcome { checkpoint: Checkpoint { model, config: cfg.clone(), vocab, epoch, history }, diverged })
}

/// Ranks of every next-item event of `sequences` under a checkpoint,
/// after checking that the sequences fit its vocabulary.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, sequences: &[Vec<usize>]) -> Result<Metrics> {
    let n = ckpt.model.spec.num_items;
    if let Some(&bad) = sequences.iter().flatten().find(|&&i| i >= n) {
        return Err(Error::Input(format!("item id {bad} is not in the checkpoint vocabulary of {n}")));
    }
    eval::evaluate_model(&ckpt.model, sequences)
}

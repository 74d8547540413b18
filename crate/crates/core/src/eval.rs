//! Ranking metrics, non-neural baselines, and summaries of gate, context and
//! attention traces.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Genres;
use crate::error::{Error, Result};
use crate::model::{Model, Readout, SequenceTrace};
use crate::training::{parallel_map, worker_count, CHUNK};

/// 1-based rank of `target` when items are ordered by descending score,
/// ties broken by ascending id.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(j, &v)| v > s || (v == s && j < target)).count()
}

fn check(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Input("no events to score".into()));
    }
    if k == 0 {
        return Err(Error::Contract("cutoff must be positive".into()));
    }
    Ok(())
}

/// Share of events whose target ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank, counting ranks beyond `k` as zero.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Target ranks of a set of next-item events.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ranks: Vec<usize>,
}

impl Metrics {
    pub fn events(&self) -> usize {
        self.ranks.len()
    }

    pub fn recall(&self, k: usize) -> Result<f64> {
        recall_at_k(&self.ranks, k)
    }

    pub fn mrr(&self, k: usize) -> Result<f64> {
        mrr_at_k(&self.ranks, k)
    }
}

/// Every next-item event `(prefix s[..=t], target s[t+1])` of `sequences`.
pub fn events(sequences: &[Vec<usize>]) -> Vec<(&[usize], usize)> {
    sequences.iter().flat_map(|s| (1..s.len()).map(move |t| (&s[..t], s[t]))).collect()
}

/// Ranks every next-item event of `sequences`.
///
/// Models with a global context see each prefix on its own, so `θ̃ = μ` of
/// the prefix and no later item reaches the prediction. Other models are
/// causal, and one unroll per sequence gives the same scores.
pub fn evaluate_model(model: &Model, sequences: &[Vec<usize>]) -> Result<Metrics> {
    let workers = worker_count();
    if model.spec.cell.is_hierarchical() {
        let mut evs = events(sequences);
        evs.sort_by_key(|(p, _)| p.len());
        let chunks: Vec<_> = evs.chunks(CHUNK).collect();
        let ranked = parallel_map(&chunks, workers, |_, chunk| -> Result<Vec<usize>> {
            let seqs: Vec<&[usize]> = chunk.iter().map(|(p, _)| *p).collect();
            let (_, logits) = model.scores(&seqs, Readout::Last)?;
            Ok(chunk.iter().enumerate().map(|(i, &(_, y))| rank_of(logits.row(i), y)).collect())
        });
        collect(ranked)
    } else {
        let seqs: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
        let chunks: Vec<_> = seqs.chunks(CHUNK).collect();
        let ranked = parallel_map(&chunks, workers, |_, chunk| -> Result<Vec<usize>> {
            let inputs: Vec<&[usize]> = chunk.iter().map(|s| &s[..s.len() - 1]).collect();
            let (evs, logits) = model.scores(&inputs, Readout::All)?;
            Ok(evs.iter().enumerate().map(|(i, &(b, t))| rank_of(logits.row(i), chunk[b][t + 1])).collect())
        });
        collect(ranked)
    }
}

fn collect(parts: Vec<Result<Vec<usize>>>) -> Result<Metrics> {
    let mut ranks = Vec::new();
    for p in parts {
        ranks.extend(p?);
    }
    if ranks.is_empty() {
        return Err(Error::Input("no sequence has a next item to predict".into()));
    }
    Ok(Metrics { ranks })
}

/// Scores every item given the items seen so far.
pub trait Recommender {
    fn name(&self) -> &str;
    fn score(&self, prefix: &[usize]) -> Vec<f64>;
}

/// Global popularity.
#[derive(Clone, Debug)]
pub struct Pop {
    counts: Vec<f64>,
}

impl Pop {
    pub fn fit(train: &[Vec<usize>], num_items: usize) -> Self {
        let mut counts = vec![0.0; num_items];
        for &i in train.iter().flatten() {
            counts[i] += 1.0;
        }
        Self { counts }
    }
}

impl Recommender for Pop {
    fn name(&self) -> &str {
        "POP"
    }

    fn score(&self, _: &[usize]) -> Vec<f64> {
        self.counts.clone()
    }
}

/// Popularity within the current session, global popularity below that.
#[derive(Clone, Debug)]
pub struct SessionPop {
    pop: Pop,
}

impl SessionPop {
    pub fn fit(train: &[Vec<usize>], num_items: usize) -> Self {
        Self { pop: Pop::fit(train, num_items) }
    }
}

impl Recommender for SessionPop {
    fn name(&self) -> &str {
        "S-POP"
    }

    fn score(&self, prefix: &[usize]) -> Vec<f64> {
        // Global counts are squeezed into [0, 1) so one session occurrence
        // always outranks any global popularity.
        let top = self.pop.counts.iter().cloned().fold(0.0, f64::max) + 1.0;
        let mut s: Vec<f64> = self.pop.counts.iter().map(|c| c / top).collect();
        for &i in prefix {
            s[i] += 1.0;
        }
        s
    }
}

/// Cosine similarity of session occurrence vectors, scored from the last
/// item of the prefix.
#[derive(Clone, Debug)]
pub struct ItemKnn {
    sim: Vec<HashMap<usize, f64>>,
    num_items: usize,
}

impl ItemKnn {
    pub fn fit(train: &[Vec<usize>], num_items: usize) -> Self {
        let mut freq = vec![0usize; num_items];
        let mut cooc: Vec<HashMap<usize, usize>> = vec![HashMap::new(); num_items];
        for s in train {
            let mut set: Vec<usize> = s.iter().copied().collect::<HashSet<_>>().into_iter().collect();
            set.sort_unstable();
            for (a, &i) in set.iter().enumerate() {
                freq[i] += 1;
                for &j in &set[a + 1..] {
                    *cooc[i].entry(j).or_default() += 1;
                    *cooc[j].entry(i).or_default() += 1;
                }
            }
        }
        let sim = cooc
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                row.into_iter().map(|(j, c)| (j, c as f64 / ((freq[i] * freq[j]) as f64).sqrt())).collect()
            })
            .collect();
        Self { sim, num_items }
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.sim[i].get(&j).copied().unwrap_or(0.0)
    }
}

impl Recommender for ItemKnn {
    fn name(&self) -> &str {
        "Item-KNN"
    }

    fn score(&self, prefix: &[usize]) -> Vec<f64> {
        let mut s = vec![0.0; self.num_items];
        if let Some(&last) = prefix.last() {
            for (&j, &v) in &self.sim[last] {
                s[j] = v;
            }
        }
        s
    }
}

pub fn evaluate_recommender(rec: &dyn Recommender, sequences: &[Vec<usize>]) -> Result<Metrics> {
    let ranks: Vec<usize> = events(sequences).into_iter().map(|(p, y)| rank_of(&rec.score(p), y)).collect();
    if ranks.is_empty() {
        return Err(Error::Input("no sequence has a next item to predict".into()));
    }
    Ok(Metrics { ranks })
}

/// Headline numbers of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub events: usize,
    pub recall_1: f64,
    pub recall_3: f64,
    pub recall_20: f64,
    pub mrr_3: f64,
    pub mrr_20: f64,
}

impl ModelReport {
    pub fn new(name: impl Into<String>, m: &Metrics) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            events: m.events(),
            recall_1: m.recall(1)?,
            recall_3: m.recall(3)?,
            recall_20: m.recall(20)?,
            mrr_3: m.mrr(3)?,
            mrr_20: m.mrr(20)?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<ModelReport>,
    pub analytics: Option<TraceSummary>,
}

/// Mean of a running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mean {
    pub sum: f64,
    pub count: usize,
}

impl Mean {
    pub fn push(&mut self, v: f64) {
        self.sum += v;
        self.count += 1;
    }

    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Mean retention at one `(run length, genre changed)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBucket {
    pub run_length: usize,
    pub changed_genre: bool,
    pub mean_gate: f64,
    pub count: usize,
}

/// Mean attention weight at one distance from the query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBucket {
    pub delta_t: usize,
    pub mean_alpha_c: f64,
    pub mean_alpha_h: f64,
    pub count: usize,
}

/// Aggregates of traced sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub sequences: usize,
    /// Retention (`r ⊙ G^(d)`, or `r`) by the length of the same-genre run
    /// before the step and whether the step's item changes genre.
    pub gates: Vec<GateBucket>,
    pub gate_at_change: Option<f64>,
    pub gate_at_continuation: Option<f64>,
    /// Mean retention over every step after the first.
    pub gate_overall: Option<f64>,
    pub attention: Vec<AttentionBucket>,
    /// Mean attention mass on the query step and the 3 before it.
    pub recent_mass_c: Option<f64>,
    pub recent_mass_h: Option<f64>,
    /// Mean per-coordinate `|Δh|` and `|Δc|` over steps after the first.
    pub mean_delta_h: Option<f64>,
    pub mean_delta_c: Option<f64>,
}

/// Distance window of [`TraceSummary::recent_mass_c`].
pub const RECENT_WINDOW: usize = 3;

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn trace_analytics(traces: &[SequenceTrace], genres: Option<&Genres>) -> TraceSummary {
    let mut gates: BTreeMap<(usize, bool), Mean> = BTreeMap::new();
    let (mut change, mut cont, mut overall) = (Mean::default(), Mean::default(), Mean::default());
    let mut attn: BTreeMap<usize, (Mean, Mean)> = BTreeMap::new();
    let (mut recent_c, mut recent_h) = (Mean::default(), Mean::default());
    let (mut dh, mut dc) = (Mean::default(), Mean::default());

    for tr in traces {
        let mut run = 0;
        for t in 1..tr.steps.len() {
            let step = &tr.steps[t];
            dh.push(step.delta_h);
            if let Some(c) = step.delta_c {
                dc.push(c);
            }
            let Some(ret) = step.retention() else { continue };
            let gate = mean_of(&ret);
            overall.push(gate);
            let Some(genres) = genres else { continue };
            let (Some(prev), Some(cur)) = (genres.genre(tr.items[t - 1]), genres.genre(tr.items[t])) else {
                run = 0;
                continue;
            };
            // Length of the same-genre run ending at t - 1.
            run = if t >= 2 && genres.genre(tr.items[t - 2]) == Some(prev) { run + 1 } else { 1 };
            let changed = prev != cur;
            gates.entry((run, changed)).or_default().push(gate);
            if changed { change.push(gate) } else { cont.push(gate) }
        }
        if let Some(a) = &tr.attention {
            for (q, (rc, rh)) in a.alpha_c.iter().zip(&a.alpha_h).enumerate() {
                let (mut mc, mut mh) = (0.0, 0.0);
                for j in 0..=q.min(rc.len() - 1) {
                    let d = q - j;
                    let e = attn.entry(d).or_default();
                    e.0.push(rc[j]);
                    e.1.push(rh[j]);
                    if d <= RECENT_WINDOW {
                        mc += rc[j];
                        mh += rh[j];
                    }
                }
                recent_c.push(mc);
                recent_h.push(mh);
            }
        }
    }
    TraceSummary {
        sequences: traces.len(),
        gates: gates
            .into_iter()
            .map(|((run_length, changed_genre), m)| GateBucket {
                run_length,
                changed_genre,
                mean_gate: m.value().unwrap_or(0.0),
                count: m.count,
            })
            .collect(),
        gate_at_change: change.value(),
        gate_at_continuation: cont.value(),
        gate_overall: overall.value(),
        attention: attn
            .into_iter()
            .map(|(delta_t, (c, h))| AttentionBucket {
                delta_t,
                mean_alpha_c: c.value().unwrap_or(0.0),
                mean_alpha_h: h.value().unwrap_or(0.0),
                count: c.count,
            })
            .collect(),
        recent_mass_c: recent_c.value(),
        recent_mass_h: recent_h.value(),
        mean_delta_h: dh.value(),
        mean_delta_c: dc.value(),
    }
}

/// Traces every sequence of length at least 2 with `θ̃ = μ` of the whole
/// sequence.
pub fn trace_sequences(model: &Model, sequences: &[Vec<usize>]) -> Result<Vec<SequenceTrace>> {
    let seqs: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    parallel_map(&seqs, worker_count(), |_, s| model.trace(s)).into_iter().collect()
}

impl TraceSummary {
    /// `delta_t,mean_alpha_c,mean_alpha_h`
    pub fn attention_csv(&self) -> String {
        let mut out = String::from("delta_t,mean_alpha_c,mean_alpha_h\n");
        for b in &self.attention {
            out.push_str(&format!("{},{},{}\n", b.delta_t, b.mean_alpha_c, b.mean_alpha_h));
        }
        out
    }

    /// `run_length,changed_genre,mean_gate`
    pub fn gates_csv(&self) -> String {
        let mut out = String::from("run_length,changed_genre,mean_gate\n");
        for b in &self.gates {
            out.push_str(&format!("{},{},{}\n", b.run_length, b.changed_genre, b.mean_gate));
        }
        out
    }
}

//! Session corpora: loading, filtering, vocabulary, prefix augmentation,
//! validation split and a synthetic interest-drift generator.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sessions as read from disk, before any filtering.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawSessions {
    pub sessions: Vec<Vec<String>>,
    /// Blank lines that were skipped.
    pub skipped: usize,
}

/// One session per line, whitespace-separated item tokens.
pub fn parse_sessions(text: &str) -> RawSessions {
    let mut out = RawSessions::default();
    for line in text.lines() {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            out.skipped += 1;
        } else {
            out.sessions.push(tokens);
        }
    }
    out
}

pub fn load_sessions(path: &Path) -> Result<RawSessions> {
    let text = fs::read_to_string(path)?;
    let raw = parse_sessions(&text);
    if raw.sessions.is_empty() {
        return Err(Error::Input(format!("{} contains no sessions", path.display())));
    }
    Ok(raw)
}

/// Keeps, in each session of `item:rating` tokens, only the items carrying
/// the session's maximum rating. Tokens without a rating are kept as is.
pub fn keep_max_rated(raw: RawSessions) -> Result<RawSessions> {
    let mut sessions = Vec::with_capacity(raw.sessions.len());
    for s in raw.sessions {
        let mut rated = Vec::with_capacity(s.len());
        for tok in s {
            match tok.rsplit_once(':') {
                Some((item, r)) => {
                    let r: f64 = r.parse().map_err(|_| Error::Input(format!("bad rating in `{tok}`")))?;
                    rated.push((item.to_string(), Some(r)));
                }
                None => rated.push((tok, None)),
            }
        }
        let best = rated.iter().filter_map(|(_, r)| *r).fold(f64::NEG_INFINITY, f64::max);
        let kept: Vec<String> = rated.into_iter().filter(|(_, r)| r.is_none_or(|r| r == best)).map(|(i, _)| i).collect();
        if !kept.is_empty() {
            sessions.push(kept);
        }
    }
    Ok(RawSessions { sessions, skipped: raw.skipped })
}

/// Item token to contiguous id, in order of first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { items, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    fn insert(&mut self, item: &str) -> usize {
        if let Some(&i) = self.index.get(item) {
            return i;
        }
        self.items.push(item.to_string());
        self.index.insert(item.to_string(), self.items.len() - 1);
        self.items.len() - 1
    }
}

/// Genre of every item id; `None` for items missing from the genre map.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genres {
    pub names: Vec<String>,
    pub of_item: Vec<Option<usize>>,
}

impl Genres {
    pub fn genre(&self, item: usize) -> Option<usize> {
        self.of_item.get(item).copied().flatten()
    }

    /// Steps `t >= 1` whose item has a different known genre than item `t-1`.
    pub fn drift_points(&self, seq: &[usize]) -> Vec<usize> {
        (1..seq.len())
            .filter(|&t| match (self.genre(seq[t - 1]), self.genre(seq[t])) {
                (Some(a), Some(b)) => a != b,
                _ => false,
            })
            .collect()
    }
}

/// Parses `item<TAB>genre` lines.
pub fn parse_genre_map(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (item, genre) = line
            .split_once('\t')
            .ok_or_else(|| Error::Input(format!("genre map line {} has no tab", n + 1)))?;
        map.insert(item.trim().to_string(), genre.trim().to_string());
    }
    Ok(map)
}

pub fn load_genre_map(path: &Path) -> Result<HashMap<String, String>> {
    parse_genre_map(&fs::read_to_string(path)?)
}

/// Vocabulary-indexed training sequences, optional encoded test sequences
/// and optional genre metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionCorpus {
    pub vocab: Vocab,
    pub sequences: Vec<Vec<usize>>,
    #[serde(default)]
    pub test: Vec<Vec<usize>>,
    #[serde(default)]
    pub genres: Option<Genres>,
}

impl SessionCorpus {
    pub fn num_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn decode(&self, seq: &[usize]) -> Vec<String> {
        seq.iter().filter_map(|&i| self.vocab.item(i)).map(str::to_string).collect()
    }

    /// Attaches genres by item token.
    pub fn with_genres(mut self, map: &HashMap<String, String>) -> Self {
        let mut names: Vec<String> = Vec::new();
        let mut ids: HashMap<&str, usize> = HashMap::new();
        let of_item = self
            .vocab
            .items()
            .iter()
            .map(|item| {
                let genre = map.get(item)?;
                Some(*ids.entry(genre.as_str()).or_insert_with(|| {
                    names.push(genre.clone());
                    names.len() - 1
                }))
            })
            .collect();
        self.genres = Some(Genres { names, of_item });
        self
    }

    /// Encodes raw test sessions with the training vocabulary. Unknown items
    /// are dropped, then sessions shorter than `min_len` are removed.
    pub fn set_test(&mut self, raw: &[Vec<String>], min_len: usize) {
        self.test = raw
            .iter()
            .map(|s| s.iter().filter_map(|t| self.vocab.id(t)).collect::<Vec<_>>())
            .filter(|s| s.len() >= min_len.max(2))
            .collect();
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let corpus: Self = serde_json::from_slice(&fs::read(path)?)?;
        corpus.validate()?;
        Ok(corpus)
    }

    /// Checks id ranges and lengths.
    pub fn validate(&self) -> Result<()> {
        let n = self.num_items();
        for s in self.sequences.iter().chain(&self.test) {
            if s.len() < 2 {
                return Err(Error::Format("corpus holds a sequence shorter than 2".into()));
            }
            if let Some(&bad) = s.iter().find(|&&i| i >= n) {
                return Err(Error::Format(format!("item id {bad} outside vocabulary of {n}")));
            }
        }
        if let Some(g) = &self.genres {
            if g.of_item.len() != n || g.of_item.iter().flatten().any(|&x| x >= g.names.len()) {
                return Err(Error::Format("genre table does not match the vocabulary".into()));
            }
        }
        Ok(())
    }
}

/// Removes items seen fewer than `min_item_freq` times and sequences
/// shorter than `min_len`, repeating both filters until nothing changes,
/// then numbers the surviving items by first appearance.
pub fn preprocess(raw: &[Vec<String>], min_len: usize, min_item_freq: usize) -> Result<SessionCorpus> {
    if min_len < 2 {
        return Err(Error::Contract(format!("min_len {min_len} below 2")));
    }
    let mut seqs: Vec<Vec<&str>> = raw.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
    loop {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in &seqs {
            for &t in s {
                *freq.entry(t).or_default() += 1;
            }
        }
        let before: usize = seqs.iter().map(Vec::len).sum::<usize>() + seqs.len();
        seqs = seqs
            .into_iter()
            .map(|s| s.into_iter().filter(|t| freq[t] >= min_item_freq).collect::<Vec<_>>())
            .filter(|s| s.len() >= min_len)
            .collect();
        let after: usize = seqs.iter().map(Vec::len).sum::<usize>() + seqs.len();
        if after == before {
            break;
        }
    }
    if seqs.is_empty() {
        return Err(Error::Input("no sequences survive preprocessing".into()));
    }
    let mut vocab = Vocab::default();
    let sequences = seqs.iter().map(|s| s.iter().map(|t| vocab.insert(t)).collect()).collect();
    Ok(SessionCorpus { vocab, sequences, test: Vec::new(), genres: None })
}

/// A prefix of a sequence with the next item after each of its steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.input.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input.is_empty()
    }
}

/// For a sequence of length `n`, the `n - 1` prefixes of length `k = 2..=n`.
/// The prefix `s[..k]` yields inputs `s[..k-1]` and targets `s[1..k]`.
pub fn augment_prefixes(sequences: &[Vec<usize>]) -> Vec<Instance> {
    sequences
        .iter()
        .flat_map(|s| {
            (2..=s.len()).map(move |k| Instance { input: s[..k - 1].to_vec(), targets: s[1..k].to_vec() })
        })
        .collect()
}

/// Seeded shuffle, then the first `round(fraction · n)` elements become the
/// validation set. Both halves keep the shuffled order.
pub fn split_validation<T>(mut items: Vec<T>, fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let n_valid = (fraction * items.len() as f64).round() as usize;
    let train = items.split_off(n_valid);
    Ok((train, items))
}

/// Parameters of the synthetic interest-drift corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub genres: usize,
    pub items_per_genre: usize,
    /// Inclusive range of genre block lengths.
    pub block_len: (usize, usize),
    /// Inclusive range of sequence lengths.
    pub seq_len: (usize, usize),
    /// Chance of stepping to the next item of the genre's cycle instead of
    /// a uniform draw from the genre.
    pub cycle_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sequences: 2000,
            genres: 3,
            items_per_genre: 20,
            block_len: (4, 10),
            seq_len: (12, 36),
            cycle_prob: 0.6,
            seed: 0,
        }
    }
}

/// Sequences built from genre blocks. A new block always switches to a
/// different genre, so block boundaries are exactly the drift points.
/// Items are `i{id}` with genre `g{id / items_per_genre}`; the vocabulary
/// lists every item in id order.
pub fn generate_synthetic_drift(cfg: &SynthConfig) -> Result<SessionCorpus> {
    let (g, n) = (cfg.genres, cfg.items_per_genre);
    if g == 0 || n == 0 {
        return Err(Error::Contract("need at least one genre and one item per genre".into()));
    }
    let (bmin, bmax) = cfg.block_len;
    let (lmin, lmax) = cfg.seq_len;
    if bmin == 0 || bmin > bmax || lmin < 2 || lmin > lmax {
        return Err(Error::Contract("invalid block or sequence length range".into()));
    }
    if !(0.0..=1.0).contains(&cfg.cycle_prob) {
        return Err(Error::Contract("cycle_prob outside [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sequences = Vec::with_capacity(cfg.num_sequences);
    for _ in 0..cfg.num_sequences {
        let len = rng.gen_range(lmin..=lmax);
        let mut seq = Vec::with_capacity(len);
        let mut genre = rng.gen_range(0..g);
        while seq.len() < len {
            let block = rng.gen_range(bmin..=bmax).min(len - seq.len());
            let mut local = rng.gen_range(0..n);
            for i in 0..block {
                if i > 0 {
                    local = if rng.gen::<f64>() < cfg.cycle_prob { (local + 1) % n } else { rng.gen_range(0..n) };
                }
                seq.push(genre * n + local);
            }
            if g > 1 {
                genre = (genre + rng.gen_range(1..g)) % g;
            }
        }
        sequences.push(seq);
    }
    let vocab = Vocab::from((0..g * n).map(|i| format!("i{i}")).collect::<Vec<_>>());
    let genres = Genres { names: (0..g).map(|k| format!("g{k}")).collect(), of_item: (0..g * n).map(|i| Some(i / n)).collect() };
    Ok(SessionCorpus { vocab, sequences, test: Vec::new(), genres: Some(genres) })
}

/// Eight sequences over twelve items with distinct first items, so every
/// prefix determines its continuation.
pub fn tiny_corpus(seed: u64) -> SessionCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut firsts: Vec<usize> = (0..12).collect();
    firsts.shuffle(&mut rng);
    let sequences = firsts[..8]
        .iter()
        .map(|&first| {
            let len = rng.gen_range(6..=8);
            let mut s = vec![first];
            while s.len() < len {
                s.push(rng.gen_range(0..12));
            }
            s
        })
        .collect();
    let vocab = Vocab::from((0..12).map(|i| format!("i{i}")).collect::<Vec<_>>());
    SessionCorpus { vocab, sequences, test: Vec::new(), genres: None }
}

/// Token lines, one session per line.
pub fn format_sessions(sessions: &[Vec<String>]) -> String {
    let mut out = String::new();
    for s in sessions {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}

/// Distinct items of a set of sequences.
pub fn item_set(sequences: &[Vec<usize>]) -> HashSet<usize> {
    sequences.iter().flatten().copied().collect()
}

//! `hcrnn`: prepare corpora, train, evaluate, inspect traces, check
//! gradients and generate synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hcrnn::attention::AttentionMode;
use hcrnn::cells::CellKind;
use hcrnn::data::{
    format_sessions, generate_synthetic_drift, keep_max_rated, load_genre_map, load_sessions, preprocess, tiny_corpus,
    SessionCorpus, SynthConfig,
};
use hcrnn::eval::{
    evaluate_recommender, trace_analytics, trace_sequences, EvalReport, ItemKnn, ModelReport, Pop, Recommender,
    SessionPop,
};
use hcrnn::gradcheck::{run_gradchecks, TOLERANCE};
use hcrnn::training::{evaluate_checkpoint, train, Checkpoint, TrainConfig};

#[derive(Parser)]
#[command(name = "hcrnn", version, about = "Hierarchical-context recurrent recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter raw sessions and write an indexed corpus.
    Prepare(PrepareArgs),
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Rank next items on a corpus split and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Write gate, attention and context summaries and the item embeddings.
    Inspect(InspectArgs),
    /// Finite-difference check of every differentiable component.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic genre-drift corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Training sessions, one per line.
    #[arg(long)]
    train: PathBuf,
    /// Test sessions, encoded with the training vocabulary.
    #[arg(long)]
    test: Option<PathBuf>,
    /// `item<TAB>genre` lines.
    #[arg(long)]
    genres: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long, default_value_t = 1)]
    min_item_freq: usize,
    /// Tokens are `item:rating`; keep each session's top-rated items.
    #[arg(long)]
    max_rated: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, value_parser = parse_cell)]
    cell: CellKind,
    #[arg(long, value_parser = parse_attention, default_value = "none")]
    attention: AttentionMode,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus written by `prepare` or `synth`.
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    /// TOML or JSON training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Also score POP, S-POP and Item-KNN fitted on the training split.
    #[arg(long)]
    baselines: bool,
    /// Directory for `report.json`; the report always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    genres: usize,
    #[arg(long, default_value_t = 20)]
    items_per_genre: usize,
    #[arg(long, default_value_t = 2000)]
    sequences: usize,
    /// Held-out sequences drawn from an independent stream.
    #[arg(long, default_value_t = 0)]
    test_sequences: usize,
    /// Write the small memorizable corpus instead; the other shape flags
    /// are ignored.
    #[arg(long)]
    tiny: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_cell(s: &str) -> std::result::Result<CellKind, String> {
    s.parse().map_err(|e: hcrnn::Error| e.to_string())
}

fn parse_attention(s: &str) -> std::result::Result<AttentionMode, String> {
    s.parse().map_err(|e: hcrnn::Error| e.to_string())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<SessionCorpus> {
    SessionCorpus::load_json(path).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

/// Sequences of `split`, after checking the checkpoint shares the corpus
/// vocabulary.
fn split_of<'a>(ckpt: &Checkpoint, corpus: &'a SessionCorpus, split: Split) -> Result<&'a [Vec<usize>]> {
    if ckpt.vocab != corpus.vocab.items() {
        bail!("checkpoint vocabulary ({} items) differs from the corpus vocabulary ({} items)", ckpt.vocab.len(), corpus.num_items());
    }
    let seqs = match split {
        Split::Train => &corpus.sequences,
        Split::Test => &corpus.test,
    };
    if seqs.is_empty() {
        bail!("the corpus has no {} sequences", if matches!(split, Split::Test) { "test" } else { "training" });
    }
    Ok(seqs)
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let mut raw = load_sessions(&a.train)?;
    if a.max_rated {
        raw = keep_max_rated(raw)?;
    }
    let mut corpus = preprocess(&raw.sessions, a.min_len, a.min_item_freq)?;
    if let Some(test) = &a.test {
        let mut t = load_sessions(test)?;
        if a.max_rated {
            t = keep_max_rated(t)?;
        }
        corpus.set_test(&t.sessions, a.min_len);
    }
    if let Some(g) = &a.genres {
        corpus = corpus.with_genres(&load_genre_map(g)?);
    }
    create_dir(&a.out)?;
    corpus.save_json(&a.out.join("corpus.json"))?;
    eprintln!(
        "{} items, {} training and {} test sequences ({} blank lines skipped)",
        corpus.num_items(),
        corpus.sequences.len(),
        corpus.test.len(),
        raw.skipped
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<bool> {
    let corpus = load_corpus(&a.corpus)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    create_dir(&a.out)?;
    let outcome = train(&corpus, &cfg, a.model.cell, a.model.attention, |r| {
        let valid = r.valid_recall_20.map(|v| format!(" valid R@20 {v:.4}")).unwrap_or_default();
        eprintln!("epoch {:>3} loss {:.5} (ce {:.5}, kl {:.5}){valid}", r.epoch, r.loss, r.cross_entropy, r.kl);
    })?;
    let ckpt = &outcome.checkpoint;
    ckpt.save(&a.out.join("model.ckpt"))?;
    write(a.out.join("loss.csv"), ckpt.loss_log_csv())?;
    eprintln!("kept epoch {} of {}", ckpt.epoch, ckpt.history.len());
    if let Some(msg) = outcome.diverged {
        eprintln!("error: training diverged at {msg}; saved the last finite parameters");
        return Ok(false);
    }
    Ok(true)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let seqs = split_of(&ckpt, &corpus, a.split)?;
    let spec = ckpt.model.spec;
    let name = format!("{}+{}", spec.cell, spec.attention);
    let mut report = EvalReport { models: vec![ModelReport::new(name, &evaluate_checkpoint(&ckpt, seqs)?)?], analytics: None };
    if a.baselines {
        let n = corpus.num_items();
        let recs: Vec<Box<dyn Recommender>> = vec![
            Box::new(Pop::fit(&corpus.sequences, n)),
            Box::new(SessionPop::fit(&corpus.sequences, n)),
            Box::new(ItemKnn::fit(&corpus.sequences, n)),
        ];
        for r in &recs {
            report.models.push(ModelReport::new(r.name(), &evaluate_recommender(r.as_ref(), seqs)?)?);
        }
    }
    report.analytics = Some(trace_analytics(&trace_sequences(&ckpt.model, seqs)?, corpus.genres.as_ref()));
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write(dir.join("report.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.model)?;
    let corpus = load_corpus(&a.corpus)?;
    let seqs = split_of(&ckpt, &corpus, a.split)?;
    let summary = trace_analytics(&trace_sequences(&ckpt.model, seqs)?, corpus.genres.as_ref());
    create_dir(&a.out)?;
    write(a.out.join("attention.csv"), summary.attention_csv())?;
    write(a.out.join("gates.csv"), summary.gates_csv())?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    write(
        a.out.join("context.csv"),
        format!("quantity,mean\ndelta_h,{}\ndelta_c,{}\n", opt(summary.mean_delta_h), opt(summary.mean_delta_c)),
    )?;
    write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let emb = ckpt.model.params.get("embedding")?;
    let mut tsv = String::new();
    for (i, item) in ckpt.vocab.iter().enumerate() {
        let genre = corpus.genres.as_ref().and_then(|g| g.genre(i)).map(|k| corpus.genres.as_ref().unwrap().names[k].as_str());
        let row: Vec<String> = emb.row(i).iter().map(|v| v.to_string()).collect();
        tsv.push_str(&format!("{item}\t{}\t{}\n", genre.unwrap_or(""), row.join("\t")));
    }
    write(a.out.join("embeddings.tsv"), tsv)?;
    eprintln!("wrote traces of {} sequences to {}", summary.sequences, a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let rows = run_gradchecks(a.seed)?;
    println!("{:<24} {:>8} {:>14}  result", "component", "scalars", "max rel error");
    for r in &rows {
        println!("{:<24} {:>8} {:>14.3e}  {}", r.component, r.scalars, r.max_rel_error, if r.passed() { "pass" } else { "FAIL" });
    }
    let ok = rows.iter().all(|r| r.passed());
    println!("tolerance {TOLERANCE:.0e}: {}", if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn synth(a: SynthArgs) -> Result<()> {
    let corpus = if a.tiny {
        tiny_corpus(a.seed)
    } else {
        let cfg = SynthConfig { num_sequences: a.sequences, genres: a.genres, items_per_genre: a.items_per_genre, seed: a.seed, ..SynthConfig::default() };
        let mut c = generate_synthetic_drift(&cfg)?;
        if a.test_sequences > 0 {
            let test_cfg = SynthConfig { num_sequences: a.test_sequences, seed: a.seed.wrapping_add(1000), ..cfg };
            c.test = generate_synthetic_drift(&test_cfg)?.sequences;
        }
        c
    };
    create_dir(&a.out)?;
    let decode = |s: &[Vec<usize>]| s.iter().map(|q| corpus.decode(q)).collect::<Vec<_>>();
    write(a.out.join("train.txt"), format_sessions(&decode(&corpus.sequences)))?;
    if !corpus.test.is_empty() {
        write(a.out.join("test.txt"), format_sessions(&decode(&corpus.test)))?;
    }
    if let Some(g) = &corpus.genres {
        let tsv: String = corpus
            .vocab
            .items()
            .iter()
            .zip(&g.of_item)
            .filter_map(|(item, k)| k.map(|k| format!("{item}\t{}\n", g.names[k])))
            .collect();
        write(a.out.join("genres.tsv"), tsv)?;
    }
    corpus.save_json(&a.out.join("corpus.json"))?;
    eprintln!("{} items, {} sequences, {} test sequences", corpus.num_items(), corpus.sequences.len(), corpus.test.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Prepare(a) => prepare(a).map(|_| true),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate(a).map(|_| true),
        Command::Inspect(a) => inspect(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Synth(a) => synth(a).map(|_| true),
    }
}

fn main() -> ExitCode {
    // Usage errors exit with 2 inside `parse`.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

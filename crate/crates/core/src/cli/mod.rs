//! Command-line front end.

pub mod checkpoint;
pub mod settings;

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::corpus::{
    ingest, prefix_examples, preprocess, read_cache, synthesize, write_cache, Column, EventLogFormat, Example,
    PreprocessConfig, SessionCorpus, SynthSpec, TimeSplit,
};
use crate::disentangle::Activation;
use crate::diffcore::{GradCheckReport, Graph};
use crate::graphbuild::StabilityReading;
use crate::objective::{ContrastiveForm, Discriminator};
use crate::trainer::{
    ablate, evaluate, loss_gradcheck, metrics_csv, sweep_k, train_with, Model, TrainConfig, TrainError, TrainReport,
    Variant, DEFAULT_SWEEP,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, vocabulary_hash, Checkpoint, CheckpointError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

const DEFAULT_CORPUS: &str = "corpus.deisic";
const DEFAULT_CHECKPOINT: &str = "model.deisi";

#[derive(Parser, Debug)]
#[command(name = "deisi", version, about = "Session-based next-item recommendation with disentangled inter-session graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Turn a raw event log into a corpus cache.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic factor-structured corpus.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint; epoch reports go to stdout as JSON lines.
    Train(TrainArgs),
    /// Score a checkpoint on the test split; CSV to stdout.
    Evaluate(EvaluateArgs),
    /// Train the full model and both ablations, then print deltas against the full model.
    Ablate(AblateArgs),
    /// Train one model per factor count and print held-out P@20/M@20 as CSV.
    SweepK(SweepArgs),
    /// Compare analytic and finite-difference gradients of the total loss on a toy corpus.
    Gradcheck(GradcheckArgs),
    /// Print the inter-session adjacency of one batch as JSON.
    DumpGraph(DumpGraphArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Event log (tab-separated for .tsv/.txt, comma-separated otherwise).
    #[arg(long)]
    input: PathBuf,
    /// Corpus cache to write.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    out: PathBuf,
    /// Session id column, by header name or zero-based index.
    #[arg(long, default_value = "0")]
    col_session: String,
    /// Item id column, by header name or zero-based index.
    #[arg(long, default_value = "1")]
    col_item: String,
    /// Timestamp column, by header name or zero-based index.
    #[arg(long, default_value = "2")]
    col_time: String,
    /// Field delimiter; inferred from the file extension when omitted.
    #[arg(long)]
    delimiter: Option<char>,
    /// The first line is data, not a header.
    #[arg(long)]
    no_header: bool,
    /// Minimum raw frequency for an item to survive.
    #[arg(long, default_value_t = 5)]
    min_support: usize,
    /// Test window: sessions ending in the final day or week.
    #[arg(long, default_value = "week", value_parser = ["day", "week"])]
    split: String,
    /// Keep only this most recent fraction of sessions, applied before filtering.
    #[arg(long)]
    subsample_recent: Option<f64>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator seed.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of latent factors.
    #[arg(long, default_value_t = 2)]
    factors: usize,
    /// Values per factor.
    #[arg(long, default_value_t = 5)]
    values: usize,
    /// Number of sessions.
    #[arg(long, default_value_t = 200)]
    sessions: usize,
    /// Shortest session.
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    /// Longest session.
    #[arg(long, default_value_t = 8)]
    max_len: usize,
    /// Fraction of sessions with one frozen factor.
    #[arg(long, default_value_t = 0.5)]
    stability_mix: f64,
    /// Probability that a factor jumps to a random value.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Trailing fraction of sessions held out as test.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Corpus cache to write.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    out: PathBuf,
}

/// Model and optimisation settings shared by the training subcommands.
#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// File of key=value lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialisation, shuffling and corruption [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Embedding dimension [default: 100].
    #[arg(long)]
    d: Option<usize>,
    /// Number of factors [default: 5].
    #[arg(long)]
    k: Option<usize>,
    /// Sessions per batch [default: 100].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.001].
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the disentanglement loss [default: 0.01].
    #[arg(long)]
    beta1: Option<f64>,
    /// Weight of the contrastive loss [default: 0.005].
    #[arg(long)]
    beta2: Option<f64>,
    /// Training epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// full, no-factor or no-stability [default: full].
    #[arg(long)]
    variant: Option<Variant>,
    /// Gated propagation steps [default: 1].
    #[arg(long)]
    ggnn_steps: Option<usize>,
    /// Inter-session convolution layers [default: 1].
    #[arg(long)]
    inter_layers: Option<usize>,
    /// Factor projection activation: sigmoid, tanh, identity or relu [default: sigmoid].
    #[arg(long)]
    drl_activation: Option<Activation>,
    /// Separate factor projections for items and sessions.
    #[arg(long)]
    drl_untied: bool,
    /// Stability weighting: normalized or raw [default: normalized].
    #[arg(long)]
    stability_reading: Option<StabilityReading>,
    /// Inter-session convolution activation [default: identity].
    #[arg(long)]
    inter_activation: Option<Activation>,
    /// Contrastive discriminator: dot or bilinear [default: dot].
    #[arg(long)]
    discriminator: Option<Discriminator>,
    /// Contrastive loss form: bce or difference [default: bce].
    #[arg(long)]
    contrastive_form: Option<ContrastiveForm>,
}

fn json<T: Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("flag value serializes")
}

impl ModelArgs {
    fn resolve(&self) -> Result<TrainConfig, Failure> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
                settings::parse_config_text(&text).map_err(Failure::Usage)?
            }
            None => Vec::new(),
        };
        let mut flags: Vec<(&str, Value)> = Vec::new();
        macro_rules! flag {
            ($key:literal, $v:expr) => {
                if let Some(v) = $v {
                    flags.push(($key, json(v)));
                }
            };
        }
        flag!("seed", self.seed);
        flag!("d", self.d);
        flag!("k", self.k);
        flag!("batch_size", self.batch_size);
        flag!("learning_rate", self.lr);
        flag!("beta1", self.beta1);
        flag!("beta2", self.beta2);
        flag!("epochs", self.epochs);
        flag!("variant", self.variant);
        flag!("ggnn_steps", self.ggnn_steps);
        flag!("inter_layers", self.inter_layers);
        flag!("drl_activation", self.drl_activation);
        flag!("drl_tied", self.drl_untied.then_some(false));
        flag!("stability_reading", self.stability_reading);
        flag!("inter_activation", self.inter_activation);
        flag!("discriminator", self.discriminator);
        flag!("contrastive_form", self.contrastive_form);
        let cfg = settings::resolve(&file, &flags).map_err(Failure::Usage)?;
        eprintln!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus cache.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint to write.
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to score.
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    checkpoint: PathBuf,
    /// Corpus cache whose test split is scored.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    /// Ranking cutoff K; repeat for several [default: 10 and 20].
    #[arg(long = "k")]
    cutoffs: Vec<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Corpus cache.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Ranking cutoff K; repeat for several [default: 10 and 20].
    #[arg(long = "cutoff")]
    cutoffs: Vec<usize>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Corpus cache.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Factor counts to train, comma-separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP)]
    ks: Vec<usize>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Seed for the toy corpus, initialisation and corruption.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Embedding dimension.
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Number of factors.
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Number of toy sessions.
    #[arg(long, default_value_t = 5)]
    sessions: usize,
    /// Vocabulary size.
    #[arg(long, default_value_t = 12)]
    items: usize,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    /// Largest tolerated relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args, Debug)]
struct DumpGraphArgs {
    /// Checkpoint providing the embeddings.
    #[arg(long, default_value = DEFAULT_CHECKPOINT)]
    checkpoint: PathBuf,
    /// Corpus cache.
    #[arg(long, default_value = DEFAULT_CORPUS)]
    corpus: PathBuf,
    /// Take the batch from the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Zero-based batch index in corpus order.
    #[arg(long, default_value_t = 0)]
    batch: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.to_string())
    }
}

/// Parse `args` (program name first) and run the subcommand; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::SweepK(a) => cmd_sweep(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpGraph(a) => cmd_dump_graph(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => {
            let mut s = io::stdout().lock();
            s.write_all(text.as_bytes())?;
            s.flush()?;
        }
    }
    Ok(())
}

fn stats_line(corpus: &SessionCorpus, path: &Path) -> String {
    let v = serde_json::json!({ "corpus": path.display().to_string(), "stats": corpus.stats });
    v.to_string() + "\n"
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), Failure> {
    let delimiter = match a.delimiter {
        Some(c) if c.is_ascii() => Some(c as u8),
        Some(c) => return Err(Failure::Usage(format!("delimiter `{c}` is not a single byte"))),
        None => None,
    };
    if a.subsample_recent.is_some_and(|f| !(f > 0.0 && f <= 1.0)) {
        return Err(Failure::Usage("--subsample-recent must lie in (0, 1]".into()));
    }
    let format = EventLogFormat {
        delimiter,
        has_header: !a.no_header,
        session: Column::parse(&a.col_session),
        item: Column::parse(&a.col_item),
        time: Column::parse(&a.col_time),
    };
    let report = ingest(&a.input, &format)?;
    if report.malformed > 0 {
        eprintln!("skipped {} malformed lines", report.malformed);
    }
    let cfg = PreprocessConfig {
        min_support: a.min_support,
        split: if a.split == "day" { TimeSplit::LAST_DAY } else { TimeSplit::LAST_WEEK },
        subsample_recent: a.subsample_recent,
    };
    let corpus = preprocess(&report.events, &cfg)?;
    write_cache(&corpus, &a.out)?;
    emit(None, &stats_line(&corpus, &a.out))
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let spec = SynthSpec {
        num_factors: a.factors,
        values_per_factor: a.values,
        num_sessions: a.sessions,
        session_length_range: (a.min_len, a.max_len),
        stability_mix: a.stability_mix,
        transition_noise: a.noise,
        test_fraction: a.test_fraction,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let corpus = synthesize(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    write_cache(&corpus, &a.out)?;
    emit(None, &stats_line(&corpus, &a.out))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = a.model.resolve()?;
    let corpus = read_cache(&a.corpus)?;
    let mut failed = None;
    let (model, mut report) = train_with(&corpus.train, corpus.num_items(), &cfg, |e| {
        let line = serde_json::to_string(e).expect("report serializes") + "\n";
        if let Err(err) = emit(None, &line) {
            failed.get_or_insert(err);
        }
    })?;
    if let Some(err) = failed {
        return Err(err);
    }
    save_checkpoint(&model, &vocabulary_hash(&corpus.vocabulary), &a.out)?;
    report.checkpoint = Some(a.out.display().to_string());
    emit(None, &(checkpoint_line(&report) + "\n"))
}

fn checkpoint_line(report: &TrainReport) -> String {
    serde_json::json!({ "checkpoint": report.checkpoint }).to_string()
}

/// Load a checkpoint and a corpus that share a vocabulary.
fn load_pair(checkpoint: &Path, corpus: &Path) -> Result<(Model, SessionCorpus), Failure> {
    let ck = load_checkpoint(checkpoint)?;
    let corpus = read_cache(corpus)?;
    if ck.manifest.vocabulary_sha256 != vocabulary_hash(&corpus.vocabulary) || ck.model.num_items != corpus.num_items() {
        return Err(TrainError::VocabularyMismatch.into());
    }
    Ok((ck.model, corpus))
}

fn default_cutoffs(c: Vec<usize>) -> Result<Vec<usize>, Failure> {
    if c.contains(&0) {
        return Err(Failure::Usage("cutoffs must be positive".into()));
    }
    Ok(if c.is_empty() { vec![10, 20] } else { c })
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<(), Failure> {
    let cutoffs = default_cutoffs(a.cutoffs)?;
    let (model, corpus) = load_pair(&a.checkpoint, &a.corpus)?;
    let rows = evaluate(&model, &corpus.test, &cutoffs)?;
    emit(a.out.as_deref(), &metrics_csv(&rows)?)
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let cutoffs = default_cutoffs(a.cutoffs)?;
    let cfg = a.model.resolve()?;
    let corpus = read_cache(&a.corpus)?;
    let report = ablate(&corpus.train, &corpus.test, corpus.num_items(), &cfg, &cutoffs)?;
    emit(a.out.as_deref(), &report.table())
}

fn cmd_sweep(a: SweepArgs) -> Result<(), Failure> {
    let cfg = a.model.resolve()?;
    if a.ks.is_empty() || a.ks.contains(&0) {
        return Err(Failure::Usage("--ks needs positive factor counts".into()));
    }
    let corpus = read_cache(&a.corpus)?;
    let rows = sweep_k(&corpus.train, &corpus.test, corpus.num_items(), &cfg, &a.ks)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&bytes))
}

/// Random sessions of length 2 to 6 over `items` items, expanded into
/// prefix examples.
pub fn toy_examples(seed: u64, sessions: usize, items: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..sessions)
        .flat_map(|s| {
            let len = rng.random_range(2..=6);
            let seq: Vec<usize> = (0..len).map(|_| rng.random_range(0..items)).collect();
            prefix_examples(&seq, s)
        })
        .collect()
}

/// Gradient check of the total loss for a fresh model on a toy corpus.
pub fn toy_gradcheck(seed: u64, d: usize, k: usize, sessions: usize, items: usize, epsilon: f64) -> Result<GradCheckReport, TrainError> {
    let batch = toy_examples(seed, sessions, items);
    let cfg = TrainConfig {
        d,
        k,
        seed,
        batch_size: batch.len().max(2),
        ..TrainConfig::default()
    };
    let model = Model::init(&cfg, items)?;
    loss_gradcheck(&model, &batch, seed, epsilon)
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.sessions == 0 || a.items < 2 {
        return Err(Failure::Usage("need at least one session and two items".into()));
    }
    let report = toy_gradcheck(a.seed, a.d, a.k, a.sessions, a.items, a.epsilon)
        .map_err(|e| match e {
            TrainError::Config(m) => Failure::Usage(m),
            e => e.into(),
        })?;
    let worst = report.max_rel_error();
    let v = serde_json::json!({ "max_rel_error": worst, "tolerance": a.tol, "report": report });
    emit(None, &(serde_json::to_string_pretty(&v).expect("report serializes") + "\n"))?;
    if worst < a.tol {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("max relative error {worst:.3e} exceeds {:.1e}", a.tol)))
    }
}

#[derive(Serialize)]
struct GraphRow {
    factor: usize,
    anchor: usize,
    weights: Vec<f64>,
}

fn cmd_dump_graph(a: DumpGraphArgs) -> Result<(), Failure> {
    let (model, corpus) = load_pair(&a.checkpoint, &a.corpus)?;
    let split = if a.train_split { &corpus.train } else { &corpus.test };
    let batch = split
        .chunks(model.config.batch_size)
        .nth(a.batch)
        .ok_or_else(|| Failure::Usage(format!("batch {} is out of range", a.batch)))?;
    let mut g = Graph::new();
    let b = model.params.bind(&mut g)?;
    let fwd = model.forward(&mut g, &b, batch, None)?;
    let mut rows = Vec::new();
    for (factor, &adj) in fwd.adjacency.iter().enumerate() {
        let t = g.value(adj);
        for anchor in 0..t.rows() {
            rows.push(GraphRow {
                factor,
                anchor,
                weights: t.row_slice(anchor).to_vec(),
            });
        }
    }
    emit(a.out.as_deref(), &(serde_json::to_string(&rows).expect("rows serialize") + "\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["deisi", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["deisi", "train", "--no-such-flag"]), EXIT_USAGE);
        assert_eq!(run(["deisi", "train", "--k", "0"]), EXIT_USAGE);
        assert_eq!(run(["deisi", "evaluate", "--help"]), EXIT_OK);
    }

    #[test]
    fn toy_corpus_is_seeded() {
        let a = toy_examples(3, 5, 12);
        assert_eq!(a, toy_examples(3, 5, 12));
        assert!(a.iter().all(|e| e.target < 12 && e.prefix.items.iter().all(|&i| i < 12)));
        assert_eq!(a.iter().map(|e| e.origin).max(), Some(4));
    }
}

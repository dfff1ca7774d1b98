//! `goracle` command-line driver.
//!
//! Exit codes: 0 ok, 1 parse or I/O failure, 2 validation failure,
//! 3 partial failure, 64 usage error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use goracle::dataset::{BugMix, LabelSource};
use goracle::evaluation::{fit, run_ablation, run_crossval, Pipeline};
use goracle::model::CHECKPOINT_MAGIC;
use goracle::{
    emit_json, encode_binary, load_checkpoint, load_corpus, parse_bytes, predict, save_checkpoint, serialize_trace,
    synth_generate, tokenize, validate_trace, Corpus, CorpusManifest, DatasetError, Field, FieldSet, ModelConfig,
    ParsedTrace, SynthConfig, TraceFormat, TrainConfig,
};

const SEED_ENV: &str = "GORACLE_SEED";

const EXIT_IO: u8 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_PARTIAL: u8 = 3;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "goracle", version, about = "Classify concurrent-program execution traces as passing or failing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a trace and print it as JSON.
    Parse {
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
        /// Only check the trace; print diagnostics but no JSON.
        #[arg(long)]
        validate: bool,
    },
    /// Re-encode a trace in the other format.
    Convert {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum)]
        to: OutFormat,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
    },
    /// Write a seeded synthetic corpus and its manifest.
    Synth(SynthArgs),
    /// Train a classifier on a labeled corpus.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss log file; standard output when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Classify traces with a trained checkpoint.
    Classify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// Leave-one-program-out cross-validation.
    Crossval {
        #[command(flatten)]
        common: TrainArgs,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated projects to hold out; all when absent.
        #[arg(long, value_delimiter = ',')]
        hold_out: Option<Vec<String>>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Retrain with one field removed at a time.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "Off,Type,Ts,P,G,StkID,Stk")]
        fields_to_ablate: Vec<Field>,
        /// Seed of the 80/20 split; the training seed when absent.
        #[arg(long)]
        split_seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Describe a trace (events and tokens) or a checkpoint.
    Inspect {
        input: PathBuf,
        #[arg(long, default_value = "all")]
        fields: FieldSet,
        #[arg(long, value_enum, default_value_t = FormatArg::Auto)]
        format: FormatArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Auto,
    Binary,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Binary,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelArg {
    Signatures,
    Processor,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    projects: usize,
    #[arg(long, default_value_t = 40)]
    per_project: usize,
    #[arg(long, default_value_t = 0.5)]
    pass_fraction: f64,
    #[arg(long, default_value_t = 4)]
    events_min: usize,
    #[arg(long, default_value_t = 7)]
    events_max: usize,
    /// Weights of unmatched-block, double-create and race-window bugs.
    #[arg(long, value_delimiter = ',', num_args = 3, default_value = "1,1,1")]
    bug_mix: Vec<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = OutFormat::Binary)]
    format: OutFormat,
    #[arg(long, value_enum, default_value_t = LabelArg::Signatures)]
    labels: LabelArg,
    /// Zero every Off field (json only).
    #[arg(long)]
    zero_offsets: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Defaults to $GORACLE_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 2500)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_SEQ_LEN)]
    seq_len: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_EMBED_DIM)]
    embed_dim: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_LAYERS)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_HEADS)]
    heads: usize,
    /// Comma-separated event fields to serialize, or `all`.
    #[arg(long, default_value = "all")]
    fields: FieldSet,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: EXIT_IO, error }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

type CmdResult = Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Parse { input, format, validate } => cmd_parse(&input, format, validate),
        Command::Convert { input, out, to, format } => cmd_convert(&input, &out, to, format),
        Command::Synth(args) => cmd_synth(&args),
        Command::Train { common, out, log } => cmd_train(&common, &out, log.as_deref()),
        Command::Classify { checkpoint, traces } => cmd_classify(&checkpoint, &traces),
        Command::Crossval { common, out, hold_out, jobs } => cmd_crossval(&common, &out, hold_out.as_deref(), jobs),
        Command::Ablate { common, out, fields_to_ablate, split_seed, jobs } => {
            cmd_ablate(&common, &out, &fields_to_ablate, split_seed, jobs)
        }
        Command::Inspect { input, fields, format } => cmd_inspect(&input, fields, format),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn default_seed(flag: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| fail(EXIT_USAGE, anyhow!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn read_trace(path: &Path, format: FormatArg) -> anyhow::Result<ParsedTrace> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let format = match format {
        FormatArg::Auto => TraceFormat::detect(path, &bytes),
        FormatArg::Binary => TraceFormat::Binary,
        FormatArg::Json => TraceFormat::Json,
    };
    parse_bytes(&bytes, format).with_context(|| format!("parsing {} as {}", path.display(), format.name()))
}

/// Prints every violation and returns false when the trace is invalid.
fn report_violations(path: &Path, trace: &ParsedTrace) -> bool {
    let report = validate_trace(trace);
    for v in &report.violations {
        eprintln!("{}: {v}", path.display());
    }
    report.is_valid()
}

fn cmd_parse(input: &Path, format: FormatArg, validate_only: bool) -> CmdResult {
    let trace = read_trace(input, format)?;
    if !report_violations(input, &trace) {
        return Ok(EXIT_INVALID);
    }
    if validate_only {
        eprintln!("{}: {} events, {} stacks, valid", input.display(), trace.events.len(), trace.stacks.len());
    } else {
        emit(&(emit_json(&trace) + "\n"))?;
    }
    Ok(0)
}

/// Writes to standard output; a closed pipe is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    match io::stdout().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(anyhow::Error::from(e).context("writing output")),
        _ => Ok(()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn cmd_convert(input: &Path, out: &Path, to: OutFormat, format: FormatArg) -> CmdResult {
    let trace = read_trace(input, format)?;
    if !report_violations(input, &trace) {
        return Ok(EXIT_INVALID);
    }
    let bytes = match to {
        OutFormat::Binary => encode_binary(&trace).map_err(|e| fail(EXIT_INVALID, e.into()))?,
        OutFormat::Json => emit_json(&trace).into_bytes(),
    };
    write_file(out, &bytes)?;
    Ok(0)
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let cfg = SynthConfig {
        num_projects: a.projects,
        traces_per_project: a.per_project,
        pass_fraction: a.pass_fraction,
        events_min: a.events_min,
        events_max: a.events_max,
        bug_mix: BugMix([a.bug_mix[0], a.bug_mix[1], a.bug_mix[2]]),
        seed: default_seed(a.seed)?,
        format: match a.format {
            OutFormat::Binary => TraceFormat::Binary,
            OutFormat::Json => TraceFormat::Json,
        },
        label_source: match a.labels {
            LabelArg::Signatures => LabelSource::Signatures,
            LabelArg::Processor => LabelSource::Processor,
        },
        zero_offsets: a.zero_offsets,
    };
    cfg.validate().map_err(|e| fail(EXIT_USAGE, e.into()))?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = synth_generate(&cfg, &a.out).map_err(anyhow::Error::from)?;
    eprintln!("wrote {} traces to {}", manifest.entries.len(), a.out.display());
    Ok(0)
}

fn load(manifest: &Path) -> Result<Corpus, Failure> {
    let m = CorpusManifest::read(manifest).map_err(anyhow::Error::from)?;
    load_corpus(&m).map_err(|e| {
        let code = match e {
            DatasetError::InvalidTrace { .. } | DatasetError::InvalidLabel { .. } => EXIT_INVALID,
            _ => EXIT_IO,
        };
        fail(code, e.into())
    })
}

fn pipeline(a: &TrainArgs, seed: u64) -> Pipeline {
    let mut model = ModelConfig::new(0).with_embed_dim(a.embed_dim);
    model.seq_len = a.seq_len;
    model.num_layers = a.layers;
    model.num_heads = a.heads;
    let train = TrainConfig { steps: a.steps, batch_size: a.batch_size, learning_rate: a.lr, seed, class_weights: None };
    Pipeline { model, train, fields: a.fields }
}

fn header(a: &TrainArgs, seed: u64) -> String {
    format!(
        "# steps={} batch_size={} lr={} seed={} seq_len={} embed_dim={} layers={} heads={} fields={}",
        a.steps, a.batch_size, a.lr, seed, a.seq_len, a.embed_dim, a.layers, a.heads, a.fields
    )
}

fn cmd_train(a: &TrainArgs, out: &Path, log: Option<&Path>) -> CmdResult {
    let seed = default_seed(a.seed)?;
    let corpus = load(&a.manifest)?;
    let pipe = pipeline(a, seed);
    let items: Vec<_> = corpus.items.iter().collect();
    let (ckpt, losses) = fit(&items, &pipe, seed).map_err(anyhow::Error::from)?;
    write_file(out, &save_checkpoint(&ckpt))?;
    let mut text = header(a, seed) + "\n";
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{}\t{l:.6}\n", i + 1));
    }
    match log {
        Some(p) => write_file(p, text.as_bytes())?,
        None => emit(&text)?,
    }
    Ok(0)
}

fn cmd_classify(checkpoint: &Path, traces: &[PathBuf]) -> CmdResult {
    let bytes = fs::read(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let ckpt = load_checkpoint(&bytes).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut failed = 0;
    for path in traces {
        let outcome = read_trace(path, FormatArg::Auto).and_then(|t| {
            let seq = tokenize(&t, &ckpt.vocab, ckpt.fields, ckpt.config().seq_len);
            predict(&ckpt.params, &seq).map_err(anyhow::Error::from)
        });
        match outcome {
            Ok(p) => println!("{}\t{}\t{:.4}", path.display(), p.verdict, p.p_fail()),
            Err(e) => {
                failed += 1;
                eprintln!("{}: {e:#}", path.display());
            }
        }
    }
    Ok(if failed > 0 { EXIT_PARTIAL } else { 0 })
}

fn write_reports(dir: &Path, stem: &str, table: &str, jsonl: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join(format!("{stem}.txt")), table.as_bytes())?;
    write_file(&dir.join(format!("{stem}.jsonl")), jsonl.as_bytes())?;
    print!("{table}");
    Ok(())
}

fn cmd_crossval(a: &TrainArgs, out: &Path, hold_out: Option<&[String]>, jobs: usize) -> CmdResult {
    let seed = default_seed(a.seed)?;
    let corpus = load(&a.manifest)?;
    let report = run_crossval(&corpus, &pipeline(a, seed), hold_out, jobs).map_err(anyhow::Error::from)?;
    let table = format!("{}\n{}", header(a, seed), report.to_table());
    write_reports(out, "crossval", &table, &report.to_jsonl())?;
    Ok(0)
}

fn cmd_ablate(a: &TrainArgs, out: &Path, fields: &[Field], split_seed: Option<u64>, jobs: usize) -> CmdResult {
    let seed = default_seed(a.seed)?;
    let corpus = load(&a.manifest)?;
    let report = run_ablation(&corpus, &pipeline(a, seed), split_seed.unwrap_or(seed), fields, jobs)
        .map_err(anyhow::Error::from)?;
    let table = format!("{}\n{}", header(a, seed), report.to_table());
    write_reports(out, "ablation", &table, &report.to_jsonl())?;
    Ok(0)
}

fn cmd_inspect(input: &Path, fields: FieldSet, format: FormatArg) -> CmdResult {
    let bytes = fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ckpt = load_checkpoint(&bytes).with_context(|| format!("loading {}", input.display()))?;
        let c = ckpt.config();
        println!("checkpoint {}", input.display());
        println!("  seq_len {} embed_dim {} layers {} heads {} ffn {} mlp {}", c.seq_len, c.embed_dim, c.num_layers, c.num_heads, c.ffn_dim, c.mlp_hidden);
        println!("  vocabulary {} tokens, fields {}", ckpt.vocab.len(), ckpt.fields);
        println!("  parameters {}", ckpt.params.num_params());
        return Ok(0);
    }
    let trace = read_trace(input, format)?;
    let valid = report_violations(input, &trace);
    let mut by_type = std::collections::BTreeMap::new();
    for e in &trace.events {
        *by_type.entry(e.typ.name()).or_insert(0usize) += 1;
    }
    println!("trace {}: {} events, {} stacks", input.display(), trace.events.len(), trace.stacks.len());
    for (name, n) in by_type {
        println!("  {name:<14} {n}");
    }
    let tokens = serialize_trace(&trace, fields);
    emit(&format!("{} tokens ({fields}):\n{}\n", tokens.len(), tokens.join(" ")))?;
    Ok(if valid { 0 } else { EXIT_INVALID })
}

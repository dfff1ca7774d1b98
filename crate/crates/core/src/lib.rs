//! Pass/fail classification of concurrent-program execution traces.
//!
//! The pipeline reads a trace (binary `gotrace` stream or `ParseResult`
//! JSON), serializes selected event fields into keyword and digit tokens,
//! and classifies the fixed-length token sequence with a small transformer
//! encoder trained from scratch. [`evaluation`] drives leave-one-program-out
//! cross-validation and per-field ablation over labeled corpora.

pub mod dataset;
pub mod evaluation;
pub mod model;
pub mod parser;
pub mod tokenizer;
pub mod trace;

pub use parser::{emit_json, encode_binary, parse_binary, parse_bytes, parse_json, EncodeError, ParseError, TraceFormat};
pub use trace::{
    validate_trace, BugCategory, Event, EventType, Frame, ParsedTrace, StackTable, TraceLabel, ValidationReport,
    Verdict, Violation, ViolationKind,
};
pub use dataset::{
    load_corpus, split_lopo, synth_generate, synth_traces, BugKind, Corpus, CorpusManifest, DatasetError, LabeledTrace,
    SynthConfig,
};
pub use evaluation::{
    compute_metrics, run_ablation, run_crossval, AblationReport, CrossvalReport, EvalError, Metrics, Pipeline, Rate,
};
pub use tokenizer::{build_vocab, serialize_trace, tokenize, Field, FieldSet, TokenSequence, Vocabulary};
pub use model::{
    init_model, load_checkpoint, predict, save_checkpoint, train, Checkpoint, ModelConfig, ModelError, ModelParams,
    Prediction, TrainConfig,
};

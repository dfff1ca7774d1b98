//! Shared fixtures for the criterion benches.

use goracle::dataset::{synth_traces, SynthConfig};
use goracle::{build_vocab, serialize_trace, tokenize, FieldSet, ModelConfig, ParsedTrace, TokenSequence, Vocabulary};

/// Seeded generator traces with `events_min..=events_max` workload events.
pub fn traces(n: usize, events_min: usize, events_max: usize) -> Vec<ParsedTrace> {
    let cfg = SynthConfig { num_projects: 4, traces_per_project: n.div_ceil(4), events_min, events_max, ..SynthConfig::default() };
    synth_traces(&cfg).expect("valid config").into_iter().take(n).map(|t| t.trace).collect()
}

/// Token sequences of length `len` with the vocabulary they were built from.
pub fn sequences(traces: &[ParsedTrace], len: usize) -> (Vocabulary, Vec<TokenSequence>) {
    let vocab = build_vocab(traces.iter().map(|t| serialize_trace(t, FieldSet::ALL)));
    let seqs = traces.iter().map(|t| tokenize(t, &vocab, FieldSet::ALL, len)).collect();
    (vocab, seqs)
}

/// The reference architecture at a reduced sequence length.
pub fn model_config(vocab_size: usize, seq_len: usize) -> ModelConfig {
    ModelConfig { seq_len, ..ModelConfig::new(vocab_size) }
}

//! Labeled corpora: manifests, loading, leave-one-program-out splits and
//! the synthetic generator.
//!
//! A manifest is a `.manifest.jsonl` file with one record per trace:
//!
//! ```text
//! {"path":"k8s/0001.gotrace","format":"binary","verdict":"fail","project":"Kubernetes",
//!  "category":"Blocking","cause":"Communication Deadlock","subcause":"Channel","bug_id":"kubernetes#1"}
//! ```
//!
//! Relative paths resolve against the manifest's directory.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::parser::{parse_bytes, EncodeError, ParseError, TraceFormat};
use crate::trace::{validate_trace, BugCategory, LabelError, ParsedTrace, TraceLabel, Verdict};

pub use synth::{synth_generate, synth_traces, BugKind, BugMix, LabelSource, SynthConfig, SynthTrace, PROJECT_NAMES};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error("{path}: trace violates {count} invariant(s), first at event {first}")]
    InvalidTrace { path: PathBuf, count: usize, first: usize },
    #[error("{path}: {source}")]
    InvalidLabel {
        path: PathBuf,
        #[source]
        source: LabelError,
    },
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("path listed twice in manifest: {0}")]
    DuplicatePath(PathBuf),
    #[error("project {0:?} does not occur in the corpus")]
    UnknownProject(String),
    #[error("invalid synthetic corpus configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub format: TraceFormat,
    pub label: TraceLabel,
}

#[derive(Serialize, Deserialize)]
struct Record {
    path: String,
    format: TraceFormat,
    verdict: Verdict,
    project: String,
    #[serde(default)]
    category: Option<BugCategory>,
    #[serde(default)]
    cause: Option<String>,
    #[serde(default)]
    subcause: Option<String>,
    #[serde(default)]
    bug_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative entry paths are resolved against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Self {
        CorpusManifest { entries, root: root.into() }
    }

    /// Parses manifest text. Blank lines are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| DatasetError::BadManifest { line: i + 1, reason };
            let rec: Record = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
            let label = TraceLabel {
                verdict: rec.verdict,
                category: rec.category,
                cause: rec.cause,
                subcause: rec.subcause,
                project: rec.project,
                bug_id: rec.bug_id,
            };
            label.check().map_err(|e| bad(e.to_string()))?;
            let path = PathBuf::from(rec.path);
            if !seen.insert(path.clone()) {
                return Err(DatasetError::DuplicatePath(path));
            }
            entries.push(ManifestEntry { path, format: rec.format, label });
        }
        Ok(CorpusManifest { entries, root: root.into() })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        CorpusManifest::parse(&text, root)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let rec = Record {
                path: e.path.to_string_lossy().into_owned(),
                format: e.format,
                verdict: e.label.verdict,
                project: e.label.project.clone(),
                category: e.label.category,
                cause: e.label.cause.clone(),
                subcause: e.label.subcause.clone(),
                bug_id: e.label.bug_id.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl()).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Distinct project names, sorted.
    pub fn projects(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<_> = self.entries.iter().map(|e| e.label.project.clone()).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub path: PathBuf,
    pub trace: ParsedTrace,
    pub label: TraceLabel,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub pass: usize,
    pub fail: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub items: Vec<LabeledTrace>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Distinct project names, sorted.
    pub fn projects(&self) -> Vec<String> {
        self.counts().into_keys().collect()
    }

    /// Pass/fail counts per project.
    pub fn counts(&self) -> BTreeMap<String, ClassCounts> {
        let mut out: BTreeMap<String, ClassCounts> = BTreeMap::new();
        for item in &self.items {
            let c = out.entry(item.label.project.clone()).or_default();
            match item.label.verdict {
                Verdict::Pass => c.pass += 1,
                Verdict::Fail => c.fail += 1,
            }
        }
        out
    }
}

/// Reads, parses and validates every trace in `manifest`.
pub fn load_corpus(manifest: &CorpusManifest) -> Result<Corpus, DatasetError> {
    if manifest.entries.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let mut items = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = manifest.resolve(entry);
        let bytes = fs::read(&path).map_err(|source| DatasetError::Io { path: path.clone(), source })?;
        let trace = parse_bytes(&bytes, entry.format).map_err(|source| DatasetError::Parse { path: path.clone(), source })?;
        let report = validate_trace(&trace);
        if let Some(first) = report.violations.first() {
            return Err(DatasetError::InvalidTrace { path, count: report.violations.len(), first: first.index });
        }
        entry.label.check().map_err(|source| DatasetError::InvalidLabel { path: path.clone(), source })?;
        items.push(LabeledTrace { path, trace, label: entry.label.clone() });
    }
    Ok(Corpus { items })
}

/// Leave-one-program-out split: `test` holds exactly the traces of
/// `held_out`, `train` everything else, both in corpus order.
#[derive(Debug, Clone)]
pub struct LopoSplit<'a> {
    pub train: Vec<&'a LabeledTrace>,
    pub test: Vec<&'a LabeledTrace>,
}

pub fn split_lopo<'a>(corpus: &'a Corpus, held_out: &str) -> Result<LopoSplit<'a>, DatasetError> {
    let (test, train): (Vec<_>, Vec<_>) = corpus.items.iter().partition(|t| t.label.project == held_out);
    if test.is_empty() {
        return Err(DatasetError::UnknownProject(held_out.to_string()));
    }
    Ok(LopoSplit { train, test })
}

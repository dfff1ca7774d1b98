//! Metrics, leave-one-program-out cross-validation and per-field ablation.
//!
//! Failing traces are the positive class: TPR is accuracy on failing
//! traces, TNR accuracy on passing ones.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dataset::{split_lopo, ClassCounts, Corpus, DatasetError, LabeledTrace};
use crate::model::{
    init_model, predict_logits, train, Checkpoint, ModelConfig, ModelError, Prediction, TrainConfig,
};
use crate::tokenizer::{build_vocab, serialize_trace, Field, FieldSet, TokenSequence, TokenizerError, Vocabulary, UNK};
use crate::trace::Verdict;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("no items to score")]
    Empty,
    #[error("cross-validation needs at least 2 projects, found {0}")]
    TooFewProjects(usize),
    #[error("fold {project}: {source}")]
    Fold {
        project: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("ablation arm without {field}: {source}")]
    Arm {
        field: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error("split leaves an empty {0} set")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

/// An exact fraction; `None` where a rate has an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rate {
    pub num: usize,
    pub den: usize,
}

impl Rate {
    fn new(num: usize, den: usize) -> Option<Rate> {
        (den > 0).then_some(Rate { num, den })
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Whole percent, halves rounded up.
    pub fn percent(self) -> usize {
        (200 * self.num + self.den) / (2 * self.den)
    }
}

/// Renders an optional rate as a whole percent or `n/a`.
pub fn fmt_rate(r: Option<Rate>) -> String {
    r.map_or_else(|| "n/a".to_string(), |r| format!("{}%", r.percent()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Metrics {
    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }

    pub fn tpr(&self) -> Option<Rate> {
        Rate::new(self.tp, self.positives())
    }

    pub fn tnr(&self) -> Option<Rate> {
        Rate::new(self.tn, self.negatives())
    }

    pub fn total(&self) -> Option<Rate> {
        Rate::new(self.tp + self.tn, self.positives() + self.negatives())
    }

    pub fn add(&mut self, other: &Metrics) {
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
        self.fp += other.fp;
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TPR {} TNR {} total {}", fmt_rate(self.tpr()), fmt_rate(self.tnr()), fmt_rate(self.total()))
    }
}

pub fn compute_metrics(predictions: &[Verdict], labels: &[Verdict]) -> Result<Metrics, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut m = Metrics::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (l, p) {
            (Verdict::Fail, Verdict::Fail) => m.tp += 1,
            (Verdict::Fail, Verdict::Pass) => m.fn_ += 1,
            (Verdict::Pass, Verdict::Pass) => m.tn += 1,
            (Verdict::Pass, Verdict::Fail) => m.fp += 1,
        }
    }
    Ok(m)
}

/// Everything needed to turn labeled traces into a trained classifier.
/// `model.vocab_size` is ignored; the vocabulary comes from the training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fields: FieldSet,
}

impl Pipeline {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Pipeline { model, train, fields: FieldSet::ALL }
    }
}

/// Vocabulary over the serialized training traces.
pub fn train_vocab(items: &[&LabeledTrace], fields: FieldSet) -> Vocabulary {
    build_vocab(items.iter().map(|t| serialize_trace(&t.trace, fields)))
}

fn sequences(items: &[&LabeledTrace], vocab: &Vocabulary, fields: FieldSet, len: usize) -> Vec<TokenSequence> {
    items
        .iter()
        .map(|t| TokenSequence::from_tokens(&serialize_trace(&t.trace, fields), vocab, len))
        .collect()
}

/// Mixes a base seed with a tag so derived streams are independent.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Trains a fresh model on `items`. Initialization uses `init_seed`;
/// batch sampling and dropout use `pipe.train.seed`.
pub fn fit(items: &[&LabeledTrace], pipe: &Pipeline, init_seed: u64) -> Result<(Checkpoint, Vec<f64>), EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptySplit("training"));
    }
    let vocab = train_vocab(items, pipe.fields);
    let cfg = ModelConfig { vocab_size: vocab.len(), ..pipe.model };
    let seqs = sequences(items, &vocab, pipe.fields, cfg.seq_len);
    let data: Vec<(TokenSequence, usize)> =
        seqs.into_iter().zip(items).map(|(s, t)| (s, t.label.verdict.class())).collect();
    let out = train(init_model(&cfg, init_seed)?, &data, &pipe.train)?;
    Ok((Checkpoint { params: out.params, vocab, fields: pipe.fields }, out.losses))
}

const EVAL_BATCH: usize = 32;

/// Predictions for `items` in order.
pub fn classify(ckpt: &Checkpoint, items: &[&LabeledTrace]) -> Result<Vec<Prediction>, EvalError> {
    let seqs = sequences(items, &ckpt.vocab, ckpt.fields, ckpt.config().seq_len);
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_BATCH) {
        out.extend(predict_logits(&ckpt.params, chunk)?);
    }
    Ok(out)
}

/// Scores `ckpt` on `items`; also counts test tokens outside its vocabulary.
pub fn evaluate(ckpt: &Checkpoint, items: &[&LabeledTrace]) -> Result<(Metrics, usize), EvalError> {
    let preds: Vec<Verdict> = classify(ckpt, items)?.into_iter().map(|p| p.verdict).collect();
    let labels: Vec<Verdict> = items.iter().map(|t| t.label.verdict).collect();
    let seqs = sequences(items, &ckpt.vocab, ckpt.fields, ckpt.config().seq_len);
    let unk = seqs.iter().map(|s| s.ids.iter().filter(|&&i| i == UNK).count()).sum();
    Ok((compute_metrics(&preds, &labels)?, unk))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub project: String,
    pub metrics: Metrics,
    pub train_size: usize,
    pub test_size: usize,
    /// Held-out tokens that mapped to UNK under the fold's vocabulary.
    pub unk_tokens: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport {
    /// One entry per held-out project, sorted by name.
    pub folds: Vec<FoldResult>,
}

impl CrossvalReport {
    /// Confusion counts summed over folds.
    pub fn pooled(&self) -> Metrics {
        let mut m = Metrics::default();
        for f in &self.folds {
            m.add(&f.metrics);
        }
        m
    }

    pub fn get(&self, project: &str) -> Option<&FoldResult> {
        self.folds.iter().find(|f| f.project == project)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>6} {:>5} {:>5} {:>5} {:>5} {:>6} {:>6} {:>6}\n", "fold", "n", "tp", "fn", "tn", "fp", "TPR", "TNR", "total");
        let mut row = |name: &str, n: usize, m: &Metrics| {
            out.push_str(&format!(
                "{:<16} {:>6} {:>5} {:>5} {:>5} {:>5} {:>6} {:>6} {:>6}\n",
                name,
                n,
                m.tp,
                m.fn_,
                m.tn,
                m.fp,
                fmt_rate(m.tpr()),
                fmt_rate(m.tnr()),
                fmt_rate(m.total())
            ));
        };
        for f in &self.folds {
            row(&f.project, f.test_size, &f.metrics);
        }
        let pooled = self.pooled();
        row("pooled", pooled.positives() + pooled.negatives(), &pooled);
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.folds.iter().map(|f| record_line("fold", &f.project, &f.metrics, None) + "\n").collect()
    }
}

#[derive(Serialize)]
struct DeltaRecord {
    delta_tnr: Option<f64>,
    delta_tpr: Option<f64>,
    delta_total: Option<f64>,
}

/// One machine-readable report line; undefined rates are `null`.
#[derive(Serialize)]
struct Record<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    fold: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<&'a str>,
    tp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    tn: usize,
    fp: usize,
    tpr: Option<f64>,
    tnr: Option<f64>,
    total: Option<f64>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    deltas: Option<DeltaRecord>,
}

fn record_line(key: &str, name: &str, m: &Metrics, deltas: Option<&Deltas>) -> String {
    let rec = Record {
        fold: (key == "fold").then_some(name),
        field: (key == "field").then_some(name),
        tp: m.tp,
        fn_: m.fn_,
        tn: m.tn,
        fp: m.fp,
        tpr: m.tpr().map(Rate::value),
        tnr: m.tnr().map(Rate::value),
        total: m.total().map(Rate::value),
        deltas: deltas.map(|d| DeltaRecord { delta_tnr: d.tnr, delta_tpr: d.tpr, delta_total: d.total }),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

/// Runs `f` over `0..n` on up to `jobs` threads; results come back in index order.
fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = (0..jobs)
            .map(|j| s.spawn(move || (j..n).step_by(jobs).map(|i| (i, f(i))).collect::<Vec<_>>()))
            .collect();
        for h in handles {
            for (i, v) in h.join().expect("worker thread panicked") {
                slots[i] = Some(v);
            }
        }
    });
    slots.into_iter().map(|v| v.expect("every index computed")).collect()
}

/// Leave-one-program-out cross-validation over `projects` (all corpus
/// projects when `None`). Each fold builds its vocabulary from its own
/// training split and seeds initialization and sampling from
/// `pipe.train.seed` and the held-out project name.
pub fn run_crossval(
    corpus: &Corpus,
    pipe: &Pipeline,
    projects: Option<&[String]>,
    jobs: usize,
) -> Result<CrossvalReport, EvalError> {
    let all = corpus.projects();
    if all.len() < 2 {
        return Err(EvalError::TooFewProjects(all.len()));
    }
    let mut chosen: Vec<String> = match projects {
        Some(p) => p.to_vec(),
        None => all,
    };
    chosen.sort();
    chosen.dedup();
    let results = run_indexed(chosen.len(), jobs, |i| {
        let project = &chosen[i];
        let fold = || -> Result<FoldResult, EvalError> {
            let split = split_lopo(corpus, project)?;
            let mut fold_pipe = pipe.clone();
            fold_pipe.train.seed = derive_seed(pipe.train.seed, &format!("train/{project}"));
            let (ckpt, losses) = fit(&split.train, &fold_pipe, derive_seed(pipe.train.seed, &format!("init/{project}")))?;
            let (metrics, unk_tokens) = evaluate(&ckpt, &split.test)?;
            Ok(FoldResult {
                project: project.clone(),
                metrics,
                train_size: split.train.len(),
                test_size: split.test.len(),
                unk_tokens,
                final_loss: losses.last().copied().unwrap_or(f64::NAN),
            })
        };
        fold().map_err(|e| EvalError::Fold { project: project.clone(), source: Box::new(e) })
    });
    Ok(CrossvalReport { folds: results.into_iter().collect::<Result<_, _>>()? })
}

/// Percentage-point changes against the baseline; `None` where either rate
/// is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deltas {
    pub tnr: Option<f64>,
    pub tpr: Option<f64>,
    pub total: Option<f64>,
}

impl Deltas {
    fn between(base: &Metrics, arm: &Metrics) -> Self {
        let d = |a: Option<Rate>, b: Option<Rate>| Some(100.0 * (b?.value() - a?.value()));
        Deltas {
            tnr: d(base.tnr(), arm.tnr()),
            tpr: d(base.tpr(), arm.tpr()),
            total: d(base.total(), arm.total()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationArm {
    pub metrics: Metrics,
    pub deltas: Deltas,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub train_counts: ClassCounts,
    pub test_counts: ClassCounts,
    pub baseline: Metrics,
    pub per_field: BTreeMap<Field, AblationArm>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "train: {} passing / {} failing; test: {} passing / {} failing\n",
            self.train_counts.pass, self.train_counts.fail, self.test_counts.pass, self.test_counts.fail
        );
        out.push_str(&format!("{:<10} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n", "removed", "TPR", "TNR", "total", "dTPR", "dTNR", "dtotal"));
        let pts = |x: Option<f64>| x.map_or_else(|| "n/a".to_string(), |v| format!("{v:+.0}"));
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6}\n",
            "none",
            fmt_rate(self.baseline.tpr()),
            fmt_rate(self.baseline.tnr()),
            fmt_rate(self.baseline.total())
        ));
        for (field, arm) in &self.per_field {
            out.push_str(&format!(
                "{:<10} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
                field.name(),
                fmt_rate(arm.metrics.tpr()),
                fmt_rate(arm.metrics.tnr()),
                fmt_rate(arm.metrics.total()),
                pts(arm.deltas.tpr),
                pts(arm.deltas.tnr),
                pts(arm.deltas.total)
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = record_line("field", "baseline", &self.baseline, None) + "\n";
        for (field, arm) in &self.per_field {
            out.push_str(&record_line("field", field.name(), &arm.metrics, Some(&arm.deltas)));
            out.push('\n');
        }
        out
    }
}

/// Seeded 80/20 split, stratified by verdict so both sides keep the
/// corpus's class balance. Returns (train, test) in corpus order.
pub fn holdout_split(corpus: &Corpus, seed: u64) -> (Vec<&LabeledTrace>, Vec<&LabeledTrace>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test_idx = Vec::new();
    for verdict in [Verdict::Pass, Verdict::Fail] {
        let mut idx: Vec<usize> =
            corpus.items.iter().enumerate().filter(|(_, t)| t.label.verdict == verdict).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * 0.2).round() as usize;
        test_idx.extend_from_slice(&idx[..n_test]);
    }
    test_idx.sort_unstable();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, t) in corpus.items.iter().enumerate() {
        if test_idx.binary_search(&i).is_ok() {
            test.push(t);
        } else {
            train.push(t);
        }
    }
    (train, test)
}

fn counts(items: &[&LabeledTrace]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for t in items {
        match t.label.verdict {
            Verdict::Pass => c.pass += 1,
            Verdict::Fail => c.fail += 1,
        }
    }
    c
}

/// Baseline with `pipe.fields`, then one arm per field in `ablate` with that
/// field removed. Every run uses the same split, seeds and hyperparameters.
pub fn run_ablation(
    corpus: &Corpus,
    pipe: &Pipeline,
    split_seed: u64,
    ablate: &[Field],
    jobs: usize,
) -> Result<AblationReport, EvalError> {
    if corpus.is_empty() {
        return Err(EvalError::Empty);
    }
    let (train_set, test_set) = holdout_split(corpus, split_seed);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(EvalError::EmptySplit(if train_set.is_empty() { "training" } else { "test" }));
    }
    let mut arms: Vec<Option<Field>> = vec![None];
    arms.extend(ablate.iter().copied().map(Some));
    let init_seed = derive_seed(pipe.train.seed, "init/ablation");
    let results = run_indexed(arms.len(), jobs, |i| {
        let run = || -> Result<Metrics, EvalError> {
            let mut arm_pipe = pipe.clone();
            if let Some(f) = arms[i] {
                arm_pipe.fields = pipe.fields.without(f)?;
            }
            let (ckpt, _) = fit(&train_set, &arm_pipe, init_seed)?;
            Ok(evaluate(&ckpt, &test_set)?.0)
        };
        run().map_err(|e| match arms[i] {
            Some(f) => EvalError::Arm { field: f.name().to_string(), source: Box::new(e) },
            None => e,
        })
    });
    let mut results = results.into_iter();
    let baseline = results.next().expect("baseline arm")?;
    let mut per_field = BTreeMap::new();
    for (field, res) in ablate.iter().zip(results) {
        let metrics = res?;
        per_field.insert(*field, AblationArm { metrics, deltas: Deltas::between(&baseline, &metrics) });
    }
    Ok(AblationReport { train_counts: counts(&train_set), test_counts: counts(&test_set), baseline, per_field })
}

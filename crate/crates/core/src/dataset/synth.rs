//! Synthetic labeled traces.
//!
//! Each trace models a small Go program: a processor starts, `main` runs
//! and performs a handful of actions (syscalls, logging, spawning workers,
//! mutex waits that are always released, sleeps). Failing traces additionally
//! carry one bug signature:
//!
//! * `UnmatchedBlock`: a goroutine blocks on a channel and no later
//!   `GoUnblock` names it.
//! * `DoubleCreate`: two `GoCreate` records carry the same goroutine id.
//! * `RaceWindow`: two goroutines on one processor emit `User` events with
//!   identical text.
//!
//! With [`LabelSource::Processor`] no signatures are injected; passing
//! traces run on processors 0–1 and failing ones on 2–3, so the label is a
//! function of P alone.
//!
//! Every trace is canonicalized by a binary encode/parse round trip, so
//! offsets are real byte offsets and `seq` is the event index.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, DatasetError, ManifestEntry};
use crate::parser::{emit_json, encode_binary, parse_binary, TraceFormat};
use crate::trace::{BugCategory, Event, EventType, Frame, ParsedTrace, TraceLabel, Verdict};

/// Project names used for the first eight synthetic projects.
pub const PROJECT_NAMES: [&str; 8] =
    ["Kubernetes", "Docker", "Syncthing", "Serving", "Istio", "CockroachDB", "Etcd", "Grpc-go"];

const VERBS: [&str; 8] = ["run", "serve", "handle", "sync", "watch", "apply", "dial", "flush"];
const LOG_MESSAGES: [&str; 6] = ["start", "ready", "tick", "flush", "retry", "done"];
const RACE_MESSAGES: [&str; 2] = ["counter", "cache"];
const RESTART_FN: &str = "lifecycle.(*Group).restart";
const RACE_FN: &str = "state.(*Shared).update";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BugKind {
    UnmatchedBlock,
    DoubleCreate,
    RaceWindow,
}

impl BugKind {
    pub const ALL: [BugKind; 3] = [BugKind::UnmatchedBlock, BugKind::DoubleCreate, BugKind::RaceWindow];

    /// A mix that injects only `self`.
    pub fn only(self) -> BugMix {
        let mut w = [0.0; 3];
        w[self as usize] = 1.0;
        BugMix(w)
    }

    /// (category, cause, subcause) in the GoBench taxonomy.
    pub fn taxonomy(self) -> (BugCategory, &'static str, &'static str) {
        match self {
            BugKind::UnmatchedBlock => (BugCategory::Blocking, "Communication Deadlock", "Channel"),
            BugKind::DoubleCreate => (BugCategory::Blocking, "Resource Deadlock", "Double locking"),
            BugKind::RaceWindow => (BugCategory::NonBlocking, "Traditional", "Data race"),
        }
    }
}

/// Relative weights of [`BugKind::ALL`] among failing traces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BugMix(pub [f64; 3]);

impl Default for BugMix {
    fn default() -> Self {
        BugMix([1.0; 3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Signatures,
    Processor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_projects: usize,
    pub traces_per_project: usize,
    /// Share of passing traces per project, rounded to whole traces.
    pub pass_fraction: f64,
    /// Bounds on the number of events before project drift is added.
    /// Failing traces can end one or two events short, since room is kept
    /// for the injected signature.
    pub events_min: usize,
    pub events_max: usize,
    pub bug_mix: BugMix,
    pub seed: u64,
    pub format: TraceFormat,
    pub label_source: LabelSource,
    /// Zero every `Off` field, leaving a constant decoy. JSON only, since
    /// binary files carry real offsets.
    pub zero_offsets: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_projects: 4,
            traces_per_project: 40,
            pass_fraction: 0.5,
            events_min: 4,
            events_max: 7,
            bug_mix: BugMix::default(),
            seed: 0,
            format: TraceFormat::Binary,
            label_source: LabelSource::Signatures,
            zero_offsets: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::InvalidConfig(m.to_string()));
        if self.num_projects == 0 || self.traces_per_project == 0 {
            return bad("num_projects and traces_per_project must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.pass_fraction) {
            return bad("pass_fraction must lie in [0, 1]");
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return bad("need 1 <= events_min <= events_max");
        }
        let w = &self.bug_mix.0;
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("bug_mix weights must be non-negative");
        }
        if self.label_source == LabelSource::Signatures && self.pass_fraction < 1.0 && w.iter().sum::<f64>() <= 0.0 {
            return bad("bug_mix must give some kind a positive weight");
        }
        if self.zero_offsets && self.format != TraceFormat::Json {
            return bad("zero_offsets requires the json format");
        }
        Ok(())
    }

    pub fn project_name(index: usize) -> String {
        PROJECT_NAMES.get(index).map_or_else(|| format!("Project{}", index + 1), |s| s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTrace {
    pub trace: ParsedTrace,
    pub label: TraceLabel,
    /// The injected signature of a failing trace.
    pub bug: Option<BugKind>,
}

/// Seeded per-project differences.
struct Profile {
    name: String,
    pkg: String,
    funcs: Vec<String>,
    event_shift: usize,
    ts_base: u64,
    ts_step: u64,
    /// Weights of syscall, log, spawn, lock, sleep.
    actions: [f64; 5],
}

impl Profile {
    fn draw(index: usize, rng: &mut ChaCha8Rng) -> Self {
        let name = SynthConfig::project_name(index);
        let pkg: String = name.to_lowercase().chars().filter(char::is_ascii_alphanumeric).collect();
        let mut verbs = VERBS.to_vec();
        verbs.shuffle(rng);
        let funcs = verbs[..3].iter().map(|v| format!("{pkg}.{v}")).collect();
        let mut actions = [0.0; 5];
        for a in &mut actions {
            *a = rng.gen_range(0.5..2.0);
        }
        Profile {
            name,
            pkg,
            funcs,
            event_shift: rng.gen_range(0..=1),
            ts_base: rng.gen_range(0..10),
            ts_step: rng.gen_range(1..=4),
            actions,
        }
    }
}

/// Accumulates events for one trace.
struct Builder<'a> {
    prof: &'a Profile,
    events: Vec<Event>,
    stacks: BTreeMap<Vec<Frame>, u64>,
    ts: u64,
    p: i64,
    g: u64,
    next_g: u64,
    children: Vec<u64>,
    messages: Vec<&'static str>,
}

impl<'a> Builder<'a> {
    fn new(prof: &'a Profile, p: i64, rng: &mut ChaCha8Rng) -> Self {
        let mut messages = LOG_MESSAGES.to_vec();
        messages.shuffle(rng);
        let mut b = Builder {
            prof,
            events: Vec::new(),
            stacks: BTreeMap::new(),
            ts: prof.ts_base,
            p,
            g: 0,
            next_g: 2,
            children: Vec::new(),
            messages,
        };
        let mut start = Event::new(EventType::ProcStart);
        start.p = p;
        start.ts = b.ts;
        b.events.push(start);
        b.switch_to(1, rng);
        b
    }

    fn frame(&self, func: &str, line: u64) -> Frame {
        let pc = 0x40_0000 + func.bytes().fold(0u64, |h, c| h.wrapping_mul(31).wrapping_add(c as u64) % 0xf_ffff) + line;
        let file = format!("{}/{}.go", self.prof.pkg, func.rsplit('.').next().unwrap_or(func).trim_end_matches(')'));
        Frame::new(pc, func, file, line)
    }

    fn push(&mut self, typ: EventType, stack: Option<Frame>, rng: &mut ChaCha8Rng) -> &mut Event {
        self.ts += rng.gen_range(self.prof.ts_step..=2 * self.prof.ts_step);
        let mut ev = Event::new(typ);
        ev.ts = self.ts;
        ev.p = self.p;
        ev.g = self.g;
        if let Some(f) = stack {
            let frames = vec![f];
            let next = self.stacks.len() as u64 + 1;
            ev.stk_id = *self.stacks.entry(frames.clone()).or_insert(next);
            ev.stk = frames;
        }
        self.events.push(ev);
        self.events.last_mut().expect("just pushed")
    }

    fn switch_to(&mut self, g: u64, rng: &mut ChaCha8Rng) {
        self.g = g;
        let ev = self.push(EventType::GoStart, None, rng);
        ev.args[0] = g;
    }

    fn project_frame(&self, rng: &mut ChaCha8Rng) -> Frame {
        let f = self.prof.funcs.choose(rng).expect("three functions").clone();
        self.frame(&f, rng.gen_range(10..100))
    }

    fn spawn(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        let child = self.next_g;
        self.next_g += 1;
        self.children.push(child);
        let f = self.project_frame(rng);
        self.push(EventType::GoCreate, Some(f), rng).args[0] = child;
        child
    }

    fn other_goroutine(&mut self, rng: &mut ChaCha8Rng) -> u64 {
        let others: Vec<u64> = std::iter::once(1).chain(self.children.iter().copied()).filter(|&g| g != self.g).collect();
        match others.choose(rng) {
            Some(&g) => g,
            None => self.spawn(rng),
        }
    }

    /// One ordinary action; returns the number of events it added.
    fn filler(&mut self, budget: usize, rng: &mut ChaCha8Rng) -> usize {
        let before = self.events.len();
        let mut w = self.prof.actions;
        if budget < 3 {
            w[3] = 0.0;
        }
        if self.messages.is_empty() {
            w[1] = 0.0;
        }
        let total: f64 = w.iter().sum();
        let mut x = rng.gen_range(0.0..total);
        let mut pick = 0;
        while x >= w[pick] {
            x -= w[pick];
            pick += 1;
        }
        match pick {
            0 => {
                let f = self.project_frame(rng);
                self.push(EventType::GoSysCall, Some(f), rng);
            }
            1 => {
                let msg = self.messages.pop().expect("checked non-empty");
                let f = self.project_frame(rng);
                self.push(EventType::User, Some(f), rng).sargs = vec![msg.to_string()];
            }
            2 => {
                self.spawn(rng);
            }
            3 => {
                // A mutex or condition wait that another goroutine releases.
                let waiter = self.g;
                let (typ, wait, wake) = if rng.gen_bool(0.5) {
                    (EventType::GoBlockSync, "sync.(*Mutex).Lock", "sync.(*Mutex).Unlock")
                } else {
                    (EventType::GoBlockCond, "sync.(*Cond).Wait", "sync.(*Cond).Signal")
                };
                let f = self.frame(wait, rng.gen_range(10..100));
                self.push(typ, Some(f), rng);
                let other = self.other_goroutine(rng);
                self.switch_to(other, rng);
                let f = self.frame(wake, rng.gen_range(10..100));
                self.push(EventType::GoUnblock, Some(f), rng).args[0] = waiter;
            }
            _ => {
                let f = self.frame("time.Sleep", rng.gen_range(10..100));
                self.push(EventType::GoSleep, Some(f), rng);
            }
        }
        self.events.len() - before
    }

    fn inject(&mut self, bug: BugKind, rng: &mut ChaCha8Rng) {
        match bug {
            BugKind::UnmatchedBlock => {
                let (typ, func) = *[
                    (EventType::GoBlockRecv, "runtime.chanrecv1"),
                    (EventType::GoBlockSend, "runtime.chansend1"),
                    (EventType::GoBlockSelect, "runtime.selectgo"),
                ]
                .choose(rng)
                .expect("non-empty");
                let f = self.frame(func, rng.gen_range(10..100));
                self.push(typ, Some(f), rng);
            }
            BugKind::DoubleCreate => {
                let id = match self.children.choose(rng) {
                    Some(&c) => c,
                    None => self.spawn(rng),
                };
                let f = self.frame(RESTART_FN, rng.gen_range(10..100));
                self.push(EventType::GoCreate, Some(f), rng).args[0] = id;
            }
            BugKind::RaceWindow => {
                let msg = RACE_MESSAGES.choose(rng).expect("non-empty").to_string();
                let f = self.frame(RACE_FN, rng.gen_range(10..100));
                self.push(EventType::User, Some(f.clone()), rng).sargs = vec![msg.clone()];
                let other = self.other_goroutine(rng);
                self.switch_to(other, rng);
                self.push(EventType::User, Some(f), rng).sargs = vec![msg];
            }
        }
    }

    fn finish(self) -> ParsedTrace {
        let stacks = self.stacks.into_iter().map(|(frames, id)| (id, frames)).collect();
        ParsedTrace::new(self.events, stacks)
    }
}

fn pick_bug(mix: &BugMix, rng: &mut ChaCha8Rng) -> BugKind {
    let total: f64 = mix.0.iter().sum();
    let mut x = rng.gen_range(0.0..total);
    for (kind, w) in BugKind::ALL.iter().zip(mix.0) {
        if x < w {
            return *kind;
        }
        x -= w;
    }
    *BugKind::ALL.iter().rev().zip(mix.0.iter().rev()).find(|(_, w)| **w > 0.0).expect("positive weight").0
}

fn build_trace(
    cfg: &SynthConfig,
    prof: &Profile,
    verdict: Verdict,
    rng: &mut ChaCha8Rng,
) -> Result<(ParsedTrace, Option<BugKind>), DatasetError> {
    let target = rng.gen_range(cfg.events_min..=cfg.events_max) + prof.event_shift;
    let (p, bug) = match (cfg.label_source, verdict) {
        (LabelSource::Signatures, Verdict::Pass) => (rng.gen_range(0..2), None),
        (LabelSource::Signatures, Verdict::Fail) => (rng.gen_range(0..2), Some(pick_bug(&cfg.bug_mix, rng))),
        (LabelSource::Processor, Verdict::Pass) => (rng.gen_range(0..2), None),
        (LabelSource::Processor, Verdict::Fail) => (rng.gen_range(2..4), None),
    };
    let mut b = Builder::new(prof, p, rng);
    // Channel blocks end the trace; other signatures land at a random point.
    let reserve = if bug.is_some() { 2 } else { 0 };
    let inject_at = match bug {
        Some(BugKind::UnmatchedBlock) | None => usize::MAX,
        Some(_) => rng.gen_range(b.events.len()..=target.saturating_sub(reserve).max(b.events.len())),
    };
    let mut injected = false;
    while b.events.len() + reserve < target {
        if !injected && b.events.len() >= inject_at {
            b.inject(bug.expect("inject_at set only with a bug"), rng);
            injected = true;
            continue;
        }
        let budget = target - reserve - b.events.len();
        b.filler(budget, rng);
    }
    if let Some(kind) = bug {
        if !injected {
            b.inject(kind, rng);
        }
    }
    let raw = b.finish();
    let mut trace = parse_binary(&encode_binary(&raw)?).expect("encoder output parses");
    if cfg.zero_offsets {
        trace.events.iter_mut().for_each(|e| e.off = 0);
    }
    Ok((trace, bug))
}

/// Generates the corpus in memory, projects in order, traces within a
/// project in a seeded shuffle of pass/fail labels.
pub fn synth_traces(cfg: &SynthConfig) -> Result<Vec<SynthTrace>, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let profiles: Vec<Profile> = (0..cfg.num_projects).map(|i| Profile::draw(i, &mut rng)).collect();
    let n_pass = (cfg.traces_per_project as f64 * cfg.pass_fraction).round() as usize;
    let mut out = Vec::with_capacity(cfg.num_projects * cfg.traces_per_project);
    for prof in &profiles {
        let mut verdicts: Vec<Verdict> = (0..cfg.traces_per_project)
            .map(|i| if i < n_pass { Verdict::Pass } else { Verdict::Fail })
            .collect();
        verdicts.shuffle(&mut rng);
        for (i, verdict) in verdicts.into_iter().enumerate() {
            let (trace, bug) = build_trace(cfg, prof, verdict, &mut rng)?;
            let mut label = match verdict {
                Verdict::Pass => TraceLabel::pass(&prof.name),
                Verdict::Fail => TraceLabel::fail(&prof.name),
            };
            if let Some(kind) = bug {
                let (category, cause, subcause) = kind.taxonomy();
                label.category = Some(category);
                label.cause = Some(cause.to_string());
                label.subcause = Some(subcause.to_string());
                label.bug_id = Some(format!("{}#{}", prof.pkg, 1000 + i));
            }
            out.push(SynthTrace { trace, label, bug });
        }
    }
    Ok(out)
}

/// Writes the corpus under `dir` (one subdirectory per project) together
/// with `dir/corpus.manifest.jsonl`, and returns the manifest.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<CorpusManifest, DatasetError> {
    let traces = synth_traces(cfg)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let mut entries = Vec::with_capacity(traces.len());
    let mut made = HashSet::new();
    for (i, t) in traces.into_iter().enumerate() {
        let sub = t.label.project.to_lowercase();
        if made.insert(sub.clone()) {
            fs::create_dir_all(dir.join(&sub)).map_err(io(&dir.join(&sub)))?;
        }
        let (ext, bytes) = match cfg.format {
            TraceFormat::Binary => ("gotrace", encode_binary(&t.trace)?),
            TraceFormat::Json => ("json", emit_json(&t.trace).into_bytes()),
        };
        let rel = PathBuf::from(sub).join(format!("{i:05}-{}.{ext}", t.label.verdict));
        fs::write(dir.join(&rel), bytes).map_err(io(&dir.join(&rel)))?;
        entries.push(ManifestEntry { path: rel, format: cfg.format, label: t.label });
    }
    let manifest = CorpusManifest::new(entries, dir);
    manifest.write(&dir.join("corpus.manifest.jsonl"))?;
    Ok(manifest)
}

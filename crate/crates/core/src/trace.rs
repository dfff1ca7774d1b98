//! In-memory representation of execution traces.
//!
//! A [`ParsedTrace`] is an ordered event list plus a stack table keyed by
//! stack id. It is the unit the classifier consumes, independent of the wire
//! format it was read from.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! event_types {
    ($($name:ident = $code:literal),* $(,)?) => {
        /// Runtime event kinds, numbered by their one-byte opcode.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum EventType {
            $($name = $code),*
        }

        impl EventType {
            pub const ALL: [EventType; 32] = [$(EventType::$name),*];

            pub fn from_code(code: u8) -> Option<Self> {
                match code {
                    $($code => Some(EventType::$name),)*
                    _ => None,
                }
            }

            /// Symbolic name, e.g. `GoEnd`.
            pub fn name(self) -> &'static str {
                match self {
                    $(EventType::$name => stringify!($name)),*
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $(stringify!($name) => Some(EventType::$name),)*
                    _ => None,
                }
            }
        }
    };
}

event_types! {
    ProcStart = 0x00,
    ProcStop = 0x01,
    Freq = 0x02,
    Stack = 0x03,
    Gomaxprocs = 0x04,
    GCStart = 0x05,
    GCDone = 0x06,
    GCScanStart = 0x07,
    GCScanDone = 0x08,
    GCSweepStart = 0x09,
    GCSweepDone = 0x0A,
    GoCreate = 0x0B,
    GoStart = 0x0C,
    GoEnd = 0x0D,
    GoStop = 0x0E,
    GoYield = 0x0F,
    GoPreempt = 0x10,
    GoSleep = 0x11,
    GoBlock = 0x12,
    GoBlockSend = 0x13,
    GoBlockRecv = 0x14,
    GoBlockSelect = 0x15,
    GoBlockSync = 0x16,
    GoBlockCond = 0x17,
    GoBlockNet = 0x18,
    GoUnblock = 0x19,
    GoSysCall = 0x1A,
    GoSysExit = 0x1B,
    GoSysBlock = 0x1C,
    User = 0x1D,
    UserStart = 0x1E,
    UserEnd = 0x1F,
}

impl EventType {
    pub fn code(self) -> u8 {
        self as u8
    }

    /// True for the `GoBlock*` family (a goroutine parks until unblocked).
    pub fn is_block(self) -> bool {
        (EventType::GoBlock.code()..=EventType::GoBlockNet.code()).contains(&self.code())
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One frame of a recorded call stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct Frame {
    pub pc: u64,
    pub func: String,
    pub file: String,
    pub line: u64,
}

impl Frame {
    pub fn new(pc: u64, func: impl Into<String>, file: impl Into<String>, line: u64) -> Self {
        Frame { pc, func: func.into(), file: file.into(), line }
    }
}

/// Processor id of an event that happened outside any processor context.
pub const NO_PROC: i64 = -1;

/// A single runtime occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    /// Byte offset of the record in its source file.
    pub off: u64,
    pub typ: EventType,
    /// Encounter order during parsing; tiebreaker for equal timestamps.
    pub seq: u64,
    /// Nanoseconds.
    pub ts: u64,
    /// Logical processor, or [`NO_PROC`].
    pub p: i64,
    /// Goroutine id; 0 is the runtime / unattributed.
    pub g: u64,
    /// 0 means no stack.
    pub stk_id: u64,
    pub stk: Vec<Frame>,
    pub args: [u64; 3],
    pub sargs: Vec<String>,
    /// Index of a related event in the owning trace.
    pub link: Option<usize>,
}

impl Event {
    /// An unattributed event of type `typ` with every other field zeroed.
    pub fn new(typ: EventType) -> Self {
        Event {
            off: 0,
            typ,
            seq: 0,
            ts: 0,
            p: NO_PROC,
            g: 0,
            stk_id: 0,
            stk: Vec::new(),
            args: [0; 3],
            sargs: Vec::new(),
            link: None,
        }
    }
}

/// Stack id → frames, ordered by id.
pub type StackTable = BTreeMap<u64, Vec<Frame>>;

/// An ordered event list plus the stack table its events refer to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedTrace {
    pub events: Vec<Event>,
    pub stacks: StackTable,
}

impl ParsedTrace {
    pub fn new(events: Vec<Event>, stacks: StackTable) -> Self {
        ParsedTrace { events, stacks }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Stable sort by `(ts, seq)`.
    pub fn sort_events(&mut self) {
        self.events.sort_by_key(|e| (e.ts, e.seq));
    }

    /// Fills every event's `stk` from the stack table where the id is known.
    pub fn resolve_stacks(&mut self) {
        for ev in &mut self.events {
            if ev.stk_id != 0 {
                if let Some(frames) = self.stacks.get(&ev.stk_id) {
                    ev.stk = frames.clone();
                }
            }
        }
    }
}

/// Which structural rule an event breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViolationKind {
    /// Event precedes its predecessor in `(ts, seq)` order.
    Unsorted,
    /// Non-zero stack id absent from the stack table.
    DanglingStackId,
    /// `stk` disagrees with the stack table entry for `stk_id`.
    StackMismatch,
    /// `link` points outside the event list.
    LinkOutOfRange,
    /// `link` points at the event itself.
    SelfLink,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::Unsorted => "unsorted",
            ViolationKind::DanglingStackId => "dangling stack id",
            ViolationKind::StackMismatch => "stack mismatch",
            ViolationKind::LinkOutOfRange => "link out of range",
            ViolationKind::SelfLink => "self link",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "event {}: {}", self.index, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every structural invariant of `trace` and reports each breach.
///
/// Never fails; an empty report means the trace is valid.
pub fn validate_trace(trace: &ParsedTrace) -> ValidationReport {
    let mut violations = Vec::new();
    let n = trace.events.len();
    for (i, ev) in trace.events.iter().enumerate() {
        if i > 0 {
            let prev = &trace.events[i - 1];
            if (ev.ts, ev.seq) < (prev.ts, prev.seq) {
                violations.push(Violation { index: i, kind: ViolationKind::Unsorted });
            }
        }
        if ev.stk_id != 0 {
            match trace.stacks.get(&ev.stk_id) {
                None => violations.push(Violation { index: i, kind: ViolationKind::DanglingStackId }),
                Some(frames) if *frames != ev.stk => {
                    violations.push(Violation { index: i, kind: ViolationKind::StackMismatch })
                }
                Some(_) => {}
            }
        }
        match ev.link {
            Some(l) if l >= n => violations.push(Violation { index: i, kind: ViolationKind::LinkOutOfRange }),
            Some(l) if l == i => violations.push(Violation { index: i, kind: ViolationKind::SelfLink }),
            _ => {}
        }
    }
    ValidationReport { violations }
}

/// Test outcome of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    /// Class index used by the model: 0 = pass, 1 = fail.
    pub fn class(self) -> usize {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 0 { Verdict::Pass } else { Verdict::Fail }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BugCategory {
    Blocking,
    NonBlocking,
}

/// Ground truth for one trace, including the bug taxonomy for failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLabel {
    pub verdict: Verdict,
    pub category: Option<BugCategory>,
    pub cause: Option<String>,
    pub subcause: Option<String>,
    pub project: String,
    pub bug_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelError {
    #[error("project name must be non-empty")]
    EmptyProject,
    #[error("bug taxonomy given for a passing trace")]
    TaxonomyOnPass,
}

impl TraceLabel {
    pub fn pass(project: impl Into<String>) -> Self {
        TraceLabel {
            verdict: Verdict::Pass,
            category: None,
            cause: None,
            subcause: None,
            project: project.into(),
            bug_id: None,
        }
    }

    pub fn fail(project: impl Into<String>) -> Self {
        TraceLabel { verdict: Verdict::Fail, ..TraceLabel::pass(project) }
    }

    pub fn check(&self) -> Result<(), LabelError> {
        if self.project.is_empty() {
            return Err(LabelError::EmptyProject);
        }
        if self.verdict == Verdict::Pass
            && (self.category.is_some() || self.cause.is_some() || self.subcause.is_some())
        {
            return Err(LabelError::TaxonomyOnPass);
        }
        Ok(())
    }
}

//! Trace serialization, vocabulary and fixed-length token sequences.
//!
//! Keywords (event names, field names, function names, string arguments)
//! get one token each; every number is spelled out one decimal digit per
//! token so the vocabulary stays small no matter how large the values get.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::trace::ParsedTrace;

/// A serializable event field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Off,
    Type,
    Ts,
    P,
    G,
    StkID,
    Stk,
    Args,
    SArgs,
}

impl Field {
    pub const ALL: [Field; 9] =
        [Field::Off, Field::Type, Field::Ts, Field::P, Field::G, Field::StkID, Field::Stk, Field::Args, Field::SArgs];

    /// Fields removed one at a time by the ablation driver.
    pub const ABLATABLE: [Field; 7] = [Field::Off, Field::Type, Field::Ts, Field::P, Field::G, Field::StkID, Field::Stk];

    pub fn name(self) -> &'static str {
        match self {
            Field::Off => "Off",
            Field::Type => "Type",
            Field::Ts => "Ts",
            Field::P => "P",
            Field::G => "G",
            Field::StkID => "StkID",
            Field::Stk => "Stk",
            Field::Args => "Args",
            Field::SArgs => "SArgs",
        }
    }

    fn bit(self) -> u16 {
        1 << (self as u16)
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = TokenizerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Field::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| TokenizerError::UnknownField(s.to_string()))
    }
}

/// Non-empty subset of [`Field`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FieldSet(u16);

impl FieldSet {
    pub const ALL: FieldSet = FieldSet(0x1ff);

    pub fn new(fields: impl IntoIterator<Item = Field>) -> Result<Self, TokenizerError> {
        let bits = fields.into_iter().fold(0, |acc, f| acc | f.bit());
        if bits == 0 {
            return Err(TokenizerError::EmptyFieldSet);
        }
        Ok(FieldSet(bits))
    }

    pub fn contains(self, f: Field) -> bool {
        self.0 & f.bit() != 0
    }

    pub fn without(self, f: Field) -> Result<Self, TokenizerError> {
        FieldSet::new(self.iter().filter(|&x| x != f))
    }

    pub fn iter(self) -> impl Iterator<Item = Field> {
        Field::ALL.into_iter().filter(move |f| self.contains(*f))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn from_bits(bits: u16) -> Result<Self, TokenizerError> {
        if bits == 0 || bits & !Self::ALL.0 != 0 {
            return Err(TokenizerError::EmptyFieldSet);
        }
        Ok(FieldSet(bits))
    }
}

impl Default for FieldSet {
    fn default() -> Self {
        FieldSet::ALL
    }
}

impl fmt::Display for FieldSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Field::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FieldSet {
    type Err = TokenizerError;

    /// Comma-separated field names, or `all`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().eq_ignore_ascii_case("all") {
            return Ok(FieldSet::ALL);
        }
        let fields = s.split(',').filter(|p| !p.trim().is_empty()).map(Field::from_str).collect::<Result<Vec<_>, _>>()?;
        FieldSet::new(fields)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TokenizerError {
    #[error("field set must contain at least one field")]
    EmptyFieldSet,
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("vocabulary line {line}: {reason}")]
    BadVocabulary { line: usize, reason: String },
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOT: u32 = 2;
/// Id of the digit `'0'`; digits occupy `DIGIT_BASE..DIGIT_BASE + 10`.
pub const DIGIT_BASE: u32 = 3;
pub const RESERVED: usize = 13;

pub const PAD_TOKEN: &str = "<PAD>";
pub const UNK_TOKEN: &str = "<UNK>";
pub const EOT_TOKEN: &str = "<EOT>";
pub const NEG_TOKEN: &str = "neg";

const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];

fn push_digits(out: &mut Vec<String>, v: u64) {
    out.extend(v.to_string().bytes().map(|b| DIGITS[(b - b'0') as usize].to_string()));
}

/// Event type keyword, e.g. `EvGoEnd`.
pub fn event_token(typ: crate::trace::EventType) -> String {
    format!("Ev{}", typ.name())
}

/// Flattens `trace` into raw tokens, emitting only fields in `fields`.
///
/// Per event: the type keyword, then for each scalar field its name followed
/// by its digits. Stacks contribute `Stk` and, per frame, `Fn:<name>` plus
/// the line digits (program counters and file paths are dropped). Each
/// non-zero argument slot `i` contributes `Arg<i>` plus digits, and each
/// string argument a single `S:<text>` token. The stream ends with `<EOT>`.
pub fn serialize_trace(trace: &ParsedTrace, fields: FieldSet) -> Vec<String> {
    let mut out = Vec::with_capacity(trace.events.len() * 16 + 1);
    for ev in &trace.events {
        if fields.contains(Field::Type) {
            out.push(event_token(ev.typ));
        }
        if fields.contains(Field::Off) {
            out.push("Off".into());
            push_digits(&mut out, ev.off);
        }
        if fields.contains(Field::Ts) {
            out.push("Ts".into());
            push_digits(&mut out, ev.ts);
        }
        if fields.contains(Field::P) {
            out.push("P".into());
            if ev.p < 0 {
                out.push(NEG_TOKEN.into());
            }
            push_digits(&mut out, ev.p.unsigned_abs());
        }
        if fields.contains(Field::G) {
            out.push("G".into());
            push_digits(&mut out, ev.g);
        }
        if fields.contains(Field::StkID) {
            out.push("StkID".into());
            push_digits(&mut out, ev.stk_id);
        }
        if fields.contains(Field::Stk) && !ev.stk.is_empty() {
            out.push("Stk".into());
            for fr in &ev.stk {
                out.push(format!("Fn:{}", fr.func));
                push_digits(&mut out, fr.line);
            }
        }
        if fields.contains(Field::Args) {
            for (slot, &a) in ev.args.iter().enumerate() {
                if a != 0 {
                    out.push(format!("Arg{slot}"));
                    push_digits(&mut out, a);
                }
            }
        }
        if fields.contains(Field::SArgs) {
            out.extend(ev.sargs.iter().map(|s| format!("S:{s}")));
        }
    }
    out.push(EOT_TOKEN.into());
    out
}

/// Token ↔ id mapping. Ids are contiguous from 0 with the reserved tokens
/// first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::reserved()
    }
}

impl Vocabulary {
    /// Only the reserved tokens: PAD, UNK, EOT and the ten digits.
    pub fn reserved() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), ids: HashMap::new() };
        for t in [PAD_TOKEN, UNK_TOKEN, EOT_TOKEN].into_iter().chain(DIGITS) {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.ids.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.ids.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id. Backslashes and line breaks
    /// inside tokens are escaped as `\\`, `\n` and `\r`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            for c in t.chars() {
                match c {
                    '\\' => s.push_str("\\\\"),
                    '\n' => s.push_str("\\n"),
                    '\r' => s.push_str("\\r"),
                    c => s.push(c),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut tokens = Vec::new();
        for (line, raw) in text.lines().enumerate() {
            let mut tok = String::with_capacity(raw.len());
            let mut chars = raw.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    tok.push(c);
                    continue;
                }
                match chars.next() {
                    Some('\\') => tok.push('\\'),
                    Some('n') => tok.push('\n'),
                    Some('r') => tok.push('\r'),
                    other => {
                        return Err(TokenizerError::BadVocabulary {
                            line: line + 1,
                            reason: format!("bad escape \\{}", other.map(String::from).unwrap_or_default()),
                        })
                    }
                }
            }
            tokens.push(tok);
        }
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        let reserved = Self::reserved();
        for (i, want) in reserved.tokens.iter().enumerate() {
            if tokens.get(i) != Some(want) {
                return Err(TokenizerError::BadVocabulary {
                    line: i + 1,
                    reason: format!("expected reserved token {want:?}"),
                });
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabulary { line: i + 1, reason: format!("duplicate token {t:?}") });
            }
        }
        Ok(Vocabulary { tokens, ids })
    }
}

/// Assigns ids to every distinct token of `corpus` in first-seen order,
/// after the reserved ones.
pub fn build_vocab<I, S>(corpus: I) -> Vocabulary
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut v = Vocabulary::reserved();
    for doc in corpus {
        for tok in doc {
            v.insert(tok.as_ref());
        }
    }
    v
}

/// Fixed-length id sequence; positions at and after `true_len` hold PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_len: usize,
}

impl TokenSequence {
    /// Maps `tokens` through `vocab`, keeps the first `len` and right-pads.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, len: usize) -> Self {
        assert!(len >= 1, "sequence length must be at least 1");
        let mut ids: Vec<u32> = tokens.iter().take(len).map(|t| vocab.id_or_unk(t.as_ref())).collect();
        let true_len = ids.len();
        ids.resize(len, PAD);
        TokenSequence { ids, true_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Serializes, maps through `vocab` (UNK for unseen tokens) and fits to
/// `len` by head-kept truncation or PAD filling.
pub fn tokenize(trace: &ParsedTrace, vocab: &Vocabulary, fields: FieldSet, len: usize) -> TokenSequence {
    TokenSequence::from_tokens(&serialize_trace(trace, fields), vocab, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Event, EventType, Frame, StackTable};

    fn go_end() -> ParsedTrace {
        let mut e = Event::new(EventType::GoEnd);
        e.p = 0;
        ParsedTrace::new(vec![e], StackTable::new())
    }

    #[test]
    fn single_event_all_fields() {
        let toks = serialize_trace(&go_end(), FieldSet::ALL);
        assert_eq!(toks, ["EvGoEnd", "Off", "0", "Ts", "0", "P", "0", "G", "0", "StkID", "0", "<EOT>"]);
    }

    #[test]
    fn single_event_ts_only() {
        let fs = FieldSet::new([Field::Ts]).unwrap();
        assert_eq!(serialize_trace(&go_end(), fs), ["Ts", "0", "<EOT>"]);
    }

    #[test]
    fn digits_in_order_and_negative_processor() {
        let mut t = go_end();
        t.events[0].ts = 203;
        t.events[0].p = -1;
        let fs = FieldSet::new([Field::Ts, Field::P]).unwrap();
        assert_eq!(serialize_trace(&t, fs), ["Ts", "2", "0", "3", "P", "neg", "1", "<EOT>"]);
    }

    #[test]
    fn stack_args_and_strings() {
        let mut e = Event::new(EventType::User);
        e.p = 1;
        e.stk_id = 4;
        e.stk = vec![Frame::new(4972618, "main.worker", "/src/main.go", 42)];
        e.args = [0, 7, 0];
        e.sargs = vec!["tick".into()];
        let t = ParsedTrace::new(vec![e], StackTable::new());
        let fs = FieldSet::new([Field::Stk, Field::Args, Field::SArgs]).unwrap();
        assert_eq!(serialize_trace(&t, fs), ["Stk", "Fn:main.worker", "4", "2", "Arg1", "7", "S:tick", "<EOT>"]);
    }

    #[test]
    fn reserved_layout() {
        let v = Vocabulary::reserved();
        assert_eq!(v.len(), RESERVED);
        assert_eq!(v.id("<PAD>"), Some(PAD));
        assert_eq!(v.id("<UNK>"), Some(UNK));
        assert_eq!(v.id("<EOT>"), Some(EOT));
        for d in 0..10u32 {
            assert_eq!(v.id(&d.to_string()), Some(DIGIT_BASE + d));
        }
    }

    #[test]
    fn vocab_from_single_doc() {
        let v = build_vocab([vec!["Ts", "0"]]);
        assert_eq!(v.len(), 14);
        assert_eq!(v.id("Ts"), Some(13));
    }

    #[test]
    fn shared_keywords_give_same_vocab() {
        let a = vec!["EvGoEnd", "Ts", "4", "<EOT>"];
        let b = vec!["Ts", "EvGoEnd", "9", "<EOT>"];
        assert_eq!(build_vocab([a.clone(), b]), build_vocab([a]));
    }

    #[test]
    fn empty_trace_pads_after_eot() {
        let seq = tokenize(&ParsedTrace::default(), &Vocabulary::reserved(), FieldSet::ALL, 8);
        assert_eq!(seq.ids, [EOT, PAD, PAD, PAD, PAD, PAD, PAD, PAD]);
        assert_eq!(seq.true_len, 1);
    }

    #[test]
    fn head_kept_truncation() {
        let toks: Vec<String> = (0..10_000).map(|i| (i % 10).to_string()).collect();
        let seq = TokenSequence::from_tokens(&toks, &Vocabulary::reserved(), 4096);
        assert_eq!(seq.len(), 4096);
        assert_eq!(seq.true_len, 4096);
        assert!(!seq.ids.contains(&PAD));
        assert_eq!(&seq.ids[..3], &[DIGIT_BASE, DIGIT_BASE + 1, DIGIT_BASE + 2]);
    }

    #[test]
    fn unseen_token_is_unk() {
        let v = build_vocab([vec!["Ts"]]);
        let seq = TokenSequence::from_tokens(&["Ts", "Zz", "1"], &v, 4);
        assert_eq!(seq.ids, [13, UNK, DIGIT_BASE + 1, PAD]);
    }

    #[test]
    fn vocab_text_round_trip_with_escapes() {
        let v = build_vocab([vec!["S:a\nb", "Fn:c\\d", "S:\r"]]);
        let text = v.to_text();
        assert_eq!(text.lines().count(), v.len());
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("x\n").is_err());
    }

    #[test]
    fn field_set_parsing() {
        assert_eq!("all".parse::<FieldSet>().unwrap(), FieldSet::ALL);
        let fs: FieldSet = "Ts,p".parse().unwrap();
        assert_eq!(fs.to_string(), "Ts,P");
        assert!("".parse::<FieldSet>().is_err());
        assert!("Ts,Nope".parse::<FieldSet>().is_err());
        assert_eq!(FieldSet::new([Field::Ts]).unwrap().without(Field::Ts), Err(TokenizerError::EmptyFieldSet));
    }
}

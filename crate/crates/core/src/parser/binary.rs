//! The `gotrace` binary stream.
//!
//! ```text
//! Trace = "gotrace" Version {Event}
//! ```
//!
//! Every integer is an unsigned LEB128 varint and every string is a varint
//! length followed by raw UTF-8. Most records carry only a `TimeDiff`
//! relative to a single running timestamp; processor and goroutine come from
//! context: `ProcStart` selects the current processor and `GoStart` selects
//! the goroutine running on it.
//!
//! Stack records extend the `StackID StackLen {PC}` layout with the
//! symbolized function, file and line of each frame so that the stack table
//! survives a round trip.

use std::collections::HashMap;

use super::varint::{read_uvarint, write_uvarint, VarintError};
use super::{EncodeError, ParseError};
use crate::trace::{Event, EventType, Frame, ParsedTrace, StackTable, NO_PROC};

pub const MAGIC: &[u8; 7] = b"gotrace";
pub const VERSION: u64 = 1;

/// One wire field of an event record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    TimeDiff,
    /// Absolute timestamp (only `ProcStart`).
    Timestamp,
    /// Processor id (only `ProcStart`).
    ProcId,
    /// Goroutine id that becomes current (only `GoStart`).
    StartedGo,
    StackId,
    /// Event-specific integer stored in `args[slot]`.
    Arg(usize),
    /// Length-prefixed message stored as the single `sargs` entry.
    Msg,
}

fn layout(t: EventType) -> &'static [Field] {
    use EventType::*;
    use Field::*;
    match t {
        ProcStart => &[ProcId, Arg(0), Timestamp],
        Freq => &[Arg(0)],
        Stack => &[],
        Gomaxprocs => &[TimeDiff, Arg(0)],
        GCStart | GCSweepStart => &[TimeDiff, StackId],
        ProcStop | GCDone | GCScanStart | GCScanDone | GCSweepDone | GoEnd | GoSysBlock => &[TimeDiff],
        GoCreate => &[TimeDiff, Arg(0), Arg(1), StackId],
        GoStart => &[TimeDiff, StartedGo],
        GoStop | GoYield | GoPreempt | GoSleep | GoBlock | GoBlockSend | GoBlockRecv | GoBlockSelect
        | GoBlockSync | GoBlockCond | GoBlockNet | GoSysCall => &[TimeDiff, StackId],
        GoUnblock => &[TimeDiff, Arg(0), StackId],
        GoSysExit => &[TimeDiff, Arg(0)],
        User | UserStart | UserEnd => &[TimeDiff, StackId, Msg],
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Start of the record being decoded; truncation is reported here.
    record: usize,
}

impl<'a> Reader<'a> {
    fn uvarint(&mut self) -> Result<u64, ParseError> {
        match read_uvarint(&self.buf[self.pos..]) {
            Ok((v, n)) => {
                self.pos += n;
                Ok(v)
            }
            Err(VarintError::Truncated) => Err(ParseError::TruncatedRecord { offset: self.record }),
            Err(VarintError::Overflow) => Err(ParseError::VarintOverflow { offset: self.pos }),
        }
    }

    fn string(&mut self) -> Result<String, ParseError> {
        let len = self.uvarint()?;
        let start = self.pos;
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| start.checked_add(l))
            .filter(|&e| e <= self.buf.len())
            .ok_or(ParseError::TruncatedRecord { offset: self.record })?;
        self.pos = end;
        String::from_utf8(self.buf[start..end].to_vec()).map_err(|_| ParseError::InvalidUtf8 { offset: start })
    }
}

#[derive(Debug)]
struct ParserState {
    current_p: i64,
    current_g_per_p: HashMap<i64, u64>,
    last_ts: u64,
    next_seq: u64,
    pending_stacks: StackTable,
}

impl ParserState {
    fn new() -> Self {
        ParserState {
            current_p: NO_PROC,
            current_g_per_p: HashMap::new(),
            last_ts: 0,
            next_seq: 0,
            pending_stacks: StackTable::new(),
        }
    }

    fn current_g(&self) -> u64 {
        self.current_g_per_p.get(&self.current_p).copied().unwrap_or(0)
    }
}

/// Decodes a binary trace.
///
/// Output events are sorted by `(ts, seq)` with stacks resolved from the
/// stack table. Binary records carry no links.
pub fn parse_binary(bytes: &[u8]) -> Result<ParsedTrace, ParseError> {
    for (i, &m) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            Some(&b) if b == m => {}
            Some(_) => return Err(ParseError::BadMagic { offset: i }),
            None => return Err(ParseError::TruncatedRecord { offset: 0 }),
        }
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len(), record: MAGIC.len() };
    let version_at = r.pos;
    let version = r.uvarint()?;
    if version != VERSION {
        return Err(ParseError::UnsupportedVersion { offset: version_at, version });
    }

    let mut st = ParserState::new();
    let mut events = Vec::new();
    while r.pos < bytes.len() {
        let off = r.pos;
        r.record = off;
        let opcode = bytes[off];
        r.pos += 1;
        let typ = EventType::from_code(opcode).ok_or(ParseError::UnknownOpcode { offset: off, opcode })?;

        if typ == EventType::Stack {
            let id = r.uvarint()?;
            let len = r.uvarint()?;
            let mut frames = Vec::new();
            for _ in 0..len {
                let pc = r.uvarint()?;
                let func = r.string()?;
                let file = r.string()?;
                let line = r.uvarint()?;
                frames.push(Frame { pc, func, file, line });
            }
            st.pending_stacks.insert(id, frames);
            continue;
        }

        let mut ev = Event::new(typ);
        ev.off = off as u64;
        ev.ts = st.last_ts;
        let mut started_go = None;
        for field in layout(typ) {
            match *field {
                Field::TimeDiff => {
                    let at = r.pos;
                    let d = r.uvarint()?;
                    ev.ts = st.last_ts.checked_add(d).ok_or(ParseError::TimestampOverflow { offset: at })?;
                }
                Field::Timestamp => ev.ts = r.uvarint()?,
                Field::ProcId => {
                    let at = r.pos;
                    let p = r.uvarint()?;
                    st.current_p = i64::try_from(p).map_err(|_| ParseError::VarintOverflow { offset: at })?;
                }
                Field::StartedGo => {
                    let g = r.uvarint()?;
                    ev.args[0] = g;
                    started_go = Some(g);
                }
                Field::StackId => ev.stk_id = r.uvarint()?,
                Field::Arg(slot) => ev.args[slot] = r.uvarint()?,
                Field::Msg => ev.sargs.push(r.string()?),
            }
        }
        if let Some(g) = started_go {
            st.current_g_per_p.insert(st.current_p, g);
        }
        st.last_ts = ev.ts;
        ev.p = st.current_p;
        ev.g = st.current_g();
        ev.seq = st.next_seq;
        st.next_seq += 1;
        events.push(ev);
    }

    let mut trace = ParsedTrace::new(events, st.pending_stacks);
    trace.resolve_stacks();
    trace.sort_events();
    Ok(trace)
}

/// Encoder-side mirror of the parser's attribution context.
struct Context {
    p: i64,
    g_per_p: HashMap<i64, u64>,
    last_ts: u64,
}

impl Context {
    fn g(&self) -> u64 {
        self.g_per_p.get(&self.p).copied().unwrap_or(0)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    write_uvarint(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

/// Encodes `trace` as a binary stream.
///
/// The stack table is written first, then one record per event. Where an
/// event's processor or goroutine differs from what the preceding records
/// imply, `ProcStart` / `GoStart` records are synthesized so the parser
/// reattributes it correctly; such traces re-parse with the extra events.
/// Fields without a wire slot for the event type (offsets, links, unused
/// args) are not carried.
pub fn encode_binary(trace: &ParsedTrace) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(16 + trace.events.len() * 8);
    out.extend_from_slice(MAGIC);
    write_uvarint(&mut out, VERSION);

    for (id, frames) in &trace.stacks {
        out.push(EventType::Stack.code());
        write_uvarint(&mut out, *id);
        write_uvarint(&mut out, frames.len() as u64);
        for f in frames {
            write_uvarint(&mut out, f.pc);
            put_str(&mut out, &f.func);
            put_str(&mut out, &f.file);
            write_uvarint(&mut out, f.line);
        }
    }

    let mut ctx = Context { p: NO_PROC, g_per_p: HashMap::new(), last_ts: 0 };
    for (index, ev) in trace.events.iter().enumerate() {
        let unencodable = |reason: &str| EncodeError::UnencodableTrace { index, reason: reason.to_string() };
        if ev.typ == EventType::Stack {
            return Err(unencodable("stack records are not events"));
        }
        if index > 0 && ev.ts < trace.events[index - 1].ts {
            return Err(unencodable("timestamp precedes its predecessor"));
        }

        let lay = layout(ev.typ);
        if ev.typ != EventType::ProcStart && ev.p != ctx.p {
            if ev.p < 0 {
                return Err(unencodable("no record can return to the unattributed processor"));
            }
            out.push(EventType::ProcStart.code());
            write_uvarint(&mut out, ev.p as u64);
            write_uvarint(&mut out, 0);
            write_uvarint(&mut out, ev.ts);
            ctx.p = ev.p;
            ctx.last_ts = ev.ts;
        }
        if ev.typ == EventType::ProcStart {
            if ev.p < 0 {
                return Err(unencodable("ProcStart needs a processor id"));
            }
            if ev.g != ctx.g_per_p.get(&ev.p).copied().unwrap_or(0) {
                return Err(unencodable("ProcStart goroutine differs from the processor's current goroutine"));
            }
        } else if ev.typ != EventType::GoStart && ev.g != ctx.g() {
            out.push(EventType::GoStart.code());
            write_uvarint(&mut out, ev.ts - ctx.last_ts);
            write_uvarint(&mut out, ev.g);
            ctx.g_per_p.insert(ctx.p, ev.g);
            ctx.last_ts = ev.ts;
        }

        out.push(ev.typ.code());
        for field in lay {
            match *field {
                Field::TimeDiff => write_uvarint(&mut out, ev.ts - ctx.last_ts),
                Field::Timestamp => write_uvarint(&mut out, ev.ts),
                Field::ProcId => write_uvarint(&mut out, ev.p as u64),
                Field::StartedGo => write_uvarint(&mut out, ev.g),
                Field::StackId => write_uvarint(&mut out, ev.stk_id),
                Field::Arg(slot) => write_uvarint(&mut out, ev.args[slot]),
                Field::Msg => put_str(&mut out, ev.sargs.first().map(String::as_str).unwrap_or("")),
            }
        }
        match ev.typ {
            EventType::ProcStart => ctx.p = ev.p,
            EventType::GoStart => {
                ctx.g_per_p.insert(ctx.p, ev.g);
            }
            _ => {}
        }
        if lay.contains(&Field::TimeDiff) || lay.contains(&Field::Timestamp) {
            ctx.last_ts = ev.ts;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> Vec<u8> {
        let mut v = MAGIC.to_vec();
        write_uvarint(&mut v, 1);
        v
    }

    #[test]
    fn empty_body() {
        let t = parse_binary(&header()).unwrap();
        assert!(t.events.is_empty() && t.stacks.is_empty());
    }

    #[test]
    fn empty_trace_encodes_to_header() {
        let bytes = encode_binary(&ParsedTrace::default()).unwrap();
        assert_eq!(bytes, b"gotrace\x01");
        assert_eq!(bytes.len(), 8);
    }

    #[test]
    fn bad_magic_names_first_differing_byte() {
        let err = parse_binary(b"gotracE\x01").unwrap_err();
        assert_eq!(err, ParseError::BadMagic { offset: 6 });
        assert_eq!(parse_binary(b"xotrace\x01").unwrap_err(), ParseError::BadMagic { offset: 0 });
        assert_eq!(parse_binary(b"got").unwrap_err(), ParseError::TruncatedRecord { offset: 0 });
    }

    #[test]
    fn version_checked() {
        let mut v = MAGIC.to_vec();
        v.push(2);
        assert_eq!(parse_binary(&v).unwrap_err(), ParseError::UnsupportedVersion { offset: 7, version: 2 });
    }

    #[test]
    fn unknown_opcode_and_truncation() {
        let mut v = header();
        v.push(0x20);
        assert_eq!(parse_binary(&v).unwrap_err(), ParseError::UnknownOpcode { offset: 8, opcode: 0x20 });

        let mut v = header();
        v.extend([0x0b, 0x01]); // GoCreate missing GoID, PC, StackID
        assert_eq!(parse_binary(&v).unwrap_err(), ParseError::TruncatedRecord { offset: 8 });

        let mut v = header();
        v.extend([0x1d, 0x00, 0x00, 0x05, b'a']); // message shorter than declared
        assert_eq!(parse_binary(&v).unwrap_err(), ParseError::TruncatedRecord { offset: 8 });
    }

    #[test]
    fn varint_overflow_offset() {
        let mut v = header();
        v.push(0x0d);
        v.extend([0xff; 11]);
        assert_eq!(parse_binary(&v).unwrap_err(), ParseError::VarintOverflow { offset: 9 });
    }

    #[test]
    fn context_attribution_and_time_reconstruction() {
        let mut v = header();
        // ProcStart p=2 machine=7 ts=100
        v.extend([0x00, 0x02, 0x07, 100]);
        // GoStart +5 g=9
        v.extend([0x0c, 0x05, 0x09]);
        // GoEnd +0
        v.extend([0x0d, 0x00]);
        // Freq 1000 (no time diff)
        v.extend([0x02, 0xe8, 0x07]);
        // ProcStart p=0 ts=120, ProcStop +3
        v.extend([0x00, 0x00, 0x00, 120, 0x01, 0x03]);
        let t = parse_binary(&v).unwrap();
        let got: Vec<_> = t.events.iter().map(|e| (e.typ, e.ts, e.p, e.g, e.seq, e.off)).collect();
        assert_eq!(
            got,
            vec![
                (EventType::ProcStart, 100, 2, 0, 0, 8),
                (EventType::GoStart, 105, 2, 9, 1, 12),
                (EventType::GoEnd, 105, 2, 9, 2, 15),
                (EventType::Freq, 105, 2, 9, 3, 17),
                (EventType::ProcStart, 120, 0, 0, 4, 20),
                (EventType::ProcStop, 123, 0, 0, 5, 24),
            ]
        );
        assert_eq!(t.events[0].args, [7, 0, 0]);
        assert_eq!(t.events[1].args, [9, 0, 0]);
        assert_eq!(t.events[3].args, [1000, 0, 0]);
    }

    #[test]
    fn out_of_order_proc_start_is_sorted() {
        let mut v = header();
        v.extend([0x00, 0x00, 0x00, 50, 0x0d, 0x00]);
        v.extend([0x00, 0x01, 0x00, 10, 0x0d, 0x01]);
        let t = parse_binary(&v).unwrap();
        let ts: Vec<_> = t.events.iter().map(|e| e.ts).collect();
        assert_eq!(ts, vec![10, 11, 50, 50]);
        assert!(crate::trace::validate_trace(&t).is_valid());
    }

    #[test]
    fn equal_timestamps_give_zero_delta() {
        let mut a = Event::new(EventType::GoEnd);
        a.ts = 100;
        let mut b = Event::new(EventType::GoEnd);
        b.ts = 100;
        b.seq = 1;
        let bytes = encode_binary(&ParsedTrace::new(vec![a, b], StackTable::new())).unwrap();
        assert_eq!(&bytes[8..], &[0x0d, 100, 0x0d, 0]);
    }

    #[test]
    fn decreasing_timestamp_is_unencodable() {
        let mut a = Event::new(EventType::GoEnd);
        a.ts = 5;
        let b = Event::new(EventType::GoEnd);
        let err = encode_binary(&ParsedTrace::new(vec![a, b], StackTable::new())).unwrap_err();
        assert!(matches!(err, EncodeError::UnencodableTrace { index: 1, .. }));
    }

    #[test]
    fn context_records_are_synthesized() {
        let mut e = Event::new(EventType::GoBlockRecv);
        e.ts = 40;
        e.p = 3;
        e.g = 12;
        let t = parse_binary(&encode_binary(&ParsedTrace::new(vec![e], StackTable::new())).unwrap()).unwrap();
        let got: Vec<_> = t.events.iter().map(|e| (e.typ, e.ts, e.p, e.g)).collect();
        assert_eq!(
            got,
            vec![
                (EventType::ProcStart, 40, 3, 0),
                (EventType::GoStart, 40, 3, 12),
                (EventType::GoBlockRecv, 40, 3, 12),
            ]
        );
    }

    #[test]
    fn stacks_round_trip_and_resolve() {
        let mut stacks = StackTable::new();
        let frames = vec![
            Frame::new(4972618, "testing.(*M).before", "/go/src/testing/testing.go", 2075),
            Frame::new(5213961, "main.main", "_testmain.go", 47),
        ];
        stacks.insert(1, frames.clone());
        let mut e = Event::new(EventType::User);
        e.stk_id = 1;
        e.sargs = vec!["héllo".into()];
        let t = parse_binary(&encode_binary(&ParsedTrace::new(vec![e], stacks)).unwrap()).unwrap();
        assert_eq!(t.stacks[&1], frames);
        assert_eq!(t.events[0].stk, frames);
        assert_eq!(t.events[0].sargs, vec!["héllo".to_string()]);
    }
}

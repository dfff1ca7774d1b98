//! The `ParseResult` JSON document: `{"Events": [...], "Stacks": {...}}`.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::{Map, Value};

use super::ParseError;
use crate::trace::{Event, EventType, Frame, ParsedTrace, StackTable, NO_PROC};

#[derive(Serialize)]
struct JsonFrame<'a> {
    #[serde(rename = "PC")]
    pc: u64,
    #[serde(rename = "Fn")]
    func: &'a str,
    #[serde(rename = "File")]
    file: &'a str,
    #[serde(rename = "Line")]
    line: u64,
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct JsonEvent<'a> {
    off: u64,
    #[serde(rename = "Type")]
    typ: u8,
    ts: u64,
    #[serde(rename = "P")]
    p: i64,
    #[serde(rename = "G")]
    g: u64,
    #[serde(rename = "StkID")]
    stk_id: u64,
    stk: Vec<JsonFrame<'a>>,
    args: [u64; 3],
    #[serde(rename = "SArgs")]
    sargs: &'a [String],
}

#[derive(Serialize)]
#[serde(rename_all = "PascalCase")]
struct JsonTrace<'a> {
    events: Vec<JsonEvent<'a>>,
    stacks: BTreeMap<u64, Vec<JsonFrame<'a>>>,
}

fn frames(fs: &[Frame]) -> Vec<JsonFrame<'_>> {
    fs.iter()
        .map(|f| JsonFrame { pc: f.pc, func: &f.func, file: &f.file, line: f.line })
        .collect()
}

/// Renders `trace` with fixed key order and stack ids ascending. Links are
/// not represented.
pub fn emit_json(trace: &ParsedTrace) -> String {
    let doc = JsonTrace {
        events: trace
            .events
            .iter()
            .map(|e| JsonEvent {
                off: e.off,
                typ: e.typ.code(),
                ts: e.ts,
                p: e.p,
                g: e.g,
                stk_id: e.stk_id,
                stk: frames(&e.stk),
                args: e.args,
                sargs: &e.sargs,
            })
            .collect(),
        stacks: trace.stacks.iter().map(|(id, fs)| (*id, frames(fs))).collect(),
    };
    serde_json::to_string_pretty(&doc).expect("trace documents always serialize")
}

fn malformed(index: Option<usize>, reason: impl Into<String>) -> ParseError {
    ParseError::MalformedDocument { index, reason: reason.into() }
}

/// Integer given either as a JSON number or a decimal string.
fn int_value(v: &Value) -> Option<i128> {
    match v {
        Value::Number(n) => n.as_u64().map(i128::from).or_else(|| n.as_i64().map(i128::from)),
        Value::String(s) => s.trim().parse::<i128>().ok(),
        _ => None,
    }
}

fn get_u64(obj: &Map<String, Value>, key: &str, index: usize, default: u64) -> Result<u64, ParseError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => int_value(v)
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| ParseError::TypeMismatch { index, key: key.to_string() }),
    }
}

fn get_i64(obj: &Map<String, Value>, key: &str, index: usize, default: i64) -> Result<i64, ParseError> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => int_value(v)
            .and_then(|i| i64::try_from(i).ok())
            .ok_or_else(|| ParseError::TypeMismatch { index, key: key.to_string() }),
    }
}

fn parse_frames(v: &Value, index: Option<usize>) -> Result<Vec<Frame>, ParseError> {
    let arr = match v {
        Value::Null => return Ok(Vec::new()),
        Value::Array(a) => a,
        _ => return Err(malformed(index, "frame list is not an array")),
    };
    let num = |obj: &Map<String, Value>, key: &str| match index {
        Some(i) => get_u64(obj, key, i, 0),
        None => get_u64(obj, key, 0, 0).map_err(|_| malformed(None, format!("stack frame key {key:?} is not an integer"))),
    };
    arr.iter()
        .map(|f| {
            let obj = f.as_object().ok_or_else(|| malformed(index, "frame is not an object"))?;
            let text = |key: &str| match obj.get(key) {
                None | Some(Value::Null) => Ok(String::new()),
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(malformed(index, format!("frame key {key:?} is not a string"))),
            };
            Ok(Frame {
                pc: num(obj, "PC")?,
                func: text("Fn")?,
                file: text("File")?,
                line: num(obj, "Line")?,
            })
        })
        .collect()
}

/// Reads a `ParseResult` document.
///
/// Missing event keys default to an unattributed, zeroed event; `Stk`
/// falls back to the stack table when absent. Events are stably sorted by
/// timestamp and `seq` records encounter order.
pub fn parse_json(text: &str) -> Result<ParsedTrace, ParseError> {
    let root: Value = serde_json::from_str(text).map_err(|e| malformed(None, e.to_string()))?;
    let root = root.as_object().ok_or_else(|| malformed(None, "document is not an object"))?;

    let mut stacks = StackTable::new();
    match root.get("Stacks") {
        None | Some(Value::Null) => {}
        Some(Value::Object(m)) => {
            for (k, v) in m {
                let id = k
                    .parse::<u64>()
                    .map_err(|_| malformed(None, format!("stack id {k:?} is not a decimal integer")))?;
                stacks.insert(id, parse_frames(v, None)?);
            }
        }
        Some(_) => return Err(malformed(None, "\"Stacks\" is not an object")),
    }

    let no_events = Vec::new();
    let raw_events = match root.get("Events") {
        Some(Value::Array(a)) => a,
        Some(Value::Null) => &no_events,
        Some(_) => return Err(malformed(None, "\"Events\" is not an array")),
        None => return Err(malformed(None, "missing \"Events\"")),
    };

    let mut events = Vec::with_capacity(raw_events.len());
    for (index, v) in raw_events.iter().enumerate() {
        let obj = v.as_object().ok_or_else(|| malformed(Some(index), "event is not an object"))?;
        let code = match obj.get("Type") {
            None | Some(Value::Null) => return Err(malformed(Some(index), "missing \"Type\"")),
            Some(t) => int_value(t).ok_or_else(|| ParseError::TypeMismatch { index, key: "Type".into() })?,
        };
        let typ = u8::try_from(code)
            .ok()
            .and_then(EventType::from_code)
            .ok_or(ParseError::UnknownEventTypeCode { index, code })?;

        let mut ev = Event::new(typ);
        ev.seq = index as u64;
        ev.off = get_u64(obj, "Off", index, 0)?;
        ev.ts = get_u64(obj, "Ts", index, 0)?;
        ev.p = get_i64(obj, "P", index, NO_PROC)?;
        if ev.p < NO_PROC {
            return Err(ParseError::TypeMismatch { index, key: "P".into() });
        }
        ev.g = get_u64(obj, "G", index, 0)?;
        ev.stk_id = get_u64(obj, "StkID", index, 0)?;
        match obj.get("Stk") {
            None | Some(Value::Null) => {
                if let Some(fs) = stacks.get(&ev.stk_id).filter(|_| ev.stk_id != 0) {
                    ev.stk = fs.clone();
                }
            }
            Some(v) => ev.stk = parse_frames(v, Some(index))?,
        }
        match obj.get("Args") {
            None | Some(Value::Null) => {}
            Some(Value::Array(a)) if a.len() <= 3 => {
                for (slot, x) in a.iter().enumerate() {
                    ev.args[slot] = int_value(x)
                        .and_then(|i| u64::try_from(i).ok())
                        .ok_or_else(|| ParseError::TypeMismatch { index, key: "Args".into() })?;
                }
            }
            Some(_) => return Err(malformed(Some(index), "\"Args\" must be an array of at most 3 integers")),
        }
        match obj.get("SArgs") {
            None | Some(Value::Null) => {}
            Some(Value::Array(a)) => {
                for s in a {
                    let s = s.as_str().ok_or_else(|| malformed(Some(index), "\"SArgs\" entry is not a string"))?;
                    ev.sargs.push(s.to_string());
                }
            }
            Some(_) => return Err(malformed(Some(index), "\"SArgs\" is not an array")),
        }
        events.push(ev);
    }

    let mut trace = ParsedTrace::new(events, stacks);
    trace.sort_events();
    Ok(trace)
}

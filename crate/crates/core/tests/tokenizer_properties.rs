use goracle::dataset::{synth_traces, SynthConfig};
use goracle::tokenizer::{PAD, RESERVED, UNK};
use goracle::{build_vocab, serialize_trace, tokenize, Event, EventType, Field, FieldSet, Frame, ParsedTrace, StackTable};
use proptest::prelude::*;

fn is_subsequence(small: &[String], big: &[String]) -> bool {
    let mut it = big.iter();
    small.iter().all(|s| it.any(|b| b == s))
}

fn arb_fields() -> impl Strategy<Value = FieldSet> {
    (1u16..0x200).prop_map(|bits| FieldSet::from_bits(bits).unwrap())
}

fn generated(seed: u64) -> Vec<ParsedTrace> {
    let cfg = SynthConfig { traces_per_project: 2, events_min: 2, events_max: 8, seed, ..SynthConfig::default() };
    synth_traces(&cfg).unwrap().into_iter().map(|t| t.trace).collect()
}

/// One event per field carrying digits that occur nowhere else.
fn sentinel_trace() -> ParsedTrace {
    let mut stacks = StackTable::new();
    stacks.insert(86868, vec![Frame::new(1, "sentinel.fn", "s.go", 97979)]);
    let mut ev = Event::new(EventType::GoSysCall);
    ev.off = 11111;
    ev.ts = 22222;
    ev.p = 33333;
    ev.g = 44444;
    ev.stk_id = 86868;
    ev.stk = stacks[&86868].clone();
    ev.args = [55555, 0, 0];
    ev.sargs = vec!["sentinel-sarg".into()];
    ParsedTrace::new(vec![ev], stacks)
}

/// Tokens that only the given field can contribute to `sentinel_trace`.
fn sentinel_tokens(f: Field) -> Vec<&'static str> {
    match f {
        Field::Off => vec!["Off", "1"],
        Field::Type => vec!["EvGoSysCall"],
        Field::Ts => vec!["Ts", "2"],
        Field::P => vec!["P", "3"],
        Field::G => vec!["G", "4"],
        Field::StkID => vec!["StkID", "8", "6"],
        Field::Stk => vec!["Stk", "Fn:sentinel.fn", "9", "7"],
        Field::Args => vec!["Arg0", "5"],
        Field::SArgs => vec!["S:sentinel-sarg"],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masking_is_monotone(seed in any::<u64>(), a in arb_fields(), b in arb_fields()) {
        let sub = FieldSet::from_bits(a.bits() & b.bits()).unwrap_or(a);
        for t in generated(seed) {
            let full = serialize_trace(&t, a);
            let part = serialize_trace(&t, sub);
            prop_assert!(is_subsequence(&part, &full));
            prop_assert!(is_subsequence(&full, &serialize_trace(&t, FieldSet::ALL)));
        }
    }

    #[test]
    fn excluded_fields_leave_no_trace(fields in arb_fields()) {
        let tokens = serialize_trace(&sentinel_trace(), fields);
        for f in Field::ALL {
            if !fields.contains(f) {
                for s in sentinel_tokens(f) {
                    prop_assert!(!tokens.iter().any(|t| t == s), "{:?} leaked {:?} into {:?}", f, s, tokens);
                }
            }
        }
        prop_assert_eq!(tokens.last().map(String::as_str), Some("<EOT>"));
    }

    #[test]
    fn tokenize_is_deterministic_and_padded(seed in any::<u64>(), len in 1usize..300, fields in arb_fields()) {
        let traces = generated(seed);
        let vocab = build_vocab(traces.iter().map(|t| serialize_trace(t, fields)));
        prop_assert_eq!(&vocab, &build_vocab(traces.iter().map(|t| serialize_trace(t, fields))));
        for t in &traces {
            let s = tokenize(t, &vocab, fields, len);
            prop_assert_eq!(&s, &tokenize(t, &vocab, fields, len));
            prop_assert_eq!(s.ids.len(), len);
            prop_assert_eq!(s.true_len, serialize_trace(t, fields).len().min(len));
            prop_assert!(s.ids[s.true_len..].iter().all(|&i| i == PAD));
            prop_assert!(s.ids[..s.true_len].iter().all(|&i| i != PAD && i != UNK));
            prop_assert!(s.ids.iter().all(|&i| (i as usize) < vocab.len()));
        }
    }
}

#[test]
fn vocabulary_stays_small_on_the_synthetic_corpus() {
    let cfg = SynthConfig { num_projects: 8, traces_per_project: 60, events_min: 2, events_max: 12, ..SynthConfig::default() };
    let traces = synth_traces(&cfg).unwrap();
    let vocab = build_vocab(traces.iter().map(|t| serialize_trace(&t.trace, FieldSet::ALL)));
    assert!(vocab.len() < 200, "vocabulary of {} tokens", vocab.len());
    assert!(vocab.len() > RESERVED);
}

#[test]
fn unseen_tokens_map_to_unk() {
    let vocab = build_vocab([serialize_trace(&generated(1)[0], FieldSet::ALL)]);
    let s = tokenize(&sentinel_trace(), &vocab, FieldSet::ALL, 64);
    let fn_pos = serialize_trace(&sentinel_trace(), FieldSet::ALL).iter().position(|t| t == "Fn:sentinel.fn").unwrap();
    assert_eq!(s.ids[fn_pos], UNK);
}

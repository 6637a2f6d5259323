//! Sequences of irregularly timed events and their line-delimited record format.
//!
//! One sequence per line:
//!
//! ```text
//! {"seq_id":"s000001","label":1,"events":[{"t":0.0,"type":"e0","attrs":[["a0",2.5]]}]}
//! ```
//!
//! Parsing rebases times so the first event sits at 0, stably sorts events
//! by time (equal times keep record order) and pads or truncates the
//! attribute list to exactly three slots.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const ATTR_SLOTS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Attribute {
    pub value_type: String,
    pub value: f64,
}

impl Attribute {
    pub fn new(value_type: impl Into<String>, value: f64) -> Self {
        Self {
            value_type: value_type.into(),
            value,
        }
    }

    pub fn pad() -> Self {
        Self::new(PAD_TOKEN, 0.0)
    }

    pub fn is_pad(&self) -> bool {
        self.value_type == PAD_TOKEN
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Event {
    pub event_type: String,
    pub attrs: [Attribute; ATTR_SLOTS],
    /// Offset from the first event of the sequence.
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub seq_id: String,
    pub events: Vec<Event>,
    pub label: u8,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

/// Keeps the first three attributes and fills missing slots with `(PAD, 0)`.
pub fn pad_attributes(attrs: &[Attribute]) -> [Attribute; ATTR_SLOTS] {
    std::array::from_fn(|i| attrs.get(i).cloned().unwrap_or_else(Attribute::pad))
}

impl Sequence {
    /// Builds a sequence from raw absolute-time events, applying the
    /// ordering and rebasing rules.
    pub fn from_raw(seq_id: impl Into<String>, label: u8, mut events: Vec<Event>) -> Result<Self> {
        if events.is_empty() {
            return Err(Error::Validation("sequence has no events".into()));
        }
        for e in &events {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(Error::Validation(format!("event time {} is negative or non-finite", e.time)));
            }
        }
        // sort_by is stable: equal times keep record order
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let t0 = events[0].time;
        for e in &mut events {
            e.time -= t0;
        }
        let seq = Sequence {
            seq_id: seq_id.into(),
            events,
            label,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Checks every structural invariant of a parsed sequence.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(format!("sequence {}: {m}", self.seq_id)));
        if self.label > 1 {
            return fail(format!("label {} is not 0 or 1", self.label));
        }
        let Some(first) = self.events.first() else {
            return fail("no events".into());
        };
        if first.time != 0.0 {
            return fail(format!("first event at {} instead of 0", first.time));
        }
        let mut prev = 0.0;
        for (i, e) in self.events.iter().enumerate() {
            if !e.time.is_finite() || e.time < prev {
                return fail(format!("event {i} time {} breaks ordering", e.time));
            }
            prev = e.time;
            if e.event_type.is_empty() || e.event_type == PAD_TOKEN || e.event_type == UNK_TOKEN {
                return fail(format!("event {i} has invalid type {:?}", e.event_type));
            }
            for a in &e.attrs {
                if a.value_type.is_empty() || a.value_type == UNK_TOKEN {
                    return fail(format!("event {i} has invalid attribute type {:?}", a.value_type));
                }
                if !a.value.is_finite() {
                    return fail(format!("event {i} has non-finite attribute value"));
                }
            }
        }
        Ok(())
    }

    /// Keeps the most recent `max_len` events, rebased to start at 0.
    pub fn truncated(&self, max_len: usize) -> Sequence {
        if self.events.len() <= max_len || max_len == 0 {
            return self.clone();
        }
        let mut events = self.events[self.events.len() - max_len..].to_vec();
        let t0 = events[0].time;
        for e in &mut events {
            e.time -= t0;
        }
        Sequence {
            seq_id: self.seq_id.clone(),
            events,
            label: self.label,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordWire {
    seq_id: String,
    label: i64,
    events: Vec<EventWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventWire {
    t: f64,
    #[serde(rename = "type")]
    event_type: String,
    #[serde(default)]
    attrs: Vec<(String, f64)>,
}

/// Parses one record; `line` is 1-based and only used in messages.
pub fn parse_record(text: &str, line: usize) -> Result<Sequence> {
    let wire: RecordWire = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        msg: e.to_string(),
    })?;
    let at_line = |e: Error| match e {
        Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
        other => other,
    };
    if !(0..=1).contains(&wire.label) {
        return Err(at_line(Error::Validation(format!("label {} is not 0 or 1", wire.label))));
    }
    let events = wire
        .events
        .into_iter()
        .map(|e| {
            let attrs: Vec<Attribute> = e.attrs.into_iter().map(|(t, v)| Attribute::new(t, v)).collect();
            Event {
                event_type: e.event_type,
                attrs: pad_attributes(&attrs),
                time: e.t,
            }
        })
        .collect();
    Sequence::from_raw(wire.seq_id, wire.label as u8, events).map_err(at_line)
}

/// Parses a whole record file held in memory. Blank lines are skipped.
pub fn parse_dataset_str(text: &str) -> Result<Dataset> {
    let mut sequences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        sequences.push(parse_record(line, i + 1)?);
    }
    Ok(Dataset { sequences })
}

pub fn parse_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset_str(&text)
}

/// Serializes one sequence as a record line (no trailing newline).
/// Trailing `(PAD, 0)` slots are omitted; parsing restores them.
pub fn record_to_string(seq: &Sequence) -> String {
    let events = seq
        .events
        .iter()
        .map(|e| {
            let mut keep = ATTR_SLOTS;
            while keep > 0 && e.attrs[keep - 1] == Attribute::pad() {
                keep -= 1;
            }
            EventWire {
                t: e.time,
                event_type: e.event_type.clone(),
                attrs: e.attrs[..keep].iter().map(|a| (a.value_type.clone(), a.value)).collect(),
            }
        })
        .collect();
    let wire = RecordWire {
        seq_id: seq.seq_id.clone(),
        label: i64::from(seq.label),
        events,
    };
    serde_json::to_string(&wire).expect("record serializes")
}

pub fn dataset_to_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for s in &ds.sequences {
        out.push_str(&record_to_string(s));
        out.push('\n');
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, dataset_to_string(ds)).map_err(|e| Error::io(path, e))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.sequences.iter().try_for_each(Sequence::validate)
    }

    /// Latest event offset over all sequences.
    pub fn max_time(&self) -> f64 {
        self.sequences
            .iter()
            .filter_map(|s| s.events.last())
            .map(|e| e.time)
            .fold(0.0, f64::max)
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.sequences.is_empty() {
            return 0.0;
        }
        self.sequences.iter().filter(|s| s.label == 1).count() as f64 / self.sequences.len() as f64
    }
}

/// Token to dense id map with `PAD = 0` and `UNK = 1` reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TokenMap {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl TokenMap {
    /// Builds a map from data tokens in id order (ids start at 2).
    pub fn from_tokens(data_tokens: Vec<String>) -> Self {
        let mut map = TokenMap {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        map.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        map.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for t in data_tokens {
            map.insert(&t);
        }
        map
    }

    fn insert(&mut self, token: &str) {
        if !self.index.contains_key(token) {
            self.index.insert(token.to_string(), self.tokens.len());
            self.tokens.push(token.to_string());
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token) && token != PAD_TOKEN && token != UNK_TOKEN
    }

    /// Number of ids including the two reserved ones.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn data_tokens(&self) -> &[String] {
        &self.tokens[2..]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    pub event_types: TokenMap,
    pub attr_types: TokenMap,
}

/// Ids assigned by first occurrence over sequences, events, then slots.
pub fn build_vocab(train: &Dataset) -> Vocab {
    let mut vocab = Vocab::default();
    for s in &train.sequences {
        for e in &s.events {
            vocab.event_types.insert(&e.event_type);
            for a in e.attrs.iter().filter(|a| !a.is_pad()) {
                vocab.attr_types.insert(&a.value_type);
            }
        }
    }
    vocab
}

/// A sequence mapped to ids, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub event_ids: Vec<usize>,
    pub attr_ids: Vec<[usize; ATTR_SLOTS]>,
    pub attr_values: Vec<[f64; ATTR_SLOTS]>,
    pub times: Vec<f64>,
    pub label: u8,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.event_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_ids.is_empty()
    }
}

impl Vocab {
    pub fn encode(&self, seq: &Sequence) -> EncodedSequence {
        let n = seq.events.len();
        let mut out = EncodedSequence {
            event_ids: Vec::with_capacity(n),
            attr_ids: Vec::with_capacity(n),
            attr_values: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            label: seq.label,
        };
        for e in &seq.events {
            out.event_ids.push(self.event_types.id(&e.event_type));
            out.attr_ids.push(std::array::from_fn(|j| self.attr_types.id(&e.attrs[j].value_type)));
            out.attr_values.push(std::array::from_fn(|j| e.attrs[j].value));
            out.times.push(e.time);
        }
        out
    }

    /// Stable 64-bit digest of both token lists in id order.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (tag, map) in [(b'E', &self.event_types), (b'A', &self.attr_types)] {
            h.update([tag]);
            for t in &map.tokens {
                h.update((t.len() as u64).to_le_bytes());
                h.update(t.as_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attr(t: &str, v: f64) -> Attribute {
        Attribute::new(t, v)
    }

    #[test]
    fn rebases_times() {
        let s = parse_record(r#"{"seq_id":"a","label":0,"events":[{"t":5,"type":"x"},{"t":7,"type":"y"}]}"#, 1)
            .unwrap();
        let times: Vec<f64> = s.events.iter().map(|e| e.time).collect();
        assert_eq!(times, vec![0.0, 2.0]);
    }

    #[test]
    fn sorts_out_of_order_events_stably() {
        let s = parse_record(
            r#"{"seq_id":"a","label":1,"events":[{"t":3,"type":"late"},{"t":1,"type":"p"},{"t":1,"type":"q"}]}"#,
            1,
        )
        .unwrap();
        let order: Vec<&str> = s.events.iter().map(|e| e.event_type.as_str()).collect();
        assert_eq!(order, vec!["p", "q", "late"]);
        assert_eq!(s.events[2].time, 2.0);
    }

    #[test]
    fn label_two_is_rejected() {
        let err = parse_record(r#"{"seq_id":"a","label":2,"events":[{"t":0,"type":"x"}]}"#, 4).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 4"));
    }

    #[test]
    fn empty_events_and_negative_times_are_rejected() {
        let e = parse_record(r#"{"seq_id":"a","label":0,"events":[]}"#, 1).unwrap_err();
        assert!(matches!(e, Error::Validation(_)));
        let e = parse_record(r#"{"seq_id":"a","label":0,"events":[{"t":-1,"type":"x"}]}"#, 1).unwrap_err();
        assert!(matches!(e, Error::Validation(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"seq_id\":\"a\",\"label\":0,\"events\":[{\"t\":0,\"type\":\"x\"}]}\n\n{oops\n";
        match parse_dataset_str(text).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pads_and_truncates_attributes() {
        let one = pad_attributes(&[attr("a1", 1.0)]);
        assert_eq!(one, [attr("a1", 1.0), Attribute::pad(), Attribute::pad()]);
        let five: Vec<_> = (1..=5).map(|i| attr(&format!("a{i}"), i as f64)).collect();
        assert_eq!(pad_attributes(&five), [attr("a1", 1.0), attr("a2", 2.0), attr("a3", 3.0)]);
        let three = [attr("a", 1.0), attr("b", 2.0), attr("c", 3.0)];
        assert_eq!(pad_attributes(&three), three);
    }

    #[test]
    fn vocab_ids_follow_first_occurrence() {
        let ds = parse_dataset_str(
            "{\"seq_id\":\"a\",\"label\":0,\"events\":[{\"t\":0,\"type\":\"A\",\"attrs\":[[\"u\",1]]},{\"t\":1,\"type\":\"B\"},{\"t\":2,\"type\":\"A\"}]}\n",
        )
        .unwrap();
        let v = build_vocab(&ds);
        assert_eq!(v.event_types.id("A"), 2);
        assert_eq!(v.event_types.id("B"), 3);
        assert_eq!(v.event_types.id("C"), UNK_ID);
        assert_eq!(v.attr_types.id("u"), 2);
        assert_eq!(v.attr_types.id(PAD_TOKEN), PAD_ID);
        assert_eq!(build_vocab(&ds), v);
        assert_eq!(build_vocab(&ds).hash(), v.hash());
    }

    #[test]
    fn reserved_tokens_cannot_be_event_types() {
        let e = parse_record(r#"{"seq_id":"a","label":0,"events":[{"t":0,"type":"<unk>"}]}"#, 1).unwrap_err();
        assert!(matches!(e, Error::Validation(_)));
    }

    #[test]
    fn truncation_keeps_recent_events() {
        let s = parse_record(
            r#"{"seq_id":"a","label":1,"events":[{"t":0,"type":"a"},{"t":2,"type":"b"},{"t":5,"type":"c"}]}"#,
            1,
        )
        .unwrap();
        let t = s.truncated(2);
        assert_eq!(t.events.len(), 2);
        assert_eq!(t.events[0].event_type, "b");
        assert_eq!(t.events[1].time, 3.0);
        t.validate().unwrap();
    }

    #[test]
    fn encode_maps_pad_slots_to_pad_id() {
        let s = parse_record(
            r#"{"seq_id":"a","label":1,"events":[{"t":0,"type":"A","attrs":[["u",2.5]]}]}"#,
            1,
        )
        .unwrap();
        let v = build_vocab(&Dataset { sequences: vec![s.clone()] });
        let enc = v.encode(&s);
        assert_eq!(enc.attr_ids[0], [2, PAD_ID, PAD_ID]);
        assert_eq!(enc.attr_values[0], [2.5, 0.0, 0.0]);
    }
}

use proptest::prelude::*;
use tsfuse::events::{
    build_vocab, dataset_to_string, parse_dataset, parse_dataset_str, write_dataset, Attribute, Dataset, Event, Sequence,
    PAD_TOKEN,
};
use tsfuse::Error;

fn attribute() -> impl Strategy<Value = Attribute> {
    prop_oneof![
        1 => Just(Attribute::pad()),
        4 => ("[a-z]{1,4}", -1e6..1e6f64).prop_map(|(t, v)| Attribute::new(t, v)),
    ]
}

fn event() -> impl Strategy<Value = Event> {
    ("[A-Za-z][a-z0-9_]{0,5}", 0.0..1e4f64, proptest::collection::vec(attribute(), 0..5)).prop_map(|(ty, t, attrs)| Event {
        event_type: ty,
        attrs: tsfuse::events::pad_attributes(&attrs),
        time: t,
    })
}

fn sequence() -> impl Strategy<Value = Sequence> {
    ("[a-z0-9]{1,8}", 0u8..2, proptest::collection::vec(event(), 1..12))
        .prop_map(|(id, label, events)| Sequence::from_raw(id, label, events).unwrap())
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(seqs in proptest::collection::vec(sequence(), 0..6)) {
        let ds = Dataset { sequences: seqs };
        let back = parse_dataset_str(&dataset_to_string(&ds)).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn parsed_sequences_satisfy_invariants(seq in sequence()) {
        seq.validate().unwrap();
        prop_assert_eq!(seq.events[0].time, 0.0);
        prop_assert!(seq.events.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn vocab_ids_are_dense(seqs in proptest::collection::vec(sequence(), 1..5)) {
        let ds = Dataset { sequences: seqs };
        let v = build_vocab(&ds);
        let mut ids: Vec<usize> = v.event_types.data_tokens().iter().map(|t| v.event_types.id(t)).collect();
        ids.sort();
        prop_assert_eq!(ids, (2..v.event_types.len()).collect::<Vec<_>>());
    }
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let text = concat!(
        r#"{"seq_id":"a","label":1,"events":[{"t":7,"type":"x","attrs":[["hr",80.5]]},{"t":5,"type":"y"}]}"#,
        "\n\n",
        r#"{"seq_id":"b","label":0,"events":[{"t":3,"type":"x"},{"t":3,"type":"z"}]}"#,
        "\n"
    );
    std::fs::write(&path, text).unwrap();
    let ds = parse_dataset(&path).unwrap();
    assert_eq!(ds.sequences[0].events[0].event_type, "y");
    assert_eq!(ds.sequences[0].events[1].time, 2.0);
    assert_eq!(ds.sequences[0].events[1].attrs[1].value_type, PAD_TOKEN);
    assert_eq!(ds.sequences[1].events[1].event_type, "z");

    let out = dir.path().join("nested/out.jsonl");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();
    write_dataset(&out, &ds).unwrap();
    assert_eq!(parse_dataset(&out).unwrap(), ds);

    std::fs::write(&path, "{\"seq_id\":\"a\",\"label\":0,\"events\":[]}\n").unwrap();
    assert!(matches!(parse_dataset(&path), Err(Error::Validation(_))));
    std::fs::write(&path, "\n{not json\n").unwrap();
    assert!(matches!(parse_dataset(&path), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(parse_dataset(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn rejects_bad_records() {
    let bad = [
        r#"{"seq_id":"a","label":2,"events":[{"t":0,"type":"x"}]}"#,
        r#"{"seq_id":"a","label":0,"events":[{"t":-1,"type":"x"}]}"#,
        r#"{"seq_id":"a","label":0,"events":[{"t":0,"type":"<pad>"}]}"#,
        r#"{"seq_id":"a","label":0,"events":[{"t":0,"type":"x","attrs":[["<unk>",1]]}]}"#,
        r#"{"seq_id":"a","label":0,"events":[{"t":0,"type":"x"}],"extra":1}"#,
    ];
    for b in bad {
        assert!(parse_dataset_str(b).is_err(), "{b}");
    }
}

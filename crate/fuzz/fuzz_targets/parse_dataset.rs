#![no_main]

use libfuzzer_sys::fuzz_target;
use tsfuse::events::{build_vocab, parse_dataset_str};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ds) = parse_dataset_str(text) {
        let vocab = build_vocab(&ds);
        for s in &ds.sequences {
            assert_eq!(vocab.encode(s).len(), s.len());
        }
    }
});

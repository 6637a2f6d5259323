#![no_main]

use libfuzzer_sys::fuzz_target;
use tsfuse::events::{parse_record, record_to_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(seq) = parse_record(text, 1) {
        seq.validate().expect("parsed records are valid");
        let again = parse_record(&record_to_string(&seq), 1).expect("serialized record parses");
        assert_eq!(again, seq);
    }
});

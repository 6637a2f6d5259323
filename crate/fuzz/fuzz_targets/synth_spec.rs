#![no_main]

use libfuzzer_sys::fuzz_target;
use tsfuse::synth::SynthSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = SynthSpec::from_json(text);
    }
});

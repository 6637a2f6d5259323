#![no_main]

use libfuzzer_sys::fuzz_target;
use tsfuse::harness::decode_checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        assert_eq!(decode_checkpoint(&ckpt.encode()).expect("re-encoded checkpoint decodes").encode(), ckpt.encode());
    }
});

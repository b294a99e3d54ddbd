#![no_main]
use camforge::snapshot;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = snapshot::decode(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(snapshot::encode(&t), data);
    }
});

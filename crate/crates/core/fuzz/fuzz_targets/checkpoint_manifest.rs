#![no_main]
use camforge::model::parse_checkpoint_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_checkpoint_manifest(text);
});

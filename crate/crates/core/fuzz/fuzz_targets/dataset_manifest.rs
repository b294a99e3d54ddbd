#![no_main]
use camforge::data::parse_manifest_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    for line in text.lines() {
        let _ = parse_manifest_line(line);
    }
});

#![no_main]
use camforge::pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = pgm::decode(data) {
        assert_eq!(img.pixels.len(), img.width * img.height);
        assert_eq!(pgm::decode(&pgm::encode(&img)).unwrap(), img);
    }
});

#![no_main]
use camforge::kv::KvFile;
use camforge::runconfig::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(kv) = KvFile::parse(text) {
        assert_eq!(KvFile::parse(&kv.render()).unwrap(), kv);
    }
    if let Ok(cfg) = RunConfig::parse(text, &[]) {
        let again = RunConfig::parse(&cfg.render(), &[]).unwrap();
        assert_eq!(again.render(), cfg.render());
    }
});

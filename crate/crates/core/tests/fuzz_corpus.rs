//! Replays the checked-in fuzz corpus seeds through the same checks the
//! fuzz targets make, so the seeds stay valid on a stable toolchain.

use std::fs;
use std::path::PathBuf;

use camforge::data::parse_manifest_line;
use camforge::kv::KvFile;
use camforge::model::parse_checkpoint_manifest;
use camforge::runconfig::RunConfig;
use camforge::{pgm, snapshot};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn snapshot_seeds_round_trip() {
    for (name, bytes) in seeds("snapshot_decode") {
        let t = snapshot::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(snapshot::encode(&t), bytes, "{name}");
    }
}

#[test]
fn pgm_seeds_round_trip() {
    for (name, bytes) in seeds("pgm_decode") {
        let img = pgm::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(pgm::decode(&pgm::encode(&img)).unwrap(), img, "{name}");
    }
}

#[test]
fn run_config_seeds_parse() {
    for (name, bytes) in seeds("run_config") {
        let text = String::from_utf8(bytes).unwrap();
        let kv = KvFile::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(KvFile::parse(&kv.render()).unwrap(), kv);
        let cfg = RunConfig::parse(&text, &[]).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::parse(&cfg.render(), &[]).unwrap(), cfg);
    }
}

#[test]
fn manifest_seeds_parse() {
    for (name, bytes) in seeds("dataset_manifest") {
        let text = String::from_utf8(bytes).unwrap();
        for line in text.lines().skip(1) {
            parse_manifest_line(line).unwrap_or_else(|e| panic!("{name}: {line:?}: {e}"));
        }
    }
    for (name, bytes) in seeds("checkpoint_manifest") {
        let text = String::from_utf8(bytes).unwrap();
        let (cfg, tensors) = parse_checkpoint_manifest(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert!(cfg.validate().is_ok() && !tensors.is_empty(), "{name}");
    }
}

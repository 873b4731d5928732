//! Replays the checked-in fuzz corpus through the parser entry points on the
//! stable toolchain. Seeds for well-formed inputs must parse; every seed must
//! be handled without a panic.

use std::fs;
use std::path::PathBuf;

use slowfast::averaging::DriftCacheFile;
use slowfast::harness::{RunConfig, RunRecord};
use slowfast::ldp::{ControlPath, RateRecord};
use slowfast::measure::ParticleCloud;
use slowfast::sde_engine::Trajectory;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "fuzz", "corpus", target].iter().collect();
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
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
fn config_seeds() {
    for (name, bytes) in seeds("config_json") {
        let text = String::from_utf8(bytes).unwrap();
        let parsed = RunConfig::from_json(&text);
        if name == "unknown_key.json" {
            assert!(parsed.is_err());
            continue;
        }
        let cfg = parsed.unwrap_or_else(|e| panic!("{name}: {e}"));
        let back = RunConfig::from_json(&cfg.canonical_json().unwrap()).unwrap();
        assert_eq!(back.content_hash().unwrap(), cfg.content_hash().unwrap());
    }
}

#[test]
fn csv_seeds() {
    for (name, bytes) in seeds("cloud_csv") {
        ParticleCloud::read_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("trajectory_csv") {
        Trajectory::read_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("control_csv") {
        ControlPath::read_csv(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn json_record_seeds() {
    for (name, bytes) in seeds("run_record_json") {
        RunRecord::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("rate_record_json") {
        RateRecord::read(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in seeds("drift_cache_json") {
        DriftCacheFile::read(bytes.as_slice()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}

#[test]
fn truncated_seeds_do_not_panic() {
    for target in ["config_json", "cloud_csv", "trajectory_csv", "control_csv", "run_record_json", "rate_record_json", "drift_cache_json"] {
        for (_, bytes) in seeds(target) {
            for cut in (0..bytes.len()).step_by(7) {
                let b = &bytes[..cut];
                let s = String::from_utf8_lossy(b);
                let _ = RunConfig::from_json(&s);
                let _ = RunRecord::from_json(&s);
                let _ = ParticleCloud::read_csv(b);
                let _ = Trajectory::read_csv(b);
                let _ = ControlPath::read_csv(b);
                let _ = RateRecord::read(b);
                let _ = DriftCacheFile::read(b);
            }
        }
    }
}

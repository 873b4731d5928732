#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::harness::RunConfig;

fuzz_target!(|data: &str| {
    if let Ok(cfg) = RunConfig::from_json(data) {
        // The canonical form must parse back to the same config.
        let text = cfg.canonical_json().unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back.content_hash().unwrap(), cfg.content_hash().unwrap());
    }
});

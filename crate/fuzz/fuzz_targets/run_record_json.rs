#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::harness::RunRecord;

fuzz_target!(|data: &str| {
    let _ = RunRecord::from_json(data);
});

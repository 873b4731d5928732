#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::ldp::RateRecord;

fuzz_target!(|data: &[u8]| {
    let _ = RateRecord::read(data);
});

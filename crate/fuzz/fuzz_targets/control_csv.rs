#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::ldp::ControlPath;

fuzz_target!(|data: &[u8]| {
    let _ = ControlPath::read_csv(data);
});

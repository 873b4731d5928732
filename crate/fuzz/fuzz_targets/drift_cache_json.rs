#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::averaging::DriftCacheFile;

fuzz_target!(|data: &[u8]| {
    let _ = DriftCacheFile::read(data);
});

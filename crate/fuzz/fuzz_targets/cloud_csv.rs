#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::measure::ParticleCloud;

fuzz_target!(|data: &[u8]| {
    if let Ok(cloud) = ParticleCloud::read_csv(data) {
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf).unwrap();
        assert_eq!(ParticleCloud::read_csv(buf.as_slice()).unwrap(), cloud);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use slowfast::sde_engine::Trajectory;

fuzz_target!(|data: &[u8]| {
    if let Ok(traj) = Trajectory::read_csv(data) {
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        assert_eq!(Trajectory::read_csv(buf.as_slice()).unwrap(), traj);
    }
});

#![no_main]

use cooptraj_core::Trajectory;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // accepted trajectories must survive a round trip unchanged
    if let Ok(t) = serde_json::from_str::<Trajectory>(text) {
        let back: Trajectory = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(back, t);
    }
});

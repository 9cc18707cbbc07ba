#![no_main]

use cooptraj_core::session::{Phase, SessionConfig, SessionRegistry};
use libfuzzer_sys::fuzz_target;

// One inbound message per line; the first line opens the connection.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let mut lines = text.lines();
    let Some(first) = lines.next() else {
        return;
    };
    let mut registry = SessionRegistry::new(SessionConfig::default());
    let Some(mut session) = registry.connect(first, 0.0).session else {
        return;
    };
    let mut last = 0;
    for (k, line) in lines.take(64).enumerate() {
        for m in session.handle_text(line, k as f64) {
            assert!(m.seq > last);
            last = m.seq;
        }
        if session.phase() == Phase::Executing {
            assert!(session.joint().is_some());
            // a few ticks are enough; full runs are slow under the fuzzer
            for _ in 0..3 {
                if let Some(m) = session.next_tick() {
                    assert!(m.seq > last);
                    last = m.seq;
                }
            }
        }
    }
});

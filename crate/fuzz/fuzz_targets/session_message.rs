#![no_main]

use cooptraj_core::session::parse_message;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(m) = parse_message(text) {
        assert_eq!(parse_message(&m.to_json()).unwrap(), m);
    }
});

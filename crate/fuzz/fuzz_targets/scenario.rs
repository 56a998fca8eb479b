#![no_main]

use libfuzzer_sys::fuzz_target;
use lmdbot::harness::Scenario;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(sc) = Scenario::parse(text) {
            let _ = sc.validate();
        }
    }
});

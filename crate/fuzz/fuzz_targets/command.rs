#![no_main]

use libfuzzer_sys::fuzz_target;
use lmdbot::teleop::{decode_command, encode_command};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cmd) = decode_command(text) {
        assert_eq!(decode_command(&encode_command(&cmd)).expect("re-decode"), cmd);
    }
});

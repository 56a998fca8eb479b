#![no_main]

use libfuzzer_sys::fuzz_target;
use lmdbot::mapio::{decode_pgm, encode_pgm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        // Anything decoded must survive a round trip.
        let again = decode_pgm(&encode_pgm(&img)).expect("re-decode");
        assert_eq!(again.pixels, img.pixels);
    }
});

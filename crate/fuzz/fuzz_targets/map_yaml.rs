#![no_main]

use libfuzzer_sys::fuzz_target;
use lmdbot::mapio::{graymap_to_grid, Graymap, MapMetadata};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = MapMetadata::parse(text) {
        let img = Graymap {
            width: 3,
            height: 2,
            maxval: 255,
            pixels: vec![0, 128, 254, 205, 255, 1],
        };
        let _ = graymap_to_grid(&img, &meta);
    }
});

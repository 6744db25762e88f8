#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::data::{maybe_gunzip, parse_idx_images};

fuzz_target!(|data: &[u8]| {
    if let Ok(images) = parse_idx_images(data) {
        // the parser rejects trailing bytes, so a parse is a canonical encoding
        assert_eq!(images.to_bytes(), data);
    }
    if let Ok(raw) = maybe_gunzip(data) {
        let _ = parse_idx_images(&raw);
    }
});

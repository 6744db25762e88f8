#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::io::{linear_from_text, linear_to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(inst) = linear_from_text(text) {
        let _ = linear_from_text(&linear_to_text(&inst));
    }
});

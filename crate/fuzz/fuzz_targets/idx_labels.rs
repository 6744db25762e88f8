#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::data::{labels_to_idx, parse_idx_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(labels) = parse_idx_labels(data) {
        assert_eq!(labels_to_idx(&labels), data);
    }
});

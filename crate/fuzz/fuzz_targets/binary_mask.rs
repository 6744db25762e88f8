#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::io::{binary_mask_from_bytes, binary_mask_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = binary_mask_from_bytes(data) {
        assert_eq!(binary_mask_from_bytes(&binary_mask_to_bytes(&mask)).unwrap(), mask);
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::io::{mask_distribution_from_bytes, mask_distribution_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(dist) = mask_distribution_from_bytes(data) {
        let again = mask_distribution_from_bytes(&mask_distribution_to_bytes(&dist)).expect("re-encoded distribution parses");
        assert_eq!(again.len(), dist.len());
        assert!(dist.lambda().iter().all(|l| (0.0..=1.0).contains(l)));
    }
});

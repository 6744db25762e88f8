#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::io::{spike_slab_from_bytes, spike_slab_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(q) = spike_slab_from_bytes(data) {
        let again = spike_slab_from_bytes(&spike_slab_to_bytes(&q)).expect("re-encoded spike-slab parses");
        assert_eq!(again.len(), q.len());
    }
});

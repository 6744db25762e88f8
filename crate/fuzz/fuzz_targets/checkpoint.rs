#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::io::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ck.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again.net.layer_dims(), ck.net.layer_dims());
    }
});

#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::config::KeyValues;

const KEYS: &[&str] = &["seed", "sparsity", "alpha", "sigma2", "data", "hidden"];

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KeyValues::parse(text, KEYS) {
        assert_eq!(KeyValues::parse(&kv.to_text(), KEYS).unwrap(), kv);
    }
});

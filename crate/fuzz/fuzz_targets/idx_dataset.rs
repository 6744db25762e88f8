#![no_main]
use libfuzzer_sys::fuzz_target;
use stochprune::data::dataset_from_idx;

// First byte picks where the input splits into image and label files.
fuzz_target!(|data: &[u8]| {
    let Some((&cut, rest)) = data.split_first() else { return };
    let cut = (cut as usize * rest.len()) / 255;
    let (images, labels) = rest.split_at(cut.min(rest.len()));
    if let Ok(ds) = dataset_from_idx(images, labels) {
        assert_eq!(ds.inputs.nrows(), ds.labels.len());
        assert!(ds.labels.iter().all(|&y| y < ds.num_classes));
    }
});

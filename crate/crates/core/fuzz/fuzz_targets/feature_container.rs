#![no_main]

use conmh::dataset::FeatureDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = FeatureDataset::from_bytes(data, "fuzz") {
        ds.validate().expect("decoded datasets are valid");
        let again = FeatureDataset::from_bytes(&ds.to_bytes().expect("re-encodes"), "fuzz").unwrap();
        assert_eq!(again.len(), ds.len());
    }
});

#![no_main]

use conmh::model::Model;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = Model::from_bytes(data) {
        model.config().validate().expect("decoded configs are valid");
        assert!(Model::from_bytes(&model.to_bytes()).is_ok());
    }
});

#![no_main]

use conmh::dataset::SyntheticParams;
use conmh::model::ModelConfig;
use conmh::retrieval::EvalConfig;
use conmh::trainer::TrainConfig;
use conmh_cli::config::parse_config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = serde_json::from_str::<ModelConfig>(text) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_json::from_str::<TrainConfig>(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.validate_for_frames(16);
        }
    }
    if let Ok(cfg) = serde_json::from_str::<EvalConfig>(text) {
        if cfg.validate().is_ok() {
            let _ = cfg.query_indices(10);
        }
    }
    let _ = serde_json::from_str::<SyntheticParams>(text);
    if let Ok(file) = parse_config(text) {
        let _ = file.model(None, None, 8, 8);
    }
});

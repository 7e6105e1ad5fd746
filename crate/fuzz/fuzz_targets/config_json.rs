#![no_main]

use c3vg::config::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = TrainConfig::from_json_str(text) {
        let json = serde_json::to_string(&cfg).expect("serialize accepted config");
        TrainConfig::from_json_str(&json).expect("accepted config must reparse");
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use unfold::bench::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let printed = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&printed).unwrap(), cfg);
    }
});

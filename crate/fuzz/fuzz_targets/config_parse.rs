#![no_main]

use dualvae::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = TrainConfig::parse(text) {
        // Anything accepted must survive a round trip unchanged.
        let again = TrainConfig::parse(&cfg.to_text()).expect("serialised config parses");
        assert_eq!(again, cfg);
    }
});

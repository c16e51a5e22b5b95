#![no_main]

use affectkit::config::Config;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::parse(text) {
        let echoed = Config::parse(&cfg.to_text()).expect("effective config parses");
        assert_eq!(echoed, cfg);
        let _ = cfg.train_config();
    }
});

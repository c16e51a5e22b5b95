#![no_main]

use affectkit::trainer::parse_log;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(log) = parse_log(text) {
        let again = parse_log(&log.to_text()).expect("written log parses");
        assert_eq!(again.entries.len(), log.entries.len());
    }
});

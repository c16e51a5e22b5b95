#![no_main]

use affectkit::data::{parse_manifest, write_manifest};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_manifest(text) {
        let written = write_manifest(rows.iter().map(|r| (r.id.as_str(), r.frames_dir.as_str(), r.valence, r.arousal)));
        let again = parse_manifest(&written).expect("written manifest parses");
        assert_eq!(again.len(), rows.len());
    }
});

#![no_main]

use affectkit::postproc::tracks_from_container;
use affectkit::tensor::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::decode(data) {
        // anything that decodes must re-encode to a decodable equal container
        let again = Container::decode(&c.encode()).expect("re-encoded container decodes");
        assert_eq!(again.encode(), c.encode());
        let _ = tracks_from_container(&c);
        let _ = affectkit::model::spec_from_container(&c);
    }
});

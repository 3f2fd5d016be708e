#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc::pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = pgm::decode(data) {
        // anything we accept must survive a re-encode unchanged
        let again = pgm::decode(&pgm::encode(&map)).expect("re-encoded map decodes");
        assert_eq!(again, map);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc::pipeline;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = pipeline::parse_condition(data) {
        let text = serde_json::to_vec(&m).unwrap();
        assert_eq!(pipeline::parse_condition(&text).unwrap(), m);
        if let Some(p) = &m.saliency_map {
            assert!(!p.starts_with('/') && !p.split('/').any(|c| c == ".."));
        }
    }
});

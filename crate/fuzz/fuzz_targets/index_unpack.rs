#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc::vq;

// Layout: n_idx (u16 BE), count (u8), payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 3 {
        return;
    }
    let n_idx = u16::from_be_bytes([data[0], data[1]]) as usize;
    let count = data[2] as usize;
    let payload = &data[3..];
    if let Ok(raw) = vq::unpack_indices(payload, count, n_idx) {
        assert_eq!(raw.len(), count);
        assert_eq!(payload.len(), vq::payload_bytes(count, n_idx));
        if raw.iter().all(|&i| i < n_idx) {
            let packed = vq::pack_indices(&raw, n_idx).expect("in-range indices pack");
            assert_eq!(vq::unpack_indices(&packed, count, n_idx).unwrap(), raw);
        }
    }
});

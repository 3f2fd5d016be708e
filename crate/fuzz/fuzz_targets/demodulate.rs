#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc::channel::{bpsk_detect, pam_decide};

// First byte picks the PAM order; the rest are f64 LE receiver samples.
fuzz_target!(|data: &[u8]| {
    let Some((&order, rest)) = data.split_first() else {
        return;
    };
    let n = order as usize + 2;
    let samples: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(bpsk_detect(&samples).len(), samples.len().div_ceil(8));
    for &y in &samples {
        let (i, _) = pam_decide(y, n);
        assert!(i < n);
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use ulbsc_autodiff::checkpoint;

// Manifest JSON and weight blob separated by the first zero byte.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let (manifest, blob) = (&data[..split], data.get(split + 1..).unwrap_or(&[]));
    if let Ok((m, params)) = checkpoint::decode(manifest, blob) {
        assert_eq!(m.params.len(), params.len());
        let total: usize = params.iter().map(|(_, t)| t.numel() * 4).sum();
        assert_eq!(total, blob.len());
    }
});

#![no_main]

use fieldmeta::signals::codec::decode_wav;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = decode_wav(data) {
        assert!(s.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});

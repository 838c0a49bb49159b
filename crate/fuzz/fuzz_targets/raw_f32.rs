#![no_main]

use fieldmeta::signals::codec::{decode_raw_f32, parse_length_sidecar};
use libfuzzer_sys::fuzz_target;

// Input: sidecar text, a NUL byte, then the sample bytes.
fuzz_target!(|data: &[u8]| {
    let (sidecar, body) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], &data[i + 1..]),
        None => (data, &[][..]),
    };
    if let Ok(count) = parse_length_sidecar(sidecar) {
        if let Ok(s) = decode_raw_f32(body, count) {
            assert_eq!(s.values.len(), count);
        }
    }
});

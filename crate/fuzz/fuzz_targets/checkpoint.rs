#![no_main]

use fieldmeta::persistence::{Checkpoint, FittedParams};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::from_bytes(data) {
        assert_eq!(c.to_bytes(), data);
    }
    if let Ok(p) = FittedParams::from_bytes(data) {
        assert_eq!(p.to_bytes(), data);
    }
});

#![no_main]

use fieldmeta::signals::codec::decode_png;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_png(data) {
        assert_eq!(img.data.len(), img.width * img.height * img.channels);
    }
});

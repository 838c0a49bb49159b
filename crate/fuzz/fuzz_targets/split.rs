#![no_main]

use fieldmeta::signals::dataset::parse_split;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(split) = parse_split(text) {
            assert_eq!(parse_split(&split.to_text()).unwrap(), split);
        }
    }
});

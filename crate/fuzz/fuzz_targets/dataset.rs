#![no_main]

use libfuzzer_sys::fuzz_target;
use tnmps::motzkin::parse_dataset;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(lines) = parse_dataset(text) {
        for (chain, label) in lines {
            if let Some(l) = label {
                assert!(l <= 1);
            }
            let _ = chain.is_valid();
        }
    }
});

#![no_main]

use libfuzzer_sys::fuzz_target;
use tnmps::motzkin::{decode_chain, encode_chain};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let n = text.chars().count();
    if let Ok(chain) = encode_chain(text, n) {
        assert_eq!(decode_chain(&chain), text);
        let _ = chain.is_valid();
    }
});

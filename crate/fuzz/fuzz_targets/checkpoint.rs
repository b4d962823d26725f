#![no_main]

use libfuzzer_sys::fuzz_target;
use tnmps::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(back.encode(), bytes);
    }
});

#![no_main]

use c3vg::rle::{self, MaskRle};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(parsed) = serde_json::from_slice::<MaskRle>(data) else {
        return;
    };
    // Bound the decoded size so the fuzzer explores structure rather than allocation.
    if parsed.size[0].saturating_mul(parsed.size[1]) > 1 << 20 {
        return;
    }
    if let Ok(mask) = rle::decode(&parsed) {
        assert_eq!(rle::decode(&rle::encode(&mask)).expect("re-decode"), mask);
    }
});

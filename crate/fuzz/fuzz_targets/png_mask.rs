#![no_main]

use c3vg::data::decode_png_mask;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(mask) = decode_png_mask(data) {
        assert!(mask.count() <= mask.height() * mask.width());
    }
});

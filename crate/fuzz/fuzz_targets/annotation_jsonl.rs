#![no_main]

use c3vg::data::{parse_annotation_line, union_polygons};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for (i, line) in text.lines().enumerate() {
        let Ok(rec) = parse_annotation_line(line, i + 1) else {
            continue;
        };
        // Accepted records must round-trip and their polygons must rasterize without panics.
        let json = serde_json::to_string(&rec).expect("serialize accepted record");
        assert_eq!(parse_annotation_line(&json, i + 1).expect("reparse"), rec);
        if let Some(polys) = &rec.mask.polygon {
            let _ = union_polygons(polys, 24, 24, i + 1);
        }
    }
});

#![no_main]

use c3vg::data::rasterize_polygon;
use libfuzzer_sys::fuzz_target;

// Input: height byte, width byte, then little-endian f64 (x, y) pairs.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let (h, w) = (usize::from(data[0] % 64), usize::from(data[1] % 64));
    let vals: Vec<f64> = data[2..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let verts: Vec<(f64, f64)> = vals.chunks_exact(2).map(|p| (p[0], p[1])).collect();
    if let Ok(mask) = rasterize_polygon(&verts, h, w) {
        assert_eq!(mask.dims(), (h, w));
    }
});

use c3vg::data::{generate_scene, render_sample, resolve_expression};
use c3vg::geometry::mask_min_bbox;
use c3vg_oracles::{oracle_resolve, oracle_rasterize};

const SIZE: usize = 64;

#[test]
fn every_expression_resolves_to_its_referent() {
    let margin = 0.05 * SIZE as f64;
    for seed in 0..10_000 {
        let spec = generate_scene(seed, SIZE).unwrap();
        let expr = spec.expression();
        assert_eq!(oracle_resolve(&spec.objects, &expr, margin), vec![spec.referent], "seed {seed}: {expr}");
        assert_eq!(resolve_expression(&spec.objects, &expr, SIZE), vec![spec.referent], "seed {seed}: {expr}");
    }
}

#[test]
fn gold_box_is_tight_around_gold_mask() {
    for seed in 0..200 {
        let s = render_sample(&generate_scene(seed, SIZE).unwrap(), "x").unwrap();
        let tight = mask_min_bbox(&s.gold_mask).unwrap();
        for (a, b) in s.gold_box.to_array().iter().zip(tight.to_array()) {
            assert!((a - b).abs() < 1e-9, "seed {seed}: {:?} vs {:?}", s.gold_box, tight);
        }
    }
}

#[test]
fn polygon_shapes_match_oracle_raster() {
    use c3vg::data::Shape;
    let mut checked = 0;
    for seed in 0..500 {
        let spec = generate_scene(seed, SIZE).unwrap();
        for obj in spec.objects.iter().filter(|o| o.shape != Shape::Circle) {
            let half = obj.size.pixels(SIZE) as f64 / 2.0;
            let verts = match obj.shape {
                Shape::Square => vec![
                    (obj.cx - half, obj.cy - half),
                    (obj.cx + half, obj.cy - half),
                    (obj.cx + half, obj.cy + half),
                    (obj.cx - half, obj.cy + half),
                ],
                _ => vec![(obj.cx, obj.cy - half), (obj.cx + half, obj.cy + half), (obj.cx - half, obj.cy + half)],
            };
            assert_eq!(obj.raster(SIZE).unwrap(), oracle_rasterize(&verts, SIZE, SIZE), "seed {seed}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}

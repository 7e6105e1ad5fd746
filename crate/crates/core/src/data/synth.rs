//! Synthetic referring-expression scenes: flat-colored shapes on a plain background, each
//! paired with the shortest template expression that singles out one object.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{raster::rasterize_polygon, GroundingSample, RgbImage};
use crate::error::{Error, Result};
use crate::geometry::{mask_min_bbox, BinaryMask};

pub const GRAMMAR_VERSION: u32 = 1;
const BACKGROUND: [u8; 3] = [24, 24, 24];
const MIN_OBJECTS: usize = 2;
const MAX_OBJECTS: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 100;
/// Minimum center distance as a fraction of the image side.
const MIN_CENTER_DIST: f64 = 0.15;
/// Spatial relations need at least this much separation (fraction of the image side).
const RELATION_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Cyan,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 8] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Purple,
        Color::Orange,
        Color::Cyan,
        Color::White,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Cyan => "cyan",
            Color::White => "white",
        }
    }

    pub fn rgb8(self) -> [u8; 3] {
        match self {
            Color::Red => [230, 30, 30],
            Color::Green => [30, 200, 40],
            Color::Blue => [30, 60, 230],
            Color::Yellow => [240, 230, 30],
            Color::Purple => [150, 30, 180],
            Color::Orange => [255, 140, 0],
            Color::Cyan => [30, 220, 230],
            Color::White => [245, 245, 245],
        }
    }
}

impl Size {
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Side (or diameter) in pixels for an image of side `image_size`.
    pub fn pixels(self, image_size: usize) -> usize {
        let frac = match self {
            Size::Small => 0.16,
            Size::Large => 0.28,
        };
        ((image_size as f64 * frac).round() as usize).max(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "left of")]
    LeftOf,
    #[serde(rename = "right of")]
    RightOf,
    #[serde(rename = "above")]
    Above,
    #[serde(rename = "below")]
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `a` stands in this relation to `b`, with centers in pixels.
    pub fn holds(self, a: &SceneObject, b: &SceneObject, image_size: usize) -> bool {
        let m = RELATION_MARGIN * image_size as f64;
        match self {
            Relation::LeftOf => a.cx < b.cx - m,
            Relation::RightOf => a.cx > b.cx + m,
            Relation::Above => a.cy < b.cy - m,
            Relation::Below => a.cy > b.cy + m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Center in pixels. Squares and triangles are snapped so their corners are integral.
    pub cx: f64,
    pub cy: f64,
}

impl SceneObject {
    fn radius(&self, image_size: usize) -> f64 {
        let s = self.size.pixels(image_size) as f64;
        match self.shape {
            Shape::Circle => s / 2.0,
            _ => s / std::f64::consts::SQRT_2,
        }
    }

    /// Foreground raster of this object alone.
    pub fn raster(&self, image_size: usize) -> Result<BinaryMask> {
        let s = self.size.pixels(image_size) as f64;
        let half = s / 2.0;
        match self.shape {
            Shape::Circle => {
                let r2 = half * half;
                Ok(BinaryMask::from_fn(image_size, image_size, |y, x| {
                    let dx = x as f64 + 0.5 - self.cx;
                    let dy = y as f64 + 0.5 - self.cy;
                    dx * dx + dy * dy <= r2
                }))
            }
            Shape::Square => rasterize_polygon(
                &[
                    (self.cx - half, self.cy - half),
                    (self.cx + half, self.cy - half),
                    (self.cx + half, self.cy + half),
                    (self.cx - half, self.cy + half),
                ],
                image_size,
                image_size,
            ),
            Shape::Triangle => rasterize_polygon(
                &[
                    (self.cx, self.cy - half),
                    (self.cx + half, self.cy + half),
                    (self.cx - half, self.cy + half),
                ],
                image_size,
                image_size,
            ),
        }
    }
}

/// Attribute-and-relation description of one object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub shape: Shape,
    pub color: Option<Color>,
    pub size: Option<Size>,
    /// Relation to an anchor object described without a relation.
    pub relation: Option<(Relation, Box<Descriptor>)>,
}

impl Descriptor {
    fn attrs_match(&self, o: &SceneObject) -> bool {
        o.shape == self.shape
            && self.color.is_none_or(|c| c == o.color)
            && self.size.is_none_or(|s| s == o.size)
    }

    fn noun_phrase(&self) -> String {
        let mut words = Vec::new();
        if let Some(s) = self.size {
            words.push(s.word());
        }
        if let Some(c) = self.color {
            words.push(c.word());
        }
        words.push(self.shape.word());
        words.join(" ")
    }

    pub fn expression(&self) -> String {
        match &self.relation {
            None => format!("the {}", self.noun_phrase()),
            Some((rel, anchor)) => format!(
                "the {} {} the {}",
                self.noun_phrase(),
                rel.phrase(),
                anchor.noun_phrase()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub referent: usize,
    pub descriptor: Descriptor,
}

impl SceneSpec {
    pub fn expression(&self) -> String {
        self.descriptor.expression()
    }
}

fn matches(objects: &[SceneObject], d: &Descriptor, image_size: usize) -> Vec<usize> {
    (0..objects.len())
        .filter(|&i| {
            d.attrs_match(&objects[i])
                && match &d.relation {
                    None => true,
                    Some((rel, anchor)) => {
                        let anchors = matches(objects, anchor, image_size);
                        anchors.len() == 1
                            && anchors[0] != i
                            && rel.holds(&objects[i], &objects[anchors[0]], image_size)
                    }
                }
        })
        .collect()
}

/// Attribute-only descriptors of `o`, shortest first.
fn plain_descriptors(o: &SceneObject) -> [Descriptor; 3] {
    let mk = |color, size| Descriptor {
        shape: o.shape,
        color,
        size,
        relation: None,
    };
    [mk(None, None), mk(Some(o.color), None), mk(Some(o.color), Some(o.size))]
}

/// Shortest template descriptor that matches exactly object `r`, if any.
fn minimal_descriptor(objects: &[SceneObject], r: usize, image_size: usize) -> Option<Descriptor> {
    for d in plain_descriptors(&objects[r]) {
        if matches(objects, &d, image_size) == [r] {
            return Some(d);
        }
    }
    let mut best: Option<Descriptor> = None;
    let mut best_words = usize::MAX;
    for (a, anchor) in objects.iter().enumerate() {
        if a == r {
            continue;
        }
        let Some(anchor_d) = plain_descriptors(anchor)
            .into_iter()
            .find(|d| matches(objects, d, image_size) == [a])
        else {
            continue;
        };
        for head in plain_descriptors(&objects[r]) {
            for rel in Relation::ALL {
                let d = Descriptor {
                    relation: Some((rel, Box::new(anchor_d.clone()))),
                    ..head.clone()
                };
                if matches(objects, &d, image_size) == [r] {
                    let n = d.expression().split(' ').count();
                    if n < best_words {
                        best_words = n;
                        best = Some(d);
                    }
                }
            }
        }
    }
    best
}

/// Objects that an expression refers to, by exhaustive attribute and relation matching.
pub fn resolve_expression(objects: &[SceneObject], expression: &str, image_size: usize) -> Vec<usize> {
    let Some(d) = parse_expression(expression) else {
        return Vec::new();
    };
    matches(objects, &d, image_size)
}

fn parse_noun_phrase(words: &[&str]) -> Option<Descriptor> {
    let (&last, rest) = words.split_last()?;
    let shape = *Shape::ALL.iter().find(|s| s.word() == last)?;
    let mut d = Descriptor {
        shape,
        color: None,
        size: None,
        relation: None,
    };
    match rest {
        [] => {}
        [c] => d.color = Some(*Color::ALL.iter().find(|x| x.word() == *c)?),
        [s, c] => {
            d.size = Some(*[Size::Small, Size::Large].iter().find(|x| x.word() == *s)?);
            d.color = Some(*Color::ALL.iter().find(|x| x.word() == *c)?);
        }
        _ => return None,
    }
    Some(d)
}

/// Parses an expression produced by the template grammar.
pub fn parse_expression(expression: &str) -> Option<Descriptor> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    if words.first() != Some(&"the") {
        return None;
    }
    let words = &words[1..];
    for rel in Relation::ALL {
        let phrase: Vec<&str> = rel.phrase().split(' ').collect();
        let n = phrase.len();
        if let Some(pos) = (0..words.len().saturating_sub(n)).find(|&i| words[i..i + n] == phrase[..]) {
            let head = parse_noun_phrase(&words[..pos])?;
            let tail = &words[pos + n..];
            if tail.first() != Some(&"the") {
                return None;
            }
            let anchor = parse_noun_phrase(&tail[1..])?;
            return Some(Descriptor {
                relation: Some((rel, Box::new(anchor))),
                ..head
            });
        }
    }
    parse_noun_phrase(words)
}

fn place_objects(rng: &mut ChaCha8Rng, image_size: usize) -> Option<Vec<SceneObject>> {
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    let s = image_size as f64;
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let color = Color::ALL[rng.random_range(0..Color::ALL.len())];
        let size = if rng.random_bool(0.5) { Size::Small } else { Size::Large };
        let side = size.pixels(image_size) as f64;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let half = side / 2.0;
            // Integral top-left corner, so polygon shapes rasterize to exact pixel counts.
            let x0 = rng.random_range(0..=(image_size - side as usize)) as f64;
            let y0 = rng.random_range(0..=(image_size - side as usize)) as f64;
            let o = SceneObject {
                shape,
                color,
                size,
                cx: x0 + half,
                cy: y0 + half,
            };
            let ok = objects.iter().all(|p| {
                let d = ((p.cx - o.cx).powi(2) + (p.cy - o.cy).powi(2)).sqrt();
                d >= MIN_CENTER_DIST * s && d >= p.radius(image_size) + o.radius(image_size) + 1.0
            });
            if ok {
                objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Deterministic scene for `(seed, image_size)`. Failed placements or scenes without a
/// unique description are redrawn from the same seeded stream.
pub fn generate_scene(seed: u64, image_size: usize) -> Result<SceneSpec> {
    if image_size == 0 || image_size % 32 != 0 {
        return Err(Error::BadImageShape {
            height: image_size,
            width: image_size,
            reason: "scene size must be a positive multiple of 32".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let Some(objects) = place_objects(&mut rng, image_size) else {
            continue;
        };
        let referent = rng.random_range(0..objects.len());
        if let Some(descriptor) = minimal_descriptor(&objects, referent, image_size) {
            return Ok(SceneSpec {
                image_size,
                seed,
                objects,
                referent,
                descriptor,
            });
        }
    }
}

/// Renders the scene in object order (later objects on top; shapes never overlap).
pub fn render_sample(spec: &SceneSpec, id: impl Into<String>) -> Result<GroundingSample> {
    let n = spec.image_size;
    let bg = BACKGROUND.map(|v| f32::from(v) / 255.0);
    let mut image = RgbImage::filled(n, n, bg);
    let mut gold_mask = BinaryMask::zeros(n, n);
    for (i, o) in spec.objects.iter().enumerate() {
        let m = o.raster(n)?;
        let rgb = o.color.rgb8().map(|v| f32::from(v) / 255.0);
        for y in 0..n {
            for x in 0..n {
                if m.get(y, x) {
                    image.set(y, x, rgb);
                }
            }
        }
        if i == spec.referent {
            gold_mask = m;
        }
    }
    let gold_box = mask_min_bbox(&gold_mask)?;
    Ok(GroundingSample {
        id: id.into(),
        image,
        expression: spec.expression(),
        gold_box,
        gold_mask,
    })
}

/// Mixes a base seed, split index and sample index into a per-sample seed.
pub fn derive_seed(base: u64, split: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(split);
    rng.set_word_pos(u128::from(index) * 16);
    rng.next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_scene(7, 64).unwrap(), generate_scene(7, 64).unwrap());
        assert_ne!(generate_scene(7, 64).unwrap(), generate_scene(8, 64).unwrap());
    }

    #[test]
    fn expressions_are_unique_and_short() {
        for seed in 0..300 {
            let s = generate_scene(seed, 64).unwrap();
            let e = s.expression();
            assert!(e.split(' ').count() <= 12, "{e}");
            assert_eq!(resolve_expression(&s.objects, &e, 64), vec![s.referent], "{e}");
        }
    }

    #[test]
    fn square_pixel_count() {
        let o = SceneObject {
            shape: Shape::Square,
            color: Color::Red,
            size: Size::Large,
            cx: 20.0 + 9.0,
            cy: 10.0 + 9.0,
        };
        let side = Size::Large.pixels(64);
        assert_eq!(side, 18);
        assert_eq!(o.raster(64).unwrap().count(), side * side);
    }

    #[test]
    fn circle_area() {
        let o = SceneObject {
            shape: Shape::Circle,
            color: Color::Blue,
            size: Size::Large,
            cx: 64.0,
            cy: 64.0,
        };
        let r = Size::Large.pixels(128) as f64 / 2.0;
        assert!(r >= 10.0);
        let area = std::f64::consts::PI * r * r;
        let c = o.raster(128).unwrap().count() as f64;
        assert!((c - area).abs() / area < 0.05);
    }

    #[test]
    fn rendered_sample_is_valid() {
        for seed in 0..20 {
            let s = render_sample(&generate_scene(seed, 64).unwrap(), "x").unwrap();
            s.validate().unwrap();
        }
    }

    #[test]
    fn red_circle_only_when_unique() {
        for seed in 0..300 {
            let s = generate_scene(seed, 64).unwrap();
            if s.expression() == "the red circle" {
                let n = s
                    .objects
                    .iter()
                    .filter(|o| o.color == Color::Red && o.shape == Shape::Circle)
                    .count();
                assert_eq!(n, 1);
            }
        }
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, 0, 1), derive_seed(0, 1, 1));
        assert_ne!(derive_seed(0, 0, 1), derive_seed(0, 0, 2));
        assert_eq!(derive_seed(3, 1, 5), derive_seed(3, 1, 5));
    }
}

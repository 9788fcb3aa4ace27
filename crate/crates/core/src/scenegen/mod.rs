//! Procedural synthetic scenes with guaranteed-unambiguous template
//! referring expressions.
//!
//! A scene is a handful of colored shapes on a dark canvas, each annotated
//! with a tight bounding box. Expressions are drawn from a small template
//! grammar whose semantics are implemented exactly by [`match_expression`],
//! so uniqueness of every emitted expression can be checked, not hoped for.

mod expr;
mod render;

pub use expr::{match_expression, parse_expression, Expression, Qualifier};
pub use render::{render, Raster};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Canvas};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
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

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 50, 47],
            Color::Green => [64, 180, 60],
            Color::Blue => [38, 110, 230],
            Color::Yellow => [235, 200, 40],
            Color::Purple => [160, 70, 200],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }

    /// Side-length band as a fraction of the canvas short side. Bands are
    /// separated so the implied area bands stay disjoint.
    pub fn side_fraction_band(self) -> (f64, f64) {
        match self {
            Size::Small => (0.10, 0.16),
            Size::Medium => (0.22, 0.30),
            Size::Large => (0.36, 0.46),
        }
    }

    /// Classifies a box area back into a size band, when it falls in one.
    pub fn from_area(area: f64, canvas: Canvas) -> Option<Size> {
        let short = f64::from(canvas.w.min(canvas.h));
        for size in Size::ALL {
            let (lo, hi) = size.side_fraction_band();
            let (lo, hi) = ((lo * short).floor(), (hi * short).ceil());
            if area >= lo * lo && area <= hi * hi {
                return Some(size);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub box_px: BBox,
}

impl SceneObject {
    /// Phrase used as the detection class name ("red circle").
    pub fn class_name(&self) -> String {
        format!("{} {}", self.color.word(), self.shape.word())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub canvas: Canvas,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn validate(&self, overlap_cap: f64) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::InvalidConfig("scene has no objects".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            o.box_px.validate(self.canvas)?;
            if Size::from_area(o.box_px.area(), self.canvas) != Some(o.size) {
                return Err(Error::InvalidBox(format!(
                    "object {i} area {} outside its {:?} band",
                    o.box_px.area(),
                    o.size
                )));
            }
        }
        for i in 0..self.objects.len() {
            for j in (i + 1)..self.objects.len() {
                let v = iou(self.objects[i].box_px, self.objects[j].box_px);
                if v > overlap_cap + 1e-12 {
                    return Err(Error::Placement(format!(
                        "objects {i},{j} overlap iou {v:.3} > cap {overlap_cap}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A referring expression plus the object it designates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefExpression {
    pub text: String,
    pub target_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Pairwise IoU cap between placed objects.
    pub overlap_cap: f64,
    /// Placement attempts per object before the scene attempt is abandoned.
    pub placement_retries: usize,
    /// Whole-scene attempts before generation gives up.
    pub scene_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            canvas_w: 64,
            canvas_h: 64,
            min_objects: 1,
            max_objects: 5,
            overlap_cap: 0.3,
            placement_retries: 200,
            scene_retries: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_w < 32 || self.canvas_h < 32 {
            return Err(Error::InvalidConfig(format!(
                "canvas {}x{} below the 32x32 minimum",
                self.canvas_w, self.canvas_h
            )));
        }
        if self.min_objects < 1 || self.max_objects > 8 || self.min_objects > self.max_objects {
            return Err(Error::InvalidConfig(format!(
                "object count range {}..={} invalid (want within 1..=8)",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_cap) {
            return Err(Error::InvalidConfig(format!(
                "overlap_cap {} outside [0, 1]",
                self.overlap_cap
            )));
        }
        Ok(())
    }

    pub fn canvas(&self) -> Canvas {
        Canvas { w: self.canvas_w, h: self.canvas_h }
    }
}

/// Minimum fraction of an object's own pixels that must survive occlusion.
const MIN_VISIBILITY: f64 = 0.4;

/// Deterministic scene construction from (seed, config). Fails when placement
/// cannot satisfy the overlap cap within the configured retries.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let canvas = config.canvas();
    let short = f64::from(canvas.w.min(canvas.h));
    for attempt in 0..config.scene_retries as u64 {
        let mut r = rng::derive(seed, "scene", attempt);
        let n = r.random_range(config.min_objects..=config.max_objects);
        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        'object: for _ in 0..n {
            for _ in 0..config.placement_retries {
                let shape = Shape::ALL[r.random_range(0..Shape::ALL.len())];
                let color = Color::ALL[r.random_range(0..Color::ALL.len())];
                let size = Size::ALL[r.random_range(0..Size::ALL.len())];
                let (lo, hi) = size.side_fraction_band();
                let side_lo = (lo * short).floor().max(4.0) as u32;
                let side_hi = (hi * short).ceil() as u32;
                let side = r.random_range(side_lo..=side_hi);
                if side >= canvas.w || side >= canvas.h {
                    continue;
                }
                let x = r.random_range(0..=(canvas.w - side));
                let y = r.random_range(0..=(canvas.h - side));
                let box_px = BBox::new(
                    f64::from(x),
                    f64::from(y),
                    f64::from(x + side),
                    f64::from(y + side),
                );
                let ok = objects
                    .iter()
                    .all(|o| iou(o.box_px, box_px) <= config.overlap_cap);
                if ok {
                    objects.push(SceneObject { shape, color, size, box_px });
                    continue 'object;
                }
            }
            // this attempt could not place every object; try a fresh layout
            objects.clear();
            break;
        }
        if objects.len() == n {
            let scene = Scene { canvas, objects, seed };
            // reject layouts where occlusion hides an object; every object
            // must stay findable from pixels alone
            let img = render::render(&scene);
            if render::visibility(&scene, &img)
                .iter()
                .all(|&v| v >= MIN_VISIBILITY)
            {
                scene.validate(config.overlap_cap)?;
                return Ok(scene);
            }
            continue;
        }
    }
    Err(Error::Placement(format!(
        "no layout satisfied overlap_cap {} after {} attempts (seed {seed}); \
         the config is likely over-dense",
        config.overlap_cap, config.scene_retries
    )))
}

/// Emits the shortest template expression that uniquely designates
/// `target_index` under [`match_expression`], trying attribute-only forms
/// before spatially qualified ones.
pub fn generate_expression(scene: &Scene, target_index: usize) -> Result<RefExpression> {
    let target = scene
        .objects
        .get(target_index)
        .ok_or_else(|| Error::InvalidConfig(format!("target {target_index} out of range")))?;
    let mut candidates: Vec<Expression> = Vec::new();
    for with_size in [false, true] {
        let size = with_size.then_some(target.size);
        candidates.push(Expression {
            qualifier: None,
            size,
            color: Some(target.color),
            shape: target.shape,
        });
        for q in Qualifier::ALL {
            candidates.push(Expression {
                qualifier: Some(q),
                size,
                color: Some(target.color),
                shape: target.shape,
            });
        }
    }
    for cand in candidates {
        let matched = expr::match_indices(scene, &cand);
        if matched.len() == 1 && matched[0] == target_index {
            return Ok(RefExpression { text: cand.text(), target_index });
        }
    }
    Err(Error::ExpressionAmbiguous { seed: scene.seed, target: target_index })
}

/// Expressions for every object in the scene that the grammar can
/// disambiguate, in object order. Objects the grammar cannot single out are
/// skipped.
pub fn expressions_for_scene(scene: &Scene) -> Vec<RefExpression> {
    (0..scene.objects.len())
        .filter_map(|i| generate_expression(scene, i).ok())
        .collect()
}

/// A scene paired with an expression for every object. Resamples (via the
/// attempt stream of `seed`) until every object is expressible, so corpus
/// records always carry full annotation.
pub fn generate_annotated_scene(seed: u64, config: &SceneConfig) -> Result<(Scene, Vec<RefExpression>)> {
    for attempt in 0..config.scene_retries as u64 {
        let scene = generate_scene(seed.wrapping_add(attempt.wrapping_mul(0x9e37)), config)?;
        let exprs = expressions_for_scene(&scene);
        if exprs.len() == scene.objects.len() {
            return Ok((scene, exprs));
        }
    }
    Err(Error::Placement(format!(
        "could not build a fully expressible scene for seed {seed}"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = SceneConfig::default();
        let a = generate_scene(42, &cfg).unwrap();
        let b = generate_scene(42, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(43, &cfg).unwrap());
    }

    #[test]
    fn single_object_bound() {
        let cfg = SceneConfig { max_objects: 1, ..SceneConfig::default() };
        let s = generate_scene(7, &cfg).unwrap();
        assert_eq!(s.objects.len(), 1);
    }

    #[test]
    fn every_shape_and_color_appears_over_seeds() {
        let cfg = SceneConfig::default();
        let mut shapes = std::collections::HashSet::new();
        let mut colors = std::collections::HashSet::new();
        for seed in 0..1000 {
            let s = generate_scene(seed, &cfg).unwrap();
            for o in &s.objects {
                shapes.insert(o.shape);
                colors.insert(o.color);
            }
        }
        assert_eq!(shapes.len(), Shape::ALL.len());
        assert_eq!(colors.len(), Color::ALL.len());
    }

    #[test]
    fn scenes_respect_overlap_cap_and_size_bands() {
        let cfg = SceneConfig::default();
        for seed in 0..200 {
            let s = generate_scene(seed, &cfg).unwrap();
            s.validate(cfg.overlap_cap).unwrap();
        }
    }

    #[test]
    fn over_dense_config_fails_with_placement_error() {
        let cfg = SceneConfig {
            canvas_w: 32,
            canvas_h: 32,
            min_objects: 8,
            max_objects: 8,
            overlap_cap: 0.0,
            placement_retries: 5,
            scene_retries: 3,
            ..SceneConfig::default()
        };
        let err = generate_scene(1, &cfg).unwrap_err();
        assert!(matches!(err, Error::Placement(_)));
    }

    #[test]
    fn single_object_scene_gets_bare_color_shape() {
        let cfg = SceneConfig { max_objects: 1, ..SceneConfig::default() };
        let s = generate_scene(11, &cfg).unwrap();
        let e = generate_expression(&s, 0).unwrap();
        let o = &s.objects[0];
        assert_eq!(e.text, format!("the {} {}", o.color.word(), o.shape.word()));
    }

    #[test]
    fn left_qualifier_selects_smaller_x_center() {
        let canvas = Canvas { w: 64, h: 64 };
        let obj = |x: f64| SceneObject {
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Small,
            box_px: BBox::new(x, 10.0, x + 8.0, 18.0),
        };
        let scene = Scene { canvas, objects: vec![obj(40.0), obj(4.0)], seed: 0 };
        let e = generate_expression(&scene, 1).unwrap();
        assert_eq!(e.text, "the left red circle");
        let m = match_expression(&scene, &e.text).unwrap();
        assert_eq!(m, vec![1]);
        let e0 = generate_expression(&scene, 0).unwrap();
        assert_eq!(e0.text, "the right red circle");
    }

    #[test]
    fn unique_color_omits_spatial_qualifier() {
        let canvas = Canvas { w: 64, h: 64 };
        let mk = |color: Color, x: f64| SceneObject {
            shape: Shape::Square,
            color,
            size: Size::Small,
            box_px: BBox::new(x, 30.0, x + 8.0, 38.0),
        };
        let scene = Scene {
            canvas,
            objects: vec![mk(Color::Red, 4.0), mk(Color::Blue, 40.0)],
            seed: 0,
        };
        let e = generate_expression(&scene, 0).unwrap();
        assert_eq!(e.text, "the red square");
    }

    #[test]
    fn coincident_twins_cannot_be_disambiguated() {
        let canvas = Canvas { w: 64, h: 64 };
        let obj = SceneObject {
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Small,
            box_px: BBox::new(10.0, 10.0, 18.0, 18.0),
        };
        let scene = Scene { canvas, objects: vec![obj, obj], seed: 0 };
        assert!(matches!(
            generate_expression(&scene, 0),
            Err(Error::ExpressionAmbiguous { .. })
        ));
    }

    #[test]
    fn generated_expressions_match_exactly_their_target() {
        let cfg = SceneConfig::default();
        for seed in 0..300 {
            let s = generate_scene(seed, &cfg).unwrap();
            for i in 0..s.objects.len() {
                if let Ok(e) = generate_expression(&s, i) {
                    let m = match_expression(&s, &e.text).unwrap();
                    assert_eq!(m, vec![i], "seed {seed} object {i}: {:?}", e.text);
                }
            }
        }
    }

    #[test]
    fn annotated_scene_covers_every_object() {
        let cfg = SceneConfig::default();
        for seed in 0..100 {
            let (scene, exprs) = generate_annotated_scene(seed, &cfg).unwrap();
            assert_eq!(exprs.len(), scene.objects.len());
        }
    }
}

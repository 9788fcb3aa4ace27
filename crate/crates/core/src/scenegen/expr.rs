//! Template expression grammar and its exact matcher.
//!
//! Grammar (all words lowercase):
//!
//! ```text
//! expression := "the" [qualifier] [size] [color] shape
//! qualifier  := left | right | top | bottom | largest | smallest | middle
//! ```
//!
//! Attribute words filter; the qualifier then selects the strict extreme among
//! the filtered objects (smallest x-center for "left", largest area for
//! "largest", nearest to the canvas center for "middle", and so on). Ties keep
//! the whole tied set, which reads as "ambiguous" to callers that need
//! uniqueness.

use serde::{Deserialize, Serialize};

use super::{Color, Scene, Shape, Size};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Qualifier {
    Left,
    Right,
    Top,
    Bottom,
    Largest,
    Smallest,
    Middle,
}

impl Qualifier {
    pub const ALL: [Qualifier; 7] = [
        Qualifier::Left,
        Qualifier::Right,
        Qualifier::Top,
        Qualifier::Bottom,
        Qualifier::Largest,
        Qualifier::Smallest,
        Qualifier::Middle,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Qualifier::Left => "left",
            Qualifier::Right => "right",
            Qualifier::Top => "top",
            Qualifier::Bottom => "bottom",
            Qualifier::Largest => "largest",
            Qualifier::Smallest => "smallest",
            Qualifier::Middle => "middle",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|q| q.word() == w)
    }
}

/// A parsed template expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Expression {
    pub qualifier: Option<Qualifier>,
    pub size: Option<Size>,
    pub color: Option<Color>,
    pub shape: Shape,
}

impl Expression {
    pub fn text(&self) -> String {
        let mut parts = vec!["the"];
        if let Some(q) = self.qualifier {
            parts.push(q.word());
        }
        if let Some(s) = self.size {
            parts.push(s.word());
        }
        if let Some(c) = self.color {
            parts.push(c.word());
        }
        parts.push(self.shape.word());
        parts.join(" ")
    }
}

fn size_from_word(w: &str) -> Option<Size> {
    Size::ALL.into_iter().find(|s| s.word() == w)
}

fn color_from_word(w: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.word() == w)
}

fn shape_from_word(w: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.word() == w)
}

/// Parses expression text under the template grammar; anything else is an
/// out-of-grammar error.
pub fn parse_expression(text: &str) -> Result<Expression> {
    let lower = text.to_lowercase();
    let mut words = lower.split_whitespace().peekable();
    let fail = || Error::ExpressionParse(text.to_string());
    if words.next() != Some("the") {
        return Err(fail());
    }
    let mut qualifier = None;
    let mut size = None;
    let mut color = None;
    if let Some(&w) = words.peek() {
        if let Some(q) = Qualifier::from_word(w) {
            qualifier = Some(q);
            words.next();
        }
    }
    if let Some(&w) = words.peek() {
        if let Some(s) = size_from_word(w) {
            size = Some(s);
            words.next();
        }
    }
    if let Some(&w) = words.peek() {
        if let Some(c) = color_from_word(w) {
            color = Some(c);
            words.next();
        }
    }
    let shape = words.next().and_then(shape_from_word).ok_or_else(fail)?;
    if words.next().is_some() {
        return Err(fail());
    }
    Ok(Expression { qualifier, size, color, shape })
}

/// All object indices consistent with the expression, in index order.
pub fn match_indices(scene: &Scene, expr: &Expression) -> Vec<usize> {
    let filtered: Vec<usize> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            o.shape == expr.shape
                && expr.color.is_none_or(|c| o.color == c)
                && expr.size.is_none_or(|s| o.size == s)
        })
        .map(|(i, _)| i)
        .collect();
    let Some(q) = expr.qualifier else {
        return filtered;
    };
    if filtered.is_empty() {
        return filtered;
    }
    let canvas_center = (f64::from(scene.canvas.w) / 2.0, f64::from(scene.canvas.h) / 2.0);
    // Lower key wins for every qualifier.
    let key = |i: usize| -> f64 {
        let o = &scene.objects[i];
        let (cx, cy) = o.box_px.center();
        match q {
            Qualifier::Left => cx,
            Qualifier::Right => -cx,
            Qualifier::Top => cy,
            Qualifier::Bottom => -cy,
            Qualifier::Largest => -o.box_px.area(),
            Qualifier::Smallest => o.box_px.area(),
            Qualifier::Middle => {
                let dx = cx - canvas_center.0;
                let dy = cy - canvas_center.1;
                (dx * dx + dy * dy).sqrt()
            }
        }
    };
    let best = filtered
        .iter()
        .map(|&i| key(i))
        .fold(f64::INFINITY, f64::min);
    filtered.into_iter().filter(|&i| key(i) == best).collect()
}

/// Parses `text` and returns every consistent object index.
pub fn match_expression(scene: &Scene, text: &str) -> Result<Vec<usize>> {
    let expr = parse_expression(text)?;
    Ok(match_indices(scene, &expr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, Canvas};
    use crate::scenegen::SceneObject;

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene { canvas: Canvas { w: 64, h: 64 }, objects, seed: 0 }
    }

    fn obj(shape: Shape, color: Color, size: Size, x: f64, y: f64, side: f64) -> SceneObject {
        SceneObject { shape, color, size, box_px: BBox::new(x, y, x + side, y + side) }
    }

    #[test]
    fn parse_full_form() {
        let e = parse_expression("the left small red circle").unwrap();
        assert_eq!(e.qualifier, Some(Qualifier::Left));
        assert_eq!(e.size, Some(Size::Small));
        assert_eq!(e.color, Some(Color::Red));
        assert_eq!(e.shape, Shape::Circle);
        assert_eq!(e.text(), "the left small red circle");
    }

    #[test]
    fn parse_rejects_out_of_grammar() {
        for bad in [
            "the red",
            "red circle",
            "the circle red",
            "the left left red circle",
            "a red circle",
            "the red circle please",
        ] {
            assert!(parse_expression(bad).is_err(), "{bad:?} should not parse");
        }
    }

    #[test]
    fn underconstrained_matches_all() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, Size::Small, 2.0, 2.0, 8.0),
            obj(Shape::Circle, Color::Blue, Size::Small, 40.0, 40.0, 8.0),
            obj(Shape::Square, Color::Red, Size::Small, 20.0, 20.0, 8.0),
        ]);
        assert_eq!(match_expression(&s, "the circle").unwrap(), vec![0, 1]);
        assert_eq!(match_expression(&s, "the red circle").unwrap(), vec![0]);
        assert_eq!(match_expression(&s, "the green circle").unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn largest_square_is_argmax_area() {
        let s = scene(vec![
            obj(Shape::Square, Color::Red, Size::Small, 2.0, 2.0, 8.0),
            obj(Shape::Square, Color::Blue, Size::Large, 24.0, 24.0, 26.0),
            obj(Shape::Square, Color::Green, Size::Medium, 2.0, 40.0, 16.0),
            obj(Shape::Circle, Color::Red, Size::Large, 36.0, 2.0, 26.0),
        ]);
        assert_eq!(match_expression(&s, "the largest square").unwrap(), vec![1]);
        assert_eq!(match_expression(&s, "the smallest square").unwrap(), vec![0]);
    }

    #[test]
    fn ties_stay_ambiguous() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, Size::Small, 10.0, 10.0, 8.0),
            obj(Shape::Circle, Color::Red, Size::Small, 10.0, 40.0, 8.0),
        ]);
        // same x-center: "left" cannot break the tie
        assert_eq!(match_expression(&s, "the left red circle").unwrap(), vec![0, 1]);
        assert_eq!(match_expression(&s, "the top red circle").unwrap(), vec![0]);
    }

    #[test]
    fn middle_prefers_canvas_center() {
        let s = scene(vec![
            obj(Shape::Circle, Color::Red, Size::Small, 1.0, 1.0, 8.0),
            obj(Shape::Circle, Color::Red, Size::Small, 28.0, 28.0, 8.0),
            obj(Shape::Circle, Color::Red, Size::Small, 50.0, 50.0, 8.0),
        ]);
        assert_eq!(match_expression(&s, "the middle red circle").unwrap(), vec![1]);
    }
}

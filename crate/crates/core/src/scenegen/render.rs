//! Deterministic rasterization of scenes.

use serde::{Deserialize, Serialize};

use super::{Scene, Shape};
use crate::geometry::Canvas;

/// Background color; kept away from all object colors.
pub const BACKGROUND: [u8; 3] = [24, 24, 28];

/// An H x W RGB image with 8-bit channels. Training code divides by 255 on
/// ingestion, so PNG round trips are exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub w: u32,
    pub h: u32,
    pub data: Vec<u8>, // row-major, 3 bytes per pixel
}

impl Raster {
    pub fn filled(canvas: Canvas, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity((canvas.w * canvas.h * 3) as usize);
        for _ in 0..canvas.w * canvas.h {
            data.extend_from_slice(&rgb);
        }
        Self { w: canvas.w, h: canvas.h, data }
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let at = ((y * self.w + x) * 3) as usize;
        [self.data[at], self.data[at + 1], self.data[at + 2]]
    }

    fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let at = ((y * self.w + x) * 3) as usize;
        self.data[at..at + 3].copy_from_slice(&rgb);
    }
}

/// Whether the pixel center (fx, fy) lies inside the object's shape.
/// Squares fill the box, circles are inscribed, triangles stand apex-up on
/// the box bottom edge.
fn shape_covers(obj: &super::SceneObject, fx: f64, fy: f64) -> bool {
    let b = obj.box_px;
    if fx < b.x1 || fx > b.x2 || fy < b.y1 || fy > b.y2 {
        return false;
    }
    let (cx, cy) = b.center();
    match obj.shape {
        Shape::Square => true,
        Shape::Circle => {
            let radius = b.width().min(b.height()) / 2.0;
            let dx = fx - cx;
            let dy = fy - cy;
            dx * dx + dy * dy <= radius * radius
        }
        Shape::Triangle => {
            let t = (fy - b.y1) / b.height().max(1e-9);
            let half_width = t * b.width() / 2.0;
            (fx - cx).abs() <= half_width
        }
    }
}

/// Pixels the object would paint on an empty canvas, as (x, y) pairs.
pub(super) fn solo_pixels(obj: &super::SceneObject, canvas: Canvas) -> Vec<(u32, u32)> {
    let b = obj.box_px;
    let x0 = b.x1.floor().max(0.0) as u32;
    let y0 = b.y1.floor().max(0.0) as u32;
    let x1 = (b.x2.ceil() as u32).min(canvas.w);
    let y1 = (b.y2.ceil() as u32).min(canvas.h);
    let mut out = Vec::new();
    for py in y0..y1 {
        for px in x0..x1 {
            if shape_covers(obj, f64::from(px) + 0.5, f64::from(py) + 0.5) {
                out.push((px, py));
            }
        }
    }
    out
}

/// Paints each object into its box, in object order (later objects occlude
/// earlier ones). Pixel centers decide membership, so painted pixels never
/// leave the annotated box.
pub fn render(scene: &Scene) -> Raster {
    let mut img = Raster::filled(scene.canvas, BACKGROUND);
    for obj in &scene.objects {
        let rgb = obj.color.rgb();
        for (px, py) in solo_pixels(obj, scene.canvas) {
            img.set(px, py, rgb);
        }
    }
    img
}

/// Fraction of each object's own pixels that survive occlusion in the final
/// render. Scene generation rejects layouts where any object drops below its
/// visibility floor.
pub(super) fn visibility(scene: &Scene, img: &Raster) -> Vec<f64> {
    scene
        .objects
        .iter()
        .map(|obj| {
            let own = solo_pixels(obj, scene.canvas);
            if own.is_empty() {
                return 0.0;
            }
            let visible = own
                .iter()
                .filter(|&&(x, y)| img.get(x, y) == obj.color.rgb())
                .count();
            visible as f64 / own.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    #[test]
    fn render_is_deterministic_and_background_clean() {
        let cfg = SceneConfig::default();
        let scene = generate_scene(5, &cfg).unwrap();
        let a = render(&scene);
        let b = render(&scene);
        assert_eq!(a, b);
        // find a pixel that no box covers and check it is background
        'outer: for y in 0..a.h {
            for x in 0..a.w {
                let fx = f64::from(x) + 0.5;
                let fy = f64::from(y) + 0.5;
                let covered = scene.objects.iter().any(|o| {
                    fx >= o.box_px.x1 && fx <= o.box_px.x2 && fy >= o.box_px.y1 && fy <= o.box_px.y2
                });
                if !covered {
                    assert_eq!(a.get(x, y), BACKGROUND);
                    break 'outer;
                }
            }
        }
    }

    #[test]
    fn painted_pixels_stay_inside_annotated_boxes() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let img = render(&scene);
            for y in 0..img.h {
                for x in 0..img.w {
                    let px = img.get(x, y);
                    if px == BACKGROUND {
                        continue;
                    }
                    let fx = f64::from(x) + 0.5;
                    let fy = f64::from(y) + 0.5;
                    let inside_any = scene.objects.iter().any(|o| {
                        fx >= o.box_px.x1 - 1.0
                            && fx <= o.box_px.x2 + 1.0
                            && fy >= o.box_px.y1 - 1.0
                            && fy <= o.box_px.y2 + 1.0
                    });
                    assert!(inside_any, "painted pixel ({x},{y}) outside all boxes");
                }
            }
        }
    }

    #[test]
    fn objects_leave_visible_pixels() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let img = render(&scene);
            for (i, o) in scene.objects.iter().enumerate() {
                let rgb = o.color.rgb();
                let mut count = 0;
                for y in 0..img.h {
                    for x in 0..img.w {
                        if img.get(x, y) == rgb {
                            count += 1;
                        }
                    }
                }
                assert!(count > 0, "seed {seed} object {i} painted nothing");
            }
        }
    }
}

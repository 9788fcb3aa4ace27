//! Axis-aligned box arithmetic, IoU, and relative-coordinate quantization.
//!
//! Boxes live in absolute pixel space on a [`Canvas`]; [`QuantizedBox`] holds
//! the linguistic form: integer corners on a 0..=1000 relative scale (position
//! divided by canvas size, times 1000, rounded).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of quantization steps per axis. Coordinates are scaled to
/// `[0, QUANT_SCALE]` inclusive, so the right/bottom edge maps to exactly 1000.
pub const QUANT_SCALE: u32 = 1000;

/// Image dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub w: u32,
    pub h: u32,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Result<Self> {
        if w == 0 || h == 0 {
            return Err(Error::InvalidConfig(format!("canvas {w}x{h} has a zero side")));
        }
        Ok(Self { w, h })
    }
}

/// Axis-aligned box in absolute pixels; `(x1, y1)` is the upper-left corner,
/// `(x2, y2)` the lower-right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Checks the box invariants against its owning canvas: finite, ordered
    /// corners, inside `[0, W] x [0, H]`.
    pub fn validate(&self, canvas: Canvas) -> Result<()> {
        let vs = [self.x1, self.y1, self.x2, self.y2];
        if vs.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {self:?}")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("unordered corners in {self:?}")));
        }
        if self.x1 < 0.0
            || self.y1 < 0.0
            || self.x2 > f64::from(canvas.w)
            || self.y2 > f64::from(canvas.h)
        {
            return Err(Error::InvalidBox(format!(
                "{self:?} outside canvas {}x{}",
                canvas.w, canvas.h
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Box corners on the 0..=1000 relative integer scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl QuantizedBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let q = Self { x1, y1, x2, y2 };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        let vs = [self.x1, self.y1, self.x2, self.y2];
        if vs.iter().any(|&v| v > QUANT_SCALE) {
            return Err(Error::InvalidBox(format!("{self:?} exceeds the 0..=1000 range")));
        }
        if self.x1 > self.x2 || self.y1 > self.y2 {
            return Err(Error::InvalidBox(format!("unordered corners in {self:?}")));
        }
        Ok(())
    }

    pub fn corners(&self) -> [u32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Rounds half away from zero. All inputs here are non-negative, where this
/// coincides with `f64::round`.
fn round_half_away(v: f64) -> f64 {
    v.round()
}

/// Maps a pixel box to the 0..=1000 relative integer scale:
/// `q = round(v / dim * 1000)`.
pub fn quantize(bbox: BBox, canvas: Canvas) -> Result<QuantizedBox> {
    bbox.validate(canvas)?;
    let scale = f64::from(QUANT_SCALE);
    let qx = |v: f64| round_half_away(v / f64::from(canvas.w) * scale) as u32;
    let qy = |v: f64| round_half_away(v / f64::from(canvas.h) * scale) as u32;
    let q = QuantizedBox {
        x1: qx(bbox.x1),
        y1: qy(bbox.y1),
        x2: qx(bbox.x2),
        y2: qy(bbox.y2),
    };
    q.validate()?;
    Ok(q)
}

/// Inverse of [`quantize`]: `v = q / 1000 * dim`.
pub fn dequantize(qbox: QuantizedBox, canvas: Canvas) -> Result<BBox> {
    qbox.validate()?;
    let scale = f64::from(QUANT_SCALE);
    Ok(BBox {
        x1: f64::from(qbox.x1) / scale * f64::from(canvas.w),
        y1: f64::from(qbox.y1) / scale * f64::from(canvas.h),
        x2: f64::from(qbox.x2) / scale * f64::from(canvas.w),
        y2: f64::from(qbox.y2) / scale * f64::from(canvas.h),
    })
}

/// Intersection-over-union of two boxes. A zero-area union (both boxes
/// degenerate) yields 0.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn canvas(w: u32, h: u32) -> Canvas {
        Canvas::new(w, h).unwrap()
    }

    /// Brute-force IoU for integer boxes: ratio of unit-cell membership counts.
    fn pixel_iou_oracle(a: BBox, b: BBox, c: Canvas) -> f64 {
        let covered = |bx: &BBox, i: u32, j: u32| {
            f64::from(i) >= bx.x1
                && f64::from(i + 1) <= bx.x2
                && f64::from(j) >= bx.y1
                && f64::from(j + 1) <= bx.y2
        };
        let mut inter = 0u64;
        let mut union = 0u64;
        for j in 0..c.h {
            for i in 0..c.w {
                let in_a = covered(&a, i, j);
                let in_b = covered(&b, i, j);
                if in_a && in_b {
                    inter += 1;
                }
                if in_a || in_b {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn quantize_endpoints() {
        for (w, h) in [(640, 480), (64, 64), (1, 1), (37, 991)] {
            let c = canvas(w, h);
            let q = quantize(BBox::new(0.0, 0.0, f64::from(w), f64::from(h)), c).unwrap();
            assert_eq!(q, QuantizedBox::new(0, 0, 1000, 1000).unwrap());
        }
    }

    #[test]
    fn quantize_midpoint() {
        let q = quantize(BBox::new(320.0, 240.0, 320.0, 240.0), canvas(640, 480)).unwrap();
        assert_eq!(q.corners(), [500, 500, 500, 500]);
    }

    #[test]
    fn quantize_reference_box() {
        // round(v / dim * 1000) computed by hand:
        //   78.1/640, 175.7/480, 251.5/640, 431.0/480 -> 122, 366, 393, 898
        let q = quantize(BBox::new(78.1, 175.7, 251.5, 431.0), canvas(640, 480)).unwrap();
        assert_eq!(q.corners(), [122, 366, 393, 898]);
    }

    #[test]
    fn quantize_rejects_malformed() {
        let c = canvas(640, 480);
        assert!(quantize(BBox::new(10.0, 10.0, 5.0, 20.0), c).is_err());
        assert!(quantize(BBox::new(-1.0, 0.0, 5.0, 20.0), c).is_err());
        assert!(quantize(BBox::new(0.0, 0.0, 641.0, 20.0), c).is_err());
        assert!(quantize(BBox::new(f64::NAN, 0.0, 5.0, 20.0), c).is_err());
    }

    #[test]
    fn dequantize_endpoints_and_midpoint() {
        let c = canvas(640, 480);
        let b = dequantize(QuantizedBox::new(0, 0, 1000, 1000).unwrap(), c).unwrap();
        assert_eq!(b, BBox::new(0.0, 0.0, 640.0, 480.0));
        let m = dequantize(QuantizedBox::new(500, 500, 500, 500).unwrap(), c).unwrap();
        assert_eq!(m, BBox::new(320.0, 240.0, 320.0, 240.0));
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let b = BBox::new(3.0, 4.0, 10.0, 12.0);
        assert!((iou(b, b) - 1.0).abs() < 1e-12);
        let far = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(b, far), 0.0);
    }

    #[test]
    fn iou_half_overlap() {
        // inter 50, union 150
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(a, b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(a, b) - pixel_iou_oracle(a, b, canvas(16, 16))).abs() < 1e-9);
    }

    #[test]
    fn iou_degenerate_union_is_zero() {
        let p = BBox::new(5.0, 5.0, 5.0, 5.0);
        assert_eq!(iou(p, p), 0.0);
    }

    #[test]
    fn iou_matches_pixel_oracle_on_random_integer_boxes() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(0x10u64);
        let c = canvas(64, 64);
        for _ in 0..1000 {
            let mut pick = || {
                let a: u32 = rng.random_range(0..=64);
                let b: u32 = rng.random_range(0..=64);
                (a.min(b), a.max(b))
            };
            let (x1, x2) = pick();
            let (y1, y2) = pick();
            let (u1, u2) = pick();
            let (v1, v2) = pick();
            let a = BBox::new(f64::from(x1), f64::from(y1), f64::from(x2), f64::from(y2));
            let b = BBox::new(f64::from(u1), f64::from(v1), f64::from(u2), f64::from(v2));
            let fast = iou(a, b);
            let slow = pixel_iou_oracle(a, b, c);
            assert!(
                (fast - slow).abs() < 1e-9,
                "iou mismatch: {fast} vs {slow} for {a:?} {b:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn roundtrip_within_half_bin(
            w in 1u32..2000,
            h in 1u32..2000,
            fx1 in 0.0f64..1.0,
            fy1 in 0.0f64..1.0,
            fx2 in 0.0f64..1.0,
            fy2 in 0.0f64..1.0,
        ) {
            let c = canvas(w, h);
            let (x1, x2) = if fx1 <= fx2 { (fx1, fx2) } else { (fx2, fx1) };
            let (y1, y2) = if fy1 <= fy2 { (fy1, fy2) } else { (fy2, fy1) };
            let b = BBox::new(
                x1 * f64::from(w),
                y1 * f64::from(h),
                x2 * f64::from(w),
                y2 * f64::from(h),
            );
            let rt = dequantize(quantize(b, c).unwrap(), c).unwrap();
            let half_bin_x = f64::from(w) / 2000.0 + 1e-9;
            let half_bin_y = f64::from(h) / 2000.0 + 1e-9;
            prop_assert!((rt.x1 - b.x1).abs() <= half_bin_x);
            prop_assert!((rt.x2 - b.x2).abs() <= half_bin_x);
            prop_assert!((rt.y1 - b.y1).abs() <= half_bin_y);
            prop_assert!((rt.y2 - b.y2).abs() <= half_bin_y);
        }

        #[test]
        fn iou_is_symmetric(
            a1 in 0.0f64..100.0, a2 in 0.0f64..100.0,
            a3 in 0.0f64..100.0, a4 in 0.0f64..100.0,
            b1 in 0.0f64..100.0, b2 in 0.0f64..100.0,
            b3 in 0.0f64..100.0, b4 in 0.0f64..100.0,
        ) {
            let a = BBox::new(a1.min(a2), a3.min(a4), a1.max(a2), a3.max(a4));
            let b = BBox::new(b1.min(b2), b3.min(b4), b1.max(b2), b3.max(b4));
            prop_assert!((iou(a, b) - iou(b, a)).abs() < 1e-12);
        }

        #[test]
        fn quantize_is_scale_invariant(
            scale in 0.1f64..8.0,
            x1 in 0.0f64..1.0, x2 in 0.0f64..1.0,
            y1 in 0.0f64..1.0, y2 in 0.0f64..1.0,
        ) {
            // Relative coordinates: scaling box and canvas together changes nothing.
            // Integer-scaled canvases keep the relative position exactly representable.
            let (w0, h0) = (160u32, 120u32);
            let s = (scale * 4.0).ceil() as u32;
            let c0 = canvas(w0, h0);
            let c1 = canvas(w0 * s, h0 * s);
            let b0 = BBox::new(
                x1.min(x2) * f64::from(w0),
                y1.min(y2) * f64::from(h0),
                x1.max(x2) * f64::from(w0),
                y1.max(y2) * f64::from(h0),
            );
            let b1 = BBox::new(
                b0.x1 * f64::from(s),
                b0.y1 * f64::from(s),
                b0.x2 * f64::from(s),
                b0.y2 * f64::from(s),
            );
            prop_assert_eq!(quantize(b0, c0).unwrap(), quantize(b1, c1).unwrap());
        }
    }
}

//! Axis-aligned boxes in pixel units and the SSD offset encoding.

use serde::{Deserialize, Serialize};

/// Box in center form. Pixel `i` spans `[i, i + 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.corners();
        let [bx0, by0, bx1, by1] = other.corners();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        iw * ih
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox {
            cx: width - self.cx,
            ..*self
        }
    }
}

/// Scales applied to center and size offsets.
pub const VARIANCES: [f64; 2] = [0.1, 0.2];

/// Regression target of `b` relative to `anchor`.
pub fn encode(b: &BBox, anchor: &BBox) -> [f64; 4] {
    [
        (b.cx - anchor.cx) / anchor.w / VARIANCES[0],
        (b.cy - anchor.cy) / anchor.h / VARIANCES[0],
        (b.w / anchor.w).ln() / VARIANCES[1],
        (b.h / anchor.h).ln() / VARIANCES[1],
    ]
}

pub fn decode(t: &[f64; 4], anchor: &BBox) -> BBox {
    BBox {
        cx: anchor.cx + t[0] * VARIANCES[0] * anchor.w,
        cy: anchor.cy + t[1] * VARIANCES[0] * anchor.h,
        w: anchor.w * (t[2] * VARIANCES[1]).exp(),
        h: anchor.h * (t[3] * VARIANCES[1]).exp(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn corner_round_trip() {
        let b = BBox::from_corners(2.0, 3.0, 12.0, 7.0);
        assert_eq!(b, BBox::new(7.0, 5.0, 10.0, 4.0));
        assert_eq!(b.corners(), [2.0, 3.0, 12.0, 7.0]);
    }

    #[test]
    fn overlap_cases() {
        let a = BBox::from_corners(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::from_corners(20.0, 0.0, 30.0, 10.0)), 0.0);
        assert_eq!(
            a.iou(&BBox::from_corners(5.0, 0.0, 15.0, 10.0)),
            50.0 / 150.0
        );
    }

    #[test]
    fn flip_twice_is_identity() {
        let b = BBox::new(10.0, 4.0, 6.0, 2.0);
        assert_eq!(b.flip_horizontal(96.0).flip_horizontal(96.0), b);
        assert_eq!(b.flip_horizontal(96.0).cx, 86.0);
    }

    fn any_box() -> impl Strategy<Value = BBox> {
        (0.0..96.0, 0.0..96.0, 1.0..60.0, 1.0..60.0)
            .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(b in any_box(), a in any_box()) {
            let back = decode(&encode(&b, &a), &a);
            prop_assert!((back.cx - b.cx).abs() < 1e-5 && (back.cy - b.cy).abs() < 1e-5);
            prop_assert!((back.w - b.w).abs() < 1e-5 && (back.h - b.h).abs() < 1e-5);
        }

        #[test]
        fn encode_inverts_decode(t in prop::array::uniform4(-5.0..5.0f64), a in any_box()) {
            let back = encode(&decode(&t, &a), &a);
            for k in 0..4 {
                prop_assert!((back[k] - t[k]).abs() < 1e-5);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(a in any_box(), b in any_box()) {
            let (x, y) = (a.iou(&b), b.iou(&a));
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}

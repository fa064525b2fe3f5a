//! Axis-aligned box arithmetic in continuous pixel coordinates.
//!
//! Boxes are stored COCO-style as `(x_min, y_min, width, height)`. All
//! operations are pure and never mutate their inputs.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower area bound of the medium size category (COCO convention).
pub const SMALL_MAX_AREA: f64 = 32.0 * 32.0;
/// Upper area bound of the medium size category (COCO convention).
pub const MEDIUM_MAX_AREA: f64 = 96.0 * 96.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({x_min}, {y_min}, {width}, {height}): width and height must be finite and positive")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        width: f64,
        height: f64,
    },
    #[error("invalid image size {width}x{height}")]
    InvalidImageSize { width: f64, height: f64 },
    #[error("invalid scale factor {0}: must be finite and positive")]
    InvalidScaleFactor(f64),
    #[error("clipping {0} to the image produced a zero-area box")]
    DegenerateResult(BBox),
}

/// Axis-aligned rectangle. Width and height are always finite and positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    width: f64,
    height: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        let finite = x_min.is_finite() && y_min.is_finite() && width.is_finite() && height.is_finite();
        if !finite || width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::InvalidBox {
                x_min,
                y_min,
                width,
                height,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            width,
            height,
        })
    }

    /// Builds a box from its corners, `x_max > x_min` and `y_max > y_min`.
    pub fn from_corners(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        Self::new(x_min, y_min, x_max - x_min, y_max - y_min)
    }

    /// Builds a box of the given size around `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(cx - width / 2.0, cy - height / 2.0, width, height)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    pub fn x_max(&self) -> f64 {
        self.x_min + self.width
    }

    pub fn y_max(&self) -> f64 {
        self.y_min + self.height
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Area of the overlap with `other`; zero when the boxes only touch.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max().min(other.x_max()) - self.x_min.max(other.x_min);
        let h = self.y_max().min(other.y_max()) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou(self, other)
    }

    pub fn size_category(&self) -> SizeCategory {
        SizeCategory::from_area(self.area())
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width, self.height]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.x_min, self.y_min, self.width, self.height
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    width: f64,
    height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width.is_finite() && height.is_finite() && width > 0.0 && height > 0.0) {
            return Err(GeometryError::InvalidImageSize { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    pub fn height(&self) -> f64 {
        self.height
    }

    /// Whether `b` lies entirely inside `[0, width] x [0, height]`.
    pub fn contains(&self, b: &BBox) -> bool {
        b.x_min() >= 0.0 && b.y_min() >= 0.0 && b.x_max() <= self.width && b.y_max() <= self.height
    }
}

/// Multiplier applied to a box's area; linear dimensions scale by its square root.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct ScaleFactor(f64);

impl ScaleFactor {
    pub fn new(value: f64) -> Result<Self, GeometryError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(GeometryError::InvalidScaleFactor(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn linear(self) -> f64 {
        self.0.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeCategory {
    Small,
    Medium,
    Large,
}

impl SizeCategory {
    pub const ALL: [SizeCategory; 3] = [SizeCategory::Small, SizeCategory::Medium, SizeCategory::Large];

    pub fn from_area(area: f64) -> Self {
        if area < SMALL_MAX_AREA {
            SizeCategory::Small
        } else if area <= MEDIUM_MAX_AREA {
            SizeCategory::Medium
        } else {
            SizeCategory::Large
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SizeCategory::Small => "small",
            SizeCategory::Medium => "medium",
            SizeCategory::Large => "large",
        }
    }
}

impl fmt::Display for SizeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union. Boxes sharing only an edge have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersects `b` with the closed image rectangle.
pub fn clip_to_image(b: &BBox, img: &ImageSize) -> Result<BBox, GeometryError> {
    let x0 = b.x_min().max(0.0);
    let y0 = b.y_min().max(0.0);
    let x1 = b.x_max().min(img.width());
    let y1 = b.y_max().min(img.height());
    if x1 <= x0 || y1 <= y0 {
        return Err(GeometryError::DegenerateResult(*b));
    }
    // Avoid recomputing the extent from corners when nothing was cut, so an
    // in-image box survives clipping bit-for-bit.
    let (x_min, width) = if x0 == b.x_min() && x1 == b.x_max() {
        (b.x_min(), b.width())
    } else {
        (x0, x1 - x0)
    };
    let (y_min, height) = if y0 == b.y_min() && y1 == b.y_max() {
        (b.y_min(), b.height())
    } else {
        (y0, y1 - y0)
    };
    BBox::new(x_min, y_min, width, height).map_err(|_| GeometryError::DegenerateResult(*b))
}

/// Resizes `b` to `width x height` about its center, then clips to the image.
pub fn resize_centered(b: &BBox, width: f64, height: f64, img: &ImageSize) -> Result<BBox, GeometryError> {
    let (cx, cy) = b.center();
    let resized = BBox::from_center(cx, cy, width, height)?;
    clip_to_image(&resized, img)
}

/// Scales the area of `b` by `f` about its center and clips to the image.
///
/// A factor of exactly 1 returns `b` unchanged (after clipping, which is a
/// no-op for in-image boxes).
pub fn scale_box(b: &BBox, f: ScaleFactor, img: &ImageSize) -> Result<BBox, GeometryError> {
    if f.value() == 1.0 {
        return clip_to_image(b, img);
    }
    let s = f.linear();
    resize_centered(b, b.width() * s, b.height() * s, img)
}

pub fn size_category(b: &BBox) -> SizeCategory {
    b.size_category()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn img(w: f64, h: f64) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(area(&bx(0.0, 0.0, 10.0, 10.0)), 100.0);
        assert_eq!(area(&bx(2.0, 3.0, 1.0, 1.0)), 1.0);
        assert_eq!(area(&bx(0.0, 0.0, 32.0, 32.0)), 1024.0);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.0, -1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, f64::INFINITY, 1.0, 1.0).is_err());
        assert!(ImageSize::new(0.0, 10.0).is_err());
        assert!(ScaleFactor::new(0.0).is_err());
        assert!(ScaleFactor::new(f64::NAN).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 5.0, 5.0)), 0.0);
        // intersection 50, union 150
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_of_edge_sharing_boxes_is_zero() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &bx(10.0, 0.0, 10.0, 10.0)), 0.0);
        assert_eq!(iou(&a, &bx(10.0, 10.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn scale_box_examples() {
        let out = scale_box(&bx(40.0, 45.0, 20.0, 10.0), ScaleFactor::new(4.0).unwrap(), &img(1000.0, 1000.0)).unwrap();
        assert_eq!(out, bx(30.0, 40.0, 40.0, 20.0));

        let b = bx(12.5, 7.25, 33.3, 41.9);
        assert_eq!(scale_box(&b, ScaleFactor::new(1.0).unwrap(), &img(100.0, 100.0)).unwrap(), b);

        let full = bx(0.0, 0.0, 100.0, 100.0);
        assert_eq!(scale_box(&full, ScaleFactor::new(2.0).unwrap(), &img(100.0, 100.0)).unwrap(), full);
    }

    #[test]
    fn scale_box_outside_image_is_degenerate() {
        let b = bx(200.0, 200.0, 10.0, 10.0);
        let err = scale_box(&b, ScaleFactor::new(2.0).unwrap(), &img(100.0, 100.0)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateResult(_)));
    }

    #[test]
    fn clipping_is_flush_with_border() {
        let b = bx(90.0, 40.0, 10.0, 20.0);
        let out = scale_box(&b, ScaleFactor::new(2.0).unwrap(), &img(100.0, 100.0)).unwrap();
        assert_eq!(out.x_max(), 100.0);
        assert!(out.width() < 10.0 * 2f64.sqrt());
        assert!((out.height() - 20.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn size_category_thresholds() {
        assert_eq!(size_category(&bx(0.0, 0.0, 10.0, 10.0)), SizeCategory::Small);
        assert_eq!(size_category(&bx(0.0, 0.0, 50.0, 50.0)), SizeCategory::Medium);
        assert_eq!(size_category(&bx(0.0, 0.0, 100.0, 100.0)), SizeCategory::Large);
        assert_eq!(size_category(&bx(0.0, 0.0, 32.0, 32.0)), SizeCategory::Medium);
        assert_eq!(size_category(&bx(0.0, 0.0, 96.0, 96.0)), SizeCategory::Medium);
        assert_eq!(size_category(&bx(0.0, 0.0, 31.9, 32.0)), SizeCategory::Small);
    }

    #[test]
    fn bbox_serializes_as_coco_array() {
        let b = bx(1.5, 2.0, 3.0, 4.25);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[1.5,2.0,3.0,4.25]");
        assert!(serde_json::from_str::<BBox>("[0,0,0,1]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..60.0f64, 0.1..60.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn scaling_composes(
            cx in 400.0..600.0f64, cy in 400.0..600.0f64,
            w in 1.0..50.0f64, h in 1.0..50.0f64,
            f1 in 0.25..4.0f64, f2 in 0.25..4.0f64,
        ) {
            let image = img(1000.0, 1000.0);
            let b = BBox::from_center(cx, cy, w, h).unwrap();
            let once = scale_box(&scale_box(&b, ScaleFactor::new(f1).unwrap(), &image).unwrap(),
                                 ScaleFactor::new(f2).unwrap(), &image).unwrap();
            let direct = scale_box(&b, ScaleFactor::new(f1 * f2).unwrap(), &image).unwrap();
            for (p, q) in once.to_array().iter().zip(direct.to_array()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }

        #[test]
        fn unclipped_scaling_iou_law(
            cx in 300.0..700.0f64, cy in 300.0..700.0f64,
            w in 1.0..100.0f64, h in 1.0..100.0f64,
            f in 0.1..4.0f64,
        ) {
            let image = img(1000.0, 1000.0);
            let b = BBox::from_center(cx, cy, w, h).unwrap();
            let s = scale_box(&b, ScaleFactor::new(f).unwrap(), &image).unwrap();
            prop_assert!((iou(&b, &s) - f.min(1.0 / f)).abs() < 1e-9);
            prop_assert!((s.area() / b.area() - f).abs() < 1e-9 * f);
        }

        #[test]
        fn unit_factor_is_exact_identity(
            x in 0.0..500.0f64, y in 0.0..500.0f64, w in 0.5..400.0f64, h in 0.5..400.0f64,
        ) {
            let image = img(1000.0, 1000.0);
            let b = bx(x, y, w, h);
            prop_assert_eq!(scale_box(&b, ScaleFactor::new(1.0).unwrap(), &image).unwrap(), b);
        }
    }
}

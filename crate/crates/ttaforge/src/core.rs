//! Geometry, image, and detection primitives shared by every other module.
//!
//! All types here are immutable values and every operation is a pure
//! function, so they are safe to use from any thread.

use crate::error::{Result, TtaError};

/// Axis-aligned box in float pixel coordinates, corner form.
///
/// `(x1, y1)` is the top-left corner, `(x2, y2)` the bottom-right one;
/// `x1 <= x2` and `y1 <= y2` always hold and all coordinates are finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(TtaError::Invalid("non-finite box coordinate".into()));
        }
        if x1 > x2 || y1 > y2 {
            return Err(TtaError::Invalid(format!(
                "inverted box corners ({x1},{y1})-({x2},{y2})"
            )));
        }
        Ok(BoundingBox { x1, y1, x2, y2 })
    }

    /// Box from top-left corner plus width/height, the dataset-file form.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        BoundingBox::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn to_xywh(&self) -> (f64, f64, f64, f64) {
        (self.x1, self.y1, self.width(), self.height())
    }
}

/// Intersection over union of two boxes. Zero-area unions yield 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Clip a box to `[0, width] x [0, height]`, preserving corner ordering.
pub fn clamp_box(b: &BoundingBox, image: &Image) -> BoundingBox {
    let w = image.width as f64;
    let h = image.height as f64;
    BoundingBox {
        x1: b.x1.clamp(0.0, w),
        y1: b.y1.clamp(0.0, h),
        x2: b.x2.clamp(0.0, w),
        y2: b.y2.clamp(0.0, h),
    }
}

/// RGB image with float channels in `[0, 1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pixels: Vec<f64>,
}

/// Minimum permitted image edge length.
pub const MIN_IMAGE_DIM: usize = 8;

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width < MIN_IMAGE_DIM || height < MIN_IMAGE_DIM {
            return Err(TtaError::Invalid(format!(
                "image dimensions {width}x{height} below minimum {MIN_IMAGE_DIM}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(TtaError::shape(
                "Image::new",
                format!("{} values", width * height * 3),
                format!("{} values", pixels.len()),
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(TtaError::Invalid("pixel value outside [0, 1]".into()));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Image::new(width, height, vec![value; width * height * 3])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox {
            x1: 0.0,
            y1: 0.0,
            x2: self.width as f64,
            y2: self.height as f64,
        }
    }

    /// Mean over all pixels and channels.
    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Sub-image under `box`, clamped to the image and rounded outward
/// (floor on the top-left corner, ceil on the bottom-right one) so no
/// labeled content is lost.
///
/// Returns `DegenerateBox` when the clamped, rounded box covers less than
/// one pixel; callers skip the instance.
pub fn crop(image: &Image, b: &BoundingBox) -> Result<Image> {
    let c = clamp_box(b, image);
    let x1 = c.x1.floor() as usize;
    let y1 = c.y1.floor() as usize;
    let x2 = (c.x2.ceil() as usize).min(image.width);
    let y2 = (c.y2.ceil() as usize).min(image.height);
    if x2 <= x1 || y2 <= y1 {
        return Err(TtaError::DegenerateBox);
    }
    let (w, h) = (x2 - x1, y2 - y1);
    let mut pixels = Vec::with_capacity(w * h * 3);
    for y in y1..y2 {
        for x in x1..x2 {
            for ch in 0..3 {
                pixels.push(image.get(x, y, ch));
            }
        }
    }
    // Crops may be smaller than MIN_IMAGE_DIM; bypass the constructor check.
    Ok(Image {
        width: w,
        height: h,
        pixels,
    })
}

/// Bilinear resize with the pixel-center convention.
pub fn resize_bilinear(image: &Image, new_width: usize, new_height: usize) -> Image {
    assert!(new_width >= 1 && new_height >= 1);
    if new_width == image.width && new_height == image.height {
        return image.clone();
    }
    let sx = image.width as f64 / new_width as f64;
    let sy = image.height as f64 / new_height as f64;
    let mut pixels = Vec::with_capacity(new_width * new_height * 3);
    for y in 0..new_height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (image.height - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = src_y - y0 as f64;
        for x in 0..new_width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (image.width - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = src_x - x0 as f64;
            for c in 0..3 {
                let top = image.get(x0, y0, c) * (1.0 - fx) + image.get(x1, y0, c) * fx;
                let bot = image.get(x0, y1, c) * (1.0 - fx) + image.get(x1, y1, c) * fx;
                pixels.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image {
        width: new_width,
        height: new_height,
        pixels,
    }
}

/// Ordered set of category names.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySpace {
    names: Vec<String>,
}

impl CategorySpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(TtaError::Invalid("empty category space".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(TtaError::Invalid(format!("category {i} has empty name")));
            }
            if names[..i].contains(n) {
                return Err(TtaError::Invalid(format!("duplicate category name {n:?}")));
            }
        }
        Ok(CategorySpace { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Dot-joined detector text input, e.g. `"square. disk. triangle."`.
    pub fn text_input(&self) -> String {
        let mut s = self.names.join(". ");
        s.push('.');
        s
    }
}

/// A single detection: box, per-category score vector, and the argmax label.
///
/// Scores coming out of a backend lie in `(0, 1)`; memory enhancement adds
/// affinity mass on top, so enhanced score vectors may exceed 1 and are used
/// for ranking only.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub box_: BoundingBox,
    pub scores: Vec<f64>,
    pub label: usize,
    pub score: f64,
}

impl Detection {
    /// Build a detection from a box and score vector; label and top score
    /// are derived (first index wins ties).
    pub fn from_scores(box_: BoundingBox, scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(TtaError::Invalid("empty score vector".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(TtaError::Invalid("non-finite detection score".into()));
        }
        let label = argmax(&scores);
        let score = scores[label];
        Ok(Detection {
            box_,
            scores,
            label,
            score,
        })
    }
}

/// Index of the maximum value; first index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

//! Integer rectangle arithmetic, crops and greedy non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Axis-aligned pixel rectangle. Width and height are always at least one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    /// Panics on a zero-sized box; use [`BBox::try_new`] for untrusted input.
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self::try_new(x, y, w, h).expect("box width and height must be >= 1")
    }

    pub fn try_new(x: u32, y: u32, w: u32, h: u32) -> Option<Self> {
        (w >= 1 && h >= 1).then_some(BBox { x, y, w, h })
    }

    /// The full frame of a `w`×`h` image.
    pub fn frame(w: u32, h: u32) -> Self {
        BBox::new(0, 0, w, h)
    }

    #[inline]
    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    #[inline]
    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    #[inline]
    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Center in pixel units (may be a half-integer).
    pub fn center(&self) -> (f64, f64) {
        (
            self.x as f64 + self.w as f64 / 2.0,
            self.y as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 as u64 || y1 <= y0 as u64 {
            return None;
        }
        Some(BBox::new(x0, y0, (x1 - x0 as u64) as u32, (y1 - y0 as u64) as u32))
    }

    pub fn intersection_area(&self, other: &BBox) -> u64 {
        self.intersection(other).map_or(0, |b| b.area())
    }

    pub fn contains(&self, inner: &BBox) -> bool {
        inner.x >= self.x
            && inner.y >= self.y
            && inner.right() <= self.right()
            && inner.bottom() <= self.bottom()
    }

    pub fn fits_in(&self, image_w: u32, image_h: u32) -> bool {
        self.right() <= image_w as u64 && self.bottom() <= image_h as u64
    }

    /// Express this box in the coordinate frame of `origin`'s top-left corner.
    /// `None` when the box does not lie inside `origin`.
    pub fn relative_to(&self, origin: &BBox) -> Option<BBox> {
        origin
            .contains(self)
            .then(|| BBox::new(self.x - origin.x, self.y - origin.y, self.w, self.h))
    }

    /// Scale the box about its center by `factor` per side. The result may
    /// extend past the image; it is floored at the origin and at 1×1.
    pub fn scaled_about_center(&self, factor: f64) -> BBox {
        let (cx, cy) = self.center();
        let w = (self.w as f64 * factor).round().max(1.0);
        let h = (self.h as f64 * factor).round().max(1.0);
        let x = (cx - w / 2.0).floor().max(0.0);
        let y = (cy - h / 2.0).floor().max(0.0);
        BBox::new(x as u32, y as u32, w as u32, h as u32)
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = String;

    fn try_from(v: [u32; 4]) -> std::result::Result<Self, Self::Error> {
        BBox::try_new(v[0], v[1], v[2], v[3])
            .ok_or_else(|| format!("box {v:?} has zero width or height"))
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// A candidate rectangle with a detector's objectness and, once classified,
/// a probability vector over the class vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub bbox: BBox,
    pub objectness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
    pub source_image: String,
}

impl Region {
    pub fn new(bbox: BBox, objectness: f64, source_image: impl Into<String>) -> Self {
        Region {
            bbox,
            objectness,
            class_probs: None,
            source_image: source_image.into(),
        }
    }
}

/// Intersection over union, computed from exact integer areas and divided once.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Descending objectness; ties go to the smaller x, then the smaller y.
fn rank(a: &Region, b: &Region) -> Ordering {
    b.objectness
        .partial_cmp(&a.objectness)
        .unwrap_or(Ordering::Equal)
        .then(a.bbox.x.cmp(&b.bbox.x))
        .then(a.bbox.y.cmp(&b.bbox.y))
}

/// Greedy non-maximum suppression. A region is dropped when its IoU with an
/// already kept region is at least `overlap_threshold`. Output is in keep order.
pub fn nms(regions: &[Region], overlap_threshold: f64) -> Vec<Region> {
    let mut order: Vec<usize> = (0..regions.len()).collect();
    // stable sort keeps input index as the final tie-break
    order.sort_by(|&i, &j| rank(&regions[i], &regions[j]));

    let mut kept: Vec<Region> = Vec::new();
    for i in order {
        let r = &regions[i];
        if kept
            .iter()
            .all(|k| iou(&k.bbox, &r.bbox) < overlap_threshold)
        {
            kept.push(r.clone());
        }
    }
    kept
}

/// Intersect `bbox` with the `image_w`×`image_h` frame.
pub fn clamp_box(bbox: &BBox, image_w: u32, image_h: u32) -> Result<BBox> {
    bbox.intersection(&BBox::frame(image_w, image_h))
        .ok_or(Error::OutOfFrame { image_w, image_h })
}

/// Copy out the sub-raster under `bbox`, which must lie inside the image.
pub fn crop(image: &Raster, bbox: &BBox) -> Result<Raster> {
    if !bbox.fits_in(image.width(), image.height()) {
        return Err(Error::OutOfFrame {
            image_w: image.width(),
            image_h: image.height(),
        });
    }
    let src = image.as_rgb();
    let row = image.width() as usize * 3;
    let mut data = Vec::with_capacity(bbox.area() as usize * 3);
    for y in bbox.y..bbox.y + bbox.h {
        let start = y as usize * row + bbox.x as usize * 3;
        data.extend_from_slice(&src[start..start + bbox.w as usize * 3]);
    }
    Raster::from_rgb(bbox.w, bbox.h, data)
}

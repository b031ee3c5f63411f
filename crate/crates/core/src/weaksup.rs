//! Weak bounding boxes: a centered box covering proportion λ of each side,
//! used as free localization supervision on standard images.

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeakBoxConfig {
    pub lambda_r: f64,
    pub lambda_o: f64,
}

impl Default for WeakBoxConfig {
    fn default() -> Self {
        WeakBoxConfig {
            lambda_r: 0.9,
            lambda_o: 0.8,
        }
    }
}

impl WeakBoxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda_o && self.lambda_o < self.lambda_r && self.lambda_r <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "need 0 < lambda_o < lambda_r <= 1, got lambda_o={} lambda_r={}",
                self.lambda_o, self.lambda_r
            )));
        }
        Ok(())
    }
}

const SNAP: f64 = 1e-9;

/// Top-left corner `((1-λ)w/2, (1-λ)h/2)` floored, size `(λw, λh)` rounded
/// with a minimum of one pixel.
pub fn weak_box(image_w: u32, image_h: u32, lambda: f64) -> BBox {
    assert!(image_w >= 1 && image_h >= 1, "image must be nonempty");
    assert!(lambda > 0.0 && lambda <= 1.0, "lambda must lie in (0, 1]");
    let (w, h) = (image_w as f64, image_h as f64);
    // nudge values that are integral (or half-integral) in exact arithmetic
    // but land just below in floating point
    let x = ((1.0 - lambda) * w / 2.0 + SNAP).floor() as u32;
    let y = ((1.0 - lambda) * h / 2.0 + SNAP).floor() as u32;
    let bw = ((lambda * w + SNAP).round() as u32).max(1).min(image_w - x);
    let bh = ((lambda * h + SNAP).round() as u32).max(1).min(image_h - y);
    BBox::new(x, y, bw, bh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supervision {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: usize,
}

/// One weak box per standard image, carrying the image's label.
pub fn build_supervision(dataset: &DatasetManifest, lambda: f64) -> Result<Vec<Supervision>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(r) = dataset.records.iter().find(|r| r.source != Source::Standard) {
        return Err(Error::ConfigInvalid(format!(
            "weak supervision needs standard images; `{}` is {:?}",
            r.id, r.source
        )));
    }
    Ok(dataset
        .records
        .iter()
        .map(|r| Supervision {
            image_id: r.id.clone(),
            bbox: weak_box(r.width, r.height, lambda),
            label: r.label,
        })
        .collect())
}

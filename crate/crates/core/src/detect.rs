//! Region detectors.
//!
//! A [`DetectorModel`] proposes rectangles with an objectness score. Three
//! kinds exist:
//!
//! * `template`: trained from weak boxes: one mean feature vector per class,
//!   matched against a fixed sliding-window pyramid by cosine similarity.
//! * `oracle`: reads planted ground truth, dilated by `1/lambda_used`, with
//!   optional coordinate jitter and score noise.
//! * `external`: replays a prediction file produced by any other detector.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, RasterSource};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, WindowFeatures, FEATURE_DIM};
use crate::geometry::{clamp_box, nms, BBox, Region};
use crate::raster::Raster;
use crate::store;
use crate::synthgen::sub_seed;
use crate::weaksup::Supervision;

/// Window side as a fraction of the searched frame's shorter side.
pub const WINDOW_SCALES: [f64; 5] = [0.3, 0.45, 0.6, 0.8, 0.95];

pub const DEFAULT_SCORE_FLOOR: f64 = 0.9;
pub const DEFAULT_MAX_REGIONS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Oracle,
    Template,
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleJitter {
    /// Maximum per-coordinate displacement in pixels.
    pub pixels: f64,
    /// Objectness is `1 - u` with `u` uniform in `[0, score_noise]`.
    pub score_noise: f64,
    pub seed: u64,
}

impl Default for OracleJitter {
    fn default() -> Self {
        OracleJitter {
            pixels: 0.0,
            score_noise: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub lambda_used: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub templates: Vec<FeatureVector>,
    pub score_floor: f64,
    #[serde(default)]
    pub oracle_jitter: OracleJitter,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions_path: Option<String>,
    #[serde(skip)]
    pub predictions: Option<PredictionFile>,
}

impl DetectorModel {
    pub fn oracle(lambda_used: f64, jitter: OracleJitter) -> Self {
        DetectorModel {
            kind: DetectorKind::Oracle,
            lambda_used,
            templates: Vec::new(),
            score_floor: 0.0,
            oracle_jitter: jitter,
            predictions_path: None,
            predictions: None,
        }
    }

    pub fn external(lambda_used: f64, predictions: PredictionFile, score_floor: f64) -> Self {
        DetectorModel {
            kind: DetectorKind::External,
            lambda_used,
            templates: Vec::new(),
            score_floor,
            oracle_jitter: OracleJitter::default(),
            predictions_path: None,
            predictions: Some(predictions),
        }
    }

    /// Check structural invariants; loads the prediction file of an external
    /// model if only its path is known.
    pub fn ready(&mut self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_floor) || !(self.lambda_used > 0.0 && self.lambda_used <= 1.0) {
            return Err(Error::ConfigInvalid(format!(
                "detector score_floor and lambda_used must lie in [0, 1]: {} {}",
                self.score_floor, self.lambda_used
            )));
        }
        match self.kind {
            DetectorKind::Template => {
                let dim = self.templates.first().ok_or(Error::NoModel)?.dim();
                if self.templates.iter().any(|t| t.dim() != dim) {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        actual: self.templates.iter().map(|t| t.dim()).find(|&d| d != dim).unwrap(),
                    });
                }
            }
            DetectorKind::External => {
                if self.predictions.is_none() {
                    let path = self.predictions_path.as_ref().ok_or(Error::NoModel)?;
                    self.predictions = Some(load_predictions(Path::new(path))?);
                }
            }
            DetectorKind::Oracle => {}
        }
        Ok(())
    }

    /// Affine map of the best cosine similarity from [-1, 1] onto [0, 1].
    pub fn objectness(&self, f: &FeatureVector) -> f64 {
        let best = self
            .templates
            .iter()
            .map(|t| f.cosine(t))
            .fold(f64::NEG_INFINITY, f64::max);
        ((best + 1.0) / 2.0).clamp(0.0, 1.0)
    }

    /// A matched window looks like the λ-core of an object view, so the
    /// proposal is the window grown by `1/lambda_used`, kept inside `bounds`.
    fn expand(&self, window: &BBox, bounds: &BBox) -> BBox {
        window
            .scaled_about_center(1.0 / self.lambda_used)
            .intersection(bounds)
            .unwrap_or(*window)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut m: DetectorModel = store::read_json(path)?;
        if let (DetectorKind::External, Some(p)) = (m.kind, m.predictions_path.clone()) {
            // relative prediction paths resolve against the model's directory
            let p = Path::new(&p);
            let resolved = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p.to_path_buf()
            };
            m.predictions = Some(load_predictions(&resolved)?);
        }
        Ok(m)
    }
}

/// One image plus a lazily built summed-area table.
pub struct ImageInput<'a> {
    pub record: &'a ImageRecord,
    pub raster: &'a Raster,
    table: OnceLock<WindowFeatures>,
}

impl<'a> ImageInput<'a> {
    pub fn new(record: &'a ImageRecord, raster: &'a Raster) -> Self {
        ImageInput {
            record,
            raster,
            table: OnceLock::new(),
        }
    }

    pub fn table(&self) -> &WindowFeatures {
        self.table.get_or_init(|| WindowFeatures::new(self.raster))
    }

    fn frame(&self) -> BBox {
        BBox::frame(self.raster.width(), self.raster.height())
    }
}

/// The sliding-window pyramid inside `frame`, in scale order then row-major.
pub fn windows(frame: &BBox) -> Vec<BBox> {
    let short = frame.w.min(frame.h) as f64;
    let mut out = Vec::new();
    for s in WINDOW_SCALES {
        let side = ((s * short).round() as u32).max(1);
        let stride = (side / 4).max(1);
        let mut y = frame.y;
        while y as u64 + side as u64 <= frame.bottom() {
            let mut x = frame.x;
            while x as u64 + side as u64 <= frame.right() {
                out.push(BBox::new(x, y, side, side));
                x += stride;
            }
            y += stride;
        }
    }
    out
}

/// Mean feature of the weak-box crops of each class, unit-normalized. Items
/// are summed in image-id order.
pub fn train_template_detector(
    supervision: &[Supervision],
    dataset: &DatasetManifest,
    rasters: &dyn RasterSource,
    lambda: f64,
) -> Result<DetectorModel> {
    let by_id: HashMap<&str, &ImageRecord> =
        dataset.records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut items: Vec<&Supervision> = supervision.iter().collect();
    items.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let l = dataset.num_classes();
    let mut sums = vec![vec![0.0; FEATURE_DIM]; l];
    let mut counts = vec![0usize; l];
    for s in items {
        let rec = by_id
            .get(s.image_id.as_str())
            .ok_or_else(|| Error::MissingRaster(s.image_id.clone()))?;
        if s.label >= l {
            return Err(Error::DegenerateData(format!("label {} out of range", s.label)));
        }
        let img = rasters.raster(rec)?;
        let b = clamp_box(&s.bbox, img.width(), img.height()).map_err(|e| e.for_image(&rec.id))?;
        let f = WindowFeatures::new(&img).features(&b);
        for (acc, v) in sums[s.label].iter_mut().zip(f.as_slice()) {
            *acc += v;
        }
        counts[s.label] += 1;
    }
    let mut templates = Vec::with_capacity(l);
    for (c, (sum, n)) in sums.into_iter().zip(counts).enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(c));
        }
        let mean: Vec<f64> = sum.into_iter().map(|v| v / n as f64).collect();
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        templates.push(FeatureVector(mean.into_iter().map(|v| v / norm.max(f64::MIN_POSITIVE)).collect()));
    }
    Ok(DetectorModel {
        kind: DetectorKind::Template,
        lambda_used: lambda,
        templates,
        score_floor: DEFAULT_SCORE_FLOOR,
        oracle_jitter: OracleJitter::default(),
        predictions_path: None,
        predictions: None,
    })
}

fn jitter_rng(model: &DetectorModel, id: &str, salt: u64) -> ChaCha8Rng {
    let h = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    ChaCha8Rng::seed_from_u64(sub_seed(model.oracle_jitter.seed, salt, h))
}

/// Planted objects dilated by `1/lambda_used`, jittered, clamped to the frame.
fn oracle_boxes(model: &DetectorModel, input: &ImageInput, salt: u64) -> Vec<(BBox, f64, BBox)> {
    let mut rng = jitter_rng(model, &input.record.id, salt);
    let j = model.oracle_jitter;
    let (w, h) = (input.raster.width(), input.raster.height());
    let mut out = Vec::new();
    for p in input.record.planted_objects() {
        let planted = p.bbox();
        let d = planted.scaled_about_center(1.0 / model.lambda_used);
        let mut shift = || {
            if j.pixels > 0.0 {
                rng.gen_range(-j.pixels..=j.pixels).round() as i64
            } else {
                0
            }
        };
        let (dx, dy, dw, dh) = (shift(), shift(), shift(), shift());
        let x = (d.x as i64 + dx).max(0) as u32;
        let y = (d.y as i64 + dy).max(0) as u32;
        let bw = (d.w as i64 + dw).max(1) as u32;
        let bh = (d.h as i64 + dh).max(1) as u32;
        let noise = if j.score_noise > 0.0 {
            rng.gen_range(0.0..=j.score_noise)
        } else {
            0.0
        };
        if let Ok(b) = clamp_box(&BBox::new(x, y, bw, bh), w, h) {
            out.push((b, 1.0 - noise, planted));
        }
    }
    out
}

fn external_regions(model: &DetectorModel, input: &ImageInput) -> Result<Vec<Region>> {
    let preds = model.predictions.as_ref().ok_or(Error::NoModel)?;
    let dets = preds
        .get(&input.record.id)
        .ok_or_else(|| Error::MissingPrediction(input.record.id.clone()))?;
    let (w, h) = (input.raster.width(), input.raster.height());
    Ok(dets
        .iter()
        .filter_map(|d| {
            clamp_box(&d.bbox, w, h).ok().map(|b| Region {
                bbox: b,
                objectness: d.objectness,
                class_probs: d.class_probs.clone(),
                source_image: input.record.id.clone(),
            })
        })
        .collect())
}

/// Raw candidates before the score floor and NMS.
fn candidates(model: &DetectorModel, input: &ImageInput) -> Result<Vec<Region>> {
    let id = &input.record.id;
    Ok(match model.kind {
        DetectorKind::Template => {
            if model.templates.is_empty() {
                return Err(Error::NoModel);
            }
            let table = input.table();
            let frame = input.frame();
            windows(&frame)
                .into_iter()
                .map(|b| {
                    let score = model.objectness(&table.features(&b));
                    Region::new(model.expand(&b, &frame), score, id.clone())
                })
                .collect()
        }
        DetectorKind::Oracle => oracle_boxes(model, input, 0)
            .into_iter()
            .map(|(b, s, _)| Region::new(b, s, id.clone()))
            .collect(),
        DetectorKind::External => external_regions(model, input)?,
    })
}

/// Proposals above the score floor after NMS, best first, at most `max_regions`.
pub fn detect_regions(
    model: &DetectorModel,
    input: &ImageInput,
    nms_threshold: f64,
    max_regions: usize,
) -> Result<Vec<Region>> {
    let cands: Vec<Region> = candidates(model, input)?
        .into_iter()
        .filter(|r| r.objectness >= model.score_floor)
        .collect();
    let mut kept = nms(&cands, nms_threshold);
    kept.truncate(max_regions);
    Ok(kept)
}

/// Where the object detector looks for the best object of a region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectSearch {
    /// Only windows that lie entirely inside the region.
    #[default]
    WithinRegion,
    /// Detect over the whole image, then clip the best proposal centered in
    /// the region to the region.
    WholeImage,
}

/// The single highest-objectness object proposal inside `region`, or `None`
/// when nothing clears the score floor. The result never extends past the region.
pub fn detect_best_object_within(
    model: &DetectorModel,
    input: &ImageInput,
    region: &Region,
    search: ObjectSearch,
) -> Result<Option<Region>> {
    let rb = region.bbox;
    let id = &input.record.id;
    let inside_center = |b: &BBox| {
        let (cx, cy) = b.center();
        cx >= rb.x as f64 && cx < rb.right() as f64 && cy >= rb.y as f64 && cy < rb.bottom() as f64
    };
    let mut best: Option<Region> = None;
    let mut offer = |b: BBox, score: f64| {
        if score < model.score_floor {
            return;
        }
        let better = match &best {
            None => true,
            Some(cur) => {
                score > cur.objectness
                    || (score == cur.objectness && b.area() > cur.bbox.area())
            }
        };
        if better {
            best = Some(Region::new(b, score, id.clone()));
        }
    };

    match (model.kind, search) {
        (DetectorKind::Template, ObjectSearch::WithinRegion) => {
            if model.templates.is_empty() {
                return Err(Error::NoModel);
            }
            let table = input.table();
            for b in windows(&rb) {
                offer(model.expand(&b, &rb), model.objectness(&table.features(&b)));
            }
        }
        (DetectorKind::Oracle, ObjectSearch::WithinRegion) => {
            for (b, score, planted) in oracle_boxes(model, input, 1) {
                if inside_center(&planted) {
                    if let Some(clipped) = b.intersection(&rb) {
                        offer(clipped, score);
                    }
                }
            }
        }
        (DetectorKind::External, ObjectSearch::WithinRegion) => {
            for r in external_regions(model, input)? {
                if rb.contains(&r.bbox) {
                    offer(r.bbox, r.objectness);
                }
            }
        }
        (_, ObjectSearch::WholeImage) => {
            for r in candidates(model, input)? {
                if inside_center(&r.bbox) {
                    if let Some(clipped) = r.bbox.intersection(&rb) {
                        offer(clipped, r.objectness);
                    }
                }
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub objectness: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionLine {
    image_id: String,
    detections: Vec<Detection>,
}

/// Per-image detections keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionFile {
    pub images: BTreeMap<String, Vec<Detection>>,
}

impl PredictionFile {
    pub fn get(&self, image_id: &str) -> Option<&Vec<Detection>> {
        self.images.get(image_id)
    }

    pub fn insert(&mut self, image_id: impl Into<String>, regions: &[Region]) {
        self.images.insert(
            image_id.into(),
            regions
                .iter()
                .map(|r| Detection {
                    bbox: r.bbox,
                    objectness: r.objectness,
                    class_probs: r.class_probs.clone(),
                })
                .collect(),
        );
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let lines: Vec<PredictionLine> = self
            .images
            .iter()
            .map(|(id, d)| PredictionLine {
                image_id: id.clone(),
                detections: d.clone(),
            })
            .collect();
        store::to_jsonl(&lines)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let mut images = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedFile {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            let line: PredictionLine =
                serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
            for d in &line.detections {
                if !(0.0..=1.0).contains(&d.objectness) {
                    return Err(bad(format!("objectness {} outside [0, 1]", d.objectness)));
                }
                if let Some(p) = &d.class_probs {
                    let sum: f64 = p.iter().sum();
                    if p.iter().any(|v| *v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                        return Err(bad("class_probs must be a probability vector".into()));
                    }
                }
            }
            if images.insert(line.image_id.clone(), line.detections).is_some() {
                return Err(bad(format!("duplicate image id `{}`", line.image_id)));
            }
        }
        Ok(PredictionFile { images })
    }
}

pub fn load_predictions(path: &Path) -> Result<PredictionFile> {
    PredictionFile::from_jsonl(&store::read_to_string(path)?, &path.display().to_string())
}

pub fn export_predictions(predictions: &PredictionFile, path: &Path) -> Result<()> {
    store::write_atomic(path, predictions.to_jsonl()?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{PlantedObject, Source};

    fn record(planted: Vec<PlantedObject>) -> ImageRecord {
        ImageRecord {
            id: "img".into(),
            source: Source::Standard,
            label: 0,
            width: 64,
            height: 64,
            raster_path: String::new(),
            planted: Some(planted),
            provenance: None,
        }
    }

    #[test]
    fn pyramid_windows_fit_the_frame() {
        let frame = BBox::new(3, 5, 40, 30);
        let ws = windows(&frame);
        assert!(!ws.is_empty());
        assert!(ws.iter().all(|w| frame.contains(w)));
        let sides: std::collections::BTreeSet<u32> = ws.iter().map(|w| w.w).collect();
        assert_eq!(sides.into_iter().collect::<Vec<_>>(), vec![9, 14, 18, 24, 29]);
    }

    #[test]
    fn oracle_without_jitter_covers_the_planted_box() {
        let planted = BBox::new(12, 14, 36, 34);
        let rec = record(vec![PlantedObject::new(planted, 0)]);
        let img = Raster::filled(64, 64, [128, 128, 128]);
        let input = ImageInput::new(&rec, &img);
        let m = DetectorModel::oracle(0.9, OracleJitter::default());
        let regions = detect_regions(&m, &input, 0.5, 16).unwrap();
        assert_eq!(regions.len(), 1);
        assert!(regions[0].bbox.contains(&planted));
        assert_eq!(regions[0].objectness, 1.0);

        let obj = DetectorModel::oracle(0.8, OracleJitter::default());
        let best = detect_best_object_within(&obj, &input, &regions[0], ObjectSearch::WithinRegion)
            .unwrap()
            .unwrap();
        assert!(regions[0].bbox.contains(&best.bbox));
    }

    #[test]
    fn oracle_sees_nothing_in_outliers() {
        let rec = record(vec![]);
        let img = Raster::filled(64, 64, [128, 128, 128]);
        let input = ImageInput::new(&rec, &img);
        let m = DetectorModel::oracle(0.9, OracleJitter::default());
        assert!(detect_regions(&m, &input, 0.5, 16).unwrap().is_empty());
        let whole = Region::new(BBox::frame(64, 64), 1.0, "img");
        assert!(detect_best_object_within(&m, &input, &whole, ObjectSearch::WithinRegion)
            .unwrap()
            .is_none());
    }

    #[test]
    fn oracle_jitter_is_seeded() {
        let rec = record(vec![PlantedObject::new(BBox::new(20, 20, 20, 20), 0)]);
        let img = Raster::filled(64, 64, [128, 128, 128]);
        let input = ImageInput::new(&rec, &img);
        let j = OracleJitter {
            pixels: 3.0,
            score_noise: 0.2,
            seed: 5,
        };
        let m = DetectorModel::oracle(0.9, j);
        let a = detect_regions(&m, &input, 0.5, 16).unwrap();
        assert_eq!(a, detect_regions(&m, &input, 0.5, 16).unwrap());
        assert!(a[0].objectness >= 0.8 && a[0].objectness <= 1.0);
    }

    #[test]
    fn untrained_template_model_is_rejected() {
        let rec = record(vec![]);
        let img = Raster::filled(8, 8, [0, 0, 0]);
        let input = ImageInput::new(&rec, &img);
        let mut m = DetectorModel::oracle(0.9, OracleJitter::default());
        m.kind = DetectorKind::Template;
        assert!(matches!(detect_regions(&m, &input, 0.5, 4), Err(Error::NoModel)));
        assert!(matches!(m.ready(), Err(Error::NoModel)));
    }

    #[test]
    fn external_predictions_replay_and_validate() {
        let mut pf = PredictionFile::default();
        let mut r = Region::new(BBox::new(50, 50, 30, 30), 0.7, "img");
        r.class_probs = Some(vec![0.25, 0.75]);
        pf.insert("img", &[r, Region::new(BBox::new(1, 1, 5, 5), 0.2, "img")]);
        let text = pf.to_jsonl().unwrap();
        assert!(text.starts_with(r#"{"image_id":"img","detections":[{"box":[50,50,30,30],"objectness":0.7,"class_probs":[0.25,0.75]}"#));
        let back = PredictionFile::from_jsonl(&text, "p").unwrap();
        assert_eq!(back, pf);
        assert_eq!(back.images["img"][1].class_probs, None);

        let m = DetectorModel::external(0.9, back, 0.5);
        let rec = record(vec![]);
        let img = Raster::filled(64, 64, [0, 0, 0]);
        let input = ImageInput::new(&rec, &img);
        let got = detect_regions(&m, &input, 0.5, 16).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].bbox, BBox::new(50, 50, 14, 14));

        let mut other = rec.clone();
        other.id = "unknown".into();
        let input = ImageInput::new(&other, &img);
        assert!(matches!(
            detect_regions(&m, &input, 0.5, 16),
            Err(Error::MissingPrediction(_))
        ));

        let bad = r#"{"image_id":"a","detections":[]}
{"image_id":"b","detections":[{"box":[0,0,2,2],"objectness":1.2}]}"#;
        match PredictionFile::from_jsonl(bad, "p.jsonl") {
            Err(Error::MalformedFile { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }
}

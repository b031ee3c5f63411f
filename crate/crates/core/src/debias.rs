//! Region selection under the form and label constraints, and the full
//! web-to-debiased dataset pass.

use serde::{Deserialize, Serialize};

use crate::classify::{argmax, ClassifierModel};
use crate::dataset::{DatasetManifest, ImageRecord, MemoryRasters, PlantedObject, Provenance, RasterSource, Source};
use crate::detect::{detect_best_object_within, detect_regions, DetectorModel, ImageInput, ObjectSearch};
use crate::error::{Error, Result};
use crate::geometry::{crop, iou, BBox, Region};
use crate::parallel::par_map;
use crate::raster::Raster;
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstraintConfig {
    /// IoU floor between a region and its best inner object.
    pub eta: f64,
    /// Objectness floor for the region.
    pub epsilon: f64,
    pub nms_threshold: f64,
    pub max_regions: usize,
    pub object_search: ObjectSearch,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            eta: 0.5,
            epsilon: 0.5,
            nms_threshold: 0.5,
            max_regions: crate::detect::DEFAULT_MAX_REGIONS,
            object_search: ObjectSearch::WithinRegion,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.eta) || !unit(self.epsilon) || !unit(self.nms_threshold) {
            return Err(Error::ConfigInvalid(format!(
                "eta, epsilon and nms_threshold must lie in [0, 1]: {} {} {}",
                self.eta, self.epsilon, self.nms_threshold
            )));
        }
        if self.max_regions == 0 {
            return Err(Error::ConfigInvalid("max_regions must be at least 1".into()));
        }
        Ok(())
    }
}

/// 1 iff an object was found and it overlaps the region with IoU ≥ `eta`.
pub fn form_constraint(region: &Region, best_object: Option<&Region>, eta: f64) -> bool {
    best_object.is_some_and(|o| iou(&o.bbox, &region.bbox) >= eta)
}

/// 1 iff the predicted class equals the web tag and objectness ≥ `epsilon`.
pub fn label_constraint(region: &Region, web_label: usize, epsilon: f64) -> Result<bool> {
    let probs = region.class_probs.as_ref().ok_or(Error::MissingProbs)?;
    Ok(argmax(probs) == web_label && region.objectness >= epsilon)
}

/// Everything needed to replay the keep/drop decision for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub region: BBox,
    pub object_box: Option<BBox>,
    pub iou: f64,
    pub objectness: f64,
    pub predicted: usize,
    pub web_label: usize,
    pub form: bool,
    pub label: bool,
    pub delta: bool,
}

impl DecisionRecord {
    pub fn new(region: &Region, best_object: Option<&Region>, web_label: usize, config: &ConstraintConfig) -> Result<Self> {
        let form = form_constraint(region, best_object, config.eta);
        let label = label_constraint(region, web_label, config.epsilon)?;
        Ok(DecisionRecord {
            region: region.bbox,
            object_box: best_object.map(|o| o.bbox),
            iou: best_object.map_or(0.0, |o| iou(&o.bbox, &region.bbox)),
            objectness: region.objectness,
            predicted: argmax(region.class_probs.as_deref().unwrap_or_default()),
            web_label,
            form,
            label,
            delta: form && label,
        })
    }

    /// Recompute the decision from the stored inputs alone.
    pub fn replay(&self, eta: f64, epsilon: f64) -> bool {
        let form = self.object_box.is_some() && self.iou >= eta;
        let label = self.predicted == self.web_label && self.objectness >= epsilon;
        form && label
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub retained: Vec<Region>,
    pub decisions: Vec<DecisionRecord>,
}

/// Keep the regions whose form and label constraints both hold, in input order.
/// `objects[i]` is the best object found inside `regions[i]`.
pub fn select_regions(
    regions: &[Region],
    web_label: usize,
    objects: &[Option<Region>],
    config: &ConstraintConfig,
) -> Result<Selection> {
    if regions.len() != objects.len() {
        return Err(Error::SizeMismatch {
            left: regions.len(),
            right: objects.len(),
        });
    }
    let mut retained = Vec::new();
    let mut decisions = Vec::with_capacity(regions.len());
    for (r, o) in regions.iter().zip(objects) {
        let d = DecisionRecord::new(r, o.as_ref(), web_label, config)?;
        if d.delta {
            retained.push(r.clone());
        }
        decisions.push(d);
    }
    Ok(Selection { retained, decisions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSelection {
    pub image_id: String,
    pub web_label: usize,
    pub candidates: usize,
    pub retained: usize,
    pub decisions: Vec<DecisionRecord>,
}

/// Retained count next to the count before elimination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub retained: usize,
    pub total: usize,
}

impl Tally {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.retained as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub images: Tally,
    pub proposals: Tally,
    pub zero_retained_images: usize,
    pub zero_proposal_images: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionReport {
    pub images: Vec<ImageSelection>,
}

impl SelectionReport {
    pub fn summary(&self) -> SelectionSummary {
        let kept_images = self.images.iter().filter(|i| i.retained > 0).count();
        SelectionSummary {
            images: Tally {
                retained: kept_images,
                total: self.images.len(),
            },
            proposals: Tally {
                retained: self.images.iter().map(|i| i.retained).sum(),
                total: self.images.iter().map(|i| i.candidates).sum(),
            },
            zero_retained_images: self.images.len() - kept_images,
            zero_proposal_images: self.images.iter().filter(|i| i.candidates == 0).count(),
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        store::to_jsonl(&self.images)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        Ok(SelectionReport {
            images: store::from_jsonl(text, origin)?,
        })
    }
}

pub struct DebiasOutput {
    pub dataset: DatasetManifest,
    pub crops: MemoryRasters,
    pub report: SelectionReport,
}

/// Planted objects that overlap `region`, clipped to it and shifted into its
/// coordinates.
fn planted_in_crop(record: &ImageRecord, region: &BBox) -> Vec<PlantedObject> {
    record
        .planted_objects()
        .iter()
        .filter_map(|p| {
            let clipped = p.bbox().intersection(region)?;
            Some(PlantedObject::new(clipped.relative_to(region)?, p.class_id))
        })
        .collect()
}

struct ImageOutcome {
    selection: ImageSelection,
    crops: Vec<(ImageRecord, Raster)>,
}

fn debias_image(
    record: &ImageRecord,
    rasters: &dyn RasterSource,
    region_model: &DetectorModel,
    object_model: &DetectorModel,
    benchmark: &ClassifierModel,
    config: &ConstraintConfig,
) -> Result<ImageOutcome> {
    let image = rasters.raster(record)?;
    let input = ImageInput::new(record, &image);
    let mut regions = detect_regions(region_model, &input, config.nms_threshold, config.max_regions)?;
    let mut objects = Vec::with_capacity(regions.len());
    for r in &mut regions {
        if r.class_probs.is_none() {
            let f = input.table().features(&r.bbox);
            r.class_probs = Some(benchmark.predict_probs(&f)?);
        }
        objects.push(detect_best_object_within(object_model, &input, r, config.object_search)?);
    }
    let sel = select_regions(&regions, record.label, &objects, config)?;

    let mut crops = Vec::with_capacity(sel.retained.len());
    let kept = sel.decisions.iter().filter(|d| d.delta);
    for (k, (r, d)) in sel.retained.iter().zip(kept).enumerate() {
        let id = format!("dbs-{}-{k}", record.id);
        let rec = ImageRecord {
            raster_path: format!("debiased/{id}.ppm"),
            id,
            source: Source::Debiased,
            label: record.label,
            width: r.bbox.w,
            height: r.bbox.h,
            planted: record.planted.as_ref().map(|_| planted_in_crop(record, &r.bbox)),
            provenance: Some(Provenance {
                source_image: record.id.clone(),
                region: r.bbox,
                decision: d.clone(),
            }),
        };
        crops.push((rec, crop(&image, &r.bbox)?));
    }
    Ok(ImageOutcome {
        selection: ImageSelection {
            image_id: record.id.clone(),
            web_label: record.label,
            candidates: regions.len(),
            retained: sel.retained.len(),
            decisions: sel.decisions,
        },
        crops,
    })
}

/// Run region detection, object localization and both constraints over every
/// web image and crop what survives. Output order follows the input manifest.
pub fn debias_dataset(
    web: &DatasetManifest,
    rasters: &dyn RasterSource,
    region_model: &DetectorModel,
    object_model: &DetectorModel,
    benchmark: &ClassifierModel,
    config: &ConstraintConfig,
) -> Result<DebiasOutput> {
    config.validate()?;
    if region_model.lambda_used <= object_model.lambda_used {
        return Err(Error::ModelMismatch(format!(
            "region detector lambda {} must exceed object detector lambda {}",
            region_model.lambda_used, object_model.lambda_used
        )));
    }
    if benchmark.class_count != web.num_classes() {
        return Err(Error::ModelMismatch(format!(
            "benchmark has {} classes, dataset has {}",
            benchmark.class_count,
            web.num_classes()
        )));
    }
    let outcomes = par_map(&web.records, |rec| {
        debias_image(rec, rasters, region_model, object_model, benchmark, config).map_err(|e| e.for_image(&rec.id))
    });

    let mut report = SelectionReport::default();
    let mut records = Vec::new();
    let mut crops = MemoryRasters::new();
    for o in outcomes {
        let o = o?;
        report.images.push(o.selection);
        for (rec, img) in o.crops {
            crops.insert(rec.id.clone(), img);
            records.push(rec);
        }
    }
    Ok(DebiasOutput {
        dataset: web.with_records(records),
        crops,
        report,
    })
}

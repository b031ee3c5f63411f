//! Dataset-bias measurements: object scale and density, "name that dataset"
//! separability, cross-dataset generalization, label quality, and a
//! parameter sweep over the debiasing knobs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{evaluate_features, labeled_features, train_softmax, ClassifierModel, TrainConfig};
use crate::dataset::{BySource, DatasetManifest, ImageRecord, RasterSource};
use crate::debias::{debias_dataset, ConstraintConfig};
use crate::detect::{detect_best_object_within, detect_regions, DetectorModel, ImageInput, ObjectSearch};
use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::geometry::{BBox, Region};
use crate::parallel::par_map;
use crate::synthgen::sub_seed;

/// Reference scale/density pairs for a curated benchmark, raw web data and
/// debiased web data on a food-recognition task.
pub const REFERENCE_STANDARD: (f64, f64) = (0.8536, 1.16);
pub const REFERENCE_WEB: (f64, f64) = (0.6218, 1.94);
pub const REFERENCE_DEBIASED: (f64, f64) = (0.7775, 1.23);
/// Standard-trained row of the reference cross-dataset table, in percent.
pub const REFERENCE_CROSSGEN_STANDARD_ROW: (f64, f64) = (84.31, 52.49);
/// Reference share of web images with no detected region.
pub const REFERENCE_NO_REGION_RATE: f64 = 0.313;

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];
pub const DEFAULT_TEST_FRACTION: f64 = 0.25;
/// Density counts distinct subject regions, so the probe suppresses overlapping
/// views of one object far harder than proposal generation does.
pub const DEFAULT_PROBE_NMS: f64 = 0.1;

/// Mean area fraction of the regions (absent when there are none) and their count.
pub fn scale_density(image: &ImageRecord, object_regions: &[Region]) -> (Option<f64>, usize) {
    let d = object_regions.len();
    if d == 0 {
        return (None, 0);
    }
    let total = image.width as f64 * image.height as f64;
    let sum: f64 = object_regions.iter().map(|r| r.bbox.area() as f64 / total).sum();
    (Some(sum / d as f64), d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScale {
    pub image_id: String,
    pub scale: Option<f64>,
    pub density: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDensityStats {
    pub images: Vec<ImageScale>,
    /// Mean over images with at least one region.
    pub mean_scale: Option<f64>,
    /// Mean over all images, zero-region images included.
    pub mean_density: f64,
    pub zero_region_images: usize,
}

impl ScaleDensityStats {
    pub fn from_images(images: Vec<ImageScale>) -> Self {
        let scales: Vec<f64> = images.iter().filter_map(|i| i.scale).collect();
        let mean_scale = (!scales.is_empty()).then(|| scales.iter().sum::<f64>() / scales.len() as f64);
        let mean_density = if images.is_empty() {
            0.0
        } else {
            images.iter().map(|i| i.density as f64).sum::<f64>() / images.len() as f64
        };
        let zero_region_images = images.iter().filter(|i| i.density == 0).count();
        ScaleDensityStats {
            images,
            mean_scale,
            mean_density,
            zero_region_images,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    Standard,
    Web,
    Debiased,
}

/// What `dataset_scale_density` needs besides the images.
pub struct ScaleProbe<'a> {
    pub region_model: &'a DetectorModel,
    pub object_model: &'a DetectorModel,
    /// Keeps only regions it classifies as the image's label; `None` keeps all.
    pub benchmark: Option<&'a ClassifierModel>,
    pub nms_threshold: f64,
    pub max_regions: usize,
}

/// Scale and density over a dataset. Standard and web images are probed with
/// the region detector. A debiased crop contributes the object detector's
/// single best object inside it, the same proposal the form constraint keeps.
pub fn dataset_scale_density(
    dataset: &DatasetManifest,
    rasters: &dyn RasterSource,
    probe: &ScaleProbe,
    mode: ScaleMode,
) -> Result<ScaleDensityStats> {
    if probe.region_model.lambda_used <= probe.object_model.lambda_used {
        return Err(Error::ModelMismatch(format!(
            "region detector lambda {} must exceed object detector lambda {}",
            probe.region_model.lambda_used, probe.object_model.lambda_used
        )));
    }
    let model = match mode {
        ScaleMode::Standard | ScaleMode::Web => probe.region_model,
        ScaleMode::Debiased => probe.object_model,
    };
    let rows = par_map(&dataset.records, |rec| -> Result<ImageScale> {
        let image = rasters.raster(rec)?;
        let input = ImageInput::new(rec, &image);
        let mut regions = match mode {
            ScaleMode::Debiased => {
                let whole = Region {
                    bbox: BBox::new(0, 0, image.width(), image.height()),
                    objectness: 1.0,
                    class_probs: None,
                    source_image: rec.id.clone(),
                };
                detect_best_object_within(model, &input, &whole, ObjectSearch::WithinRegion)?
                    .into_iter()
                    .collect()
            }
            _ => detect_regions(model, &input, probe.nms_threshold, probe.max_regions)?,
        };
        if let Some(bench) = probe.benchmark {
            let mut kept = Vec::with_capacity(regions.len());
            for r in regions {
                let probs = match &r.class_probs {
                    Some(p) => p.clone(),
                    None => bench.predict_probs(&input.table().features(&r.bbox))?,
                };
                if crate::classify::argmax(&probs) == rec.label {
                    kept.push(r);
                }
            }
            regions = kept;
        }
        let (scale, density) = scale_density(rec, &regions);
        Ok(ImageScale {
            image_id: rec.id.clone(),
            scale,
            density,
        })
    });
    let images = rows
        .into_iter()
        .zip(&dataset.records)
        .map(|(r, rec)| r.map_err(|e| e.for_image(&rec.id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScaleDensityStats::from_images(images))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtdCurve {
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub control_accuracy: Vec<f64>,
}

impl NtdCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,accuracy,control_accuracy\n");
        for i in 0..self.fractions.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.fractions[i], self.accuracy[i], self.control_accuracy[i]
            ));
        }
        out
    }
}

fn shuffled<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Seeded split into (train, test) with `round(test_fraction · n)` test items,
/// taken per label so every label keeps its share.
pub fn stratified_split<T: Clone>(items: &[(T, usize)], test_fraction: f64, seed: u64) -> (Vec<(T, usize)>, Vec<(T, usize)>) {
    let labels = items.iter().map(|(_, y)| *y).max().map_or(0, |m| m + 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..labels {
        let group: Vec<(T, usize)> = items.iter().filter(|(_, y)| *y == c).cloned().collect();
        let group = shuffled(&group, sub_seed(seed, 0x5717, c as u64));
        let n_test = (test_fraction * group.len() as f64).round() as usize;
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    (train, test)
}

/// Test accuracy of a two-way source classifier for each training fraction.
/// The test split is fixed up front; fraction `f` trains on the first
/// `round(f · n)` of each source's shuffled training items.
fn source_curve(
    a: &[FeatureVector],
    b: &[FeatureVector],
    fractions: &[f64],
    config: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let n_test = (DEFAULT_TEST_FRACTION * a.len() as f64).round() as usize;
    let a = shuffled(a, sub_seed(seed, 0xa, 0));
    let b = shuffled(b, sub_seed(seed, 0xb, 0));
    let mut test: Vec<(FeatureVector, usize)> = Vec::with_capacity(2 * n_test);
    test.extend(a[..n_test].iter().map(|f| (f.clone(), 0)));
    test.extend(b[..n_test].iter().map(|f| (f.clone(), 1)));
    let (a_train, b_train) = (&a[n_test..], &b[n_test..]);
    let mut acc = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let k = ((f * a_train.len() as f64).round() as usize).clamp(1, a_train.len());
        let mut train: Vec<(FeatureVector, usize)> = Vec::with_capacity(2 * k);
        train.extend(a_train[..k].iter().map(|x| (x.clone(), 0)));
        train.extend(b_train[..k].iter().map(|x| (x.clone(), 1)));
        let model = train_softmax(&train, 2, config)?;
        acc.push(evaluate_features(&model, &test)?);
    }
    Ok(acc)
}

/// "Name that dataset": how well a classifier tells `a` from `b`. The
/// control series splits `a` into two random halves.
pub fn name_that_dataset(
    a: &DatasetManifest,
    b: &DatasetManifest,
    rasters: &dyn RasterSource,
    fractions: &[f64],
    config: &TrainConfig,
    seed: u64,
) -> Result<NtdCurve> {
    if a.len() != b.len() {
        return Err(Error::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 8 {
        return Err(Error::EmptyDataset);
    }
    if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Error::ConfigInvalid(format!("fractions must lie in (0, 1]: {fractions:?}")));
    }
    let fa = crate::classify::featurize(a, rasters)?;
    let fb = crate::classify::featurize(b, rasters)?;
    let accuracy = source_curve(&fa, &fb, fractions, config, seed)?;
    let halves = shuffled(&fa, sub_seed(seed, 0xc, 0));
    let (h1, h2) = halves.split_at(halves.len() / 2);
    let control_accuracy = source_curve(h1, &h2[..h1.len()], fractions, config, sub_seed(seed, 0xd, 0))?;
    Ok(NtdCurve {
        fractions: fractions.to_vec(),
        accuracy,
        control_accuracy,
    })
}

/// A seeded subsample of `dataset` with `n` records, in original order.
pub fn subsample(dataset: &DatasetManifest, n: usize, seed: u64) -> DatasetManifest {
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    dataset.with_records(idx.into_iter().map(|i| dataset.records[i].clone()).collect())
}

/// Both datasets cut to the smaller size with seeded subsamples, as the
/// source classifier needs equal shares.
pub fn equal_sizes(a: &DatasetManifest, b: &DatasetManifest, seed: u64) -> (DatasetManifest, DatasetManifest) {
    let n = a.len().min(b.len());
    (subsample(a, n, sub_seed(seed, 0x51, 0)), subsample(b, n, sub_seed(seed, 0x52, 0)))
}

/// Standard-test accuracy of a classifier trained on the standard train
/// split alone and with an equal budget of debiased or raw web images added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationResult {
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub standard_only: f64,
    pub with_debiased: f64,
    pub with_web: f64,
}

/// Averages over `seeds`; each seed draws its own split, subsamples and
/// initialization. The budget is capped by the smaller added pool.
pub fn augmentation_comparison(
    standard: &DatasetManifest,
    debiased: &DatasetManifest,
    web: &DatasetManifest,
    rasters: &dyn RasterSource,
    budget: usize,
    seeds: &[u64],
    config: &TrainConfig,
) -> Result<AugmentationResult> {
    if standard.is_empty() || debiased.is_empty() || web.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let l = standard.num_classes();
    let budget = budget.min(debiased.len()).min(web.len());
    let features = labeled_features(standard, rasters)?;
    let mut sums = [0.0; 3];
    for &seed in seeds {
        let (train, test) = stratified_split(&features, DEFAULT_TEST_FRACTION, sub_seed(seed, 0xa0, 0));
        let cfg = TrainConfig { seed, ..config.clone() };
        let extra = [
            Vec::new(),
            labeled_features(&subsample(debiased, budget, sub_seed(seed, 0xa1, 0)), rasters)?,
            labeled_features(&subsample(web, budget, sub_seed(seed, 0xa2, 0)), rasters)?,
        ];
        for (sum, add) in sums.iter_mut().zip(extra) {
            let mut data = train.clone();
            data.extend(add);
            let model = train_softmax(&data, l, &cfg)?;
            *sum += evaluate_features(&model, &test)?;
        }
    }
    let n = seeds.len() as f64;
    Ok(AugmentationResult {
        budget,
        seeds: seeds.to_vec(),
        standard_only: sums[0] / n,
        with_debiased: sums[1] / n,
        with_web: sums[2] / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub mean: f64,
    pub half_difference: f64,
}

impl RowSummary {
    pub fn of(a: f64, b: f64) -> Self {
        RowSummary {
            mean: (a + b) / 2.0,
            half_difference: (a - b).abs() / 2.0,
        }
    }
}

/// `matrix[i][j]`: trained on source `i`, tested on source `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossGenMatrix {
    pub sources: [String; 2],
    pub matrix: [[f64; 2]; 2],
    pub rows: [RowSummary; 2],
}

impl CrossGenMatrix {
    pub fn new(sources: [String; 2], matrix: [[f64; 2]; 2]) -> Self {
        let rows = [
            RowSummary::of(matrix[0][0], matrix[0][1]),
            RowSummary::of(matrix[1][0], matrix[1][1]),
        ];
        CrossGenMatrix { sources, matrix, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("train\\test,{},{},mean,half_difference\n", self.sources[0], self.sources[1]);
        for i in 0..2 {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.sources[i], self.matrix[i][0], self.matrix[i][1], self.rows[i].mean, self.rows[i].half_difference
            ));
        }
        out
    }
}

/// Train one classifier per source and test each on both held-out splits.
pub fn cross_generalization(
    a: &DatasetManifest,
    b: &DatasetManifest,
    rasters: &dyn RasterSource,
    config: &TrainConfig,
    seed: u64,
) -> Result<CrossGenMatrix> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if a.num_classes() != b.num_classes() {
        return Err(Error::ModelMismatch("datasets use different class vocabularies".into()));
    }
    let l = a.num_classes();
    let (a_train, a_test) = stratified_split(&labeled_features(a, rasters)?, DEFAULT_TEST_FRACTION, sub_seed(seed, 0xe, 0));
    let (b_train, b_test) = stratified_split(&labeled_features(b, rasters)?, DEFAULT_TEST_FRACTION, sub_seed(seed, 0xe, 1));
    let ma = train_softmax(&a_train, l, config)?;
    let mb = train_softmax(&b_train, l, config)?;
    let matrix = [
        [evaluate_features(&ma, &a_test)?, evaluate_features(&ma, &b_test)?],
        [evaluate_features(&mb, &a_test)?, evaluate_features(&mb, &b_test)?],
    ];
    let name = |d: &DatasetManifest| {
        d.records
            .first()
            .map(|r| format!("{:?}", r.source).to_lowercase())
            .unwrap_or_default()
    };
    Ok(CrossGenMatrix::new([name(a), name(b)], matrix))
}

/// Share of images on which the region detector finds nothing.
pub fn label_quality(
    dataset: &DatasetManifest,
    rasters: &dyn RasterSource,
    region_model: &DetectorModel,
    nms_threshold: f64,
    max_regions: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let empties = par_map(&dataset.records, |rec| -> Result<bool> {
        let image = rasters.raster(rec)?;
        let input = ImageInput::new(rec, &image);
        Ok(detect_regions(region_model, &input, nms_threshold, max_regions)?.is_empty())
    });
    let mut n = 0usize;
    for (e, rec) in empties.into_iter().zip(&dataset.records) {
        n += e.map_err(|err| err.for_image(&rec.id))? as usize;
    }
    Ok(n as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub lambda_r: Vec<f64>,
    pub lambda_o: Vec<f64>,
    pub eta: Vec<f64>,
    pub epsilon: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            lambda_r: vec![0.9],
            lambda_o: vec![0.8],
            eta: vec![0.5],
            epsilon: vec![0.5],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &lambda_r in &self.lambda_r {
            for &lambda_o in &self.lambda_o {
                for &eta in &self.eta {
                    for &epsilon in &self.epsilon {
                        out.push(SweepPoint {
                            lambda_r,
                            lambda_o,
                            eta,
                            epsilon,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda_r: f64,
    pub lambda_o: f64,
    pub eta: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(flatten)]
    pub point: SweepPoint,
    /// Full-fraction source accuracy of standard vs debiased; `None` when the
    /// point was skipped or produced too few crops.
    pub ntd_accuracy: Option<f64>,
    pub retained_crops: usize,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Index of the row with the lowest accuracy.
    pub best: Option<usize>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda_r,lambda_o,eta,epsilon,ntd_accuracy,retained_crops,note\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.point.lambda_r,
                r.point.lambda_o,
                r.point.eta,
                r.point.epsilon,
                r.ntd_accuracy.map_or(String::new(), |a| a.to_string()),
                r.retained_crops,
                r.note.clone().unwrap_or_default()
            ));
        }
        out
    }
}

/// Everything a sweep point needs apart from its parameters.
pub struct SweepInputs<'a> {
    pub standard: &'a DatasetManifest,
    pub web: &'a DatasetManifest,
    pub rasters: &'a dyn RasterSource,
    /// Builds (or looks up) the detector trained at a given proportion.
    pub detector: &'a (dyn Fn(f64) -> Result<DetectorModel> + Sync),
    pub benchmark: &'a ClassifierModel,
    pub constraints: ConstraintConfig,
    pub ntd_config: TrainConfig,
    pub seed: u64,
}

/// Debias and measure standard-vs-debiased separability at every grid point.
pub fn parameter_sweep(grid: &SweepGrid, inputs: &SweepInputs) -> Result<SweepTable> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(points.len());
    for p in points {
        rows.push(sweep_point(p, inputs)?);
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.ntd_accuracy.map(|a| (i, a)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(i, _)| i);
    Ok(SweepTable { rows, best })
}

fn sweep_point(p: SweepPoint, inputs: &SweepInputs) -> Result<SweepRow> {
    let skipped = |note: String, retained| SweepRow {
        point: p,
        ntd_accuracy: None,
        retained_crops: retained,
        note: Some(note),
    };
    if !(0.0 < p.lambda_o && p.lambda_o < p.lambda_r && p.lambda_r <= 1.0) {
        return Ok(skipped("skipped: needs lambda_o < lambda_r".into(), 0));
    }
    let constraints = ConstraintConfig {
        eta: p.eta,
        epsilon: p.epsilon,
        ..inputs.constraints
    };
    let region = (inputs.detector)(p.lambda_r)?;
    let object = (inputs.detector)(p.lambda_o)?;
    let out = debias_dataset(inputs.web, inputs.rasters, &region, &object, inputs.benchmark, &constraints)?;
    let crops = out.dataset.len();
    if crops.min(inputs.standard.len()) < 8 {
        return Ok(skipped(format!("too few crops ({crops})"), crops));
    }
    let (std_sub, deb_sub) = equal_sizes(inputs.standard, &out.dataset, inputs.seed);
    let both = BySource {
        standard: inputs.rasters,
        web: inputs.rasters,
        debiased: &out.crops,
    };
    let curve = name_that_dataset(&std_sub, &deb_sub, &both, &[1.0], &inputs.ntd_config, inputs.seed)?;
    Ok(SweepRow {
        point: p,
        ntd_accuracy: Some(curve.accuracy[0]),
        retained_crops: crops,
        note: None,
    })
}

/// x/y series for external plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

pub fn ntd_plot_series(name: &str, curve: &NtdCurve) -> Vec<PlotSeries> {
    vec![
        PlotSeries {
            name: name.to_string(),
            x: curve.fractions.clone(),
            y: curve.accuracy.clone(),
        },
        PlotSeries {
            name: format!("{name} (control)"),
            x: curve.fractions.clone(),
            y: curve.control_accuracy.clone(),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn record(w: u32, h: u32) -> ImageRecord {
        ImageRecord {
            id: "i".into(),
            source: crate::dataset::Source::Web,
            label: 0,
            width: w,
            height: h,
            raster_path: String::new(),
            planted: None,
            provenance: None,
        }
    }

    #[test]
    fn scale_density_substitution() {
        let rec = record(100, 100);
        let regs = [
            Region::new(BBox::new(0, 0, 40, 25), 1.0, "i"),
            Region::new(BBox::new(0, 0, 40, 50), 1.0, "i"),
        ];
        let (scale, d) = scale_density(&rec, &regs);
        assert_eq!(d, 2);
        assert!((scale.unwrap() - 0.15).abs() < 1e-12);
        let full = [Region::new(BBox::frame(100, 100), 1.0, "i")];
        assert_eq!(scale_density(&rec, &full), (Some(1.0), 1));
        assert_eq!(scale_density(&rec, &[]), (None, 0));
    }

    #[test]
    fn stats_exclude_empty_images_from_scale() {
        let s = ScaleDensityStats::from_images(vec![
            ImageScale { image_id: "a".into(), scale: Some(0.5), density: 2 },
            ImageScale { image_id: "b".into(), scale: None, density: 0 },
        ]);
        assert_eq!(s.mean_scale, Some(0.5));
        assert_eq!(s.mean_density, 1.0);
        assert_eq!(s.zero_region_images, 1);
    }

    #[test]
    fn row_summary_arithmetic() {
        let (a, b) = REFERENCE_CROSSGEN_STANDARD_ROW;
        let r = RowSummary::of(a, b);
        assert!((r.mean - 68.40).abs() < 1e-9);
        assert!((r.half_difference - 15.91).abs() < 1e-9);
        assert!((r.mean + r.half_difference - a).abs() < 1e-9);
        assert!((r.mean - r.half_difference - b).abs() < 1e-9);
    }

    #[test]
    fn stratified_split_keeps_label_shares() {
        let items: Vec<(u32, usize)> = (0..40).map(|i| (i, (i % 4) as usize)).collect();
        let (train, test) = stratified_split(&items, 0.25, 3);
        assert_eq!(train.len() + test.len(), 40);
        for c in 0..4 {
            assert_eq!(test.iter().filter(|(_, y)| *y == c).count(), 3);
        }
        let mut all: Vec<u32> = train.iter().chain(&test).map(|(v, _)| *v).collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn empty_grid_is_an_error() {
        let grid = SweepGrid {
            lambda_r: vec![],
            ..SweepGrid::default()
        };
        assert!(grid.points().is_empty());
    }
}

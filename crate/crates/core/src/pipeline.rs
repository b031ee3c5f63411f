//! Run configuration, the on-disk workdir layout, the resumable run ledger
//! and the stage runner that chains everything from synthesis to metrics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::biasmetrics::{
    augmentation_comparison, cross_generalization, dataset_scale_density, equal_sizes, label_quality,
    name_that_dataset, ntd_plot_series, parameter_sweep, stratified_split, AugmentationResult,
    CrossGenMatrix, NtdCurve, PlotSeries, ScaleDensityStats, ScaleMode, ScaleProbe, SweepGrid, SweepInputs,
    SweepTable, DEFAULT_FRACTIONS, DEFAULT_PROBE_NMS, DEFAULT_TEST_FRACTION, REFERENCE_DEBIASED,
    REFERENCE_NO_REGION_RATE, REFERENCE_STANDARD, REFERENCE_WEB,
};
use crate::classify::{evaluate_features, labeled_features, train_softmax, ClassifierModel, TrainConfig};
use crate::dataset::{DatasetManifest, DirRasters, ImageRecord, RasterSource};
use crate::debias::{debias_dataset, ConstraintConfig, Tally};
use crate::detect::{
    detect_regions, export_predictions, load_predictions, train_template_detector, DetectorKind,
    DetectorModel, ImageInput, OracleJitter, PredictionFile, DEFAULT_SCORE_FLOOR,
};
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::store;
use crate::synthgen::{generate_standard, generate_web, sub_seed, Renderer, SynthSpec};
use crate::weaksup::{build_supervision, Supervision, WeakBoxConfig};

/// Environment variable naming the default workdir.
pub const WORKDIR_ENV: &str = "DEBIASKIT_WORKDIR";
pub const DEFAULT_WORKDIR: &str = "debiaskit-work";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub score_floor: f64,
    pub oracle_jitter: OracleJitter,
    /// Prediction files for the `external` kind, one per detector role.
    pub region_predictions: Option<PathBuf>,
    pub object_predictions: Option<PathBuf>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Template,
            score_floor: DEFAULT_SCORE_FLOOR,
            oracle_jitter: OracleJitter::default(),
            region_predictions: None,
            object_predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub fractions: Vec<f64>,
    /// Overlap threshold used when counting regions for scale and density.
    pub probe_nms_threshold: f64,
    pub augmentation_budget: usize,
    pub augmentation_seeds: Vec<u64>,
    pub sweep: SweepGrid,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            fractions: DEFAULT_FRACTIONS.to_vec(),
            probe_nms_threshold: DEFAULT_PROBE_NMS,
            augmentation_budget: 200,
            augmentation_seeds: vec![0, 1, 2],
            sweep: SweepGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Falls back to `$DEBIASKIT_WORKDIR`, then `./debiaskit-work`.
    pub workdir: Option<PathBuf>,
    pub images: PathBuf,
    pub manifests: PathBuf,
    pub models: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            workdir: None,
            images: "images".into(),
            manifests: "manifests".into(),
            models: "models".into(),
            reports: "reports".into(),
        }
    }
}

/// Recognition models need a larger step than the 0.001 schedule to leave
/// chance level on the hand-crafted features; the schedule shape is kept.
pub fn recognition_train_default() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.5,
        ..TrainConfig::default()
    }
}

/// One document for every stage. `seed` is the global seed: it replaces
/// `synth.seed` and seeds every split, subsample and initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub weak_boxes: WeakBoxConfig,
    pub detector: DetectorConfig,
    /// Benchmark, final and cross-generalization classifiers.
    pub recognition_train: TrainConfig,
    /// The "name that dataset" source classifier.
    pub ntd_train: TrainConfig,
    pub constraints: ConstraintConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: SynthSpec::default().seed,
            synth: SynthSpec::default(),
            weak_boxes: WeakBoxConfig::default(),
            detector: DetectorConfig::default(),
            recognition_train: recognition_train_default(),
            ntd_train: TrainConfig::default(),
            constraints: ConstraintConfig::default(),
            metrics: MetricsConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = store::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::ConfigInvalid(m) => Error::ConfigInvalid(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.weak_boxes.validate()?;
        self.recognition_train.validate()?;
        self.ntd_train.validate()?;
        self.constraints.validate()?;
        let d = &self.detector;
        if !(0.0..=1.0).contains(&d.score_floor) {
            return Err(Error::ConfigInvalid(format!("detector.score_floor {} outside [0, 1]", d.score_floor)));
        }
        for (name, p) in [("region_predictions", &d.region_predictions), ("object_predictions", &d.object_predictions)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::ConfigInvalid(format!("detector.{name}: {} is not a file", p.display())));
                }
            }
        }
        if d.kind == DetectorKind::External && d.region_predictions.is_none() && d.object_predictions.is_none() {
            return Err(Error::ConfigInvalid(
                "external detector needs detector.region_predictions or detector.object_predictions".into(),
            ));
        }
        let m = &self.metrics;
        if m.fractions.is_empty() || m.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::ConfigInvalid(format!("metrics.fractions must lie in (0, 1]: {:?}", m.fractions)));
        }
        if !(0.0..=1.0).contains(&m.probe_nms_threshold) {
            return Err(Error::ConfigInvalid("metrics.probe_nms_threshold outside [0, 1]".into()));
        }
        if m.augmentation_seeds.is_empty() || m.augmentation_budget == 0 {
            return Err(Error::ConfigInvalid("augmentation needs a positive budget and at least one seed".into()));
        }
        let root = self.workdir();
        if root.exists() && !root.is_dir() {
            return Err(Error::ConfigInvalid(format!("workdir {} is not a directory", root.display())));
        }
        Ok(())
    }

    pub fn workdir(&self) -> PathBuf {
        self.paths
            .workdir
            .clone()
            .or_else(|| std::env::var_os(WORKDIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKDIR))
    }

    /// A training config seeded for one use site.
    fn seeded(&self, base: &TrainConfig, stream: u64) -> TrainConfig {
        TrainConfig {
            seed: sub_seed(self.seed, stream, base.seed),
            ..base.clone()
        }
    }
}

/// Which of the two detectors a stage means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorRole {
    /// λ_r: region proposals.
    Region,
    /// λ_o: objects inside regions.
    Object,
}

impl DetectorRole {
    pub fn name(self) -> &'static str {
        match self {
            DetectorRole::Region => "region",
            DetectorRole::Object => "object",
        }
    }

    pub fn lambda(self, cfg: &PipelineConfig) -> f64 {
        match self {
            DetectorRole::Region => cfg.weak_boxes.lambda_r,
            DetectorRole::Object => cfg.weak_boxes.lambda_o,
        }
    }
}

/// Classifier variants the runner trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierRole {
    /// The benchmark recognition model, trained on the standard split.
    Standard,
    /// The final model, trained on the standard split plus the debiased set.
    StandardDebiased,
}

impl ClassifierRole {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierRole::Standard => "standard",
            ClassifierRole::StandardDebiased => "standard-debiased",
        }
    }
}

/// File locations under the workdir.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
    paths: PathsConfig,
}

impl Workspace {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Workspace {
            root: cfg.workdir(),
            paths: cfg.paths.clone(),
        }
    }

    pub fn images(&self) -> PathBuf {
        self.root.join(&self.paths.images)
    }

    pub fn manifest(&self, name: &str) -> PathBuf {
        self.root.join(&self.paths.manifests).join(format!("{name}.jsonl"))
    }

    pub fn classes(&self) -> PathBuf {
        self.root.join(&self.paths.manifests).join("classes.json")
    }

    pub fn weak_boxes(&self, role: DetectorRole) -> PathBuf {
        self.root.join(&self.paths.manifests).join(format!("weakboxes-{}.jsonl", role.name()))
    }

    pub fn detector(&self, role: DetectorRole) -> PathBuf {
        self.model(&format!("detector-{}", role.name()))
    }

    pub fn classifier(&self, role: ClassifierRole) -> PathBuf {
        self.model(&format!("classifier-{}", role.name()))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join(&self.paths.models).join(format!("{name}.json"))
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.root.join(&self.paths.reports).join(file)
    }

    pub fn ledger(&self) -> PathBuf {
        self.root.join("run-ledger.jsonl")
    }

    pub fn rasters(&self) -> DirRasters {
        DirRasters::new(self.images())
    }

    pub fn load_classes(&self) -> Result<Vec<String>> {
        store::read_json(&self.classes())
    }

    pub fn load_manifest(&self, name: &str) -> Result<DatasetManifest> {
        DatasetManifest::load(&self.manifest(name), self.load_classes()?)
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).display().to_string()
    }
}

/// Something a stage reads or writes, digested for the ledger.
#[derive(Debug, Clone)]
pub enum Artifact {
    File(PathBuf),
    /// Every raster a manifest points at, in record order.
    Rasters(PathBuf),
}

impl Artifact {
    fn key(&self, ws: &Workspace) -> String {
        match self {
            Artifact::File(p) => ws.relative(p),
            Artifact::Rasters(m) => format!("rasters:{}", ws.relative(m)),
        }
    }

    fn digest(&self, ws: &Workspace) -> Result<String> {
        match self {
            Artifact::File(p) => store::digest_file(p),
            Artifact::Rasters(m) => {
                let records: Vec<ImageRecord> = store::from_jsonl(&store::read_to_string(m)?, &m.display().to_string())?;
                let images = ws.images();
                let digests = par_map(&records, |r| store::digest_file(&images.join(&r.raster_path)));
                let mut joined = String::new();
                for d in digests {
                    joined.push_str(&d?);
                }
                Ok(store::digest_bytes(joined.as_bytes()))
            }
        }
    }
}

/// One completed stage. Wall time is informational and excluded from every
/// report, so reruns stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: String,
    pub input_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub parameters: Value,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, Tally>,
    pub wall_ms: u64,
}

/// Append-only JSONL log of completed stages.
#[derive(Debug, Clone, Default)]
pub struct RunLedger {
    pub entries: Vec<LedgerEntry>,
}

impl RunLedger {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(RunLedger::default());
        }
        let entries = store::from_jsonl(&store::read_to_string(path)?, &path.display().to_string())?;
        Ok(RunLedger { entries })
    }

    fn append(&mut self, path: &Path, entry: LedgerEntry) -> Result<()> {
        use std::io::Write;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut line = serde_json::to_string(&entry)?;
        line.push('\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        self.entries.push(entry);
        Ok(())
    }

    /// The latest entry for `stage`.
    pub fn latest(&self, stage: &str) -> Option<&LedgerEntry> {
        self.entries.iter().rev().find(|e| e.stage == stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    /// Inputs and outputs matched the ledger; nothing was recomputed.
    Skipped,
}

/// What a stage consumes and produces.
pub struct StagePlan {
    pub name: String,
    pub parameters: Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
}

/// Executes stages against a workdir, skipping any whose inputs, parameters
/// and outputs all still match the ledger.
pub struct Runner {
    pub config: PipelineConfig,
    pub workspace: Workspace,
    pub ledger: RunLedger,
    /// Recompute even when the ledger says a stage is current.
    pub force: bool,
    pub statuses: Vec<(String, StageStatus)>,
}

type Counts = BTreeMap<String, Tally>;

impl Runner {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let workspace = Workspace::new(&config);
        std::fs::create_dir_all(&workspace.root).map_err(|e| Error::io(&workspace.root, e))?;
        let ledger = RunLedger::load(&workspace.ledger())?;
        Ok(Runner {
            config,
            workspace,
            ledger,
            force: false,
            statuses: Vec::new(),
        })
    }

    fn run_stage(&mut self, plan: StagePlan, body: impl FnOnce(&Runner) -> Result<Counts>) -> Result<StageStatus> {
        let name = plan.name.clone();
        self.try_stage(plan, body).map_err(|e| stage_error(&name, e))
    }

    fn try_stage(&mut self, plan: StagePlan, body: impl FnOnce(&Runner) -> Result<Counts>) -> Result<StageStatus> {
        let ws = &self.workspace;
        let mut inputs = BTreeMap::new();
        for a in &plan.inputs {
            inputs.insert(a.key(ws), a.digest(ws)?);
        }
        let mut hasher = serde_json::to_string(&plan.parameters)?;
        hasher.push_str(&plan.name);
        for (k, v) in &inputs {
            hasher.push_str(k);
            hasher.push_str(v);
        }
        let input_digest = store::digest_bytes(hasher.as_bytes());

        if !self.force {
            if let Some(prev) = self.ledger.latest(&plan.name) {
                if prev.input_digest == input_digest && self.outputs_match(&plan.outputs, &prev.outputs) {
                    self.statuses.push((plan.name, StageStatus::Skipped));
                    return Ok(StageStatus::Skipped);
                }
            }
        }

        let start = Instant::now();
        let counts = body(self)?;
        let mut outputs = BTreeMap::new();
        for a in &plan.outputs {
            outputs.insert(a.key(&self.workspace), a.digest(&self.workspace)?);
        }
        let entry = LedgerEntry {
            stage: plan.name.clone(),
            input_digest,
            inputs,
            outputs,
            parameters: plan.parameters,
            counts,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        let path = self.workspace.ledger();
        self.ledger.append(&path, entry)?;
        self.statuses.push((plan.name, StageStatus::Ran));
        Ok(StageStatus::Ran)
    }

    fn outputs_match(&self, outputs: &[Artifact], recorded: &BTreeMap<String, String>) -> bool {
        outputs.iter().all(|a| {
            let key = a.key(&self.workspace);
            match (recorded.get(&key), a.digest(&self.workspace)) {
                (Some(want), Ok(have)) => *want == have,
                _ => false,
            }
        })
    }

    fn detector_lambdas(&self) -> Value {
        serde_json::json!({
            "lambda_r": self.config.weak_boxes.lambda_r,
            "lambda_o": self.config.weak_boxes.lambda_o,
        })
    }

    // ---- stages ----

    pub fn gen_synth(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let spec = self.config.synth_spec();
        let plan = StagePlan {
            name: "gen-synth".into(),
            parameters: serde_json::to_value(&spec)?,
            inputs: vec![],
            outputs: vec![
                Artifact::File(ws.classes()),
                Artifact::File(ws.manifest("standard")),
                Artifact::File(ws.manifest("web")),
                Artifact::Rasters(ws.manifest("standard")),
                Artifact::Rasters(ws.manifest("web")),
            ],
        };
        self.run_stage(plan, |_| {
            let standard = generate_standard(&spec)?;
            let web = generate_web(&spec)?;
            let renderer = Renderer::new(spec.clone());
            write_rasters(&ws.images(), &standard, &renderer)?;
            write_rasters(&ws.images(), &web, &renderer)?;
            store::write_json(&ws.classes(), &standard.classes)?;
            standard.save(&ws.manifest("standard"))?;
            web.save(&ws.manifest("web"))?;
            let mut counts = Counts::new();
            counts.insert("standard".into(), whole(standard.len()));
            counts.insert("web".into(), whole(web.len()));
            Ok(counts)
        })
    }

    pub fn build_weakboxes(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let wb = self.config.weak_boxes;
        let plan = StagePlan {
            name: "build-weakboxes".into(),
            parameters: serde_json::to_value(wb)?,
            inputs: vec![Artifact::File(ws.classes()), Artifact::File(ws.manifest("standard"))],
            outputs: vec![
                Artifact::File(ws.weak_boxes(DetectorRole::Region)),
                Artifact::File(ws.weak_boxes(DetectorRole::Object)),
            ],
        };
        self.run_stage(plan, |_| {
            let standard = ws.load_manifest("standard")?;
            for role in [DetectorRole::Region, DetectorRole::Object] {
                let lambda = match role {
                    DetectorRole::Region => wb.lambda_r,
                    DetectorRole::Object => wb.lambda_o,
                };
                let sup = build_supervision(&standard, lambda)?;
                store::write_atomic(&ws.weak_boxes(role), store::to_jsonl(&sup)?.as_bytes())?;
            }
            Ok(Counts::from([("standard".to_string(), whole(standard.len()))]))
        })
    }

    pub fn train_detector(&mut self, role: DetectorRole) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let det = self.config.detector.clone();
        let lambda = role.lambda(&self.config);
        let mut inputs = vec![];
        match det.kind {
            DetectorKind::Template => {
                inputs.push(Artifact::File(ws.weak_boxes(role)));
                inputs.push(Artifact::File(ws.manifest("standard")));
                inputs.push(Artifact::Rasters(ws.manifest("standard")));
            }
            DetectorKind::External => inputs.push(Artifact::File(external_predictions(&det, role)?)),
            DetectorKind::Oracle => {}
        }
        let plan = StagePlan {
            name: format!("train-detector-{}", role.name()),
            parameters: serde_json::json!({ "detector": det, "lambda": lambda }),
            inputs,
            outputs: vec![Artifact::File(ws.detector(role))],
        };
        self.run_stage(plan, |_| {
            let model = match det.kind {
                DetectorKind::Template => {
                    let standard = ws.load_manifest("standard")?;
                    let sup: Vec<Supervision> = {
                        let p = ws.weak_boxes(role);
                        store::from_jsonl(&store::read_to_string(&p)?, &p.display().to_string())?
                    };
                    let mut m = train_template_detector(&sup, &standard, &ws.rasters(), lambda)?;
                    m.score_floor = det.score_floor;
                    m
                }
                DetectorKind::Oracle => DetectorModel::oracle(lambda, det.oracle_jitter),
                DetectorKind::External => {
                    // keep a private copy next to the model so the model stays valid
                    // if the original file moves
                    let src = external_predictions(&det, role)?;
                    let preds = load_predictions(&src)?;
                    let copy = format!("predictions-{}.jsonl", role.name());
                    let dest = ws.detector(role).with_file_name(&copy);
                    export_predictions(&preds, &dest)?;
                    let mut m = DetectorModel::external(lambda, preds, det.score_floor);
                    m.predictions_path = Some(copy);
                    m
                }
            };
            model.save(&ws.detector(role))?;
            Ok(Counts::new())
        })
    }

    /// Run one detector over a dataset and write its regions as a prediction file.
    pub fn detect(&mut self, role: DetectorRole, dataset: &str) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cons = self.config.constraints;
        let out = ws.report(&format!("detections-{}-{dataset}.jsonl", role.name()));
        let plan = StagePlan {
            name: format!("detect-{}-{dataset}", role.name()),
            parameters: serde_json::json!({ "nms_threshold": cons.nms_threshold, "max_regions": cons.max_regions }),
            inputs: vec![
                Artifact::File(ws.detector(role)),
                Artifact::File(ws.manifest(dataset)),
                Artifact::Rasters(ws.manifest(dataset)),
            ],
            outputs: vec![Artifact::File(out.clone())],
        };
        let dataset = dataset.to_string();
        self.run_stage(plan, |_| {
            let model = load_detector(&ws, role)?;
            let data = ws.load_manifest(&dataset)?;
            let rasters = ws.rasters();
            let found = par_map(&data.records, |rec| -> Result<_> {
                let img = rasters.raster(rec)?;
                detect_regions(&model, &ImageInput::new(rec, &img), cons.nms_threshold, cons.max_regions)
                    .map_err(|e| e.for_image(&rec.id))
            });
            let mut preds = PredictionFile::default();
            let mut hits = 0;
            for (rec, regions) in data.records.iter().zip(found) {
                let regions = regions?;
                hits += usize::from(!regions.is_empty());
                preds.insert(&rec.id, &regions);
            }
            export_predictions(&preds, &out)?;
            Ok(Counts::from([("images_with_regions".to_string(), Tally { retained: hits, total: data.len() })]))
        })
    }

    pub fn train_classifier(&mut self, role: ClassifierRole) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cfg = self.config.seeded(&self.config.recognition_train, 0xc1);
        let split_seed = sub_seed(self.config.seed, 0xc2, 0);
        let mut inputs = vec![
            Artifact::File(ws.classes()),
            Artifact::File(ws.manifest("standard")),
            Artifact::Rasters(ws.manifest("standard")),
        ];
        if role == ClassifierRole::StandardDebiased {
            inputs.push(Artifact::File(ws.manifest("debiased")));
            inputs.push(Artifact::Rasters(ws.manifest("debiased")));
        }
        let report = ws.report(&format!("classifier-{}.json", role.name()));
        let plan = StagePlan {
            name: format!("train-classifier-{}", role.name()),
            parameters: serde_json::json!({ "train": cfg, "split_seed": split_seed }),
            inputs,
            outputs: vec![Artifact::File(ws.classifier(role)), Artifact::File(report.clone())],
        };
        self.run_stage(plan, |_| {
            let standard = ws.load_manifest("standard")?;
            let rasters = ws.rasters();
            let (mut train, test) = standard_split(&standard, &rasters, split_seed)?;
            let added = if role == ClassifierRole::StandardDebiased {
                let deb = labeled_features(&ws.load_manifest("debiased")?, &rasters)?;
                let n = deb.len();
                train.extend(deb);
                n
            } else {
                0
            };
            let model = train_softmax(&train, standard.num_classes(), &cfg)?;
            let accuracy = evaluate_features(&model, &test)?;
            store::write_json(&ws.classifier(role), &model)?;
            store::write_json(
                &report,
                &ClassifierReport {
                    role,
                    train_items: train.len(),
                    added_items: added,
                    test_items: test.len(),
                    standard_test_accuracy: accuracy,
                },
            )?;
            Ok(Counts::new())
        })
    }

    pub fn debias(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cons = self.config.constraints;
        let plan = StagePlan {
            name: "debias".into(),
            parameters: serde_json::to_value(cons)?,
            inputs: vec![
                Artifact::File(ws.classes()),
                Artifact::File(ws.manifest("web")),
                Artifact::Rasters(ws.manifest("web")),
                Artifact::File(ws.detector(DetectorRole::Region)),
                Artifact::File(ws.detector(DetectorRole::Object)),
                Artifact::File(ws.classifier(ClassifierRole::Standard)),
            ],
            outputs: vec![
                Artifact::File(ws.manifest("debiased")),
                Artifact::Rasters(ws.manifest("debiased")),
                Artifact::File(ws.report("selection.jsonl")),
                Artifact::File(ws.report("selection-summary.json")),
            ],
        };
        self.run_stage(plan, |_| {
            let web = ws.load_manifest("web")?;
            let region = load_detector(&ws, DetectorRole::Region)?;
            let object = load_detector(&ws, DetectorRole::Object)?;
            let bench: ClassifierModel = store::read_json(&ws.classifier(ClassifierRole::Standard))?;
            let out = debias_dataset(&web, &ws.rasters(), &region, &object, &bench, &cons)?;
            write_rasters(&ws.images(), &out.dataset, &out.crops)?;
            out.dataset.save(&ws.manifest("debiased"))?;
            let summary = out.report.summary();
            store::write_atomic(&ws.report("selection.jsonl"), out.report.to_jsonl()?.as_bytes())?;
            store::write_json(&ws.report("selection-summary.json"), &summary)?;
            Ok(Counts::from([
                ("web_images".to_string(), summary.images),
                ("proposals".to_string(), summary.proposals),
            ]))
        })
    }

    pub fn metrics_scale_density(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let probe_nms = self.config.metrics.probe_nms_threshold;
        let k = self.config.constraints.max_regions;
        let plan = StagePlan {
            name: "metrics-scale-density".into(),
            parameters: serde_json::json!({ "probe_nms_threshold": probe_nms, "max_regions": k }),
            inputs: [dataset_inputs(&ws, &["standard", "web", "debiased"]), model_inputs(&ws)].concat(),
            outputs: vec![Artifact::File(ws.report("scale-density.json"))],
        };
        self.run_stage(plan, |_| {
            let region = load_detector(&ws, DetectorRole::Region)?;
            let object = load_detector(&ws, DetectorRole::Object)?;
            let bench: ClassifierModel = store::read_json(&ws.classifier(ClassifierRole::Standard))?;
            let probe = ScaleProbe {
                region_model: &region,
                object_model: &object,
                benchmark: Some(&bench),
                nms_threshold: probe_nms,
                max_regions: k,
            };
            let rasters = ws.rasters();
            let run = |name: &str, mode| -> Result<ScaleDensitySummary> {
                let stats = dataset_scale_density(&ws.load_manifest(name)?, &rasters, &probe, mode)?;
                Ok(ScaleDensitySummary::from(&stats))
            };
            let report = ScaleDensityReport {
                standard: run("standard", ScaleMode::Standard)?,
                web: run("web", ScaleMode::Web)?,
                debiased: run("debiased", ScaleMode::Debiased)?,
                reference: ReferenceScales::default(),
            };
            store::write_json(&ws.report("scale-density.json"), &report)?;
            Ok(Counts::new())
        })
    }

    pub fn metrics_ntd(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cfg = self.config.seeded(&self.config.ntd_train, 0xd1);
        let fractions = self.config.metrics.fractions.clone();
        let seed = sub_seed(self.config.seed, 0xd2, 0);
        let plan = StagePlan {
            name: "metrics-ntd".into(),
            parameters: serde_json::json!({ "train": cfg, "fractions": fractions, "seed": seed }),
            inputs: dataset_inputs(&ws, &["standard", "web", "debiased"]),
            outputs: ["ntd.json", "ntd-standard-web.csv", "ntd-standard-debiased.csv", "ntd-plot.json"]
                .iter()
                .map(|f| Artifact::File(ws.report(f)))
                .collect(),
        };
        self.run_stage(plan, |_| {
            let rasters = ws.rasters();
            let standard = ws.load_manifest("standard")?;
            let (s1, w) = equal_sizes(&standard, &ws.load_manifest("web")?, seed);
            let (s2, d) = equal_sizes(&standard, &ws.load_manifest("debiased")?, seed);
            let report = NtdReport {
                standard_vs_web: name_that_dataset(&s1, &w, &rasters, &fractions, &cfg, seed)?,
                standard_vs_debiased: name_that_dataset(&s2, &d, &rasters, &fractions, &cfg, seed)?,
            };
            store::write_json(&ws.report("ntd.json"), &report)?;
            store::write_atomic(&ws.report("ntd-standard-web.csv"), report.standard_vs_web.to_csv().as_bytes())?;
            store::write_atomic(
                &ws.report("ntd-standard-debiased.csv"),
                report.standard_vs_debiased.to_csv().as_bytes(),
            )?;
            let mut series: Vec<PlotSeries> = ntd_plot_series("standard-web", &report.standard_vs_web);
            series.extend(ntd_plot_series("standard-debiased", &report.standard_vs_debiased));
            store::write_json(&ws.report("ntd-plot.json"), &series)?;
            Ok(Counts::new())
        })
    }

    pub fn metrics_crossgen(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cfg = self.config.seeded(&self.config.recognition_train, 0xe1);
        let seed = sub_seed(self.config.seed, 0xe2, 0);
        let plan = StagePlan {
            name: "metrics-crossgen".into(),
            parameters: serde_json::json!({ "train": cfg, "seed": seed }),
            inputs: dataset_inputs(&ws, &["standard", "web"]),
            outputs: vec![Artifact::File(ws.report("crossgen.json")), Artifact::File(ws.report("crossgen.csv"))],
        };
        self.run_stage(plan, |_| {
            let m = cross_generalization(
                &ws.load_manifest("standard")?,
                &ws.load_manifest("web")?,
                &ws.rasters(),
                &cfg,
                seed,
            )?;
            store::write_json(&ws.report("crossgen.json"), &m)?;
            store::write_atomic(&ws.report("crossgen.csv"), m.to_csv().as_bytes())?;
            Ok(Counts::new())
        })
    }

    pub fn metrics_labelquality(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cons = self.config.constraints;
        let plan = StagePlan {
            name: "metrics-labelquality".into(),
            parameters: serde_json::json!({ "nms_threshold": cons.nms_threshold, "max_regions": cons.max_regions }),
            inputs: [
                dataset_inputs(&ws, &["web"]),
                vec![Artifact::File(ws.detector(DetectorRole::Region))],
            ]
            .concat(),
            outputs: vec![Artifact::File(ws.report("label-quality.json"))],
        };
        self.run_stage(plan, |_| {
            let web = ws.load_manifest("web")?;
            let region = load_detector(&ws, DetectorRole::Region)?;
            let frac = label_quality(&web, &ws.rasters(), &region, cons.nms_threshold, cons.max_regions)?;
            let report = LabelQualityReport {
                images: web.len(),
                no_region_fraction: frac,
                reference_no_region_rate: REFERENCE_NO_REGION_RATE,
            };
            store::write_json(&ws.report("label-quality.json"), &report)?;
            let empty = (frac * web.len() as f64).round() as usize;
            Ok(Counts::from([("images_with_regions".to_string(), Tally { retained: web.len() - empty, total: web.len() })]))
        })
    }

    pub fn metrics_augmentation(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let cfg = self.config.recognition_train.clone();
        let m = self.config.metrics.clone();
        let seeds: Vec<u64> = m.augmentation_seeds.iter().map(|s| sub_seed(self.config.seed, 0xf1, *s)).collect();
        let plan = StagePlan {
            name: "metrics-augmentation".into(),
            parameters: serde_json::json!({ "train": cfg, "budget": m.augmentation_budget, "seeds": seeds }),
            inputs: dataset_inputs(&ws, &["standard", "web", "debiased"]),
            outputs: vec![Artifact::File(ws.report("augmentation.json"))],
        };
        self.run_stage(plan, |_| {
            let r = augmentation_comparison(
                &ws.load_manifest("standard")?,
                &ws.load_manifest("debiased")?,
                &ws.load_manifest("web")?,
                &ws.rasters(),
                m.augmentation_budget,
                &seeds,
                &cfg,
            )?;
            store::write_json(&ws.report("augmentation.json"), &r)?;
            Ok(Counts::new())
        })
    }

    /// Template detectors are retrained per λ from the standard set; other
    /// kinds only swap their λ.
    pub fn sweep(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let c = self.config.clone();
        let ntd = c.seeded(&c.ntd_train, 0xd1);
        let seed = sub_seed(c.seed, 0x5e, 0);
        let plan = StagePlan {
            name: "sweep".into(),
            parameters: serde_json::json!({ "grid": c.metrics.sweep, "constraints": c.constraints, "ntd_train": ntd, "detector": c.detector, "seed": seed }),
            inputs: [
                dataset_inputs(&ws, &["standard", "web"]),
                vec![Artifact::File(ws.classifier(ClassifierRole::Standard))],
            ]
            .concat(),
            outputs: vec![Artifact::File(ws.report("sweep.json")), Artifact::File(ws.report("sweep.csv"))],
        };
        self.run_stage(plan, |_| {
            let standard = ws.load_manifest("standard")?;
            let web = ws.load_manifest("web")?;
            let rasters = ws.rasters();
            let bench: ClassifierModel = store::read_json(&ws.classifier(ClassifierRole::Standard))?;
            let det = c.detector.clone();
            let (region_preds, object_preds) = match det.kind {
                DetectorKind::External => (
                    Some(load_predictions(&external_predictions(&det, DetectorRole::Region)?)?),
                    Some(load_predictions(&external_predictions(&det, DetectorRole::Object)?)?),
                ),
                _ => (None, None),
            };
            let build = |lambda: f64| -> Result<DetectorModel> {
                match det.kind {
                    DetectorKind::Template => {
                        let mut m =
                            train_template_detector(&build_supervision(&standard, lambda)?, &standard, &rasters, lambda)?;
                        m.score_floor = det.score_floor;
                        Ok(m)
                    }
                    DetectorKind::Oracle => Ok(DetectorModel::oracle(lambda, det.oracle_jitter)),
                    // the larger λ of a grid point is always the region detector
                    DetectorKind::External => {
                        let preds = if lambda >= c.weak_boxes.lambda_r { &region_preds } else { &object_preds };
                        Ok(DetectorModel::external(lambda, preds.clone().unwrap_or_default(), det.score_floor))
                    }
                }
            };
            let table: SweepTable = parameter_sweep(
                &c.metrics.sweep,
                &SweepInputs {
                    standard: &standard,
                    web: &web,
                    rasters: &rasters,
                    detector: &build,
                    benchmark: &bench,
                    constraints: c.constraints,
                    ntd_config: ntd.clone(),
                    seed,
                },
            )?;
            store::write_json(&ws.report("sweep.json"), &table)?;
            store::write_atomic(&ws.report("sweep.csv"), table.to_csv().as_bytes())?;
            Ok(Counts::new())
        })
    }

    pub fn summary(&mut self) -> Result<StageStatus> {
        let ws = self.workspace.clone();
        let seed = self.config.seed;
        let lambdas = self.detector_lambdas();
        let reports = [
            "selection-summary.json",
            "classifier-standard.json",
            "classifier-standard-debiased.json",
            "scale-density.json",
            "ntd.json",
            "crossgen.json",
            "label-quality.json",
            "augmentation.json",
        ];
        let plan = StagePlan {
            name: "summary".into(),
            parameters: serde_json::json!({ "seed": seed, "lambdas": lambdas }),
            inputs: reports.iter().map(|f| Artifact::File(ws.report(f))).collect(),
            outputs: vec![Artifact::File(ws.report("summary.json"))],
        };
        let cons = self.config.constraints;
        self.run_stage(plan, |_| {
            let selection: crate::debias::SelectionSummary = store::read_json(&ws.report("selection-summary.json"))?;
            let bench: ClassifierReport = store::read_json(&ws.report("classifier-standard.json"))?;
            let fin: ClassifierReport = store::read_json(&ws.report("classifier-standard-debiased.json"))?;
            let summary = SummaryReport {
                seed,
                lambda_r: lambdas["lambda_r"].as_f64().unwrap_or_default(),
                lambda_o: lambdas["lambda_o"].as_f64().unwrap_or_default(),
                eta: cons.eta,
                epsilon: cons.epsilon,
                web_images: selection.images,
                proposals: selection.proposals,
                zero_retained_images: selection.zero_retained_images,
                zero_proposal_images: selection.zero_proposal_images,
                benchmark_accuracy: bench.standard_test_accuracy,
                final_accuracy: fin.standard_test_accuracy,
                scale_density: store::read_json(&ws.report("scale-density.json"))?,
                ntd: store::read_json(&ws.report("ntd.json"))?,
                cross_generalization: store::read_json(&ws.report("crossgen.json"))?,
                label_quality: store::read_json(&ws.report("label-quality.json"))?,
                augmentation: store::read_json(&ws.report("augmentation.json"))?,
            };
            store::write_json(&ws.report("summary.json"), &summary)?;
            Ok(Counts::from([("web_images".to_string(), selection.images)]))
        })
    }

    /// The whole chain, in order. Returns the summary report.
    pub fn pipeline(&mut self) -> Result<SummaryReport> {
        self.gen_synth()?;
        self.build_weakboxes()?;
        self.train_detector(DetectorRole::Region)?;
        self.train_detector(DetectorRole::Object)?;
        self.train_classifier(ClassifierRole::Standard)?;
        self.debias()?;
        self.train_classifier(ClassifierRole::StandardDebiased)?;
        self.metrics_scale_density()?;
        self.metrics_ntd()?;
        self.metrics_crossgen()?;
        self.metrics_labelquality()?;
        self.metrics_augmentation()?;
        self.summary()?;
        store::read_json(&self.workspace.report("summary.json"))
    }
}

fn stage_error(stage: &str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    }
}

fn whole(n: usize) -> Tally {
    Tally { retained: n, total: n }
}

fn dataset_inputs(ws: &Workspace, names: &[&str]) -> Vec<Artifact> {
    let mut v = vec![Artifact::File(ws.classes())];
    for n in names {
        v.push(Artifact::File(ws.manifest(n)));
        v.push(Artifact::Rasters(ws.manifest(n)));
    }
    v
}

fn model_inputs(ws: &Workspace) -> Vec<Artifact> {
    vec![
        Artifact::File(ws.detector(DetectorRole::Region)),
        Artifact::File(ws.detector(DetectorRole::Object)),
        Artifact::File(ws.classifier(ClassifierRole::Standard)),
    ]
}

fn external_predictions(det: &DetectorConfig, role: DetectorRole) -> Result<PathBuf> {
    match role {
        DetectorRole::Region => det.region_predictions.clone(),
        DetectorRole::Object => det.object_predictions.clone(),
    }
    .ok_or_else(|| Error::ConfigInvalid(format!("external detector needs detector.{}_predictions", role.name())))
}

pub fn load_detector(ws: &Workspace, role: DetectorRole) -> Result<DetectorModel> {
    let mut m = DetectorModel::load(&ws.detector(role))?;
    m.ready()?;
    Ok(m)
}

/// The fixed standard (train, test) split every recognition result uses.
fn standard_split(
    standard: &DatasetManifest,
    rasters: &dyn RasterSource,
    seed: u64,
) -> Result<(Vec<(crate::features::FeatureVector, usize)>, Vec<(crate::features::FeatureVector, usize)>)> {
    Ok(stratified_split(&labeled_features(standard, rasters)?, DEFAULT_TEST_FRACTION, seed))
}

/// Write every raster of `dataset` below `images`. Each top-level directory
/// is built as `<dir>.partial` and renamed into place once complete.
pub fn write_rasters(images: &Path, dataset: &DatasetManifest, source: &dyn RasterSource) -> Result<()> {
    let mut dirs: Vec<&str> = dataset
        .records
        .iter()
        .map(|r| r.raster_path.split('/').next().unwrap_or(""))
        .collect();
    dirs.sort_unstable();
    dirs.dedup();
    for d in &dirs {
        if d.is_empty() || dataset.records.iter().any(|r| r.raster_path == *d) {
            return Err(Error::ConfigInvalid(format!("raster paths must sit in a subdirectory, got `{d}`")));
        }
        let tmp = images.join(format!("{d}.partial"));
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let written = par_map(&dataset.records, |rec| -> Result<()> {
        let (dir, rest) = rec.raster_path.split_once('/').unwrap_or(("", &rec.raster_path));
        let path = images.join(format!("{dir}.partial")).join(rest);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let raster = source.raster(rec)?;
        std::fs::write(&path, raster.to_ppm_bytes()).map_err(|e| Error::io(&path, e))
    });
    for (r, rec) in written.into_iter().zip(&dataset.records) {
        r.map_err(|e| e.for_image(&rec.id))?;
    }
    for d in dirs {
        let (tmp, fin) = (images.join(format!("{d}.partial")), images.join(d));
        if fin.exists() {
            std::fs::remove_dir_all(&fin).map_err(|e| Error::io(&fin, e))?;
        }
        std::fs::rename(&tmp, &fin).map_err(|e| Error::io(&fin, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub role: ClassifierRole,
    pub train_items: usize,
    pub added_items: usize,
    pub test_items: usize,
    pub standard_test_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleDensitySummary {
    pub images: usize,
    pub mean_scale: Option<f64>,
    pub mean_density: f64,
    pub zero_region_images: usize,
}

impl From<&ScaleDensityStats> for ScaleDensitySummary {
    fn from(s: &ScaleDensityStats) -> Self {
        ScaleDensitySummary {
            images: s.images.len(),
            mean_scale: s.mean_scale,
            mean_density: s.mean_density,
            zero_region_images: s.zero_region_images,
        }
    }
}

/// Published (scale, density) pairs, kept next to measured values for context.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceScales {
    pub standard: (f64, f64),
    pub web: (f64, f64),
    pub debiased: (f64, f64),
}

impl Default for ReferenceScales {
    fn default() -> Self {
        ReferenceScales {
            standard: REFERENCE_STANDARD,
            web: REFERENCE_WEB,
            debiased: REFERENCE_DEBIASED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleDensityReport {
    pub standard: ScaleDensitySummary,
    pub web: ScaleDensitySummary,
    pub debiased: ScaleDensitySummary,
    pub reference: ReferenceScales,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtdReport {
    pub standard_vs_web: NtdCurve,
    pub standard_vs_debiased: NtdCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQualityReport {
    pub images: usize,
    pub no_region_fraction: f64,
    pub reference_no_region_rate: f64,
}

/// Everything a run measured, with retained/total pairs for the elimination
/// counts. Contains no timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub seed: u64,
    pub lambda_r: f64,
    pub lambda_o: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub web_images: Tally,
    pub proposals: Tally,
    pub zero_retained_images: usize,
    pub zero_proposal_images: usize,
    pub benchmark_accuracy: f64,
    pub final_accuracy: f64,
    pub scale_density: ScaleDensityReport,
    pub ntd: NtdReport,
    pub cross_generalization: CrossGenMatrix,
    pub label_quality: LabelQualityReport,
    pub augmentation: AugmentationResult,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_json(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(m) if m.contains("bogus")));
        let err = PipelineConfig::from_json(r#"{"constraints": {"eta": 0.5, "etaa": 1}}"#).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid(_)));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = PipelineConfig::from_json(r#"{"seed": 3, "constraints": {"eta": 0.7}}"#).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.synth_spec().seed, 3);
        assert_eq!(cfg.constraints.eta, 0.7);
        assert_eq!(cfg.constraints.epsilon, 0.5);
        assert_eq!(cfg.ntd_train, TrainConfig::default());
        let round = PipelineConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn lambda_order_and_external_paths_are_validated() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.workdir = Some(std::env::temp_dir());
        cfg.validate().unwrap();
        cfg.weak_boxes.lambda_o = 0.95;
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        let mut cfg = PipelineConfig::default();
        cfg.paths.workdir = Some(std::env::temp_dir());
        cfg.detector.kind = DetectorKind::External;
        assert!(cfg.validate().is_err());
        cfg.detector.region_predictions = Some("/nonexistent/preds.jsonl".into());
        cfg.detector.object_predictions = Some("/nonexistent/preds.jsonl".into());
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn workdir_precedence_is_config_then_default() {
        let mut cfg = PipelineConfig::default();
        cfg.paths.workdir = Some("/tmp/explicit".into());
        assert_eq!(cfg.workdir(), PathBuf::from("/tmp/explicit"));
    }
}

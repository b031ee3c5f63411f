use std::path::Path;

use debiaskit::dataset::DatasetManifest;
use debiaskit::detect::{export_predictions, DetectorKind, PredictionFile};
use debiaskit::geometry::{BBox, Region};
use debiaskit::pipeline::{ClassifierRole, DetectorRole, PipelineConfig, RunLedger, Runner, StageStatus};
use debiaskit::synthgen::{generate_web, SynthSpec};

fn small_config(workdir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.synth.images_per_class = 12;
    cfg.paths.workdir = Some(workdir.to_path_buf());
    cfg
}

#[test]
fn config_survives_a_json_round_trip() {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 41;
    cfg.constraints.eta = 0.4;
    cfg.metrics.fractions = vec![0.5, 1.0];
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(PipelineConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn partial_config_fills_defaults_and_rejects_unknown_keys() {
    let cfg = PipelineConfig::from_json(r#"{"seed": 3, "constraints": {"eta": 0.7}}"#).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.constraints.eta, 0.7);
    assert_eq!(cfg.synth, SynthSpec::default());

    let err = PipelineConfig::from_json(r#"{"constraints": {"etaa": 0.7}}"#).unwrap_err();
    assert!(err.is_validation());
}

#[test]
fn global_seed_drives_generation() {
    let mut cfg = PipelineConfig::default();
    cfg.seed = 99;
    assert_eq!(cfg.synth_spec().seed, 99);
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let spec = SynthSpec {
        images_per_class: 5,
        ..SynthSpec::default()
    };
    let web = generate_web(&spec).unwrap();
    let text = web.to_jsonl().unwrap();
    assert_eq!(text.lines().count(), web.len());
    let back = DatasetManifest::from_jsonl(&text, spec.classes(), "memory").unwrap();
    assert_eq!(back.to_jsonl().unwrap(), text);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("web.jsonl");
    web.save(&path).unwrap();
    let loaded = DatasetManifest::load(&path, spec.classes()).unwrap();
    assert_eq!(loaded.records, web.records);
}

#[test]
fn stages_skip_when_current_and_rerun_when_outputs_change() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut runner = Runner::new(cfg.clone()).unwrap();
    assert_eq!(runner.gen_synth().unwrap(), StageStatus::Ran);
    assert_eq!(runner.build_weakboxes().unwrap(), StageStatus::Ran);

    let mut again = Runner::new(cfg.clone()).unwrap();
    assert_eq!(again.gen_synth().unwrap(), StageStatus::Skipped);
    assert_eq!(again.build_weakboxes().unwrap(), StageStatus::Skipped);

    // tampering with an output invalidates the stage
    let weak = again.workspace.weak_boxes(DetectorRole::Region);
    std::fs::write(&weak, "").unwrap();
    assert_eq!(again.build_weakboxes().unwrap(), StageStatus::Ran);

    let mut forced = Runner::new(cfg).unwrap();
    forced.force = true;
    assert_eq!(forced.gen_synth().unwrap(), StageStatus::Ran);

    let ledger = RunLedger::load(&forced.workspace.ledger()).unwrap();
    assert!(ledger.latest("gen-synth").is_some());
    assert!(ledger.latest("build-weakboxes").is_some());
}

#[test]
fn missing_upstream_artifacts_fail_with_the_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut runner = Runner::new(small_config(dir.path())).unwrap();
    let err = runner.train_classifier(ClassifierRole::Standard).unwrap_err();
    assert!(matches!(err, debiaskit::Error::Stage { ref stage, .. } if stage == "train-classifier-standard"), "{err:?}");
}

#[test]
fn external_kind_requires_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.detector.kind = DetectorKind::External;
    assert!(Runner::new(cfg.clone()).err().unwrap().is_validation());
    cfg.detector.region_predictions = Some(dir.path().join("absent.jsonl"));
    cfg.detector.object_predictions = Some(dir.path().join("absent.jsonl"));
    assert!(Runner::new(cfg).err().unwrap().is_validation());
}

/// Boxes around every planted object, grown by `1/lambda` and kept in frame,
/// optionally with class probabilities that put all mass on the planted class.
fn ground_truth_predictions(web: &DatasetManifest, lambda: f64, with_probs: bool) -> PredictionFile {
    let mut file = PredictionFile::default();
    for rec in &web.records {
        let frame = BBox::frame(rec.width, rec.height);
        let regions: Vec<Region> = rec
            .planted_objects()
            .iter()
            .map(|p| {
                let bbox = p.bbox().scaled_about_center(1.0 / lambda).intersection(&frame).unwrap();
                let mut r = Region::new(bbox, 1.0, rec.id.clone());
                if with_probs {
                    let mut probs = vec![0.0; web.num_classes()];
                    probs[p.class_id] = 1.0;
                    r.class_probs = Some(probs);
                }
                r
            })
            .collect();
        file.insert(rec.id.clone(), &regions);
    }
    file
}

#[test]
fn external_detections_with_class_probabilities_drive_the_label_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let base = small_config(dir.path());
    let mut gen = Runner::new(base.clone()).unwrap();
    gen.gen_synth().unwrap();
    let web = gen.workspace.load_manifest("web").unwrap();

    let region_path = dir.path().join("regions.jsonl");
    let object_path = dir.path().join("objects.jsonl");
    export_predictions(&ground_truth_predictions(&web, base.weak_boxes.lambda_r, true), &region_path).unwrap();
    export_predictions(&ground_truth_predictions(&web, 1.0, false), &object_path).unwrap();

    let mut cfg = base;
    cfg.detector.kind = DetectorKind::External;
    cfg.detector.region_predictions = Some(region_path);
    cfg.detector.object_predictions = Some(object_path);
    let mut runner = Runner::new(cfg).unwrap();
    assert_eq!(runner.gen_synth().unwrap(), StageStatus::Skipped);
    runner.build_weakboxes().unwrap();
    runner.train_detector(DetectorRole::Region).unwrap();
    runner.train_detector(DetectorRole::Object).unwrap();
    assert!(runner.workspace.detector(DetectorRole::Region).with_file_name("predictions-region.jsonl").is_file());
    runner.train_classifier(ClassifierRole::Standard).unwrap();
    runner.debias().unwrap();

    let debiased = runner.workspace.load_manifest("debiased").unwrap();
    assert!(!debiased.is_empty());
    let by_id: std::collections::HashMap<_, _> = web.records.iter().map(|r| (r.id.as_str(), r)).collect();
    for crop in &debiased.records {
        let prov = crop.provenance.as_ref().expect("debiased crops carry provenance");
        let source = by_id[prov.source_image.as_str()];
        assert_eq!(source.tag_matches_content(), Some(true), "{} kept from a mislabeled image", crop.id);
        assert_eq!(crop.label, source.label);
    }
}

//! Browser bindings: render a synthetic web image, run both constraints over
//! it, and replay the decisions under different thresholds.

use serde_json::json;
use wasm_bindgen::prelude::*;

use debiaskit::classify::{labeled_features, train_softmax, ClassifierModel, TrainConfig};
use debiaskit::dataset::{DatasetManifest, RasterSource};
use debiaskit::debias::{debias_dataset, ConstraintConfig, DecisionRecord};
use debiaskit::detect::{train_template_detector, DetectorModel, OracleJitter};
use debiaskit::synthgen::{generate_standard, generate_web, Renderer, SynthSpec};
use debiaskit::weaksup::{build_supervision, weak_box, WeakBoxConfig};

fn js(e: debiaskit::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A small synthetic world with trained components, built once per seed.
#[wasm_bindgen]
pub struct Demo {
    web: DatasetManifest,
    renderer: Renderer,
    region: DetectorModel,
    object: DetectorModel,
    benchmark: ClassifierModel,
    decisions: Vec<DecisionRecord>,
}

#[wasm_bindgen]
impl Demo {
    /// `oracle` swaps the template detectors for ground-truth ones.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, oracle: bool) -> Result<Demo, JsError> {
        let spec = SynthSpec {
            images_per_class: 25,
            seed,
            ..SynthSpec::default()
        };
        let standard = generate_standard(&spec).map_err(js)?;
        let web = generate_web(&spec).map_err(js)?;
        let renderer = Renderer::new(spec);
        let train = TrainConfig {
            learning_rate: 0.5,
            ..TrainConfig::default()
        };
        let benchmark = train_softmax(&labeled_features(&standard, &renderer).map_err(js)?, standard.num_classes(), &train)
            .map_err(js)?;
        let lambdas = WeakBoxConfig::default();
        let detector = |lambda: f64| -> Result<DetectorModel, JsError> {
            if oracle {
                return Ok(DetectorModel::oracle(lambda, OracleJitter::default()));
            }
            let sup = build_supervision(&standard, lambda).map_err(js)?;
            train_template_detector(&sup, &standard, &renderer, lambda).map_err(js)
        };
        Ok(Demo {
            region: detector(lambdas.lambda_r)?,
            object: detector(lambdas.lambda_o)?,
            web,
            renderer,
            benchmark,
            decisions: Vec::new(),
        })
    }

    #[wasm_bindgen(js_name = imageCount)]
    pub fn image_count(&self) -> usize {
        self.web.len()
    }

    /// RGBA pixels of web image `index`, ready for `ImageData`.
    #[wasm_bindgen(js_name = imageRgba)]
    pub fn image_rgba(&self, index: usize) -> Result<Vec<u8>, JsError> {
        let rec = self.record(index)?;
        Ok(self.renderer.raster(rec).map_err(js)?.to_rgba())
    }

    #[wasm_bindgen(js_name = imageSize)]
    pub fn image_size(&self) -> u32 {
        self.web.records.first().map_or(0, |r| r.width)
    }

    /// JSON: tag, class names and planted ground truth of one web image.
    pub fn describe(&self, index: usize) -> Result<String, JsError> {
        let rec = self.record(index)?;
        let planted: Vec<_> = rec
            .planted_objects()
            .iter()
            .map(|p| json!({ "box": p.bbox(), "class": self.web.classes[p.class_id] }))
            .collect();
        Ok(json!({
            "id": rec.id,
            "tag": self.web.classes[rec.label],
            "tag_matches_content": rec.tag_matches_content(),
            "planted": planted,
        })
        .to_string())
    }

    /// Detect regions, localize the best object in each and evaluate both
    /// constraints. Returns the decision records as JSON.
    pub fn debias(&mut self, index: usize, eta: f64, epsilon: f64) -> Result<String, JsError> {
        let rec = self.record(index)?.clone();
        let config = ConstraintConfig {
            eta,
            epsilon,
            ..ConstraintConfig::default()
        };
        let one = self.web.with_records(vec![rec]);
        let out = debias_dataset(&one, &self.renderer, &self.region, &self.object, &self.benchmark, &config).map_err(js)?;
        self.decisions = out.report.images.into_iter().flat_map(|i| i.decisions).collect();
        self.render_decisions(eta, epsilon)
    }

    /// Re-evaluate the last decisions under new thresholds without detecting again.
    pub fn replay(&self, eta: f64, epsilon: f64) -> Result<String, JsError> {
        self.render_decisions(eta, epsilon)
    }

    fn render_decisions(&self, eta: f64, epsilon: f64) -> Result<String, JsError> {
        let rows: Vec<_> = self
            .decisions
            .iter()
            .map(|d| {
                json!({
                    "region": d.region,
                    "object": d.object_box,
                    "iou": d.iou,
                    "objectness": d.objectness,
                    "predicted": self.web.classes[d.predicted],
                    "form": d.iou >= eta,
                    "label": d.predicted == d.web_label && d.objectness >= epsilon,
                    "retained": d.replay(eta, epsilon),
                })
            })
            .collect();
        Ok(serde_json::Value::Array(rows).to_string())
    }

    fn record(&self, index: usize) -> Result<&debiaskit::dataset::ImageRecord, JsError> {
        self.web
            .records
            .get(index)
            .ok_or_else(|| JsError::new(&format!("image index {index} out of range")))
    }
}

/// The centered weak box `[x, y, w, h]` for a `w`×`h` image at proportion `lambda`.
#[wasm_bindgen(js_name = weakBox)]
pub fn weak_box_js(w: u32, h: u32, lambda: f64) -> Vec<u32> {
    let b = weak_box(w, h, lambda);
    vec![b.x, b.y, b.w, b.h]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_demo_keeps_only_matching_regions() {
        let mut demo = Demo::new(3, true).unwrap();
        assert_eq!(demo.image_count(), 100);
        let px = demo.image_rgba(0).unwrap();
        assert_eq!(px.len(), (demo.image_size() * demo.image_size() * 4) as usize);
        let mut any_kept = false;
        for i in 0..demo.image_count() {
            let rows: serde_json::Value = serde_json::from_str(&demo.debias(i, 0.5, 0.5).unwrap()).unwrap();
            let info: serde_json::Value = serde_json::from_str(&demo.describe(i).unwrap()).unwrap();
            for r in rows.as_array().unwrap() {
                if r["retained"].as_bool().unwrap() {
                    any_kept = true;
                    assert_eq!(r["predicted"], info["tag"]);
                }
            }
        }
        assert!(any_kept);
    }

    #[test]
    fn replay_tightens_with_thresholds() {
        let mut demo = Demo::new(5, true).unwrap();
        let kept = |s: String| -> usize {
            let v: serde_json::Value = serde_json::from_str(&s).unwrap();
            v.as_array().unwrap().iter().filter(|r| r["retained"].as_bool().unwrap()).count()
        };
        for i in 0..20 {
            let loose = kept(demo.debias(i, 0.1, 0.1).unwrap());
            let tight = kept(demo.replay(0.9, 0.9).unwrap());
            assert!(tight <= loose);
        }
    }

    #[test]
    fn weak_box_is_centered() {
        assert_eq!(weak_box_js(100, 100, 0.9), vec![5, 5, 90, 90]);
    }
}

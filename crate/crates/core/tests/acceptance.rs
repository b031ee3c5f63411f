//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use debiaskit::biasmetrics::{label_quality, scale_density, RowSummary};
use debiaskit::classify::{gradient_check, labeled_features, train_softmax, ClassifierModel, Init, TrainConfig};
use debiaskit::dataset::{ImageRecord, RasterSource, Source};
use debiaskit::debias::{debias_dataset, select_regions, ConstraintConfig};
use debiaskit::detect::{detect_best_object_within, detect_regions, DetectorModel, ImageInput, OracleJitter};
use debiaskit::features::FeatureVector;
use debiaskit::geometry::{iou, nms, BBox, Region};
use debiaskit::pipeline::{recognition_train_default, PipelineConfig, Runner, SummaryReport};
use debiaskit::synthgen::{generate_standard, generate_web, Renderer, SynthSpec};
use debiaskit::weaksup::weak_box;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------- 1: weak box ----------

fn weak_box_exact() -> Check {
    const M: u64 = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (w, h) = (rng.gen_range(1..=1024u64), rng.gen_range(1..=1024u64));
        let k = rng.gen_range(1..=M);
        // corner floor((1-λ)w/2), size round-half-up(λw), at least one pixel
        let x = (M - k) * w / (2 * M);
        let y = (M - k) * h / (2 * M);
        let bw = ((2 * k * w + M) / (2 * M)).max(1);
        let bh = ((2 * k * h + M) / (2 * M)).max(1);
        let got = weak_box(w as u32, h as u32, k as f64 / M as f64);
        if (got.x as u64, got.y as u64, got.w as u64, got.h as u64) != (x, y, bw, bh) {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches}/1000 cases differ from the integer oracle"))
}

// ---------- 2: iou / nms ----------

const GRID: u32 = 32;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..GRID);
    let y = rng.gen_range(0..GRID);
    BBox::new(x, y, rng.gen_range(1..=GRID - x), rng.gen_range(1..=GRID - y))
}

fn mask(b: &BBox) -> [[bool; GRID as usize]; GRID as usize] {
    let mut m = [[false; GRID as usize]; GRID as usize];
    for row in m.iter_mut().skip(b.y as usize).take(b.h as usize) {
        for cell in row.iter_mut().skip(b.x as usize).take(b.w as usize) {
            *cell = true;
        }
    }
    m
}

fn pixel_iou(a: &BBox, b: &BBox) -> f64 {
    let (ma, mb) = (mask(a), mask(b));
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..GRID as usize {
        for x in 0..GRID as usize {
            inter += (ma[y][x] && mb[y][x]) as u64;
            union += (ma[y][x] || mb[y][x]) as u64;
        }
    }
    if inter == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// The greedy result is the unique subset S where every member has no
/// higher-ranked member of S overlapping it at the threshold, and every
/// non-member has one. Found by enumerating all subsets.
fn nms_by_subsets(regions: &[Region], threshold: f64) -> Vec<usize> {
    let n = regions.len();
    let above = |i: usize, j: usize| {
        let (a, b) = (&regions[i], &regions[j]);
        (a.objectness, std::cmp::Reverse(a.bbox.x), std::cmp::Reverse(a.bbox.y), std::cmp::Reverse(i))
            > (b.objectness, std::cmp::Reverse(b.bbox.x), std::cmp::Reverse(b.bbox.y), std::cmp::Reverse(j))
    };
    let mut found = Vec::new();
    for set in 0u32..(1 << n) {
        let inside = |i: usize| set & (1 << i) != 0;
        let suppressed = |i: usize| {
            (0..n).any(|j| j != i && inside(j) && above(j, i) && pixel_iou(&regions[j].bbox, &regions[i].bbox) >= threshold)
        };
        if (0..n).all(|i| inside(i) != suppressed(i)) {
            found.push(set);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    let mut members: Vec<usize> = (0..n).filter(|i| found[0] & (1 << i) != 0).collect();
    members.sort_by(|&i, &j| if above(i, j) { std::cmp::Ordering::Less } else { std::cmp::Ordering::Greater });
    members
}

fn geometry_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs = 12_000;
    let mut iou_bad = 0;
    for _ in 0..pairs {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        if iou(&a, &b) != pixel_iou(&a, &b) || iou(&a, &b) != iou(&b, &a) {
            iou_bad += 1;
        }
    }
    let sets = 400;
    let mut nms_bad = 0;
    for _ in 0..sets {
        let n = rng.gen_range(1..=9);
        let regions: Vec<Region> = (0..n)
            .map(|_| Region::new(random_box(&mut rng), rng.gen_range(0..4) as f64 / 4.0, "img"))
            .collect();
        let threshold = [0.0, 0.1, 0.3, 0.5, 0.7, 1.0][rng.gen_range(0..6)];
        let got: Vec<BBox> = nms(&regions, threshold).iter().map(|r| r.bbox).collect();
        let want: Vec<BBox> = nms_by_subsets(&regions, threshold).iter().map(|&i| regions[i].bbox).collect();
        if got != want {
            nms_bad += 1;
        }
    }
    ensure(
        iou_bad == 0 && nms_bad == 0,
        format!("iou {iou_bad}/{pairs} pairs differ, nms {nms_bad}/{sets} sets differ"),
    )
}

// ---------- 3: scale / density ----------

fn image(w: u32, h: u32) -> ImageRecord {
    ImageRecord {
        id: "img".into(),
        source: Source::Web,
        label: 0,
        width: w,
        height: h,
        raster_path: "img.ppm".into(),
        planted: None,
        provenance: None,
    }
}

fn scale_density_exact() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..100 {
        let (w, h) = (rng.gen_range(8..=200u32), rng.gen_range(8..=200u32));
        let n = rng.gen_range(0..6);
        let regions: Vec<Region> = (0..n)
            .map(|_| {
                let x = rng.gen_range(0..w);
                let y = rng.gen_range(0..h);
                Region::new(BBox::new(x, y, rng.gen_range(1..=w - x), rng.gen_range(1..=h - y)), 1.0, "img")
            })
            .collect();
        // scale = (1/d) Σ |I_i| / |I|, areas counted cell by cell
        let total = (w as u64 * h as u64) as f64;
        let areas: Vec<f64> = regions
            .iter()
            .map(|r| (0..r.bbox.h).map(|_| (0..r.bbox.w).count() as u64).sum::<u64>() as f64)
            .collect();
        let want = if n == 0 {
            (None, 0)
        } else {
            (Some(areas.iter().map(|a| a / total).sum::<f64>() / n as f64), n)
        };
        if scale_density(&image(w, h), &regions) != want {
            bad += 1;
        }
    }
    let example = scale_density(
        &image(100, 100),
        &[
            Region::new(BBox::new(0, 0, 10, 100), 1.0, "img"),
            Region::new(BBox::new(0, 0, 20, 100), 1.0, "img"),
        ],
    );
    let example_ok = example.1 == 2 && (example.0.unwrap() - 0.15).abs() < 1e-15;
    ensure(bad == 0 && example_ok, format!("{bad}/100 region sets differ; 1000+2000 px in 10000 px gives {example:?}"))
}

// ---------- 4: constraints ----------

struct Candidate {
    label: usize,
    regions: Vec<Region>,
    objects: Vec<Option<Region>>,
}

fn candidates() -> Vec<Candidate> {
    let spec = SynthSpec {
        images_per_class: 5,
        seed: 4,
        ..SynthSpec::default()
    };
    let standard = generate_standard(&spec).unwrap();
    let web = generate_web(&spec).unwrap();
    let renderer = Renderer::new(spec);
    let bench = train_softmax(&labeled_features(&standard, &renderer).unwrap(), 4, &recognition_train_default()).unwrap();
    let jitter = OracleJitter {
        pixels: 3.0,
        score_noise: 0.6,
        ..OracleJitter::default()
    };
    let region_model = DetectorModel::oracle(0.9, jitter);
    let object_model = DetectorModel::oracle(0.8, jitter);
    web.records
        .iter()
        .map(|rec| {
            let img = renderer.raster(rec).unwrap();
            let input = ImageInput::new(rec, &img);
            let mut regions = detect_regions(&region_model, &input, 0.5, 16).unwrap();
            let mut objects = Vec::new();
            for r in &mut regions {
                r.class_probs = Some(bench.predict_probs(&input.table().features(&r.bbox)).unwrap());
                objects.push(detect_best_object_within(&object_model, &input, r, Default::default()).unwrap());
            }
            Candidate {
                label: rec.label,
                regions,
                objects,
            }
        })
        .collect()
}

fn constraints_brute_force() -> Check {
    let images = candidates();
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
    let mut kept = BTreeMap::new();
    let mut bad = 0;
    for &eta in &grid {
        for &epsilon in &grid {
            let cfg = ConstraintConfig {
                eta,
                epsilon,
                ..ConstraintConfig::default()
            };
            let mut per_region = Vec::new();
            for c in &images {
                let sel = select_regions(&c.regions, c.label, &c.objects, &cfg).unwrap();
                for ((r, o), d) in c.regions.iter().zip(&c.objects).zip(&sel.decisions) {
                    let probs = r.class_probs.as_ref().unwrap();
                    let top = (0..probs.len()).fold(0, |b, i| if probs[i] > probs[b] { i } else { b });
                    let form = o.as_ref().is_some_and(|o| pixel_area_iou(&o.bbox, &r.bbox) >= eta);
                    let label = top == c.label && r.objectness >= epsilon;
                    if d.delta != (form && label) || d.form != form || d.label != label {
                        bad += 1;
                    }
                    per_region.push(d.delta);
                }
                let want: Vec<BBox> = c
                    .regions
                    .iter()
                    .zip(&sel.decisions)
                    .filter(|(_, d)| d.delta)
                    .map(|(r, _)| r.bbox)
                    .collect();
                if sel.retained.iter().map(|r| r.bbox).collect::<Vec<_>>() != want {
                    bad += 1;
                }
            }
            kept.insert(((eta * 10.0) as u32, (epsilon * 10.0) as u32), per_region);
        }
    }
    // a region kept at (η, ε) is kept at every smaller η and ε
    let mut monotone_bad = 0;
    for (&(e1, p1), a) in &kept {
        for (&(e2, p2), b) in &kept {
            if e2 >= e1 && p2 >= p1 {
                monotone_bad += a.iter().zip(b).filter(|(x, y)| **y && !**x).count();
            }
        }
    }
    let regions: usize = images.iter().map(|c| c.regions.len()).sum();
    let total_kept: usize = kept.values().map(|v| v.iter().filter(|d| **d).count()).sum();
    ensure(
        bad == 0 && monotone_bad == 0 && total_kept > 0,
        format!(
            "{} images, {regions} regions, 25 grid points: {bad} decision mismatches, {monotone_bad} monotonicity violations",
            images.len()
        ),
    )
}

/// IoU from explicit coordinate overlap, independent of the library.
fn pixel_area_iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.right().min(b.right()) as i64 - a.x.max(b.x) as i64).max(0) as u64;
    let iy = (a.bottom().min(b.bottom()) as i64 - a.y.max(b.y) as i64).max(0) as u64;
    let inter = ix * iy;
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

// ---------- 5: oracle run ----------

fn oracle_run() -> Check {
    let spec = SynthSpec {
        images_per_class: 150,
        label_noise_rate: 0.3,
        seed: 5,
        ..SynthSpec::default()
    };
    let standard = generate_standard(&spec).unwrap();
    let web = generate_web(&spec).unwrap();
    let renderer = Renderer::new(spec);
    let bench = train_softmax(&labeled_features(&standard, &renderer).unwrap(), 4, &recognition_train_default()).unwrap();
    let region = DetectorModel::oracle(0.9, OracleJitter::default());
    let object = DetectorModel::oracle(0.8, OracleJitter::default());
    let out = debias_dataset(&web, &renderer, &region, &object, &bench, &ConstraintConfig::default()).unwrap();
    let retained: BTreeMap<&str, usize> = out.report.images.iter().map(|i| (i.image_id.as_str(), i.retained)).collect();

    let (mut noisy, mut noisy_kept, mut clean, mut clean_kept) = (0, 0, 0, 0);
    for rec in &web.records {
        let n = retained[rec.id.as_str()];
        if rec.tag_matches_content() == Some(false) {
            noisy += 1;
            noisy_kept += (n > 0) as usize;
        } else if in_scale_match(rec) {
            clean += 1;
            clean_kept += (n > 0) as usize;
        }
    }
    let rate = clean_kept as f64 / clean as f64;
    ensure(
        noisy_kept == 0 && rate >= 0.95,
        format!(
            "{} images: noisy-labeled with a retained region {noisy_kept}/{noisy}; clean in-scale images retained {clean_kept}/{clean} ({:.1}%)",
            web.len(),
            100.0 * rate
        ),
    )
}

/// Clean here means the tag names a planted object.
fn in_scale_match(rec: &ImageRecord) -> bool {
    rec.planted_objects().iter().any(|p| p.class_id == rec.label)
}

// ---------- 6-9, 12: full pipeline ----------

fn run_pipeline(dir: &Path) -> SummaryReport {
    let mut cfg = PipelineConfig::default();
    cfg.paths.workdir = Some(dir.to_path_buf());
    Runner::new(cfg).unwrap().pipeline().unwrap()
}

fn table_ii(s: &SummaryReport) -> Check {
    let sd = &s.scale_density;
    let scale = |x: &debiaskit::pipeline::ScaleDensitySummary| x.mean_scale.unwrap_or(f64::NAN);
    let (st, web, deb) = (scale(&sd.standard), scale(&sd.web), scale(&sd.debiased));
    ensure(
        sd.debiased.mean_density < sd.web.mean_density && (deb - st).abs() < (web - st).abs(),
        format!(
            "scale/density standard {st:.3}/{:.2}, web {web:.3}/{:.2}, debiased {deb:.3}/{:.2}",
            sd.standard.mean_density, sd.web.mean_density, sd.debiased.mean_density
        ),
    )
}

fn fig_4(s: &SummaryReport) -> Check {
    let (web, deb) = (&s.ntd.standard_vs_web, &s.ntd.standard_vs_debiased);
    let full = *web.accuracy.last().unwrap();
    let rises = full > web.accuracy[0];
    let deb_ok = deb.accuracy.iter().all(|a| (0.45..=0.60).contains(a));
    let ctl_ok = web
        .control_accuracy
        .iter()
        .chain(&deb.control_accuracy)
        .all(|a| (0.45..=0.55).contains(a));
    ensure(
        full >= 0.70 && rises && deb_ok && ctl_ok,
        format!(
            "standard-web {:?}, standard-debiased {:?}, controls {:?} / {:?}",
            web.accuracy, deb.accuracy, web.control_accuracy, deb.control_accuracy
        ),
    )
}

fn table_i(s: &SummaryReport) -> Check {
    let m = &s.cross_generalization.matrix;
    let off = m[0][1].max(m[1][0]);
    let diag_ok = m[0][0] - off >= 0.05 && m[1][1] - off >= 0.05;
    let (std_row, web_row) = (RowSummary::of(m[0][0], m[0][1]), RowSummary::of(m[1][1], m[1][0]));
    let half_ok = web_row.half_difference < std_row.half_difference;
    let reference = RowSummary::of(84.31, 52.49);
    let arithmetic_ok = (reference.mean - 68.40).abs() < 1e-9 && (reference.half_difference - 15.91).abs() < 1e-9;
    ensure(
        diag_ok && half_ok && arithmetic_ok,
        format!(
            "matrix {m:?}; rows {:.3}±{:.3} / {:.3}±{:.3}; (84.31, 52.49) -> {:.2}±{:.2}",
            std_row.mean, std_row.half_difference, web_row.mean, web_row.half_difference, reference.mean, reference.half_difference
        ),
    )
}

fn augmentation(s: &SummaryReport) -> Check {
    let a = &s.augmentation;
    ensure(
        a.seeds.len() == 3 && a.with_debiased >= a.with_web,
        format!(
            "budget {} over {} seeds: standard+debiased {:.4}, standard+web {:.4} (standard alone {:.4})",
            a.budget,
            a.seeds.len(),
            a.with_debiased,
            a.with_web,
            a.standard_only
        ),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(a: &Path, b: &Path) -> Check {
    let mut compared = 0;
    let mut differing = Vec::new();
    for sub in ["manifests", "models", "reports", "images"] {
        let (fa, fb) = (files_under(&a.join(sub)), files_under(&b.join(sub)));
        if fa != fb {
            return Err(format!("{sub}/ holds different file sets"));
        }
        for f in fa {
            compared += 1;
            if std::fs::read(a.join(sub).join(&f)).unwrap() != std::fs::read(b.join(sub).join(&f)).unwrap() {
                differing.push(format!("{sub}/{}", f.display()));
            }
        }
    }
    ensure(
        differing.is_empty() && compared > 0,
        format!("{compared} files compared, {} differ {:?}", differing.len(), differing.iter().take(5).collect::<Vec<_>>()),
    )
}

// ---------- 10: label quality ----------

fn label_quality_rate() -> Check {
    let spec = SynthSpec {
        images_per_class: 250,
        outlier_rate: 0.313,
        seed: 10,
        ..SynthSpec::default()
    };
    let web = generate_web(&spec).unwrap();
    let renderer = Renderer::new(spec);
    let model = DetectorModel::oracle(0.9, OracleJitter::default());
    let rate = label_quality(&web, &renderer, &model, 0.5, 16).unwrap();
    ensure((rate - 0.313).abs() <= 0.03, format!("no-region fraction {rate:.4} on {} images", web.len()))
}

// ---------- 11: SGD ----------

fn sgd_validity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let mut model = ClassifierModel::new(4, 12, Init::SeededGaussian, trial);
        for w in &mut model.weights {
            *w = rng.gen_range(-1.0..1.0);
        }
        let x = FeatureVector((0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        worst = worst.max(gradient_check(&model, &x, rng.gen_range(0..4), 1e-6).unwrap());
    }
    let data: Vec<(FeatureVector, usize)> = (0..60)
        .map(|i| (FeatureVector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()), i % 3))
        .collect();
    let model = train_softmax(&data, 3, &TrainConfig::default()).unwrap();
    let schedule_ok = model.train_log.len() == 30
        && model.train_log.iter().all(|e| {
            let want = match e.epoch {
                0..=9 => 0.001,
                10..=19 => 0.0001,
                _ => 0.00001,
            };
            e.learning_rate == want
        });
    let rates: Vec<f64> = [0, 9, 10, 19, 20, 29].iter().map(|&i| model.train_log[i].learning_rate).collect();
    ensure(
        worst < 1e-5 && schedule_ok,
        format!("max gradient relative error {worst:.2e}; learning rate at epochs 0,9,10,19,20,29 = {rates:?}"),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} [{secs:6.2}s] {name}: {detail}");
        results.push((id, name, r, secs));
    };

    run(1, "weak box exactness", &mut weak_box_exact);
    run(2, "iou and nms against brute force", &mut geometry_oracle);
    run(3, "scale and density exactness", &mut scale_density_exact);
    run(4, "constraint selection against brute force", &mut constraints_brute_force);
    run(5, "oracle debias run", &mut oracle_run);

    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let summary = catch_unwind(|| run_pipeline(dir_a.path())).ok();
    println!("pipeline run: {:.2}s", t.elapsed().as_secs_f64());
    let need = |s: &Option<SummaryReport>| s.clone().ok_or_else(|| "pipeline run failed".to_string());
    run(6, "scale/density direction", &mut || table_ii(&need(&summary)?));
    run(7, "dataset separability direction", &mut || fig_4(&need(&summary)?));
    run(8, "cross-dataset generalization direction", &mut || table_i(&need(&summary)?));
    run(9, "augmentation with debiased vs raw web", &mut || augmentation(&need(&summary)?));
    run(10, "label quality under the oracle", &mut label_quality_rate);
    run(11, "sgd gradient and schedule", &mut sgd_validity);
    run(12, "pipeline determinism", &mut || {
        need(&summary)?;
        run_pipeline(dir_b.path());
        determinism(dir_a.path(), dir_b.path())
    });

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

//! Paired synthetic "standard-style" and "web-style" datasets with planted
//! ground truth.
//!
//! Standard images hold exactly one large, centered object whose class
//! matches the label. Web images hold several smaller objects placed off
//! center, and a controlled share of them are either mislabeled (the tag
//! names a class that is not present) or outliers (only out-of-vocabulary
//! distractor shapes). A class is a (shape, color) pair.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ImageRecord, PlantedObject, RasterSource, Source};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Rectangle,
    Triangle,
}

impl Shape {
    const ALL: [Shape; 3] = [Shape::Circle, Shape::Rectangle, Shape::Triangle];

    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Rectangle => "rectangle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether the pixel with top-left corner (`px`, `py`) relative to the
    /// shape's box has its center inside the shape.
    fn covers(self, px: u32, py: u32, w: u32, h: u32) -> bool {
        let u = px as f64 + 0.5;
        let v = py as f64 + 0.5;
        let (w, h) = (w as f64, h as f64);
        match self {
            Shape::Rectangle => true,
            Shape::Circle => {
                let dx = (u - w / 2.0) / (w / 2.0);
                let dy = (v - h / 2.0) / (h / 2.0);
                dx * dx + dy * dy <= 1.0
            }
            // apex at top center, base along the bottom edge
            Shape::Triangle => (u - w / 2.0).abs() <= (w / 2.0) * (v / h),
        }
    }
}

/// Color centers sit in the middle of the 4-level histogram bins so that
/// per-pixel jitter never moves a color into a neighboring bin.
const CLASS_COLORS: [(&str, [u8; 3]); 2] = [("red", [224, 32, 32]), ("green", [32, 224, 32])];

const DISTRACTOR_COLORS: [[u8; 3]; 4] = [
    [32, 32, 224],
    [224, 32, 224],
    [32, 224, 224],
    [224, 224, 32],
];

/// Largest per-channel deviation from a class color in rendered pixels.
pub const COLOR_JITTER: i32 = 12;

pub const MAX_CLASSES: usize = Shape::ALL.len() * CLASS_COLORS.len();

/// Shape and base color of class `class_id`.
pub fn class_signature(class_id: usize) -> (Shape, [u8; 3]) {
    (
        Shape::ALL[class_id % Shape::ALL.len()],
        CLASS_COLORS[class_id % CLASS_COLORS.len()].1,
    )
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            let (shape, _) = class_signature(c);
            format!("{}-{}", CLASS_COLORS[c % CLASS_COLORS.len()].0, shape.name())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: u32,
    pub standard_scale_range: (f64, f64),
    pub web_scale_range: (f64, f64),
    pub web_object_count_range: (u32, u32),
    pub web_offcenter_max: f64,
    pub label_noise_rate: f64,
    pub outlier_rate: f64,
    pub background_texture_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 4,
            images_per_class: 100,
            image_size: 64,
            standard_scale_range: (0.55, 0.85),
            web_scale_range: (0.10, 0.70),
            web_object_count_range: (1, 4),
            web_offcenter_max: 0.35,
            label_noise_rate: 0.1,
            outlier_rate: 0.15,
            background_texture_level: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecInvalid(m));
        if self.num_classes < 2 || self.num_classes > MAX_CLASSES {
            return bad(format!(
                "num_classes must be in [2, {MAX_CLASSES}], got {}",
                self.num_classes
            ));
        }
        if self.images_per_class == 0 {
            return bad("images_per_class must be >= 1".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size must be >= 16, got {}", self.image_size));
        }
        for (name, (lo, hi)) in [
            ("standard_scale_range", self.standard_scale_range),
            ("web_scale_range", self.web_scale_range),
        ] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} must satisfy 0 < low <= high <= 1"));
            }
        }
        let (kl, kh) = self.web_object_count_range;
        if kl == 0 || kl > kh {
            return bad("web_object_count_range must satisfy 1 <= low <= high".into());
        }
        for (name, v) in [
            ("web_offcenter_max", self.web_offcenter_max),
            ("label_noise_rate", self.label_noise_rate),
            ("outlier_rate", self.outlier_rate),
            ("background_texture_level", self.background_texture_level),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.label_noise_rate + self.outlier_rate > 1.0 {
            return bad("label_noise_rate + outlier_rate must not exceed 1".into());
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.num_classes * self.images_per_class
    }

    pub fn classes(&self) -> Vec<String> {
        class_names(self.num_classes)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream`.
pub fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(stream)) ^ index)
}

fn seed_for_id(seed: u64, stream: u64, id: &str) -> u64 {
    let h = id
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    sub_seed(seed, stream, h)
}

const STREAM_STANDARD: u64 = 1;
const STREAM_WEB: u64 = 2;
const STREAM_WEB_ASSIGN: u64 = 3;
const STREAM_RENDER: u64 = 4;

/// A box of area fraction `frac` of an `s`×`s` image with mild aspect jitter.
fn sized_box<R: Rng>(rng: &mut R, frac: f64, s: u32) -> (u32, u32) {
    let aspect: f64 = rng.gen_range(0.85..=1.15);
    let side = frac.sqrt() * s as f64;
    let w = (side * aspect.sqrt()).round().clamp(2.0, s as f64) as u32;
    let h = (side / aspect.sqrt()).round().clamp(2.0, s as f64) as u32;
    (w, h)
}

/// Clear pixels kept between web objects and around them inside the frame,
/// wide enough that a box dilated by 1/0.9 around one object neither reaches a
/// neighbor nor gets clipped by the image border.
const PLACEMENT_GAP: u32 = 4;

fn overlaps_with_gap(a: &BBox, b: &BBox, gap: u32) -> bool {
    let grow = |v: &BBox| {
        (
            v.x as i64 - gap as i64,
            v.y as i64 - gap as i64,
            v.right() as i64 + gap as i64,
            v.bottom() as i64 + gap as i64,
        )
    };
    let (ax0, ay0, ax1, ay1) = grow(a);
    ax0 < b.right() as i64 && b.x as i64 <= ax1 && ay0 < b.bottom() as i64 && b.y as i64 <= ay1
}

/// Place a `w`×`h` box uniformly among positions whose center lies within
/// `max_offset` pixels of the image center (per axis), that stay `margin`
/// pixels inside the frame and that keep clear of `taken`.
fn place<R: Rng>(
    rng: &mut R,
    (w, h): (u32, u32),
    s: u32,
    max_offset: f64,
    margin: u32,
    taken: &[BBox],
) -> Option<BBox> {
    let half = s as f64 / 2.0;
    let range = |len: u32| {
        let lo = (half - max_offset - len as f64 / 2.0).ceil().max(margin as f64) as i64;
        let hi = (half + max_offset - len as f64 / 2.0)
            .floor()
            .min(s as f64 - len as f64 - margin as f64) as i64;
        (lo <= hi).then_some((lo as u32, hi as u32))
    };
    let (xr, yr) = (range(w)?, range(h)?);
    for _ in 0..200 {
        let b = BBox::new(
            rng.gen_range(xr.0..=xr.1),
            rng.gen_range(yr.0..=yr.1),
            w,
            h,
        );
        if !taken.iter().any(|t| overlaps_with_gap(t, &b, PLACEMENT_GAP)) {
            return Some(b);
        }
    }
    None
}

fn make_record(source: Source, prefix: &str, dir: &str, n: usize, label: usize, s: u32, planted: Vec<PlantedObject>) -> ImageRecord {
    let id = format!("{prefix}-{n:05}");
    ImageRecord {
        raster_path: format!("{dir}/{id}.ppm"),
        id,
        source,
        label,
        width: s,
        height: s,
        planted: Some(planted),
        provenance: None,
    }
}

/// One centered object per image, label always correct.
pub fn generate_standard(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let s = spec.image_size;
    let (lo, hi) = spec.standard_scale_range;
    let max_offset = 0.05 * s as f64;
    let mut records = Vec::with_capacity(spec.num_images());
    for n in 0..spec.num_images() {
        let label = n % spec.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_STANDARD, n as u64));
        let frac = rng.gen_range(lo..=hi);
        let (w, h) = sized_box(&mut rng, frac, s);
        let bbox = place(&mut rng, (w, h), s, max_offset, 0, &[])
            .expect("a centered box narrower than the frame always fits");
        records.push(make_record(
            Source::Standard,
            "std",
            "standard",
            n,
            label,
            s,
            vec![PlantedObject::new(bbox, label)],
        ));
    }
    Ok(DatasetManifest::new(spec.classes(), records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WebKind {
    Clean,
    Noisy,
    Outlier,
}

/// Exact-count assignment of outliers and mislabeled images.
fn web_kinds(spec: &SynthSpec) -> Vec<WebKind> {
    let n = spec.num_images();
    let n_out = (spec.outlier_rate * n as f64).round() as usize;
    let n_noisy = ((spec.label_noise_rate * n as f64).round() as usize).min(n - n_out);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_WEB_ASSIGN, 0)));
    let mut kinds = vec![WebKind::Clean; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_out {
            kinds[i] = WebKind::Outlier;
        } else if rank < n_out + n_noisy {
            kinds[i] = WebKind::Noisy;
        }
    }
    kinds
}

/// Place `k` objects of `class_id`; per-object area fractions shrink with `k`
/// so that several objects fit without overlapping.
fn place_objects<R: Rng>(rng: &mut R, spec: &SynthSpec, k: u32, class_id: usize) -> Vec<PlantedObject> {
    let s = spec.image_size;
    let (lo, hi) = spec.web_scale_range;
    let hi_k = lo + (hi - lo) / k as f64;
    let max_offset = spec.web_offcenter_max * s as f64;
    let mut boxes: Vec<BBox> = Vec::new();
    for _ in 0..k {
        for attempt in 0..5 {
            let frac = if attempt < 4 { rng.gen_range(lo..=hi_k) } else { lo };
            let (w, h) = sized_box(rng, frac, s);
            if let Some(b) = place(rng, (w, h), s, max_offset, PLACEMENT_GAP, &boxes) {
                boxes.push(b);
                break;
            }
        }
    }
    boxes.into_iter().map(|b| PlantedObject::new(b, class_id)).collect()
}

/// Several off-center objects per image with controlled label noise and outliers.
pub fn generate_web(spec: &SynthSpec) -> Result<DatasetManifest> {
    spec.validate()?;
    let s = spec.image_size;
    let (kl, kh) = spec.web_object_count_range;
    let kinds = web_kinds(spec);
    let mut records = Vec::with_capacity(kinds.len());
    for (n, kind) in kinds.into_iter().enumerate() {
        let label = n % spec.num_classes;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_WEB, n as u64));
        let k = rng.gen_range(kl..=kh);
        let planted = match kind {
            WebKind::Clean => place_objects(&mut rng, spec, k, label),
            WebKind::Noisy => {
                let shift = rng.gen_range(1..spec.num_classes);
                place_objects(&mut rng, spec, k, (label + shift) % spec.num_classes)
            }
            WebKind::Outlier => Vec::new(),
        };
        records.push(make_record(Source::Web, "web", "web", n, label, s, planted));
    }
    Ok(DatasetManifest::new(spec.classes(), records))
}

fn paint<R: Rng>(img: &mut Raster, bbox: &BBox, shape: Shape, base: [u8; 3], rng: &mut R) {
    let tint: [i32; 3] = std::array::from_fn(|_| rng.gen_range(-6..=6));
    for py in 0..bbox.h {
        for px in 0..bbox.w {
            if !shape.covers(px, py, bbox.w, bbox.h) {
                continue;
            }
            let rgb = std::array::from_fn(|c| {
                let j = tint[c] + rng.gen_range(-6..=6);
                (base[c] as i32 + j).clamp(0, 255) as u8
            });
            img.set_pixel(bbox.x + px, bbox.y + py, rgb);
        }
    }
}

/// Low-amplitude gray value noise: a coarse random lattice, bilinearly
/// interpolated, plus per-pixel grain. Always achromatic.
fn background<R: Rng>(w: u32, h: u32, level: f64, rng: &mut R) -> Raster {
    const CELL: u32 = 16;
    let gw = w / CELL + 2;
    let gh = h / CELL + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let at = |gx: u32, gy: u32| lattice[(gy * gw + gx) as usize];
    let mut img = Raster::filled(w, h, [128, 128, 128]);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / CELL as f64;
            let fy = y as f64 / CELL as f64;
            let (gx, gy) = (fx.floor() as u32, fy.floor() as u32);
            let (tx, ty) = (fx - gx as f64, fy - gy as f64);
            let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
            let bot = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
            let noise = top * (1.0 - ty) + bot * ty;
            let grain: f64 = rng.gen_range(-1.0..=1.0);
            let v = 128.0 + level * (56.0 * noise + 10.0 * grain);
            let v = v.round().clamp(0.0, 255.0) as u8;
            img.set_pixel(x, y, [v, v, v]);
        }
    }
    img
}

/// Rasterize a record: background texture, distractors (web only), then
/// planted objects. Output depends only on `(record, spec.seed,
/// spec.background_texture_level)`.
pub fn render(record: &ImageRecord, spec: &SynthSpec) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for_id(spec.seed, STREAM_RENDER, &record.id));
    let (w, h) = (record.width, record.height);
    let mut img = background(w, h, spec.background_texture_level, &mut rng);
    let planted = record.planted_objects();

    if record.source == Source::Web {
        let count = if planted.is_empty() {
            rng.gen_range(1..=2)
        } else {
            u32::from(rng.gen_bool(0.3))
        };
        let (lo, hi) = spec.web_scale_range;
        let mut taken: Vec<BBox> = planted.iter().map(|p| p.bbox()).collect();
        let s = w.min(h);
        for _ in 0..count {
            let frac = rng.gen_range(lo..=lo + (hi - lo) / 2.0);
            let (dw, dh) = sized_box(&mut rng, frac, s);
            let shape = Shape::ALL[rng.gen_range(0..Shape::ALL.len())];
            let color = DISTRACTOR_COLORS[rng.gen_range(0..DISTRACTOR_COLORS.len())];
            if let Some(b) = place(&mut rng, (dw, dh), s, s as f64 / 2.0, PLACEMENT_GAP, &taken) {
                paint(&mut img, &b, shape, color, &mut rng);
                taken.push(b);
            }
        }
    }

    for p in planted {
        let (shape, color) = class_signature(p.class_id);
        paint(&mut img, &p.bbox(), shape, color, &mut rng);
    }
    img
}

/// Renders synthetic records on demand.
pub struct Renderer {
    spec: SynthSpec,
}

impl Renderer {
    pub fn new(spec: SynthSpec) -> Self {
        Renderer { spec }
    }
}

impl RasterSource for Renderer {
    fn raster(&self, record: &ImageRecord) -> Result<Raster> {
        Ok(render(record, &self.spec))
    }
}

//! Image records, manifests and raster sources.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::debias::DecisionRecord;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Raster;
use crate::store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Standard,
    Web,
    Debiased,
}

/// Ground-truth object placed by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub class_id: usize,
}

impl PlantedObject {
    pub fn new(bbox: BBox, class_id: usize) -> Self {
        PlantedObject {
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
            class_id,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.x, self.y, self.w.max(1), self.h.max(1))
    }
}

/// Where a de-biased crop came from and why it was kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_image: String,
    pub region: BBox,
    pub decision: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub source: Source,
    pub label: usize,
    pub width: u32,
    pub height: u32,
    pub raster_path: String,
    #[serde(default)]
    pub planted: Option<Vec<PlantedObject>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl ImageRecord {
    /// Planted objects whose class is inside the vocabulary.
    pub fn planted_objects(&self) -> &[PlantedObject] {
        self.planted.as_deref().unwrap_or(&[])
    }

    /// Ground truth: the tag matches at least one planted object.
    pub fn tag_matches_content(&self) -> Option<bool> {
        self.planted
            .as_ref()
            .map(|p| p.iter().any(|o| o.class_id == self.label))
    }

    fn validate(&self, num_classes: usize) -> std::result::Result<(), String> {
        if self.label >= num_classes {
            return Err(format!(
                "label {} out of range for {num_classes} classes",
                self.label
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err("zero image dimension".into());
        }
        for p in self.planted_objects() {
            if p.class_id >= num_classes {
                return Err(format!("planted class {} out of range", p.class_id));
            }
            if p.w == 0 || p.h == 0 || !p.bbox().fits_in(self.width, self.height) {
                return Err(format!(
                    "planted box {:?} outside {}x{} frame",
                    [p.x, p.y, p.w, p.h],
                    self.width,
                    self.height
                ));
            }
        }
        Ok(())
    }
}

/// Ordered records plus the class vocabulary they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<ImageRecord>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, records: Vec<ImageRecord>) -> Self {
        DatasetManifest { classes, records }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_records(&self, records: Vec<ImageRecord>) -> Self {
        DatasetManifest {
            classes: self.classes.clone(),
            records,
        }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        store::to_jsonl(&self.records)
    }

    /// Parse and validate a manifest. Every error names its line.
    pub fn from_jsonl(text: &str, classes: Vec<String>, origin: &str) -> Result<Self> {
        let records: Vec<ImageRecord> = store::from_jsonl(text, origin)?;
        // map record index back to its physical line for error messages
        let lines: Vec<usize> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, _)| i + 1)
            .collect();
        for (rec, line) in records.iter().zip(lines) {
            rec.validate(classes.len())
                .map_err(|reason| Error::MalformedFile {
                    path: origin.to_string(),
                    line,
                    reason,
                })?;
        }
        Ok(DatasetManifest { classes, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        store::write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load(path: &Path, classes: Vec<String>) -> Result<Self> {
        let text = store::read_to_string(path)?;
        Self::from_jsonl(&text, classes, &path.display().to_string())
    }
}

/// Anything that can produce the raster behind a record.
pub trait RasterSource: Sync {
    fn raster(&self, record: &ImageRecord) -> Result<Raster>;
}

/// Rasters stored as PPM files under a root directory.
pub struct DirRasters {
    root: PathBuf,
}

impl DirRasters {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirRasters { root: root.into() }
    }
}

impl RasterSource for DirRasters {
    fn raster(&self, record: &ImageRecord) -> Result<Raster> {
        Raster::load(&self.root.join(&record.raster_path)).map_err(|e| e.for_image(&record.id))
    }
}

#[derive(Default)]
pub struct MemoryRasters {
    map: HashMap<String, Raster>,
}

impl MemoryRasters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, raster: Raster) {
        self.map.insert(id.into(), raster);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl RasterSource for MemoryRasters {
    fn raster(&self, record: &ImageRecord) -> Result<Raster> {
        self.map
            .get(&record.id)
            .cloned()
            .ok_or_else(|| Error::MissingRaster(record.id.clone()))
    }
}

/// Dispatches on the record's [`Source`].
pub struct BySource<'a> {
    pub standard: &'a dyn RasterSource,
    pub web: &'a dyn RasterSource,
    pub debiased: &'a dyn RasterSource,
}

impl RasterSource for BySource<'_> {
    fn raster(&self, record: &ImageRecord) -> Result<Raster> {
        match record.source {
            Source::Standard => self.standard.raster(record),
            Source::Web => self.web.raster(record),
            Source::Debiased => self.debiased.raster(record),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(label: usize) -> ImageRecord {
        ImageRecord {
            id: "a".into(),
            source: Source::Web,
            label,
            width: 10,
            height: 10,
            raster_path: "a.ppm".into(),
            planted: Some(vec![PlantedObject::new(BBox::new(1, 1, 3, 3), 0)]),
            provenance: None,
        }
    }

    #[test]
    fn planted_serializes_flat() {
        let line = serde_json::to_string(&rec(1)).unwrap();
        assert!(line.contains(r#""planted":[{"x":1,"y":1,"w":3,"h":3,"class_id":0}]"#));
        assert!(!line.contains("provenance"));
    }

    #[test]
    fn out_of_range_label_names_line() {
        let classes = vec!["a".to_string(), "b".to_string()];
        let good = serde_json::to_string(&rec(1)).unwrap();
        let bad = serde_json::to_string(&rec(2)).unwrap();
        let text = format!("{good}\n{good}\n{bad}\n");
        match DatasetManifest::from_jsonl(&text, classes.clone(), "m.jsonl") {
            Err(Error::MalformedFile { line, reason, .. }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("label 2"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = DatasetManifest::from_jsonl(&format!("{good}\n"), classes, "m").unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.records[0].tag_matches_content(), Some(false));
    }
}

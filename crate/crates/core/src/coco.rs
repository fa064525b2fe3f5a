//! Reading COCO "instances" annotation files and COCO result files.
//!
//! Crowd regions and zero-area annotations are dropped at load time and
//! counted in [`LoadReport`]. Coordinates stay real-valued throughout.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BBox, ImageSize, SizeCategory};

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}{}: {message}", record_suffix(*.record))]
    Parse {
        path: PathBuf,
        record: Option<usize>,
        message: String,
    },
    #[error("{path}{}: {message}", record_suffix(*.record))]
    Schema {
        path: PathBuf,
        record: Option<usize>,
        message: String,
    },
    #[error("{path}{}: {message}", record_suffix(Some(*.record)))]
    Referential {
        path: PathBuf,
        record: usize,
        message: String,
    },
}

fn record_suffix(record: Option<usize>) -> String {
    record.map(|i| format!(" (record {i})")).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_id: u64,
    pub file_name: String,
    pub size: ImageSize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruthObject {
    pub annotation_id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub size_category: SizeCategory,
}

impl GroundTruthObject {
    pub fn new(annotation_id: u64, image_id: u64, category_id: u64, bbox: BBox) -> Self {
        Self {
            annotation_id,
            image_id,
            category_id,
            size_category: bbox.size_category(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    #[serde(rename = "score")]
    pub confidence: f64,
}

/// Annotations excluded while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub degenerate: usize,
    pub crowd: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub images: Vec<ImageRecord>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub categories: BTreeMap<u64, String>,
    pub report: LoadReport,
    image_index: HashMap<u64, usize>,
}

impl DatasetBundle {
    /// Assembles a bundle from already-validated parts, checking cross references.
    pub fn new(
        images: Vec<ImageRecord>,
        ground_truth: Vec<GroundTruthObject>,
        categories: BTreeMap<u64, String>,
    ) -> Result<Self, CocoError> {
        let origin = PathBuf::from("<memory>");
        let image_index = index_images(&images, &origin)?;
        for (i, gt) in ground_truth.iter().enumerate() {
            check_refs(&origin, i, gt.image_id, gt.category_id, &image_index, &categories)?;
        }
        Ok(Self {
            images,
            ground_truth,
            categories,
            report: LoadReport::default(),
            image_index,
        })
    }

    pub fn image(&self, image_id: u64) -> Option<&ImageRecord> {
        self.image_index.get(&image_id).map(|&i| &self.images[i])
    }

    pub fn image_size(&self, image_id: u64) -> Option<ImageSize> {
        self.image(image_id).map(|r| r.size)
    }

    pub fn ground_truth_for(&self, image_id: u64) -> impl Iterator<Item = &GroundTruthObject> {
        self.ground_truth.iter().filter(move |g| g.image_id == image_id)
    }
}

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    #[serde(default)]
    file_name: String,
    width: f64,
    height: f64,
}

#[derive(Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Deserialize)]
struct RawCategory {
    id: u64,
    name: String,
}

#[derive(Deserialize)]
struct RawResult {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
}

fn read_file(path: &Path) -> Result<String, CocoError> {
    fs::read_to_string(path).map_err(|source| CocoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_document(text: &str, path: &Path) -> Result<Value, CocoError> {
    serde_json::from_str(text).map_err(|e| CocoError::Parse {
        path: path.to_path_buf(),
        record: None,
        message: e.to_string(),
    })
}

fn section<'a>(doc: &'a Value, key: &str, path: &Path) -> Result<&'a Vec<Value>, CocoError> {
    doc.get(key)
        .and_then(Value::as_array)
        .ok_or_else(|| CocoError::Schema {
            path: path.to_path_buf(),
            record: None,
            message: format!("missing top-level array `{key}`"),
        })
}

fn record<T: serde::de::DeserializeOwned>(v: &Value, kind: &str, i: usize, path: &Path) -> Result<T, CocoError> {
    T::deserialize(v).map_err(|e| CocoError::Schema {
        path: path.to_path_buf(),
        record: Some(i),
        message: format!("{kind}: {e}"),
    })
}

fn index_images(images: &[ImageRecord], path: &Path) -> Result<HashMap<u64, usize>, CocoError> {
    let mut index = HashMap::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        if index.insert(img.image_id, i).is_some() {
            return Err(CocoError::Schema {
                path: path.to_path_buf(),
                record: Some(i),
                message: format!("duplicate image id {}", img.image_id),
            });
        }
    }
    Ok(index)
}

fn check_refs(
    path: &Path,
    i: usize,
    image_id: u64,
    category_id: u64,
    images: &HashMap<u64, usize>,
    categories: &BTreeMap<u64, String>,
) -> Result<(), CocoError> {
    if !images.contains_key(&image_id) {
        return Err(CocoError::Referential {
            path: path.to_path_buf(),
            record: i,
            message: format!("unknown image_id {image_id}"),
        });
    }
    if !categories.contains_key(&category_id) {
        return Err(CocoError::Referential {
            path: path.to_path_buf(),
            record: i,
            message: format!("unknown category_id {category_id}"),
        });
    }
    Ok(())
}

/// Parses an instances document already held in memory. `path` is used for error context only.
pub fn parse_ground_truth(text: &str, path: &Path) -> Result<DatasetBundle, CocoError> {
    let doc = parse_document(text, path)?;
    let raw_images = section(&doc, "images", path)?;
    let raw_annotations = section(&doc, "annotations", path)?;
    let raw_categories = section(&doc, "categories", path)?;

    let mut categories = BTreeMap::new();
    for (i, v) in raw_categories.iter().enumerate() {
        let c: RawCategory = record(v, "category", i, path)?;
        categories.insert(c.id, c.name);
    }

    let mut images = Vec::with_capacity(raw_images.len());
    for (i, v) in raw_images.iter().enumerate() {
        let r: RawImage = record(v, "image", i, path)?;
        let size = ImageSize::new(r.width, r.height).map_err(|e| CocoError::Schema {
            path: path.to_path_buf(),
            record: Some(i),
            message: format!("image: {e}"),
        })?;
        images.push(ImageRecord {
            image_id: r.id,
            file_name: r.file_name,
            size,
        });
    }
    let image_index = index_images(&images, path)?;

    let mut report = LoadReport::default();
    let mut ground_truth = Vec::with_capacity(raw_annotations.len());
    for (i, v) in raw_annotations.iter().enumerate() {
        let a: RawAnnotation = record(v, "annotation", i, path)?;
        check_refs(path, i, a.image_id, a.category_id, &image_index, &categories)?;
        if a.iscrowd != 0 {
            report.crowd += 1;
            continue;
        }
        let [x, y, w, h] = a.bbox;
        if w == 0.0 || h == 0.0 {
            report.degenerate += 1;
            continue;
        }
        let bbox = BBox::new(x, y, w, h).map_err(|e| CocoError::Schema {
            path: path.to_path_buf(),
            record: Some(i),
            message: format!("annotation: {e}"),
        })?;
        ground_truth.push(GroundTruthObject::new(a.id, a.image_id, a.category_id, bbox));
    }

    Ok(DatasetBundle {
        images,
        ground_truth,
        categories,
        report,
        image_index,
    })
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<DatasetBundle, CocoError> {
    let path = path.as_ref();
    parse_ground_truth(&read_file(path)?, path)
}

/// Parses a results document. Output is ordered by image id, then by
/// descending confidence; equal keys keep file order.
pub fn parse_detections(text: &str, path: &Path, bundle: &DatasetBundle) -> Result<Vec<Detection>, CocoError> {
    let doc = parse_document(text, path)?;
    let raw = doc.as_array().ok_or_else(|| CocoError::Schema {
        path: path.to_path_buf(),
        record: None,
        message: "results document must be a JSON array".into(),
    })?;
    let mut dets = Vec::with_capacity(raw.len());
    for (i, v) in raw.iter().enumerate() {
        let r = parse_result(v, i, path)?;
        if !(0.0..=1.0).contains(&r.score) {
            return Err(CocoError::Parse {
                path: path.to_path_buf(),
                record: Some(i),
                message: format!("score {} outside [0, 1]", r.score),
            });
        }
        let [x, y, w, h] = r.bbox;
        let bbox = BBox::new(x, y, w, h).map_err(|e| CocoError::Parse {
            path: path.to_path_buf(),
            record: Some(i),
            message: e.to_string(),
        })?;
        check_refs(path, i, r.image_id, r.category_id, &bundle.image_index, &bundle.categories)?;
        dets.push(Detection {
            image_id: r.image_id,
            category_id: r.category_id,
            bbox,
            confidence: r.score,
        });
    }
    sort_detections(&mut dets);
    Ok(dets)
}

fn parse_result(v: &Value, i: usize, path: &Path) -> Result<RawResult, CocoError> {
    RawResult::deserialize(v).map_err(|e| CocoError::Parse {
        path: path.to_path_buf(),
        record: Some(i),
        message: e.to_string(),
    })
}

/// Stable sort by (image id ascending, confidence descending).
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.image_id
            .cmp(&b.image_id)
            .then_with(|| b.confidence.total_cmp(&a.confidence))
    });
}

pub fn load_detections(path: impl AsRef<Path>, bundle: &DatasetBundle) -> Result<Vec<Detection>, CocoError> {
    let path = path.as_ref();
    parse_detections(&read_file(path)?, path, bundle)
}

pub fn write_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<(), CocoError> {
    let path = path.as_ref();
    let io_err = |source| CocoError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, dets).map_err(|e| io_err(e.into()))?;
    w.write_all(b"\n").map_err(io_err)?;
    w.flush().map_err(io_err)
}

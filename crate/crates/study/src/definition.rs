//! Study definitions: which objects are shown and which candidate box each
//! provenance label contributes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use boxpref_core::coco::{load_detections, load_ground_truth, DatasetBundle, Detection, GroundTruthObject};
use boxpref_core::geometry::iou;
use boxpref_core::{BBox, SizeCategory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ServiceError;

/// One provenance label and the detection file its candidates come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSource {
    pub label: String,
    pub detections: PathBuf,
}

/// On-disk study configuration. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub study_id: String,
    pub ground_truth: PathBuf,
    pub candidates: Vec<CandidateSource>,
    /// Restrict the study to these annotations, in this order.
    #[serde(default)]
    pub annotation_ids: Option<Vec<u64>>,
    /// Maximum number of objects per size category.
    #[serde(default)]
    pub quotas: Option<BTreeMap<SizeCategory, usize>>,
    /// Key for deriving candidate ids. When absent the server keeps one in its data directory.
    #[serde(default)]
    pub secret: Option<String>,
}

impl StudyConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServiceError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: StudyConfig =
            serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.ground_truth = base.join(&cfg.ground_truth);
        for c in &mut cfg.candidates {
            c.detections = base.join(&c.detections);
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub candidate_id: String,
    pub label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskDefinition {
    pub task_id: String,
    pub image_file: String,
    pub category: String,
    /// Point marking the target object (ground-truth center).
    pub marker: [f64; 2],
    pub size_category: SizeCategory,
    /// Candidates in label order.
    pub candidates: Vec<Candidate>,
}

impl TaskDefinition {
    pub fn candidate(&self, id: &str) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.candidate_id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyDefinition {
    pub study_id: String,
    pub labels: Vec<String>,
    pub tasks: Vec<TaskDefinition>,
}

/// Opaque id for a candidate. Stable for a given secret, reveals nothing about the label.
pub fn candidate_id(secret: &str, task_id: &str, label: &str) -> String {
    let mut h = Sha256::new();
    for part in [secret, task_id, label] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    let digest = h.finalize();
    format!("c{}", hex::encode(&digest[..8]))
}

impl StudyDefinition {
    /// Checks that every task carries exactly one candidate per label and
    /// that ids are unique.
    pub fn new(study_id: String, labels: Vec<String>, tasks: Vec<TaskDefinition>) -> Result<Self, ServiceError> {
        let invalid = |m: String| Err(ServiceError::Config(format!("study {study_id}: {m}")));
        if labels.len() < 2 {
            return invalid("a study needs at least two candidate labels".into());
        }
        let label_set: HashSet<&str> = labels.iter().map(String::as_str).collect();
        if label_set.len() != labels.len() {
            return invalid("duplicate candidate label".into());
        }
        let mut task_ids = HashSet::new();
        for t in &tasks {
            if !task_ids.insert(t.task_id.as_str()) {
                return invalid(format!("duplicate task id {}", t.task_id));
            }
            let mut seen_labels = HashSet::new();
            let mut seen_ids = HashSet::new();
            for c in &t.candidates {
                if !label_set.contains(c.label.as_str()) || !seen_labels.insert(c.label.as_str()) {
                    return invalid(format!("task {}: bad or repeated label {}", t.task_id, c.label));
                }
                if !seen_ids.insert(c.candidate_id.as_str()) {
                    return invalid(format!("task {}: duplicate candidate id", t.task_id));
                }
            }
            if seen_labels.len() != labels.len() {
                return invalid(format!("task {}: missing candidates", t.task_id));
            }
        }
        Ok(Self {
            study_id,
            labels,
            tasks,
        })
    }

    /// Builds tasks from a COCO bundle and one detection file per label.
    /// Each label contributes the same-category detection overlapping the
    /// object most; objects some label has no overlapping detection for are skipped.
    pub fn from_config(cfg: &StudyConfig, secret: &str) -> Result<Self, ServiceError> {
        let bundle = load_ground_truth(&cfg.ground_truth).map_err(|e| ServiceError::Config(e.to_string()))?;
        let mut sources = Vec::with_capacity(cfg.candidates.len());
        for c in &cfg.candidates {
            let dets = load_detections(&c.detections, &bundle).map_err(|e| ServiceError::Config(e.to_string()))?;
            sources.push((c.label.clone(), dets));
        }
        Self::from_bundle(cfg, &bundle, &sources, secret)
    }

    pub fn from_bundle(
        cfg: &StudyConfig,
        bundle: &DatasetBundle,
        sources: &[(String, Vec<Detection>)],
        secret: &str,
    ) -> Result<Self, ServiceError> {
        let objects: Vec<&GroundTruthObject> = match &cfg.annotation_ids {
            Some(ids) => ids
                .iter()
                .map(|id| {
                    bundle
                        .ground_truth
                        .iter()
                        .find(|g| g.annotation_id == *id)
                        .ok_or_else(|| ServiceError::Config(format!("annotation {id} not in ground truth")))
                })
                .collect::<Result<_, _>>()?,
            None => bundle.ground_truth.iter().collect(),
        };

        let mut used: BTreeMap<SizeCategory, usize> = BTreeMap::new();
        let mut tasks = Vec::new();
        for gt in objects {
            if let Some(q) = &cfg.quotas {
                let limit = q.get(&gt.size_category).copied().unwrap_or(0);
                if used.get(&gt.size_category).copied().unwrap_or(0) >= limit {
                    continue;
                }
            }
            let task_id = format!("t{:04}", tasks.len());
            let mut candidates = Vec::with_capacity(sources.len());
            for (label, dets) in sources {
                let best = dets
                    .iter()
                    .filter(|d| d.image_id == gt.image_id && d.category_id == gt.category_id)
                    .map(|d| (iou(&d.bbox, &gt.bbox), d))
                    .filter(|(v, _)| *v > 0.0)
                    .fold(None::<(f64, &Detection)>, |acc, (v, d)| match acc {
                        Some((bv, _)) if bv >= v => acc,
                        _ => Some((v, d)),
                    });
                let Some((_, d)) = best else { break };
                candidates.push(Candidate {
                    candidate_id: candidate_id(secret, &task_id, label),
                    label: label.clone(),
                    bbox: d.bbox,
                });
            }
            if candidates.len() != sources.len() {
                continue;
            }
            let image = bundle
                .image(gt.image_id)
                .ok_or_else(|| ServiceError::Config(format!("image {} missing", gt.image_id)))?;
            let (cx, cy) = gt.bbox.center();
            *used.entry(gt.size_category).or_default() += 1;
            tasks.push(TaskDefinition {
                task_id,
                image_file: image.file_name.clone(),
                category: bundle.categories.get(&gt.category_id).cloned().unwrap_or_default(),
                marker: [cx, cy],
                size_category: gt.size_category,
                candidates,
            });
        }
        if tasks.is_empty() {
            return Err(ServiceError::Config(format!("study {}: no object has a candidate from every label", cfg.study_id)));
        }
        let labels = sources.iter().map(|(l, _)| l.clone()).collect();
        Self::new(cfg.study_id.clone(), labels, tasks)
    }

    pub fn task(&self, task_id: &str) -> Option<(usize, &TaskDefinition)> {
        self.tasks.iter().enumerate().find(|(_, t)| t.task_id == task_id)
    }
}

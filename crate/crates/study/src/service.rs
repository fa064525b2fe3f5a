use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use boxpref_core::stats::{JudgmentTable, LabeledJudgment, StatsError};
use boxpref_core::BBox;
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::definition::{StudyConfig, StudyDefinition};
use crate::log::{EventLog, JudgmentRecord, LogEvent, ServeRecord};
use crate::ServiceError;

pub const MAX_PARTICIPANT_ID_LEN: usize = 128;

/// What a participant sees: no labels, no provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTask {
    pub study_id: String,
    pub task_id: String,
    pub serve_id: u64,
    pub image_ref: String,
    pub object_hint: ObjectHint,
    pub candidates: Vec<AnonymousCandidate>,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectHint {
    pub category: String,
    pub marker: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonymousCandidate {
    pub candidate_id: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentSubmission {
    pub participant_id: String,
    pub task_id: String,
    pub selected: Vec<String>,
    /// Display order the participant saw. Defaults to the latest one served.
    #[serde(default)]
    pub permutation: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub study_id: String,
    pub task_id: String,
    pub progress: Progress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudySummary {
    pub study_id: String,
    pub tasks: usize,
    pub judgments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub participant_id: String,
    pub task_id: String,
    pub selected: Vec<String>,
    /// Labels in the order the candidates were displayed.
    pub shown_order: Vec<String>,
    pub timestamp_ms: u64,
}

/// De-anonymized judgments, one row per submitted judgment in log order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyExport {
    pub study_id: String,
    pub options: Vec<String>,
    pub rows: Vec<ExportRow>,
}

impl StudyExport {
    pub fn labeled(&self) -> Vec<LabeledJudgment> {
        self.rows
            .iter()
            .map(|r| LabeledJudgment {
                participant_id: r.participant_id.clone(),
                task_id: r.task_id.clone(),
                options: self.options.clone(),
                selected: r.selected.clone(),
            })
            .collect()
    }

    pub fn judgment_table(&self) -> Result<JudgmentTable, StatsError> {
        JudgmentTable::from_labeled(&self.labeled())
    }

    /// `participant_id,task_id,<label>...` with 0/1 cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("participant_id,task_id");
        for o in &self.options {
            out.push(',');
            out.push_str(&csv_field(o));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&csv_field(&r.participant_id));
            out.push(',');
            out.push_str(&csv_field(&r.task_id));
            for o in &self.options {
                out.push_str(if r.selected.contains(o) { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.labeled()
            .iter()
            .map(|j| serde_json::to_string(j).expect("plain struct") + "\n")
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

struct StudyState {
    log: EventLog,
    answered: HashMap<String, HashSet<usize>>,
    last_serve: HashMap<(String, String), Vec<String>>,
    judgments: Vec<JudgmentRecord>,
    next_serve_id: u64,
    rng: ChaCha8Rng,
}

struct Study {
    def: StudyDefinition,
    state: Mutex<StudyState>,
}

/// Serves tasks and records judgments for a set of studies. All writes for
/// a study go through one lock-protected log.
pub struct StudyService {
    studies: HashMap<String, Arc<Study>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

fn log_path(data_dir: &Path, study_id: &str) -> PathBuf {
    data_dir.join(format!("{study_id}.jsonl"))
}

fn valid_study_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// Reads the study's candidate-id key from the data directory, creating it on first use.
pub fn load_or_create_secret(data_dir: &Path, study_id: &str) -> Result<String, ServiceError> {
    let path = data_dir.join(format!("{study_id}.secret"));
    match fs::read_to_string(&path) {
        Ok(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Ok(_) => Err(ServiceError::Config(format!("{} is empty", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            let mut key = [0u8; 32];
            rand::rng().fill_bytes(&mut key);
            let s = hex::encode(key);
            fs::write(&path, format!("{s}\n"))?;
            Ok(s)
        }
        Err(e) => Err(e.into()),
    }
}

impl StudyService {
    /// Opens one log per study under `data_dir` and replays it. With a seed
    /// the display order RNG is reproducible for a given replayed state.
    pub fn open(defs: Vec<StudyDefinition>, data_dir: impl AsRef<Path>, seed: Option<u64>) -> Result<Self, ServiceError> {
        let data_dir = data_dir.as_ref();
        fs::create_dir_all(data_dir)?;
        let mut studies = HashMap::new();
        for def in defs {
            if !valid_study_id(&def.study_id) {
                return Err(ServiceError::Config(format!("invalid study id {:?}", def.study_id)));
            }
            if studies.contains_key(&def.study_id) {
                return Err(ServiceError::Config(format!("duplicate study id {}", def.study_id)));
            }
            let (log, events) = EventLog::open(log_path(data_dir, &def.study_id))?;
            let rng = match seed {
                Some(s) => ChaCha8Rng::seed_from_u64(s ^ events.len() as u64),
                None => ChaCha8Rng::from_rng(&mut rand::rng()),
            };
            let mut state = StudyState {
                log,
                answered: HashMap::new(),
                last_serve: HashMap::new(),
                judgments: Vec::new(),
                next_serve_id: 0,
                rng,
            };
            for ev in events {
                match ev {
                    LogEvent::Serve(s) => {
                        state.next_serve_id = state.next_serve_id.max(s.serve_id + 1);
                        state.last_serve.insert((s.participant_id, s.task_id), s.permutation);
                    }
                    LogEvent::Judgment(j) => {
                        let (idx, _) = def.task(&j.task_id).ok_or_else(|| {
                            ServiceError::Config(format!("log refers to unknown task {} of study {}", j.task_id, def.study_id))
                        })?;
                        state.answered.entry(j.participant_id.clone()).or_default().insert(idx);
                        state.judgments.push(j);
                    }
                }
            }
            studies.insert(
                def.study_id.clone(),
                Arc::new(Study {
                    def,
                    state: Mutex::new(state),
                }),
            );
        }
        Ok(Self { studies })
    }

    /// Builds definitions from config files. A config without a secret gets
    /// one persisted next to its log.
    pub fn from_configs(configs: &[StudyConfig], data_dir: impl AsRef<Path>, seed: Option<u64>) -> Result<Self, ServiceError> {
        let data_dir = data_dir.as_ref();
        fs::create_dir_all(data_dir)?;
        let mut defs = Vec::with_capacity(configs.len());
        for cfg in configs {
            if !valid_study_id(&cfg.study_id) {
                return Err(ServiceError::Config(format!("invalid study id {:?}", cfg.study_id)));
            }
            let secret = match &cfg.secret {
                Some(s) => s.clone(),
                None => load_or_create_secret(data_dir, &cfg.study_id)?,
            };
            defs.push(StudyDefinition::from_config(cfg, &secret)?);
        }
        Self::open(defs, data_dir, seed)
    }

    fn get(&self, study_id: &str) -> Result<&Arc<Study>, ServiceError> {
        self.studies.get(study_id).ok_or_else(|| ServiceError::UnknownStudy(study_id.to_string()))
    }

    pub fn definition(&self, study_id: &str) -> Option<&StudyDefinition> {
        self.studies.get(study_id).map(|s| &s.def)
    }

    pub fn summaries(&self) -> Vec<StudySummary> {
        let mut out: Vec<_> = self
            .studies
            .values()
            .map(|s| StudySummary {
                study_id: s.def.study_id.clone(),
                tasks: s.def.tasks.len(),
                judgments: s.state.lock().judgments.len(),
            })
            .collect();
        out.sort_by(|a, b| a.study_id.cmp(&b.study_id));
        out
    }

    /// First task the participant has not answered, with candidates in a
    /// fresh random order. The serve is logged before it is returned.
    pub fn next_task(&self, study_id: &str, participant_id: &str) -> Result<StudyTask, ServiceError> {
        check_participant(participant_id)?;
        let study = self.get(study_id)?;
        let def = &study.def;
        let mut st = study.state.lock();
        let answered = st.answered.get(participant_id).map_or(0, HashSet::len);
        let idx = {
            let done = st.answered.get(participant_id);
            (0..def.tasks.len()).find(|i| done.is_none_or(|d| !d.contains(i)))
        };
        let Some(idx) = idx else {
            return Err(ServiceError::StudyComplete);
        };
        let task = &def.tasks[idx];
        let mut shown: Vec<_> = task.candidates.iter().collect();
        shown.shuffle(&mut st.rng);
        let permutation: Vec<String> = shown.iter().map(|c| c.candidate_id.clone()).collect();
        let serve_id = st.next_serve_id;
        st.log.append(&LogEvent::Serve(ServeRecord {
            serve_id,
            participant_id: participant_id.to_string(),
            task_id: task.task_id.clone(),
            permutation: permutation.clone(),
            timestamp_ms: now_ms(),
        }))?;
        st.next_serve_id += 1;
        st.last_serve
            .insert((participant_id.to_string(), task.task_id.clone()), permutation);
        Ok(StudyTask {
            study_id: def.study_id.clone(),
            task_id: task.task_id.clone(),
            serve_id,
            image_ref: format!("/images/{}", task.image_file),
            object_hint: ObjectHint {
                category: task.category.clone(),
                marker: task.marker,
            },
            candidates: shown
                .into_iter()
                .map(|c| AnonymousCandidate {
                    candidate_id: c.candidate_id.clone(),
                    bbox: c.bbox,
                })
                .collect(),
            progress: Progress {
                answered,
                total: def.tasks.len(),
            },
        })
    }

    /// Validates and durably records a judgment; returns only after the log is synced.
    pub fn submit_judgment(&self, study_id: &str, sub: JudgmentSubmission) -> Result<Acknowledgment, ServiceError> {
        check_participant(&sub.participant_id)?;
        let study = self.get(study_id)?;
        let def = &study.def;
        let (idx, task) = def.task(&sub.task_id).ok_or_else(|| ServiceError::UnknownTask(sub.task_id.clone()))?;
        let mut st = study.state.lock();
        if st.answered.get(&sub.participant_id).is_some_and(|d| d.contains(&idx)) {
            return Err(ServiceError::DuplicateSubmission);
        }
        let served = st
            .last_serve
            .get(&(sub.participant_id.clone(), sub.task_id.clone()))
            .ok_or_else(|| ServiceError::InvalidSelection("task was not served to this participant".into()))?;
        let permutation = match &sub.permutation {
            Some(p) if p != served => {
                return Err(ServiceError::InvalidSelection("permutation differs from the one served".into()))
            }
            _ => served.clone(),
        };
        if sub.selected.is_empty() {
            return Err(ServiceError::InvalidSelection("select at least one candidate".into()));
        }
        let mut seen = HashSet::new();
        for id in &sub.selected {
            if task.candidate(id).is_none() {
                return Err(ServiceError::InvalidSelection(format!("unknown candidate {id}")));
            }
            if !seen.insert(id) {
                return Err(ServiceError::InvalidSelection(format!("candidate {id} selected twice")));
            }
        }
        let record = JudgmentRecord {
            participant_id: sub.participant_id.clone(),
            task_id: sub.task_id.clone(),
            selected: sub.selected,
            permutation,
            timestamp_ms: now_ms(),
        };
        st.log.append(&LogEvent::Judgment(record.clone()))?;
        st.judgments.push(record);
        let done = st.answered.entry(sub.participant_id).or_default();
        done.insert(idx);
        Ok(Acknowledgment {
            study_id: def.study_id.clone(),
            task_id: sub.task_id,
            progress: Progress {
                answered: done.len(),
                total: def.tasks.len(),
            },
        })
    }

    pub fn export(&self, study_id: &str) -> Result<StudyExport, ServiceError> {
        let study = self.get(study_id)?;
        let def = &study.def;
        let st = study.state.lock();
        let label_of = |task_id: &str, cid: &str| -> Result<String, ServiceError> {
            def.task(task_id)
                .and_then(|(_, t)| t.candidate(cid))
                .map(|c| c.label.clone())
                .ok_or_else(|| ServiceError::Config(format!("log refers to unknown candidate {cid}")))
        };
        let mut rows = Vec::with_capacity(st.judgments.len());
        for j in &st.judgments {
            let mut selected = j
                .selected
                .iter()
                .map(|c| label_of(&j.task_id, c))
                .collect::<Result<Vec<_>, _>>()?;
            selected.sort_by_key(|l| def.labels.iter().position(|x| x == l));
            rows.push(ExportRow {
                participant_id: j.participant_id.clone(),
                task_id: j.task_id.clone(),
                selected,
                shown_order: j
                    .permutation
                    .iter()
                    .map(|c| label_of(&j.task_id, c))
                    .collect::<Result<_, _>>()?,
                timestamp_ms: j.timestamp_ms,
            });
        }
        Ok(StudyExport {
            study_id: def.study_id.clone(),
            options: def.labels.clone(),
            rows,
        })
    }
}

fn check_participant(id: &str) -> Result<(), ServiceError> {
    if id.trim().is_empty() || id.len() > MAX_PARTICIPANT_ID_LEN || id.chars().any(char::is_control) {
        Err(ServiceError::InvalidParticipant)
    } else {
        Ok(())
    }
}

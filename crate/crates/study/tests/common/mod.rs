#![allow(dead_code)]

use boxpref_core::{BBox, SizeCategory};
use boxpref_study::definition::{candidate_id, Candidate, StudyDefinition, TaskDefinition};

pub const LABELS: [&str; 4] = ["0.5", "1.0", "1.5", "2.0"];

pub fn definition(study_id: &str, tasks: usize) -> StudyDefinition {
    let labels: Vec<String> = LABELS.iter().map(|s| s.to_string()).collect();
    let tasks = (0..tasks)
        .map(|i| {
            let task_id = format!("t{i:04}");
            let candidates = labels
                .iter()
                .enumerate()
                .map(|(k, l)| Candidate {
                    candidate_id: candidate_id("test-key", &task_id, l),
                    label: l.clone(),
                    bbox: BBox::new(10.0, 10.0, 20.0 + k as f64, 20.0 + k as f64).unwrap(),
                })
                .collect();
            TaskDefinition {
                task_id,
                image_file: format!("img{i}.jpg"),
                category: "dog".into(),
                marker: [20.0, 20.0],
                size_category: SizeCategory::Small,
                candidates,
            }
        })
        .collect();
    StudyDefinition::new(study_id.into(), labels, tasks).unwrap()
}

/// Label behind a candidate id, looked up on the server-side definition.
pub fn label_of(def: &StudyDefinition, task_id: &str, cid: &str) -> String {
    def.task(task_id).unwrap().1.candidate(cid).unwrap().label.clone()
}

//! Independent reference implementations and synthetic fixtures shared by
//! the CLI and acceptance tests. Nothing here calls the code under test.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Asymmetric loss transcribed branch by branch, selecting the branch by
/// magnitude and sign instead of by ordered comparisons.
pub fn loss_oracle(alpha: f64, beta: f64, x: f64) -> f64 {
    let inside = x.abs() < beta;
    match (x >= 0.0, inside) {
        (true, false) => x / alpha.sqrt() - beta / (2.0 * alpha.sqrt()),
        (true, true) => x.powi(2) / (2.0 * alpha.sqrt() * beta),
        (false, true) => alpha.sqrt() * x.powi(2) / (2.0 * beta),
        (false, false) => -alpha.sqrt() * x - alpha.sqrt() * beta / 2.0,
    }
}

/// Huber-form smooth-L1: `0.5 x^2 / beta` inside, `|x| - beta / 2` outside.
pub fn smooth_l1_oracle(beta: f64, x: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

/// IoU from corner coordinates.
pub fn iou_oracle(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0]);
    let iy = (a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1]);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    inter / (a[2] * a[3] + b[2] * b[3] - inter)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleDet {
    pub image: u64,
    pub category: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct OracleGt {
    pub image: u64,
    pub category: u64,
    pub bbox: [f64; 4],
}

/// Greedy matching by repeated selection of the highest remaining score
/// (earliest index on ties), then 101-point interpolated precision taken as
/// a brute-force maximum over every point at or beyond each recall level.
/// Returns `(mean AP, AP per threshold)` averaged over categories with ground truth.
pub fn ap_oracle(dets: &[OracleDet], gts: &[OracleGt], thresholds: &[f64], iou: impl Fn([f64; 4], [f64; 4]) -> f64) -> (f64, Vec<f64>) {
    let categories: BTreeSet<u64> = gts.iter().map(|g| g.category).collect();
    let mut per_threshold = Vec::new();
    for &t in thresholds {
        let mut sum = 0.0;
        for &c in &categories {
            let d: Vec<&OracleDet> = dets.iter().filter(|d| d.category == c).collect();
            let g: Vec<&OracleGt> = gts.iter().filter(|g| g.category == c).collect();
            let mut used_det = vec![false; d.len()];
            let mut used_gt = vec![false; g.len()];
            let mut outcomes = Vec::new();
            for _ in 0..d.len() {
                let mut pick = None;
                for (i, det) in d.iter().enumerate() {
                    if used_det[i] {
                        continue;
                    }
                    if pick.is_none_or(|p: usize| det.score > d[p].score) {
                        pick = Some(i);
                    }
                }
                let i = pick.unwrap();
                used_det[i] = true;
                let mut best: Option<(usize, f64)> = None;
                for (j, gt) in g.iter().enumerate() {
                    if used_gt[j] || gt.image != d[i].image {
                        continue;
                    }
                    let v = iou(d[i].bbox, gt.bbox);
                    if v > 0.0 && v >= t - 1e-10 && best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used_gt[j] = true;
                }
                outcomes.push(best.is_some());
            }
            let mut recall = Vec::new();
            let mut precision = Vec::new();
            let mut tp = 0;
            for (n, &hit) in outcomes.iter().enumerate() {
                tp += hit as usize;
                recall.push(tp as f64 / g.len() as f64);
                precision.push(tp as f64 / (n + 1) as f64);
            }
            let mut ap = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                let best = (0..recall.len())
                    .filter(|&k| recall[k] >= level)
                    .map(|k| precision[k])
                    .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))));
                ap += best.unwrap_or(0.0);
            }
            sum += ap / 101.0;
        }
        per_threshold.push(sum / categories.len() as f64);
    }
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    (mean, per_threshold)
}

/// Cochran's Q as `k (k-1) sum (C_j - mean C)^2 / sum R_i (k - R_i)`.
pub fn cochran_oracle(rows: &[Vec<bool>]) -> Option<f64> {
    let k = rows[0].len();
    let mut cols = vec![0.0; k];
    let mut denom = 0.0;
    for r in rows {
        let mut ri = 0.0;
        for (j, &v) in r.iter().enumerate() {
            if v {
                cols[j] += 1.0;
                ri += 1.0;
            }
        }
        denom += ri * (k as f64 - ri);
    }
    if denom == 0.0 {
        return None;
    }
    let mean = cols.iter().sum::<f64>() / k as f64;
    let spread: f64 = cols.iter().map(|c| (c - mean) * (c - mean)).sum();
    Some(k as f64 * (k as f64 - 1.0) * spread / denom)
}

/// `erfc` by its Maclaurin series; adequate for arguments below 3.
fn erfc_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
}

/// Chi-square upper tail in closed form for df 1 and 2.
pub fn chi2_tail_oracle(q: f64, df: usize) -> f64 {
    match df {
        1 => erfc_series((q / 2.0).sqrt()),
        2 => (-q / 2.0).exp(),
        _ => panic!("closed form only for df 1 and 2"),
    }
}

/// One synthetic object: image id, category id and box.
#[derive(Debug, Clone, Copy)]
pub struct SynthObject {
    pub image: u64,
    pub category: u64,
    pub bbox: [f64; 4],
}

/// Objects on a coarse grid so every box stays inside the image and far
/// from its neighbours even after doubling its area.
pub fn grid_objects(images: u64, per_side: u64, cell: f64) -> Vec<SynthObject> {
    let mut out = Vec::new();
    for img in 1..=images {
        for gy in 0..per_side {
            for gx in 0..per_side {
                let i = (gy * per_side + gx) as f64;
                // sizes vary so all three COCO size classes appear
                let w = cell * (0.08 + 0.3 * ((i * 0.37 + img as f64 * 0.11) % 1.0));
                let h = cell * (0.08 + 0.3 * ((i * 0.61 + img as f64 * 0.29) % 1.0));
                let cx = (gx as f64 + 0.5) * cell;
                let cy = (gy as f64 + 0.5) * cell;
                out.push(SynthObject {
                    image: img,
                    category: 1 + (gx + gy) % 2,
                    bbox: [cx - w / 2.0, cy - h / 2.0, w, h],
                });
            }
        }
    }
    out
}

pub fn coco_gt_json(objects: &[SynthObject], image_w: f64, image_h: f64) -> String {
    let images: BTreeSet<u64> = objects.iter().map(|o| o.image).collect();
    let mut s = String::from("{\"images\": [");
    for (n, id) in images.iter().enumerate() {
        if n > 0 {
            s.push(',');
        }
        write!(s, "{{\"id\": {id}, \"file_name\": \"img{id}.jpg\", \"width\": {image_w}, \"height\": {image_h}}}").unwrap();
    }
    s.push_str("], \"annotations\": [");
    for (n, o) in objects.iter().enumerate() {
        if n > 0 {
            s.push(',');
        }
        let [x, y, w, h] = o.bbox;
        write!(
            s,
            "{{\"id\": {}, \"image_id\": {}, \"category_id\": {}, \"bbox\": [{x}, {y}, {w}, {h}], \"area\": {}, \"iscrowd\": 0}}",
            n + 1,
            o.image,
            o.category,
            w * h
        )
        .unwrap();
    }
    s.push_str("], \"categories\": [{\"id\": 1, \"name\": \"cat\"}, {\"id\": 2, \"name\": \"dog\"}]}");
    s
}

/// Detections equal to the ground truth, with distinct scores.
pub fn perfect_detections_json(objects: &[SynthObject]) -> String {
    let mut s = String::from("[");
    for (n, o) in objects.iter().enumerate() {
        if n > 0 {
            s.push(',');
        }
        let [x, y, w, h] = o.bbox;
        let score = 1.0 - n as f64 / (objects.len() as f64 + 1.0);
        write!(
            s,
            "{{\"image_id\": {}, \"category_id\": {}, \"bbox\": [{x}, {y}, {w}, {h}], \"score\": {score}}}",
            o.image, o.category
        )
        .unwrap();
    }
    s.push(']');
    s
}

/// Writes a ground-truth file and a perfect detection file into `dir`.
pub fn write_synthetic(dir: &Path, images: u64, per_side: u64, cell: f64) -> (PathBuf, PathBuf, Vec<SynthObject>) {
    let objects = grid_objects(images, per_side, cell);
    let side = per_side as f64 * cell;
    let gt = dir.join("gt.json");
    let det = dir.join("det.json");
    std::fs::write(&gt, coco_gt_json(&objects, side, side)).unwrap();
    std::fs::write(&det, perfect_detections_json(&objects)).unwrap();
    (gt, det, objects)
}

/// The published counts behind the "All" row of the comparative study:
/// 181, 245, 140 and 94 of 660 single-choice judgments.
pub const STUDY_OPTIONS: [&str; 4] = ["alpha=1", "alpha=10", "alpha=100", "scale=1.5"];
pub const STUDY_COUNTS: [usize; 4] = [181, 245, 140, 94];
pub const STUDY_PERCENTAGES: [f64; 4] = [27.4, 37.1, 21.2, 14.2];

pub fn study_marginals_csv() -> String {
    let mut s = format!("participant_id,{}\n", STUDY_OPTIONS.join(","));
    let mut row = 0;
    for (j, &n) in STUDY_COUNTS.iter().enumerate() {
        for _ in 0..n {
            let cells: Vec<&str> = (0..4).map(|c| if c == j { "1" } else { "0" }).collect();
            writeln!(s, "p{row},{}", cells.join(",")).unwrap();
            row += 1;
        }
    }
    s
}

pub fn boxpref() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_boxpref"))
}

use std::collections::BTreeMap;
use std::path::Path;

use boxpref_core::coco::{load_detections, sort_detections, parse_ground_truth, write_detections, Detection, GroundTruthObject, ImageRecord};
use boxpref_core::eval::{coco_thresholds, evaluate, size_ratio_histogram};
use boxpref_core::geometry::{iou, scale_box};
use boxpref_core::{BBox, DatasetBundle, ImageSize, ScaleFactor};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0u8..40, 0u8..40, 1u8..30, 1u8..30).prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64).unwrap())
}

fn bundle(gts: &[(u64, u64, BBox)]) -> DatasetBundle {
    let images = (1..=3)
        .map(|id| ImageRecord {
            image_id: id,
            file_name: format!("{id}.jpg"),
            size: ImageSize::new(100.0, 100.0).unwrap(),
        })
        .collect();
    let objects = gts
        .iter()
        .enumerate()
        .map(|(i, &(img, cat, b))| GroundTruthObject::new(i as u64, img, cat, b))
        .collect();
    DatasetBundle::new(images, objects, [(1, "a".to_string()), (2, "b".to_string())].into()).unwrap()
}

fn arb_instance() -> impl Strategy<Value = (Vec<(u64, u64, BBox)>, Vec<Detection>)> {
    let gts = prop::collection::vec((1u64..=3, 1u64..=2, arb_box()), 1..8);
    gts.prop_flat_map(|gts| {
        let n = gts.len();
        let dets = prop::collection::vec((0..n, any::<bool>(), arb_box(), 0.05f64..1.0), 0..10).prop_map(move |raw| raw);
        (Just(gts), dets)
    })
    .prop_map(|(gts, raw)| {
        let dets = raw
            .into_iter()
            .map(|(gi, copy, b, conf)| {
                let (img, cat, gb) = gts[gi];
                Detection {
                    image_id: img,
                    category_id: cat,
                    bbox: if copy { gb } else { b },
                    confidence: conf,
                }
            })
            .collect();
        (gts, dets)
    })
}

proptest! {
    #[test]
    fn lowest_confidence_false_positive_never_helps((gts, mut dets) in arb_instance(), img in 1u64..=3, cat in 1u64..=2) {
        let bundle = bundle(&gts);
        let t = coco_thresholds();
        let before = evaluate(&dets, &bundle, &t).unwrap();
        // ground truth never reaches past 70 px, so this box overlaps nothing
        let b = BBox::new(80.0, 80.0, 10.0, 10.0).unwrap();
        dets.push(Detection { image_id: img, category_id: cat, bbox: b, confidence: 0.01 });
        let after = evaluate(&dets, &bundle, &t).unwrap();
        for (x, y) in before.per_threshold.iter().zip(&after.per_threshold) {
            prop_assert!(y.ap <= x.ap + 1e-15, "{} -> {}", x.ap, y.ap);
        }
    }

    #[test]
    fn ap_is_non_increasing_in_threshold((gts, dets) in arb_instance()) {
        let r = evaluate(&dets, &bundle(&gts), &coco_thresholds()).unwrap();
        for w in r.per_threshold.windows(2) {
            prop_assert!(w[1].ap <= w[0].ap, "{:?}", r.per_threshold);
        }
        prop_assert!((0.0..=1.0).contains(&r.ap));
    }

    #[test]
    fn detection_files_round_trip((gts, mut dets) in arb_instance()) {
        // loading returns the canonical order
        sort_detections(&mut dets);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.json");
        write_detections(&dets, &path).unwrap();
        let back = load_detections(&path, &bundle(&gts)).unwrap();
        prop_assert_eq!(back, dets);
    }
}

#[test]
fn scaling_collapse_is_a_step_average() {
    let text = r#"{"images": [{"id": 1, "file_name": "a.jpg", "width": 1000, "height": 1000}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [100, 100, 80, 60]},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [500, 400, 30, 30]},
            {"id": 3, "image_id": 1, "category_id": 1, "bbox": [300, 700, 200, 150]}],
        "categories": [{"id": 1, "name": "x"}]}"#;
    let bundle = parse_ground_truth(text, Path::new("gt.json")).unwrap();
    let img = bundle.image_size(1).unwrap();
    let t = coco_thresholds();
    for f in [0.5, 0.67, 0.8, 1.25, 1.5, 2.0] {
        let dets: Vec<Detection> = bundle
            .ground_truth
            .iter()
            .map(|g| Detection {
                image_id: 1,
                category_id: 1,
                bbox: scale_box(&g.bbox, ScaleFactor::new(f).unwrap(), &img).unwrap(),
                confidence: 0.9,
            })
            .collect();
        let r = evaluate(&dets, &bundle, &t).unwrap();
        let law = f64::min(f, 1.0 / f);
        let mut steps = 0;
        for pt in &r.per_threshold {
            let want = if pt.threshold <= law + 1e-10 { 1.0 } else { 0.0 };
            assert_eq!(pt.ap, want, "factor {f} threshold {}", pt.threshold);
            steps += want as usize;
        }
        assert!((r.ap - steps as f64 / 10.0).abs() < 1e-12, "factor {f}: {}", r.ap);
    }
}

#[test]
fn evaluation_is_independent_of_worker_count() {
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..60u64 {
        let b = BBox::new((i % 7) as f64 * 9.0, (i % 5) as f64 * 12.0, 8.0 + (i % 3) as f64, 10.0).unwrap();
        gts.push((1 + i % 3, 1 + i % 2, b));
        let shifted = BBox::new(b.x_min() + (i % 4) as f64, b.y_min(), b.width(), b.height()).unwrap();
        dets.push(Detection {
            image_id: 1 + i % 3,
            category_id: 1 + i % 2,
            bbox: shifted,
            confidence: ((i * 37) % 11) as f64 / 11.0,
        });
    }
    let bundle = bundle(&gts);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&dets, &bundle, &coco_thresholds()).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(7));
}

#[test]
fn census_matches_a_recount() {
    let text = r#"{"images": [{"id": 1, "file_name": "a.jpg", "width": 2000, "height": 2000}],
        "annotations": [
            {"id": 1, "image_id": 1, "category_id": 1, "bbox": [100, 100, 20, 20]},
            {"id": 2, "image_id": 1, "category_id": 1, "bbox": [500, 500, 60, 50]},
            {"id": 3, "image_id": 1, "category_id": 1, "bbox": [900, 900, 200, 180]},
            {"id": 4, "image_id": 1, "category_id": 1, "bbox": [1500, 200, 40, 90]}],
        "categories": [{"id": 1, "name": "x"}]}"#;
    let bundle = parse_ground_truth(text, Path::new("gt.json")).unwrap();
    let img = bundle.image_size(1).unwrap();
    let factors = [1.2, 1.0 / 1.2, 2.0, 4.0];
    let dets: Vec<Detection> = bundle
        .ground_truth
        .iter()
        .zip(factors)
        .map(|(g, f)| Detection {
            image_id: 1,
            category_id: 1,
            bbox: scale_box(&g.bbox, ScaleFactor::new(f).unwrap(), &img).unwrap(),
            confidence: 0.5,
        })
        .collect();
    let hist = size_ratio_histogram(&dets, &bundle);

    // IoU is min(f, 1/f): 0.833, 0.833, 0.5, 0.25 (excluded)
    let mut expect: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for (d, g) in dets.iter().zip(&bundle.ground_truth) {
        let v = iou(&d.bbox, &g.bbox);
        if v < 0.3 {
            excluded += 1;
            continue;
        }
        let bin = (((v * 10.0).floor() as usize).min(9)) - 3;
        let e = expect.entry(bin).or_default();
        if d.bbox.area() > g.bbox.area() {
            e.0 += 1;
        } else {
            e.1 += 1;
        }
    }
    assert_eq!(hist.excluded, excluded);
    assert_eq!(excluded, 1);
    for (i, b) in hist.bins.iter().enumerate() {
        let (l, s) = expect.get(&i).copied().unwrap_or_default();
        assert_eq!((b.counts.larger, b.counts.smaller), (l, s), "bin {i}");
    }
    assert_eq!(hist.totals().larger, 2);
    assert_eq!(hist.totals().smaller, 1);
}

use std::collections::BTreeMap;

use proptest::prelude::*;

use fxdetect::eval::{
    evaluate, filter_groundtruth, match_detections, miss_rate_fppi_curve, CurvePoint, DetStatus, EvalConfig,
    GroundTruthBox, Label, Subset,
};
use fxdetect::ssd::{BoundingBox, Detection};

fn gt_box(image: usize) -> impl Strategy<Value = GroundTruthBox> {
    (
        0.0f64..500.0,
        0.0f64..300.0,
        8.0f64..60.0,
        10.0f64..140.0,
        prop::sample::select(vec![0.0, 0.0, 0.2, 0.5, 0.9]),
        prop::sample::select(vec![Label::Person, Label::Person, Label::Person, Label::People, Label::PersonUnsure]),
    )
        .prop_map(move |(x, y, w, h, occ, label)| {
            GroundTruthBox::new(&format!("im{image}"), label, [x, y, x + w, y + h], occ).unwrap()
        })
}

fn det_near(gts: Vec<GroundTruthBox>, image: usize) -> impl Strategy<Value = Vec<Detection<f64>>> {
    let anchors: Vec<[f64; 4]> = gts.iter().map(|g| [g.x1, g.y1, g.x2, g.y2]).collect();
    prop::collection::vec(
        (0..anchors.len().max(1) + 1, -20.0f64..20.0, -20.0f64..20.0, 0u32..32),
        0..12,
    )
    .prop_map(move |v| {
        v.into_iter()
            .map(|(a, dx, dy, s)| {
                let [x1, y1, x2, y2] = anchors.get(a).copied().unwrap_or([600.0 + image as f64, 10.0, 640.0, 110.0]);
                Detection {
                    bbox: BoundingBox::from_corners(x1 + dx, y1 + dy, x2 + dx, y2 + dy),
                    score: s as f64 / 32.0,
                }
            })
            .collect()
    })
}

type Scene = (Vec<GroundTruthBox>, BTreeMap<String, Vec<Detection<f64>>>);

fn scene() -> impl Strategy<Value = Scene> {
    (1usize..=4).prop_flat_map(|images| {
        let per_image: Vec<_> = (0..images)
            .map(|i| {
                prop::collection::vec(gt_box(i), 1..5).prop_flat_map(move |gts| (Just(gts.clone()), det_near(gts, i)))
            })
            .collect();
        per_image.prop_map(|parts| {
            let mut gts = Vec::new();
            let mut dets = BTreeMap::new();
            for (i, (g, d)) in parts.into_iter().enumerate() {
                gts.extend(g);
                dets.insert(format!("im{i}"), d);
            }
            // one guaranteed scored box keeps the miss rate defined
            gts.push(GroundTruthBox::new("im0", Label::Person, [700.0, 0.0, 730.0, 100.0], 0.0).unwrap());
            (gts, dets)
        })
    })
}

/// Curve value at a score threshold: the last point at or above it.
fn at_threshold(curve: &[CurvePoint], t: f64) -> (f64, f64) {
    curve
        .iter()
        .rfind(|p| p.threshold >= t)
        .map_or((0.0, 1.0), |p| (p.fppi, p.miss_rate))
}

fn results(gts: &[GroundTruthBox], dets: &BTreeMap<String, Vec<Detection<f64>>>) -> Vec<CurvePoint> {
    let cfg = EvalConfig::new(Subset::Overall);
    evaluate(dets, gts, &cfg).unwrap().curve
}

proptest! {
    #[test]
    fn reasonable_is_a_subset_of_overall((gts, _) in scene()) {
        let (r, _) = filter_groundtruth(gts.iter(), &EvalConfig::new(Subset::Reasonable));
        let (o, _) = filter_groundtruth(gts.iter(), &EvalConfig::new(Subset::Overall));
        prop_assert!(r.iter().all(|b| o.contains(b)));
    }

    #[test]
    fn each_detection_gets_one_status((gts, dets) in scene()) {
        let cfg = EvalConfig::new(Subset::Overall);
        for (id, d) in &dets {
            let mine: Vec<_> = gts.iter().filter(|g| &g.image_id == id).collect();
            let (e, i) = filter_groundtruth(mine.iter().copied(), &cfg);
            let r = match_detections(d, &e, &i, 0.5);
            prop_assert_eq!(r.status.len(), d.len());
            let tp = r.status.iter().filter(|s| **s == DetStatus::TruePositive).count();
            prop_assert_eq!(tp, r.gt_hit.iter().filter(|h| **h).count());
            prop_assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn lamr_depends_only_on_score_ranking((gts, dets) in scene()) {
        let cfg = EvalConfig::new(Subset::Overall);
        let base = evaluate(&dets, &gts, &cfg).unwrap().lamr;
        let warped: BTreeMap<_, _> = dets
            .iter()
            .map(|(k, v)| {
                let v = v.iter().map(|d| Detection { bbox: d.bbox, score: (3.0 * d.score).exp() - 7.0 }).collect();
                (k.clone(), v)
            })
            .collect();
        prop_assert_eq!(base, evaluate(&warped, &gts, &cfg).unwrap().lamr);
    }

    #[test]
    fn an_extra_false_positive_never_lowers_fppi((gts, mut dets) in scene(), s in 0u32..32) {
        let before = results(&gts, &dets);
        let fp = Detection { bbox: BoundingBox::from_corners(900.0, 900.0, 950.0, 1000.0), score: s as f64 / 32.0 };
        dets.entry("im0".into()).or_default().push(fp);
        let after = results(&gts, &dets);
        for t in (0..=32).map(|k| k as f64 / 32.0) {
            prop_assert!(at_threshold(&after, t).0 >= at_threshold(&before, t).0);
        }
    }

    #[test]
    fn an_extra_true_positive_never_raises_miss_rate((gts, mut dets) in scene(), s in 0u32..32) {
        let before = results(&gts, &dets);
        // the guaranteed box is scored and far from every other detection
        let tp = Detection { bbox: BoundingBox::from_corners(700.0, 0.0, 730.0, 100.0), score: s as f64 / 32.0 };
        let hit_already = dets["im0"].iter().any(|d| d.bbox == tp.bbox);
        prop_assume!(!hit_already);
        dets.get_mut("im0").unwrap().push(tp);
        let after = results(&gts, &dets);
        for t in (0..=32).map(|k| k as f64 / 32.0) {
            prop_assert!(at_threshold(&after, t).1 <= at_threshold(&before, t).1);
        }
        let at_score = at_threshold(&after, tp.score).1;
        prop_assert!(at_score < at_threshold(&before, tp.score).1 || at_score == 0.0);
    }
}

#[test]
fn empty_detection_set_is_a_single_point() {
    let gts = [GroundTruthBox::new("a", Label::Person, [0.0, 0.0, 30.0, 80.0], 0.0).unwrap()];
    let cfg = EvalConfig::new(Subset::Reasonable);
    let (e, i) = filter_groundtruth(gts.iter(), &cfg);
    let r = match_detections(&[], &e, &i, 0.5);
    let curve = miss_rate_fppi_curve(&[r]).unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!((curve[0].fppi, curve[0].miss_rate), (0.0, 1.0));
}

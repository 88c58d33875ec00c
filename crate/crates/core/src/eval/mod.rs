//! Caltech-style pedestrian evaluation: groundtruth filtering into the
//! Reasonable / Overall subsets, greedy detection matching with ignore
//! regions, the miss-rate vs FPPI curve and the log-average miss rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssd::{iou, BoundingBox, Detection};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
/// Miss rates are floored here before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Person,
    People,
    PersonUnsure,
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "person" => Ok(Label::Person),
            "people" => Ok(Label::People),
            "person?" => Ok(Label::PersonUnsure),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Person => "person",
            Label::People => "people",
            Label::PersonUnsure => "person?",
        })
    }
}

/// Annotated box in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub label: Label,
    pub occlusion: f64,
    /// Forces the box into the ignore set regardless of subset.
    pub ignore: bool,
}

impl GroundTruthBox {
    pub fn new(image_id: &str, label: Label, corners: [f64; 4], occlusion: f64) -> Result<Self> {
        let [x1, y1, x2, y2] = corners;
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::InvalidArgument(format!(
                "annotation box [{x1}, {y1}, {x2}, {y2}] is empty"
            )));
        }
        if !(0.0..=1.0).contains(&occlusion) {
            return Err(Error::InvalidArgument(format!("occlusion {occlusion} outside [0, 1]")));
        }
        Ok(GroundTruthBox {
            image_id: image_id.to_string(),
            x1,
            y1,
            x2,
            y2,
            label,
            occlusion,
            ignore: false,
        })
    }

    /// Full (unclipped) box height in pixels.
    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn bbox(&self) -> BoundingBox<f64> {
        BoundingBox::from_corners(self.x1, self.y1, self.x2, self.y2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Reasonable,
    Overall,
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "reasonable" => Ok(Subset::Reasonable),
            "overall" => Ok(Subset::Overall),
            other => Err(format!("unknown subset `{other}` (expected reasonable|overall)")),
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Reasonable => "reasonable",
            Subset::Overall => "overall",
        })
    }
}

/// The nine reference FPPI values `10^-2, 10^-1.75, ..., 10^0`.
pub fn reference_fppi() -> Vec<f64> {
    (0..9).map(|k| 10f64.powf(-2.0 + 0.25 * k as f64)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub subset: Subset,
    pub min_height: f64,
    /// Boxes must be strictly less occluded than this.
    pub max_occlusion: f64,
    pub iou_threshold: f64,
    pub fppi_points: Vec<f64>,
}

impl EvalConfig {
    pub fn new(subset: Subset) -> Self {
        let (min_height, max_occlusion) = match subset {
            Subset::Reasonable => (50.0, 0.35),
            Subset::Overall => (20.0, 0.80),
        };
        EvalConfig {
            subset,
            min_height,
            max_occlusion,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            fppi_points: reference_fppi(),
        }
    }

    pub fn with_iou(mut self, iou_threshold: f64) -> Self {
        self.iou_threshold = iou_threshold;
        self
    }
}

/// Splits annotations into boxes that are scored and regions that are
/// ignored. Only unforced `person` boxes meeting the height and occlusion
/// limits are scored.
pub fn filter_groundtruth<'a>(
    gts: impl IntoIterator<Item = &'a GroundTruthBox>,
    cfg: &EvalConfig,
) -> (Vec<BoundingBox<f64>>, Vec<BoundingBox<f64>>) {
    let mut evaluate = Vec::new();
    let mut ignore = Vec::new();
    for g in gts {
        let keep = !g.ignore
            && g.label == Label::Person
            && g.height() >= cfg.min_height
            && g.occlusion < cfg.max_occlusion;
        if keep {
            evaluate.push(g.bbox());
        } else {
            ignore.push(g.bbox());
        }
    }
    (evaluate, ignore)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetStatus {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Matching outcome for one image. Detections are listed in descending
/// score order.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub scores: Vec<f64>,
    pub status: Vec<DetStatus>,
    pub gt_hit: Vec<bool>,
}

/// Greedy matching in descending score order. A detection takes the
/// unmatched scored groundtruth it overlaps most (if the IoU reaches the
/// threshold); otherwise it is ignored when it overlaps any ignore region
/// that much, and is a false positive if not.
pub fn match_detections(
    dets: &[Detection<f64>],
    evaluate: &[BoundingBox<f64>],
    ignore: &[BoundingBox<f64>],
    iou_threshold: f64,
) -> ImageResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut gt_hit = vec![false; evaluate.len()];
    let mut scores = Vec::with_capacity(dets.len());
    let mut status = Vec::with_capacity(dets.len());
    for idx in order {
        let d = &dets[idx];
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in evaluate.iter().enumerate() {
            if gt_hit[g] {
                continue;
            }
            let v = iou(&d.bbox, gt);
            if v >= iou_threshold && best.is_none_or(|(b, _)| v > b) {
                best = Some((v, g));
            }
        }
        let s = if let Some((_, g)) = best {
            gt_hit[g] = true;
            DetStatus::TruePositive
        } else if ignore.iter().any(|r| iou(&d.bbox, r) >= iou_threshold) {
            DetStatus::Ignored
        } else {
            DetStatus::FalsePositive
        };
        scores.push(d.score);
        status.push(s);
    }
    ImageResult { scores, status, gt_hit }
}

/// One operating point of the detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    /// Detections scoring at least this are counted.
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

/// Sweeps the score threshold over every distinct detection score, from the
/// highest down. An empty detection set yields the single point
/// `(fppi 0, miss 1)`.
pub fn miss_rate_fppi_curve(results: &[ImageResult]) -> Result<Vec<CurvePoint>> {
    if results.is_empty() {
        return Err(Error::Empty("no images to evaluate".into()));
    }
    let total_gt: usize = results.iter().map(|r| r.gt_hit.len()).sum();
    if total_gt == 0 {
        return Err(Error::Empty("no groundtruth in the evaluated subset; miss rate undefined".into()));
    }
    let images = results.len() as f64;
    let mut all: Vec<(f64, DetStatus)> = results
        .iter()
        .flat_map(|r| r.scores.iter().copied().zip(r.status.iter().copied()))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    if all.is_empty() {
        return Ok(vec![CurvePoint {
            threshold: f64::INFINITY,
            fppi: 0.0,
            miss_rate: 1.0,
        }]);
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::new();
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        while k < all.len() && all[k].0 == t {
            match all[k].1 {
                DetStatus::TruePositive => tp += 1,
                DetStatus::FalsePositive => fp += 1,
                DetStatus::Ignored => {}
            }
            k += 1;
        }
        curve.push(CurvePoint {
            threshold: t,
            fppi: fp as f64 / images,
            miss_rate: 1.0 - tp as f64 / total_gt as f64,
        });
    }
    Ok(curve)
}

/// Miss rate of the curve at one FPPI value: the best miss rate among points
/// with `fppi <= at`, or the lowest-FPPI point's miss rate when none
/// qualifies.
pub fn miss_rate_at(curve: &[CurvePoint], at: f64) -> f64 {
    let within = curve
        .iter()
        .filter(|p| p.fppi <= at)
        .map(|p| p.miss_rate)
        .reduce(f64::min);
    within.unwrap_or_else(|| {
        curve
            .iter()
            .min_by(|a, b| a.fppi.total_cmp(&b.fppi).then(b.miss_rate.total_cmp(&a.miss_rate)))
            .map(|p| p.miss_rate)
            .unwrap_or(1.0)
    })
}

/// Geometric mean of the miss rate at the given FPPI points, in percent.
pub fn log_average_miss_rate_at(curve: &[CurvePoint], points: &[f64]) -> f64 {
    if points.is_empty() {
        return 100.0;
    }
    let mean_log = points
        .iter()
        .map(|&r| miss_rate_at(curve, r).max(MISS_RATE_FLOOR).ln())
        .sum::<f64>()
        / points.len() as f64;
    100.0 * mean_log.exp()
}

/// Log-average miss rate over the nine reference FPPI points, in percent.
pub fn log_average_miss_rate(curve: &[CurvePoint]) -> f64 {
    log_average_miss_rate_at(curve, &reference_fppi())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subset: Subset,
    pub images: usize,
    pub evaluated_gt: usize,
    pub curve: Vec<CurvePoint>,
    /// Percent.
    pub lamr: f64,
}

/// Full evaluation over every image that has annotations or detections.
/// Boxes are in pixel coordinates.
pub fn evaluate(
    detections: &BTreeMap<String, Vec<Detection<f64>>>,
    annotations: &[GroundTruthBox],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let mut by_image: BTreeMap<&str, Vec<&GroundTruthBox>> = BTreeMap::new();
    for g in annotations {
        by_image.entry(g.image_id.as_str()).or_default().push(g);
    }
    let ids: BTreeSet<&str> = by_image.keys().copied().chain(detections.keys().map(String::as_str)).collect();
    let results: Vec<ImageResult> = ids
        .iter()
        .map(|id| {
            let gts = by_image.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let (evaluate, ignore) = filter_groundtruth(gts.iter().copied(), cfg);
            let dets = detections.get(*id).map(Vec::as_slice).unwrap_or(&[]);
            match_detections(dets, &evaluate, &ignore, cfg.iou_threshold)
        })
        .collect();
    let curve = miss_rate_fppi_curve(&results)?;
    let lamr = log_average_miss_rate_at(&curve, &cfg.fppi_points);
    Ok(EvalReport {
        subset: cfg.subset,
        images: results.len(),
        evaluated_gt: results.iter().map(|r| r.gt_hit.len()).sum(),
        curve,
        lamr,
    })
}

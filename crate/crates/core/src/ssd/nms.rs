use super::bbox::{iou, BoundingBox};
use crate::scalar::Scalar;

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const DEFAULT_TOP_K: usize = 200;

/// A scored pedestrian box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BoundingBox<T>,
    pub score: T,
}

/// Greedy non-maximum suppression. Keeps the highest-scoring detection
/// (earlier index on ties), drops everything overlapping it by more than
/// `iou_threshold`, and repeats until `top_k` are kept. Output is sorted by
/// score, descending.
pub fn nms<T: Scalar>(dets: &[Detection<T>], iou_threshold: T, top_k: usize) -> Vec<Detection<T>> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection<T>> = Vec::new();
    for idx in order {
        if kept.len() >= top_k {
            break;
        }
        let d = dets[idx];
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

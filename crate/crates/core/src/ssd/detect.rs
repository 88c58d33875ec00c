//! Turning head feature maps into scored pedestrian boxes.

use std::collections::BTreeMap;

use super::bbox::BoundingBox;
use super::decode::decode_boxes;
use super::nms::{nms, Detection, DEFAULT_NMS_THRESHOLD, DEFAULT_TOP_K};
use super::priors::{generate_priors, PriorConfig};
use crate::error::{Error, Result};
use crate::nn::{forward, softmax, Mode, Model};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Tensor};

/// Channels per prior in a head tap: `tx, ty, tw, th`, background logit,
/// pedestrian logit.
pub const HEAD_CHANNELS_PER_PRIOR: usize = 6;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            score_threshold: DEFAULT_SCORE_THRESHOLD,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            top_k: DEFAULT_TOP_K,
        }
    }
}

/// Per-prior offsets and pedestrian probabilities read from the tap outputs,
/// in prior order.
pub fn head_predictions<T: Scalar>(
    taps: &BTreeMap<String, Activation<T>>,
    cfg: &PriorConfig,
) -> Result<(Vec<[T; 4]>, Vec<T>)> {
    let mut loc = Vec::with_capacity(cfg.prior_count());
    let mut scores = Vec::with_capacity(cfg.prior_count());
    for tap in &cfg.taps {
        let act = taps.get(&tap.name).ok_or_else(|| Error::UnknownTap(tap.name.clone()))?;
        let t = act.to_real();
        let s = t.shape();
        let groups = tap.priors_per_cell();
        if s.n != 1 || s.c != groups * HEAD_CHANNELS_PER_PRIOR || s.h != tap.grid_h || s.w != tap.grid_w {
            return Err(Error::shape(
                format!("tap {}", tap.name),
                format!(
                    "got {}, expected 1x{}x{}x{} ({} priors per cell x {} channels)",
                    s,
                    groups * HEAD_CHANNELS_PER_PRIOR,
                    tap.grid_h,
                    tap.grid_w,
                    groups,
                    HEAD_CHANNELS_PER_PRIOR
                ),
            ));
        }
        for i in 0..tap.grid_h {
            for j in 0..tap.grid_w {
                for g in 0..groups {
                    let ch = |k: usize| *t.at(0, g * HEAD_CHANNELS_PER_PRIOR + k, i, j);
                    loc.push([ch(0), ch(1), ch(2), ch(3)]);
                    scores.push(softmax(&[ch(4), ch(5)])[1]);
                }
            }
        }
    }
    Ok((loc, scores))
}

/// Softmax, score threshold, decode and NMS. Detections come back sorted by
/// score, descending, in normalized coordinates.
pub fn detect<T: Scalar>(
    taps: &BTreeMap<String, Activation<T>>,
    cfg: &PriorConfig,
    params: &DetectParams,
) -> Result<Vec<Detection<T>>> {
    cfg.validate()?;
    let (loc, scores) = head_predictions(taps, cfg)?;
    let priors = generate_priors::<T>(cfg);
    let threshold = T::of(params.score_threshold);
    let keep: Vec<usize> = (0..priors.len()).filter(|&k| scores[k] >= threshold).collect();
    let kept_loc: Vec<[T; 4]> = keep.iter().map(|&k| loc[k]).collect();
    let kept_priors: Vec<BoundingBox<T>> = keep.iter().map(|&k| priors[k]).collect();
    let boxes = decode_boxes(&kept_loc, &kept_priors, cfg.variances)?;
    let candidates: Vec<Detection<T>> = boxes
        .into_iter()
        .zip(keep)
        .filter(|(b, _)| b.area() > T::zero())
        .map(|(bbox, k)| Detection { bbox, score: scores[k] })
        .collect();
    Ok(nms(&candidates, T::of(params.nms_threshold), params.top_k))
}

/// Runs the model on one image and returns detections in pixel coordinates
/// of the head's configured image size.
pub fn run_detector<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    mode: Mode,
    params: &DetectParams,
) -> Result<Vec<Detection<f64>>> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Manifest("model has no detection head".into()))?;
    let out = forward(model, image, mode)?;
    let (sx, sy) = (head.image_width as f64, head.image_height as f64);
    Ok(detect(&out.taps, head, params)?
        .into_iter()
        .map(|d| Detection {
            bbox: d.bbox.cast::<f64>().scaled(sx, sy),
            score: d.score.as_f64(),
        })
        .collect())
}

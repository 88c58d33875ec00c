//! Single-shot detection head: default boxes, offset decoding, matching
//! and non-maximum suppression.

pub mod bbox;
pub mod decode;
pub mod detect;
pub mod matching;
pub mod nms;
pub mod priors;

pub use bbox::{iou, BoundingBox};
pub use decode::decode_boxes;
pub use detect::{detect, head_predictions, run_detector, DetectParams, DEFAULT_SCORE_THRESHOLD, HEAD_CHANNELS_PER_PRIOR};
pub use matching::{match_priors, DEFAULT_MATCH_THRESHOLD};
pub use nms::{nms, Detection, DEFAULT_NMS_THRESHOLD, DEFAULT_TOP_K};
pub use priors::{
    equally_spaced, generate_priors, PriorConfig, TapPriors, DEFAULT_VARIANCES, FIRST_TAP_SCALES,
    LATER_TAP_SCALE_RANGE, PEDESTRIAN_ASPECT_RATIO,
};

//! Prior-to-groundtruth assignment.

use super::bbox::{iou, BoundingBox};
use crate::scalar::Scalar;

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Assigns priors to groundtruth boxes.
///
/// 1. Bipartite step: repeatedly take the highest-IoU (groundtruth, prior)
///    pair among unassigned groundtruths and unassigned priors, ignoring the
///    threshold. Ties go to the lower prior index, then the lower
///    groundtruth index. Every groundtruth gets a prior while priors remain.
/// 2. Every still-unassigned prior whose best IoU reaches `threshold` is
///    assigned to that best groundtruth (ties to the lower index).
///
/// Returns one entry per prior.
pub fn match_priors<T: Scalar>(priors: &[BoundingBox<T>], gts: &[BoundingBox<T>], threshold: T) -> Vec<Option<usize>> {
    let mut assignment = vec![None; priors.len()];
    if priors.is_empty() || gts.is_empty() {
        return assignment;
    }
    let overlaps: Vec<Vec<T>> = gts.iter().map(|g| priors.iter().map(|p| iou(g, p)).collect()).collect();

    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len().min(priors.len()) {
        let mut best: Option<(T, usize, usize)> = None;
        for (p, slot) in assignment.iter().enumerate() {
            if slot.is_some() {
                continue;
            }
            for (g, row) in overlaps.iter().enumerate() {
                if gt_done[g] {
                    continue;
                }
                // strict comparison keeps the earliest (prior, gt) on ties
                if best.is_none_or(|(v, _, _)| row[p] > v) {
                    best = Some((row[p], p, g));
                }
            }
        }
        let Some((_, p, g)) = best else { break };
        assignment[p] = Some(g);
        gt_done[g] = true;
    }

    for (p, slot) in assignment.iter_mut().enumerate() {
        if slot.is_some() {
            continue;
        }
        let mut best: Option<(T, usize)> = None;
        for (g, row) in overlaps.iter().enumerate() {
            if best.is_none_or(|(v, _)| row[p] > v) {
                best = Some((row[p], g));
            }
        }
        if let Some((v, g)) = best {
            if v >= threshold {
                *slot = Some(g);
            }
        }
    }
    assignment
}

use super::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Applies regressed offsets `(tx, ty, tw, th)` to their priors and clips
/// the result to the unit square.
pub fn decode_boxes<T: Scalar>(loc: &[[T; 4]], priors: &[BoundingBox<T>], variances: [f64; 2]) -> Result<Vec<BoundingBox<T>>> {
    if loc.len() != priors.len() {
        return Err(Error::shape(
            "decode",
            format!("{} offsets for {} priors", loc.len(), priors.len()),
        ));
    }
    let (vc, vs) = (T::of(variances[0]), T::of(variances[1]));
    loc.iter()
        .zip(priors)
        .enumerate()
        .map(|(k, (t, p))| {
            if !t.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("offsets of prior {k}")));
            }
            let b = BoundingBox::new(
                p.cx + t[0] * vc * p.w,
                p.cy + t[1] * vc * p.h,
                p.w * (t[2] * vs).exp(),
                p.h * (t[3] * vs).exp(),
            );
            if !(b.w.is_finite() && b.h.is_finite()) {
                return Err(Error::NonFinite(format!("decoded size of prior {k}")));
            }
            Ok(b.clipped())
        })
        .collect()
}

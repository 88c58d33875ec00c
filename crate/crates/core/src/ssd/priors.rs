//! Default (prior) box generation.

use serde::{Deserialize, Serialize};

use super::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Pedestrian width/height ratio used for every default box.
pub const PEDESTRIAN_ASPECT_RATIO: f64 = 0.41;
/// Small-pedestrian scales on the first (highest-resolution) tap.
pub const FIRST_TAP_SCALES: [f64; 3] = [0.04, 0.07, 0.085];
/// Scale of the second tap and of the last tap; taps in between are
/// equally spaced.
pub const LATER_TAP_SCALE_RANGE: (f64, f64) = (0.1, 0.9);
pub const DEFAULT_VARIANCES: [f64; 2] = [0.1, 0.2];

/// Default boxes attached to one feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapPriors {
    pub name: String,
    pub grid_h: usize,
    pub grid_w: usize,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl TapPriors {
    pub fn priors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w * self.priors_per_cell()
    }
}

fn default_variances() -> [f64; 2] {
    DEFAULT_VARIANCES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Center and size variances used when decoding offsets.
    #[serde(default = "default_variances")]
    pub variances: [f64; 2],
    pub taps: Vec<TapPriors>,
}

/// `count` values equally spaced over `[lo, hi]` (just `lo` when `count == 1`).
pub fn equally_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64)
            .collect(),
    }
}

impl PriorConfig {
    /// Pedestrian configuration: one aspect ratio of 0.41 everywhere, three
    /// small scales on the first tap, and one scale per later tap equally
    /// spaced from 0.1 to 0.9. `taps` lists `(name, grid_h, grid_w)` from the
    /// highest-resolution feature map down.
    pub fn pedestrian(image_width: usize, image_height: usize, taps: &[(&str, usize, usize)]) -> Result<Self> {
        let Some(((first, fh, fw), later)) = taps.split_first() else {
            return Err(Error::InvalidArgument("prior config needs at least one tap".into()));
        };
        let (lo, hi) = LATER_TAP_SCALE_RANGE;
        let mut out = vec![TapPriors {
            name: first.to_string(),
            grid_h: *fh,
            grid_w: *fw,
            scales: FIRST_TAP_SCALES.to_vec(),
            aspect_ratios: vec![PEDESTRIAN_ASPECT_RATIO],
        }];
        for ((name, gh, gw), scale) in later.iter().zip(equally_spaced(lo, hi, later.len())) {
            out.push(TapPriors {
                name: name.to_string(),
                grid_h: *gh,
                grid_w: *gw,
                scales: vec![scale],
                aspect_ratios: vec![PEDESTRIAN_ASPECT_RATIO],
            });
        }
        let cfg = PriorConfig {
            image_width,
            image_height,
            variances: DEFAULT_VARIANCES,
            taps: out,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.taps.is_empty() {
            return bad("prior config needs at least one tap".into());
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be positive".into());
        }
        if !self.variances.iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad(format!("variances must be positive, got {:?}", self.variances));
        }
        for t in &self.taps {
            if t.grid_h == 0 || t.grid_w == 0 {
                return bad(format!("tap {}: empty grid", t.name));
            }
            if t.scales.is_empty() || t.aspect_ratios.is_empty() {
                return bad(format!("tap {}: needs at least one scale and aspect ratio", t.name));
            }
            if let Some(s) = t.scales.iter().find(|s| !(**s > 0.0 && **s <= 1.0)) {
                return bad(format!("tap {}: scale {s} outside (0, 1]", t.name));
            }
            if let Some(a) = t.aspect_ratios.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
                return bad(format!("tap {}: aspect ratio {a} must be positive", t.name));
            }
        }
        Ok(())
    }

    pub fn prior_count(&self) -> usize {
        self.taps.iter().map(TapPriors::count).sum()
    }
}

/// All default boxes, ordered tap-major, then row-major over the grid, then
/// by scale, then by aspect ratio. Boxes are returned unclipped.
pub fn generate_priors<T: Scalar>(cfg: &PriorConfig) -> Vec<BoundingBox<T>> {
    let mut out = Vec::with_capacity(cfg.prior_count());
    for tap in &cfg.taps {
        for i in 0..tap.grid_h {
            let cy = (i as f64 + 0.5) / tap.grid_h as f64;
            for j in 0..tap.grid_w {
                let cx = (j as f64 + 0.5) / tap.grid_w as f64;
                for &s in &tap.scales {
                    for &ar in &tap.aspect_ratios {
                        let r = ar.sqrt();
                        out.push(BoundingBox::new(T::of(cx), T::of(cy), T::of(s * r), T::of(s / r)));
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(grid: usize, scales: Vec<f64>, ratios: Vec<f64>) -> PriorConfig {
        PriorConfig {
            image_width: 100,
            image_height: 100,
            variances: DEFAULT_VARIANCES,
            taps: vec![TapPriors {
                name: "t".into(),
                grid_h: grid,
                grid_w: grid,
                scales,
                aspect_ratios: ratios,
            }],
        }
    }

    #[test]
    fn centered_square() {
        let p = generate_priors::<f64>(&single(1, vec![0.5], vec![1.0]));
        assert_eq!(p, vec![BoundingBox::new(0.5, 0.5, 0.5, 0.5)]);
    }

    #[test]
    fn pedestrian_scales_on_two_by_two() {
        let p = generate_priors::<f64>(&single(2, FIRST_TAP_SCALES.to_vec(), vec![0.41]));
        assert_eq!(p.len(), 2 * 2 * 3);
        for b in &p {
            assert!((b.w / b.h - 0.41).abs() < 1e-9);
        }
        // cell (0,1), scale-major order
        assert_eq!((p[3].cx, p[3].cy), (0.75, 0.25));
        assert!((p[4].h - 0.07 / 0.41f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn later_taps_equally_spaced() {
        let s = equally_spaced(0.1, 0.9, 5);
        assert_eq!(s.len(), 5);
        for w in s.windows(2) {
            assert!((w[1] - w[0] - 0.2).abs() < 1e-12);
        }
        assert_eq!(s[0], 0.1);
        assert!((s[4] - 0.9).abs() < 1e-12);

        let taps = [("conv4_3", 38, 38), ("fc7", 19, 19), ("conv6_2", 10, 10), ("conv7_2", 5, 5), ("conv8_2", 3, 3), ("conv9_2", 1, 1)];
        let cfg = PriorConfig::pedestrian(300, 300, &taps).unwrap();
        assert_eq!(cfg.taps[0].scales, FIRST_TAP_SCALES.to_vec());
        assert_eq!(cfg.taps[1].scales, vec![0.1]);
        assert!((cfg.taps[5].scales[0] - 0.9).abs() < 1e-12);
        assert!(PriorConfig::pedestrian(300, 300, &[]).is_err());
    }

    #[test]
    fn validation() {
        assert!(single(2, vec![0.0], vec![1.0]).validate().is_err());
        assert!(single(2, vec![1.2], vec![1.0]).validate().is_err());
        assert!(single(2, vec![0.5], vec![-1.0]).validate().is_err());
        assert!(single(0, vec![0.5], vec![1.0]).validate().is_err());
        assert!(single(1, vec![1.0], vec![2.0]).validate().is_ok());
    }

    proptest! {
        #[test]
        fn count_matches_direct_loop(
            grids in proptest::collection::vec((1usize..6, 1usize..6, 1usize..4, 1usize..4), 1..4)
        ) {
            let cfg = PriorConfig {
                image_width: 64,
                image_height: 48,
                variances: DEFAULT_VARIANCES,
                taps: grids.iter().enumerate().map(|(k, &(h, w, ns, nr))| TapPriors {
                    name: format!("t{k}"),
                    grid_h: h,
                    grid_w: w,
                    scales: (0..ns).map(|i| 0.1 + 0.2 * i as f64).collect(),
                    aspect_ratios: (0..nr).map(|i| 0.41 + i as f64).collect(),
                }).collect(),
            };
            let mut direct = 0;
            for &(h, w, ns, nr) in &grids {
                for _ in 0..h * w * ns * nr {
                    direct += 1;
                }
            }
            let priors = generate_priors::<f64>(&cfg);
            prop_assert_eq!(priors.len(), direct);
            prop_assert_eq!(cfg.prior_count(), direct);
            for p in priors {
                let [x1, y1, x2, y2] = p.clipped().corners();
                prop_assert!(x1 >= -1e-12 && y1 >= -1e-12 && x2 <= 1.0 + 1e-12 && y2 <= 1.0 + 1e-12);
            }
        }
    }
}

//! Seeded synthetic detector and dataset.
//!
//! Images are 128x128 grey frames of low-level noise with bright upright
//! rectangles ("pedestrians", 32x80 or 16x40 pixels) and bright wide or
//! square distractors. The detector is hand-built:
//!
//! 1. a 4x4 stride-4 average (`conv1`) to a 32x32 map, then ReLU,
//! 2. a 24x24 stride-2 head convolution onto a 16x16 grid with two prior
//!    groups (tall and short). The pedestrian logit of each group is a
//!    centre-surround matched filter for its box size, so it fires where a
//!    rectangle of that size is centred on the cell. Box offsets are zero,
//!    so decoded boxes are the priors themselves.
//!
//! Pedestrian centres sit on grid-cell centres, so every planted box has a
//! prior with IoU close to 1.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{GroundTruthBox, Label};
use crate::io::{atomic_write, image, manifest, text};
use crate::nn::{ConvSpec, Layer, Model};
use crate::scalar::Scalar;
use crate::ssd::{PriorConfig, TapPriors, DEFAULT_VARIANCES, HEAD_CHANNELS_PER_PRIOR, PEDESTRIAN_ASPECT_RATIO};
use crate::tensor::Tensor;
use crate::tile::PlatformBudget;

pub const IMAGE_SIZE: usize = 128;
pub const HEAD_TAP: &str = "head";
const POOL: usize = 4;
const FEATURE: usize = IMAGE_SIZE / POOL;
const GRID: usize = 16;
const HEAD_KERNEL: usize = 24;
const HEAD_STRIDE: usize = 2;
const HEAD_PADDING: usize = 11;
/// Width of the surround band, in feature cells.
const RING: usize = 2;
/// Matched-filter gain and decision offset, split between the background
/// and pedestrian logits.
const GAIN: f64 = 5.0;
const OFFSET: f64 = 2.0;
/// Weight of the surround mean relative to the centre mean.
const SURROUND: f64 = 2.0;

/// Pedestrian box sizes `(height, width)` in feature cells; one prior group
/// each.
pub const BOX_CELLS: [(usize, usize); 2] = [(20, 8), (10, 4)];
/// Distractor sizes `(height, width)` in feature cells.
const DISTRACTOR_CELLS: [(usize, usize); 2] = [(5, 12), (8, 8)];

fn prior_scale(h_cells: usize) -> f64 {
    h_cells as f64 / FEATURE as f64 * PEDESTRIAN_ASPECT_RATIO.sqrt()
}

pub fn prior_config() -> PriorConfig {
    PriorConfig {
        image_width: IMAGE_SIZE,
        image_height: IMAGE_SIZE,
        variances: DEFAULT_VARIANCES,
        taps: vec![TapPriors {
            name: HEAD_TAP.to_string(),
            grid_h: GRID,
            grid_w: GRID,
            scales: BOX_CELLS.iter().map(|&(h, _)| prior_scale(h)).collect(),
            aspect_ratios: vec![PEDESTRIAN_ASPECT_RATIO],
        }],
    }
}

/// Kernel-relative extent `[lo, hi)` of a box of `size` cells centred on the
/// output cell.
fn box_span(size: usize) -> (usize, usize) {
    let centre = HEAD_KERNEL / 2;
    (centre - size / 2, centre + size / 2)
}

pub fn fixture_model<T: Scalar>() -> Model<T> {
    let pool = ConvSpec::new(1, 1, POOL, POOL, 0);
    let groups = BOX_CELLS.len();
    let head = ConvSpec::new(groups * HEAD_CHANNELS_PER_PRIOR, 1, HEAD_KERNEL, HEAD_STRIDE, HEAD_PADDING);
    let mut weights = Tensor::<T>::zeros(head.weight_shape());
    let mut bias = vec![T::zero(); head.out_channels];
    let k = HEAD_KERNEL;
    for (g, &(bh, bw)) in BOX_CELLS.iter().enumerate() {
        let (y0, y1) = box_span(bh);
        let (x0, x1) = box_span(bw);
        let inside = |i: usize, j: usize| (y0..y1).contains(&i) && (x0..x1).contains(&j);
        let ring = |i: usize, j: usize| {
            !inside(i, j) && (y0 - RING..y1 + RING).contains(&i) && (x0 - RING..x1 + RING).contains(&j)
        };
        let area = (bh * bw) as f64;
        let ring_area = ((bh + 2 * RING) * (bw + 2 * RING)) as f64 - area;
        let ch = g * HEAD_CHANNELS_PER_PRIOR;
        for i in 0..k {
            for j in 0..k {
                let v = if inside(i, j) {
                    GAIN / area
                } else if ring(i, j) {
                    -GAIN * SURROUND / ring_area
                } else {
                    0.0
                };
                let idx = head.weight_shape().index(ch + 5, 0, i, j);
                weights.data_mut()[idx] = T::of(v);
            }
        }
        bias[ch + 4] = T::of(OFFSET / 2.0);
        bias[ch + 5] = T::of(-OFFSET / 2.0);
    }
    Model::new([1, 1, IMAGE_SIZE, IMAGE_SIZE])
        .push(Layer::conv("conv1", pool, Tensor::filled(pool.weight_shape(), T::of(1.0 / (POOL * POOL) as f64)), vec![T::zero()]).expect("pool shape"))
        .push(Layer::relu("relu1"))
        .push(Layer::conv("head", head, weights, bias).expect("head shape").tapped(HEAD_TAP))
        .with_head(prior_config())
}

/// A platform description sized for the fixture model.
pub fn example_platform() -> PlatformBudget {
    PlatformBudget {
        on_chip_buffer_bytes: 64 * 1024,
        mac_units: 256,
        clock_hz: 200e6,
        dram_bandwidth_bytes_per_s: 4.0e9,
        element_bytes: 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureImage<T> {
    pub id: String,
    /// Binary PGM encoding; `tensor` is exactly its decoded form.
    pub pgm: Vec<u8>,
    pub tensor: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Vec<FixtureImage<T>>,
    pub annotations: Vec<GroundTruthBox>,
}

impl<T: Scalar> Dataset<T> {
    pub fn pairs(&self) -> Vec<(String, Tensor<T>)> {
        self.images.iter().map(|i| (i.id.clone(), i.tensor.clone())).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.images.iter().map(|i| i.tensor.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x: usize,
    y: usize,
    w: usize,
    h: usize,
}

impl Rect {
    fn overlaps_with_margin(&self, o: &Rect, margin: usize) -> bool {
        self.x < o.x + o.w + margin && o.x < self.x + self.w + margin && self.y < o.y + o.h + margin && o.y < self.y + self.h + margin
    }
}

/// Pixel rectangle of a pedestrian of `cells` centred on grid cell `(r, c)`.
fn pedestrian_rect((bh, bw): (usize, usize), r: usize, c: usize) -> Option<Rect> {
    let centre = |g: usize| POOL * (HEAD_STRIDE * g + 1);
    let (h, w) = (bh * POOL, bw * POOL);
    Some(Rect {
        x: centre(c).checked_sub(w / 2)?,
        y: centre(r).checked_sub(h / 2)?,
        w,
        h,
    })
}

fn fits(r: &Rect) -> bool {
    r.x + r.w <= IMAGE_SIZE && r.y + r.h <= IMAGE_SIZE
}

fn place(rng: &mut ChaCha8Rng, placed: &[Rect], candidate: impl Fn(&mut ChaCha8Rng) -> Option<Rect>) -> Option<Rect> {
    (0..50).find_map(|_| {
        let r = candidate(rng)?;
        (fits(&r) && !placed.iter().any(|p| p.overlaps_with_margin(&r, 8))).then_some(r)
    })
}

fn render(rng: &mut ChaCha8Rng, pixels: &mut [f64], r: &Rect, contrast: f64, visible_rows: usize) {
    for y in r.y..r.y + visible_rows {
        for x in r.x..r.x + r.w {
            pixels[y * IMAGE_SIZE + x] = (rng.gen_range(0.0..0.2) + contrast).min(1.0);
        }
    }
}

/// Generates `count` images with their annotations. The same seed always
/// yields the same dataset.
pub fn generate_dataset<T: Scalar>(seed: u64, count: usize) -> Dataset<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    for n in 0..count {
        let id = format!("img{n:04}");
        let mut pixels: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE).map(|_| rng.gen_range(0.0..0.2)).collect();
        let mut placed: Vec<Rect> = Vec::new();

        for _ in 0..rng.gen_range(1..=3) {
            let size = BOX_CELLS[usize::from(rng.gen_bool(0.4))];
            let Some(rect) = place(&mut rng, &placed, |rng| {
                pedestrian_rect(size, rng.gen_range(0..GRID), rng.gen_range(0..GRID))
            }) else {
                continue;
            };
            placed.push(rect);
            let contrast = rng.gen_range(0.35..0.7);
            let occlusion = *[0.0, 0.0, 0.0, 0.2, 0.5].get(rng.gen_range(0..5)).unwrap_or(&0.0);
            let visible = rect.h - (rect.h as f64 * occlusion).round() as usize;
            render(&mut rng, &mut pixels, &rect, contrast, visible);
            let label = if rng.gen_bool(0.05) { Label::PersonUnsure } else { Label::Person };
            let corners = [rect.x, rect.y, rect.x + rect.w, rect.y + rect.h].map(|v| v as f64);
            annotations.push(GroundTruthBox::new(&id, label, corners, occlusion).expect("valid planted box"));
        }

        for _ in 0..rng.gen_range(0..=2) {
            let (dh, dw) = DISTRACTOR_CELLS[rng.gen_range(0..DISTRACTOR_CELLS.len())];
            let (h, w) = (dh * POOL, dw * POOL);
            let Some(rect) = place(&mut rng, &placed, |rng| {
                Some(Rect {
                    x: rng.gen_range(0..=IMAGE_SIZE - w),
                    y: rng.gen_range(0..=IMAGE_SIZE - h),
                    w,
                    h,
                })
            }) else {
                continue;
            };
            placed.push(rect);
            let contrast = rng.gen_range(0.15..0.7);
            render(&mut rng, &mut pixels, &rect, contrast, rect.h);
        }

        let grey = Tensor::new([1, 1, IMAGE_SIZE, IMAGE_SIZE], pixels).expect("image shape");
        let pgm = image::encode_pnm(&grey).expect("grey image");
        let tensor = image::decode_pnm(&pgm, &id).expect("round trip");
        images.push(FixtureImage { id, pgm, tensor });
    }
    Dataset { images, annotations }
}

/// Seed offset for the calibration images, so they never coincide with the
/// evaluation images.
pub const CALIBRATION_SEED_OFFSET: u64 = 0x9E37_79B9_7F4A_7C15;

/// Writes the fixture to `dir`:
///
/// ```text
/// model/model.toml (+ blobs)
/// images/<id>.pgm
/// calibration/<id>.pgm
/// annotations.txt
/// platform.toml
/// ```
pub fn write_fixture(dir: &Path, seed: u64, count: usize) -> Result<()> {
    let model = fixture_model::<f32>();
    let test = generate_dataset::<f32>(seed, count);
    let calib = generate_dataset::<f32>(seed.wrapping_add(CALIBRATION_SEED_OFFSET), count);
    for sub in ["model", "images", "calibration"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| crate::error::Error::io(dir.join(sub), e))?;
    }
    manifest::save_model(&model, &dir.join("model").join("model.toml"))?;
    for (sub, set) in [("images", &test), ("calibration", &calib)] {
        for img in &set.images {
            atomic_write(&dir.join(sub).join(format!("{}.pgm", img.id)), &img.pgm)?;
        }
    }
    atomic_write(&dir.join("annotations.txt"), text::format_annotations(&test.annotations).as_bytes())?;
    atomic_write(&dir.join("platform.toml"), text::format_platform(&example_platform()).as_bytes())?;
    Ok(())
}

//! Label-safe geometric augmentation of single-cell records.
//!
//! Every op transforms the image and its ground-truth mask through the same
//! geometry, keeps the class label, and preserves image dimensions. Derived
//! records are sampled in a balanced round-robin over the source records, so
//! growing a set to an exact multiple multiplies every label frequency by
//! the same factor.

use super::CellRecord;
use crate::imgproc::{resize_bilinear, BinaryMask, RasterImage};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugmentOp {
    FlipH,
    FlipV,
    /// Quarter-turn clockwise; only applied to square images.
    Rot90,
    Rot180,
    /// Quarter-turn counterclockwise; only applied to square images.
    Rot270,
    /// Rotation by an angle drawn uniformly from [-max_degrees, max_degrees],
    /// bilinear for the image, nearest for the mask, edges clamped.
    RotSmall { max_degrees: f64 },
    /// Random axis-aligned crop of `fraction` of each side, resized back to
    /// the original dimensions.
    Crop { fraction: f64 },
}

/// Targets and op pool for growing train and val sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub target_train: usize,
    pub target_val: usize,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            target_train: 12000,
            target_val: 3000,
            ops: vec![
                AugmentOp::FlipH,
                AugmentOp::FlipV,
                AugmentOp::Rot90,
                AugmentOp::Rot180,
                AugmentOp::Rot270,
                AugmentOp::RotSmall { max_degrees: 15.0 },
                AugmentOp::Crop { fraction: 0.9 },
            ],
        }
    }
}

fn flip_h_image(img: &RasterImage) -> RasterImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(x, y, c, img.get(img.width - 1 - x, y, c));
            }
        }
    }
    out
}

fn flip_v_image(img: &RasterImage) -> RasterImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(x, y, c, img.get(x, img.height - 1 - y, c));
            }
        }
    }
    out
}

fn map_mask(mask: &BinaryMask, f: impl Fn(usize, usize) -> (usize, usize)) -> BinaryMask {
    let mut out = BinaryMask::new(mask.width, mask.height);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let (sx, sy) = f(x, y);
            out.set(x, y, mask.get(sx, sy));
        }
    }
    out
}

fn rot90_image(img: &RasterImage) -> RasterImage {
    debug_assert_eq!(img.width, img.height);
    let n = img.width;
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            for c in 0..img.channels {
                out.set(x, y, c, img.get(y, n - 1 - x, c));
            }
        }
    }
    out
}

fn rot270_image(img: &RasterImage) -> RasterImage {
    debug_assert_eq!(img.width, img.height);
    let n = img.width;
    let mut out = img.clone();
    for y in 0..n {
        for x in 0..n {
            for c in 0..img.channels {
                out.set(x, y, c, img.get(n - 1 - y, x, c));
            }
        }
    }
    out
}

fn bilinear_sample(img: &RasterImage, fx: f64, fy: f64, c: usize) -> u8 {
    let fx = fx.clamp(0.0, (img.width - 1) as f64);
    let fy = fy.clamp(0.0, (img.height - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let v00 = img.get(x0, y0, c) as f64;
    let v10 = img.get(x1, y0, c) as f64;
    let v01 = img.get(x0, y1, c) as f64;
    let v11 = img.get(x1, y1, c) as f64;
    let v = v00 * (1.0 - tx) * (1.0 - ty)
        + v10 * tx * (1.0 - ty)
        + v01 * (1.0 - tx) * ty
        + v11 * tx * ty;
    v.round().clamp(0.0, 255.0) as u8
}

fn rotate_small(
    img: &RasterImage,
    mask: &BinaryMask,
    degrees: f64,
) -> (RasterImage, BinaryMask) {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cx = (img.width - 1) as f64 / 2.0;
    let cy = (img.height - 1) as f64 / 2.0;
    let mut out_img = img.clone();
    let mut out_mask = mask.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            for c in 0..img.channels {
                out_img.set(x, y, c, bilinear_sample(img, sx, sy, c));
            }
            let nx = (sx.round().clamp(0.0, (img.width - 1) as f64)) as usize;
            let ny = (sy.round().clamp(0.0, (img.height - 1) as f64)) as usize;
            out_mask.set(x, y, mask.get(nx, ny));
        }
    }
    (out_img, out_mask)
}

fn resize_mask_nearest(mask: &BinaryMask, new_w: usize, new_h: usize) -> BinaryMask {
    let mut out = BinaryMask::new(new_w, new_h);
    for y in 0..new_h {
        for x in 0..new_w {
            let sx = (((x as f64 + 0.5) * mask.width as f64 / new_w as f64 - 0.5)
                .round()
                .clamp(0.0, (mask.width - 1) as f64)) as usize;
            let sy = (((y as f64 + 0.5) * mask.height as f64 / new_h as f64 - 0.5)
                .round()
                .clamp(0.0, (mask.height - 1) as f64)) as usize;
            out.set(x, y, mask.get(sx, sy));
        }
    }
    out
}

fn crop_resize(
    img: &RasterImage,
    mask: &BinaryMask,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (RasterImage, BinaryMask) {
    let cw = ((img.width as f64 * fraction).round() as usize).clamp(1, img.width);
    let ch = ((img.height as f64 * fraction).round() as usize).clamp(1, img.height);
    let ox = rng.gen_range(0..=img.width - cw);
    let oy = rng.gen_range(0..=img.height - ch);
    let mut crop_img = RasterImage::new(cw, ch, img.channels);
    let mut crop_mask = BinaryMask::new(cw, ch);
    for y in 0..ch {
        for x in 0..cw {
            for c in 0..img.channels {
                crop_img.set(x, y, c, img.get(ox + x, oy + y, c));
            }
            crop_mask.set(x, y, mask.get(ox + x, oy + y));
        }
    }
    (
        resize_bilinear(&crop_img, img.width, img.height),
        resize_mask_nearest(&crop_mask, img.width, img.height),
    )
}

impl AugmentOp {
    /// Whether this op preserves the dimensions of the given image.
    pub fn applicable(&self, img: &RasterImage) -> bool {
        match self {
            AugmentOp::Rot90 | AugmentOp::Rot270 => img.width == img.height,
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AugmentOp::RotSmall { max_degrees } => {
                if !max_degrees.is_finite() || max_degrees < 0.0 {
                    return Err(Error::InvalidParameter(
                        "rotation degrees must be finite and >= 0".into(),
                    ));
                }
            }
            AugmentOp::Crop { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return Err(Error::InvalidParameter(
                        "crop fraction must lie in (0, 1]".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Apply this op to an image/mask pair through identical geometry.
    pub fn apply(
        &self,
        img: &RasterImage,
        mask: &BinaryMask,
        rng: &mut ChaCha8Rng,
    ) -> (RasterImage, BinaryMask) {
        let (w, h) = (img.width, img.height);
        match *self {
            AugmentOp::FlipH => (
                flip_h_image(img),
                map_mask(mask, |x, y| (w - 1 - x, y)),
            ),
            AugmentOp::FlipV => (
                flip_v_image(img),
                map_mask(mask, |x, y| (x, h - 1 - y)),
            ),
            AugmentOp::Rot90 => (rot90_image(img), map_mask(mask, |x, y| (y, h - 1 - x))),
            AugmentOp::Rot180 => (
                flip_h_image(&flip_v_image(img)),
                map_mask(mask, |x, y| (w - 1 - x, h - 1 - y)),
            ),
            AugmentOp::Rot270 => (rot270_image(img), map_mask(mask, |x, y| (w - 1 - y, x))),
            AugmentOp::RotSmall { max_degrees } => {
                let deg = rng.gen_range(-max_degrees..=max_degrees);
                rotate_small(img, mask, deg)
            }
            AugmentOp::Crop { fraction } => crop_resize(img, mask, fraction, rng),
        }
    }
}

/// Grow `records` to exactly `target` by appending derived records. The
/// originals come first, unmodified. When `target == records.len()` the
/// input is returned as-is.
pub fn augment(
    records: &[CellRecord],
    target: usize,
    ops: &[AugmentOp],
    seed: u64,
) -> Result<Vec<CellRecord>> {
    if records.is_empty() {
        return Err(Error::InvalidInput("cannot augment an empty set".into()));
    }
    if target < records.len() {
        return Err(Error::InvalidParameter(format!(
            "augmentation target {target} is below the current count {}",
            records.len()
        )));
    }
    if ops.is_empty() {
        return Err(Error::InvalidParameter("augmentation op list is empty".into()));
    }
    for op in ops {
        op.validate()?;
    }
    let mut out: Vec<CellRecord> = records.to_vec();
    let extra = target - records.len();
    if extra == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut rng);
    for k in 0..extra {
        let src = &records[order[k % records.len()]];
        let eligible: Vec<AugmentOp> = ops
            .iter()
            .copied()
            .filter(|op| op.applicable(&src.image))
            .collect();
        if eligible.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "no augmentation op applies to record {} ({}x{})",
                src.id, src.image.width, src.image.height
            )));
        }
        let chain_len = rng.gen_range(1..=2usize);
        let mut img = src.image.clone();
        let mut mask = src.gt_mask.clone();
        for _ in 0..chain_len {
            let op = eligible[rng.gen_range(0..eligible.len())];
            let (ni, nm) = op.apply(&img, &mask, &mut rng);
            img = ni;
            mask = nm;
        }
        out.push(CellRecord {
            image: img,
            gt_mask: mask,
            label: src.label,
            id: format!("{}#aug{k}", src.id),
        });
    }
    Ok(out)
}

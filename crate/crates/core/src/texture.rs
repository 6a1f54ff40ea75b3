//! Gray-level co-occurrence texture features and the homogeneity rule that
//! routes images between the preprocessed and non-preprocessed segmentation
//! models.
//!
//! A GLCM counts ordered pairs of quantized gray levels at fixed pixel
//! offsets. Homogeneity (inverse difference moment) summarizes how
//! concentrated the mass is near the diagonal: values near 1 mean uniform
//! regions, lower values mean busy texture.

use crate::imgproc::RasterImage;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// GLCM construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlcmConfig {
    /// Number of quantization levels; gray value v maps to v * levels / 256.
    pub levels: usize,
    /// Displacements (dx, dy) of the second pixel relative to the first.
    /// Counts are accumulated over all of them.
    pub offsets: Vec<(i32, i32)>,
    /// Count each pair in both directions, making the matrix symmetric.
    pub symmetric: bool,
    /// Divide counts by their total so entries form a distribution.
    pub normalized: bool,
}

impl Default for GlcmConfig {
    fn default() -> Self {
        GlcmConfig {
            levels: 8,
            offsets: vec![(1, 0), (0, 1), (1, 1), (1, -1)],
            symmetric: true,
            normalized: true,
        }
    }
}

/// Co-occurrence matrix; `values[i * levels + j]` is the count (or joint
/// probability, when normalized) of the level pair (i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct GlcmMatrix {
    pub levels: usize,
    pub normalized: bool,
    pub values: Vec<f64>,
}

impl GlcmMatrix {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.levels + j]
    }
}

#[inline]
fn quantize(v: u8, levels: usize) -> usize {
    (v as usize * levels) / 256
}

/// Build a GLCM from a single-channel image. Multi-channel input is first
/// reduced with [`RasterImage::to_gray`].
pub fn glcm(img: &RasterImage, cfg: &GlcmConfig) -> Result<GlcmMatrix> {
    if cfg.levels < 2 || cfg.levels > 256 {
        return Err(Error::InvalidParameter(format!(
            "glcm levels must be in 2..=256, got {}",
            cfg.levels
        )));
    }
    if cfg.offsets.is_empty() {
        return Err(Error::InvalidParameter("glcm needs at least one offset".into()));
    }
    let gray = img.to_gray();
    let (w, h) = (gray.width as i32, gray.height as i32);
    for &(dx, dy) in &cfg.offsets {
        if (dx, dy) == (0, 0) {
            return Err(Error::InvalidParameter("glcm offset must be nonzero".into()));
        }
        if dx.abs() >= w || dy.abs() >= h {
            return Err(Error::InvalidInput(format!(
                "image {}x{} too small for glcm offset ({dx}, {dy})",
                gray.width, gray.height
            )));
        }
    }
    let levels = cfg.levels;
    let mut counts = vec![0u64; levels * levels];
    for &(dx, dy) in &cfg.offsets {
        for y in 0..h {
            for x in 0..w {
                let (x2, y2) = (x + dx, y + dy);
                if x2 < 0 || x2 >= w || y2 < 0 || y2 >= h {
                    continue;
                }
                let a = quantize(gray.get(x as usize, y as usize, 0), levels);
                let b = quantize(gray.get(x2 as usize, y2 as usize, 0), levels);
                counts[a * levels + b] += 1;
                if cfg.symmetric {
                    counts[b * levels + a] += 1;
                }
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let values = if cfg.normalized {
        let inv = 1.0 / total as f64;
        counts.iter().map(|&c| c as f64 * inv).collect()
    } else {
        counts.iter().map(|&c| c as f64).collect()
    };
    Ok(GlcmMatrix {
        levels,
        normalized: cfg.normalized,
        values,
    })
}

/// Homogeneity of a normalized GLCM: sum of m[i, j] / (1 + |i - j|).
/// Lies in [0, 1] and equals 1 exactly when all mass is diagonal.
pub fn homogeneity(m: &GlcmMatrix) -> Result<f64> {
    if !m.normalized {
        return Err(Error::InvalidInput(
            "homogeneity requires a normalized GLCM".into(),
        ));
    }
    let mut acc = 0.0;
    for i in 0..m.levels {
        for j in 0..m.levels {
            acc += m.get(i, j) / (1.0 + (i as f64 - j as f64).abs());
        }
    }
    Ok(acc)
}

/// Which way an image goes before segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    /// Homogeneous image: contrast enhancement, then the preprocessed model.
    Preprocess,
    /// Textured image: straight to the non-preprocessed model.
    NoPreprocess,
}

/// Threshold rule separating homogeneous from textured images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationRule {
    /// Images whose homogeneity reaches this value are preprocessed.
    /// Nominal range (0, 1); calibrated per corpus via
    /// [`calibrate_threshold`](crate::segmentation::calibrate_threshold).
    pub homogeneity_threshold: f64,
}

impl Default for SeparationRule {
    fn default() -> Self {
        SeparationRule {
            homogeneity_threshold: 0.9,
        }
    }
}

/// Route an image by comparing its GLCM homogeneity against the rule.
pub fn route(img: &RasterImage, rule: &SeparationRule, cfg: &GlcmConfig) -> Result<Route> {
    let h = homogeneity(&glcm(img, cfg)?)?;
    Ok(if h >= rule.homogeneity_threshold {
        Route::Preprocess
    } else {
        Route::NoPreprocess
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray_image(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> u8) -> RasterImage {
        let mut img = RasterImage::new(w, h, 1);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, 0, f(x, y));
            }
        }
        img
    }

    fn unit_offset_cfg() -> GlcmConfig {
        GlcmConfig {
            offsets: vec![(1, 0)],
            ..Default::default()
        }
    }

    /// Counts pairs by explicit enumeration of every coordinate and offset,
    /// then computes homogeneity directly from the integer counts.
    fn pair_count_oracle(img: &RasterImage, cfg: &GlcmConfig) -> (Vec<u64>, f64) {
        let l = cfg.levels;
        let mut counts = vec![0u64; l * l];
        for &(dx, dy) in &cfg.offsets {
            for y in 0..img.height as i32 {
                for x in 0..img.width as i32 {
                    let (x2, y2) = (x + dx, y + dy);
                    let in_bounds = x2 >= 0
                        && y2 >= 0
                        && (x2 as usize) < img.width
                        && (y2 as usize) < img.height;
                    if !in_bounds {
                        continue;
                    }
                    let a = img.get(x as usize, y as usize, 0) as usize * l / 256;
                    let b = img.get(x2 as usize, y2 as usize, 0) as usize * l / 256;
                    counts[a * l + b] += 1;
                    if cfg.symmetric {
                        counts[b * l + a] += 1;
                    }
                }
            }
        }
        let total: u64 = counts.iter().sum();
        let mut hom = 0.0;
        for i in 0..l {
            for j in 0..l {
                hom +=
                    counts[i * l + j] as f64 / total as f64 / (1.0 + (i as f64 - j as f64).abs());
            }
        }
        (counts, hom)
    }

    #[test]
    fn constant_image_mass_on_one_diagonal_cell() {
        let img = gray_image(9, 7, |_, _| 140);
        let m = glcm(&img, &GlcmConfig::default()).unwrap();
        let q = 140 * 8 / 256;
        assert!((m.get(q, q) - 1.0).abs() < 1e-15);
        assert!((homogeneity(&m).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn checkerboard_unit_offset_mass_at_corners() {
        // Alternating 0 / 255 in both axes; offset (1, 0) always pairs the
        // two extreme levels, so homogeneity = 1 / (1 + (L-1)) = 1/L.
        let img = gray_image(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let m = glcm(&img, &unit_offset_cfg()).unwrap();
        assert!((m.get(0, 7) - 0.5).abs() < 1e-15);
        assert!((m.get(7, 0) - 0.5).abs() < 1e-15);
        assert!((homogeneity(&m).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn two_level_mix_closed_form() {
        // Vertical halves 0 | 255 on a 4x4 image, offset (1, 0), symmetric.
        // Pairs per row: (0,0), (0,255), (255,255). With L=2 that puts 1/3
        // of the mass off-diagonal: homogeneity = 2/3 + (1/3)(1/2) = 5/6.
        let img = gray_image(4, 4, |x, _| if x < 2 { 0 } else { 255 });
        let cfg = GlcmConfig {
            levels: 2,
            ..unit_offset_cfg()
        };
        let m = glcm(&img, &cfg).unwrap();
        assert!((homogeneity(&m).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn matches_pair_count_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let offset_sets: [&[(i32, i32)]; 4] = [
            &[(1, 0)],
            &[(1, 0), (0, 1)],
            &[(1, 0), (0, 1), (1, 1), (1, -1)],
            &[(2, 0), (-1, 1)],
        ];
        for trial in 0..100 {
            let img = gray_image(13, 11, |_, _| rng.gen());
            let cfg = GlcmConfig {
                levels: [2, 4, 8, 16][trial % 4],
                offsets: offset_sets[trial % offset_sets.len()].to_vec(),
                symmetric: trial % 2 == 0,
                normalized: true,
            };
            let m = glcm(&img, &cfg).unwrap();
            let (counts, hom) = pair_count_oracle(&img, &cfg);
            let total: u64 = counts.iter().sum();
            for (v, &c) in m.values.iter().zip(&counts) {
                assert!((v - c as f64 / total as f64).abs() < 1e-15);
            }
            assert!((homogeneity(&m).unwrap() - hom).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = gray_image(10, 10, |_, _| rng.gen());
            let m = glcm(&img, &GlcmConfig::default()).unwrap();
            let sum: f64 = m.values.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(m.values.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn unnormalized_counts_are_integers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = gray_image(6, 6, |_, _| rng.gen());
        let cfg = GlcmConfig {
            normalized: false,
            ..Default::default()
        };
        let m = glcm(&img, &cfg).unwrap();
        assert!(m.values.iter().all(|&v| v.fract() == 0.0));
        assert!(homogeneity(&m).is_err());
    }

    #[test]
    fn symmetric_matrix_equals_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = gray_image(12, 9, |_, _| rng.gen());
        let m = glcm(&img, &GlcmConfig::default()).unwrap();
        for i in 0..m.levels {
            for j in 0..m.levels {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn homogeneity_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let img = gray_image(8, 8, |_, _| rng.gen());
            let h = homogeneity(&glcm(&img, &GlcmConfig::default()).unwrap()).unwrap();
            assert!(h > 0.0 && h <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn smooth_beats_noisy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let smooth = gray_image(16, 16, |x, _| 100 + (x as u8 / 4));
        let noisy = gray_image(16, 16, |_, _| rng.gen());
        let cfg = GlcmConfig::default();
        let hs = homogeneity(&glcm(&smooth, &cfg).unwrap()).unwrap();
        let hn = homogeneity(&glcm(&noisy, &cfg).unwrap()).unwrap();
        assert!(hs > hn, "smooth {hs} should exceed noisy {hn}");
    }

    #[test]
    fn routing_rules() {
        let constant = gray_image(16, 16, |_, _| 120);
        let board = gray_image(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
        let cfg = unit_offset_cfg();
        let rule = SeparationRule {
            homogeneity_threshold: 0.5,
        };
        // Constant image has homogeneity 1, above any threshold below 1.
        assert_eq!(route(&constant, &rule, &cfg).unwrap(), Route::Preprocess);
        // Checkerboard homogeneity is 1/8 by the oracle, below 0.5.
        let (_, hom) = pair_count_oracle(&board, &cfg);
        assert!(hom < 0.5);
        assert_eq!(route(&board, &rule, &cfg).unwrap(), Route::NoPreprocess);
        // Threshold 0 accepts everything.
        let accept_all = SeparationRule {
            homogeneity_threshold: 0.0,
        };
        assert_eq!(route(&board, &accept_all, &cfg).unwrap(), Route::Preprocess);
    }

    #[test]
    fn route_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = GlcmConfig::default();
        for _ in 0..10 {
            let img = gray_image(10, 10, |_, _| rng.gen());
            let h = homogeneity(&glcm(&img, &cfg).unwrap()).unwrap();
            for &(lo, hi) in &[(h - 0.1, h + 0.1), (0.1, 0.9)] {
                let r_lo = route(&img, &SeparationRule { homogeneity_threshold: lo }, &cfg).unwrap();
                let r_hi = route(&img, &SeparationRule { homogeneity_threshold: hi }, &cfg).unwrap();
                // Raising the threshold never converts NoPreprocess into
                // Preprocess.
                if r_lo == Route::NoPreprocess {
                    assert_eq!(r_hi, Route::NoPreprocess);
                }
            }
        }
    }

    #[test]
    fn degenerate_inputs_error() {
        let img = gray_image(4, 4, |_, _| 0);
        assert!(glcm(
            &img,
            &GlcmConfig {
                levels: 1,
                ..Default::default()
            }
        )
        .is_err());
        assert!(glcm(
            &img,
            &GlcmConfig {
                offsets: vec![(0, 0)],
                ..Default::default()
            }
        )
        .is_err());
        assert!(glcm(
            &img,
            &GlcmConfig {
                offsets: vec![],
                ..Default::default()
            }
        )
        .is_err());
        // Offset at least as large as the image leaves no pairs.
        assert!(glcm(
            &img,
            &GlcmConfig {
                offsets: vec![(5, 0)],
                ..Default::default()
            }
        )
        .is_err());
    }
}

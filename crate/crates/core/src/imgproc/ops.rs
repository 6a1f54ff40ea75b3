//! Classical pixel operators.
//!
//! Window filters use edge replication at the borders. Thresholding selects
//! the dark side (nuclei are darker than background after staining).

use super::{BBox, BinaryMask, LabelMap, RasterImage};
use crate::{Error, Result};

/// HSV Value channel of an RGB image: per pixel, max(R, G, B).
pub fn rgb_to_v_channel(img: &RasterImage) -> Result<RasterImage> {
    if img.channels != 3 {
        return Err(Error::ChannelMismatch {
            expected: 3,
            actual: img.channels,
        });
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    RasterImage::from_data(img.width, img.height, 1, data)
}

/// Median filter with a square window; borders are edge-replicated.
///
/// The window must be odd and at least 3. Uses a counting median per
/// window rather than sorting.
pub fn median_filter(img: &RasterImage, window: usize) -> Result<RasterImage> {
    if img.channels != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "median window must be odd and >= 3, got {window}"
        )));
    }
    let r = (window / 2) as isize;
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = RasterImage::new(img.width, img.height, 1);
    let half = (window * window) / 2; // index of the median element
    for y in 0..h {
        for x in 0..w {
            let mut hist = [0u32; 256];
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x + dx).clamp(0, w - 1) as usize;
                    let sy = (y + dy).clamp(0, h - 1) as usize;
                    hist[img.get(sx, sy, 0) as usize] += 1;
                }
            }
            let mut seen = 0u32;
            let mut median = 0u8;
            for (v, &n) in hist.iter().enumerate() {
                seen += n;
                if seen > half as u32 {
                    median = v as u8;
                    break;
                }
            }
            out.set(x as usize, y as usize, 0, median);
        }
    }
    Ok(out)
}

/// Contrast-limited adaptive histogram equalization.
///
/// The image is partitioned into `tiles` (rows, cols). Each tile's histogram
/// is clipped at `clip_limit * tile_pixels / 256` with the excess spread
/// uniformly over all bins, then turned into a CDF lookup table. Output
/// pixels blend the four surrounding tile tables bilinearly by tile-center
/// distance. With one tile this reduces to global histogram equalization.
pub fn clahe(img: &RasterImage, tiles: (usize, usize), clip_limit: f64) -> Result<RasterImage> {
    if img.channels != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    let (rows, cols) = tiles;
    if rows < 1 || cols < 1 {
        return Err(Error::InvalidParameter("tile grid must be >= 1x1".into()));
    }
    if clip_limit <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "clip limit must be positive, got {clip_limit}"
        )));
    }
    if img.height < rows || img.width < cols {
        return Err(Error::InvalidParameter(format!(
            "image {}x{} too small for {}x{} tiles",
            img.width, img.height, cols, rows
        )));
    }

    // Tile r,c covers rows [r*h/rows, (r+1)*h/rows) and cols alike.
    let row_start = |r: usize| r * img.height / rows;
    let col_start = |c: usize| c * img.width / cols;

    let mut luts = vec![[0u8; 256]; rows * cols];
    let mut centers_y = vec![0.0f64; rows];
    let mut centers_x = vec![0.0f64; cols];
    for r in 0..rows {
        let (y0, y1) = (row_start(r), row_start(r + 1));
        centers_y[r] = (y0 + y1) as f64 / 2.0 - 0.5;
        for c in 0..cols {
            let (x0, x1) = (col_start(c), col_start(c + 1));
            if r == 0 {
                centers_x[c] = (x0 + x1) as f64 / 2.0 - 0.5;
            }
            let mut hist = [0.0f64; 256];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[img.get(x, y, 0) as usize] += 1.0;
                }
            }
            let tile_pixels = ((y1 - y0) * (x1 - x0)) as f64;
            let clip = clip_limit * tile_pixels / 256.0;
            let mut excess = 0.0;
            for b in hist.iter_mut() {
                if *b > clip {
                    excess += *b - clip;
                    *b = clip;
                }
            }
            let share = excess / 256.0;
            let mut cdf = 0.0;
            let lut = &mut luts[r * cols + c];
            for (v, &b) in hist.iter().enumerate() {
                cdf += b + share;
                lut[v] = (255.0 * cdf / tile_pixels).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // Locate the bracketing tile centers along one axis.
    let bracket = |centers: &[f64], pos: f64| -> (usize, usize, f64) {
        if pos <= centers[0] {
            return (0, 0, 0.0);
        }
        if pos >= centers[centers.len() - 1] {
            let last = centers.len() - 1;
            return (last, last, 0.0);
        }
        let mut i = 0;
        while centers[i + 1] < pos {
            i += 1;
        }
        let t = (pos - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };

    let mut out = RasterImage::new(img.width, img.height, 1);
    for y in 0..img.height {
        let (r0, r1, ty) = bracket(&centers_y, y as f64);
        for x in 0..img.width {
            let (c0, c1, tx) = bracket(&centers_x, x as f64);
            let v = img.get(x, y, 0) as usize;
            let tl = luts[r0 * cols + c0][v] as f64;
            let tr = luts[r0 * cols + c1][v] as f64;
            let bl = luts[r1 * cols + c0][v] as f64;
            let br = luts[r1 * cols + c1][v] as f64;
            let top = tl * (1.0 - tx) + tr * tx;
            let bot = bl * (1.0 - tx) + br * tx;
            let blended = top * (1.0 - ty) + bot * ty;
            out.set(x, y, 0, blended.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(out)
}

/// Threshold selection for [`global_threshold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thresholding {
    /// Maximize between-class variance over all candidate thresholds.
    Otsu,
    /// Fixed cut at the given value.
    Fixed(u8),
}

/// Binarize an image; foreground is the dark side (`value < t`).
///
/// For Otsu, `t` maximizes the between-class variance of the populations
/// `{v < t}` and `{v >= t}` over `t` in `0..=255`, ties broken by the
/// smallest `t`. A constant image yields `t = 0` and an empty mask.
pub fn global_threshold(img: &RasterImage, method: Thresholding) -> Result<BinaryMask> {
    if img.channels != 1 {
        return Err(Error::ChannelMismatch {
            expected: 1,
            actual: img.channels,
        });
    }
    let t = match method {
        Thresholding::Fixed(t) => t as u32,
        Thresholding::Otsu => otsu_threshold(img),
    };
    let data = img.data.iter().map(|&v| (v as u32) < t).collect();
    BinaryMask::from_data(img.width, img.height, data)
}

/// Incremental between-class-variance scan.
fn otsu_threshold(img: &RasterImage) -> u32 {
    let mut hist = [0u64; 256];
    for &v in &img.data {
        hist[v as usize] += 1;
    }
    let n = img.data.len() as f64;
    let total_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();

    let mut best_t = 0u32;
    let mut best_score = f64::NEG_INFINITY;
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    for t in 0..=255u32 {
        // Classes {v < t} and {v >= t}; counts updated incrementally.
        let score = between_class_score(w0, sum0, n, total_sum);
        if score > best_score {
            best_score = score;
            best_t = t;
        }
        let c = hist[t as usize] as f64;
        w0 += c;
        sum0 += t as f64 * c;
    }
    best_t
}

/// Between-class variance up to a constant factor: (sum0*w1 - sum1*w0)^2 / (w0*w1).
pub(crate) fn between_class_score(w0: f64, sum0: f64, n: f64, total_sum: f64) -> f64 {
    let w1 = n - w0;
    if w0 == 0.0 || w1 == 0.0 {
        return 0.0;
    }
    let sum1 = total_sum - sum0;
    let d = sum0 * w1 - sum1 * w0;
    d * d / (w0 * w1)
}

/// 8-connected component labeling, deterministic raster-scan order.
///
/// Two-pass union-find; final labels are contiguous from 1 in order of each
/// component's first raster-scan appearance.
pub fn connected_components(mask: &BinaryMask) -> LabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut parent: Vec<u32> = Vec::new();
    let mut provisional = vec![0u32; w * h]; // 0 = background, else index+1 into parent

    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    fn union(parent: &mut [u32], a: u32, b: u32) {
        let (ra, rb) = (find(parent, a), find(parent, b));
        if ra != rb {
            // Keep the smaller root so first-appearance order survives.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi as usize] = lo;
        }
    }

    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            // Previously-scanned 8-neighbors: W, NW, N, NE.
            let mut neighbor_label = None;
            let candidates = [
                (x.wrapping_sub(1), y),
                (x.wrapping_sub(1), y.wrapping_sub(1)),
                (x, y.wrapping_sub(1)),
                (x + 1, y.wrapping_sub(1)),
            ];
            for (nx, ny) in candidates {
                if nx < w && ny < h && provisional[ny * w + nx] != 0 {
                    let lbl = provisional[ny * w + nx] - 1;
                    match neighbor_label {
                        None => neighbor_label = Some(lbl),
                        Some(first) => union(&mut parent, first, lbl),
                    }
                }
            }
            let lbl = match neighbor_label {
                Some(l) => l,
                None => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
            };
            provisional[y * w + x] = lbl + 1;
        }
    }

    // Second pass: map roots to contiguous labels in first-appearance order.
    let mut root_to_final = vec![0u32; parent.len()];
    let mut next = 0u32;
    let mut labels = vec![0u32; w * h];
    for i in 0..w * h {
        if provisional[i] == 0 {
            continue;
        }
        let root = find(&mut parent, provisional[i] - 1);
        if root_to_final[root as usize] == 0 {
            next += 1;
            root_to_final[root as usize] = next;
        }
        labels[i] = root_to_final[root as usize];
    }

    LabelMap {
        width: w,
        height: h,
        labels,
        component_count: next as usize,
    }
}

/// Tight bounding box of one component, expanded by `pad` and clamped to
/// the image bounds.
pub fn padded_bbox(lbl: &LabelMap, component: u32, pad: usize) -> Result<BBox> {
    let mut x0 = usize::MAX;
    let mut y0 = usize::MAX;
    let mut x1 = 0usize;
    let mut y1 = 0usize;
    let mut found = false;
    for y in 0..lbl.height {
        for x in 0..lbl.width {
            if lbl.get(x, y) == component && component != 0 {
                found = true;
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if !found {
        return Err(Error::NotFound(format!("component label {component}")));
    }
    Ok(BBox {
        x0: x0.saturating_sub(pad),
        y0: y0.saturating_sub(pad),
        x1: (x1 + pad).min(lbl.width - 1),
        y1: (y1 + pad).min(lbl.height - 1),
    })
}

/// Bilinear resize; masks and label maps should go through nearest-neighbor
/// resampling instead.
pub fn resize_bilinear(img: &RasterImage, new_w: usize, new_h: usize) -> RasterImage {
    assert!(new_w >= 1 && new_h >= 1);
    let mut out = RasterImage::new(new_w, new_h, img.channels);
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    for y in 0..new_h {
        // Center-aligned source coordinate.
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            for c in 0..img.channels {
                let tl = img.get(x0, y0, c) as f64;
                let tr = img.get(x1, y0, c) as f64;
                let bl = img.get(x0, y1, c) as f64;
                let br = img.get(x1, y1, c) as f64;
                let top = tl * (1.0 - tx) + tr * tx;
                let bot = bl * (1.0 - tx) + br * tx;
                let v = top * (1.0 - ty) + bot * ty;
                out.set(x, y, c, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

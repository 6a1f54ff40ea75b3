//! Nucleus detection in multi-cell images.
//!
//! Three steps on the V channel: median filtering, CLAHE, and a global
//! threshold. Connected components of the thresholded mask become nucleus
//! candidates; each is reported as a padded bounding box.

use super::{
    clahe, connected_components, global_threshold, median_filter, ops::Thresholding,
    padded_bbox, rgb_to_v_channel, BBox, BinaryMask, LabelMap, RasterImage,
};
use crate::Result;
use serde::{Deserialize, Serialize};

/// How the global threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ThresholdMethod {
    Otsu,
    Fixed { value: u8 },
}

impl From<ThresholdMethod> for Thresholding {
    fn from(m: ThresholdMethod) -> Self {
        match m {
            ThresholdMethod::Otsu => Thresholding::Otsu,
            ThresholdMethod::Fixed { value } => Thresholding::Fixed(value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionConfig {
    pub median_window: usize,
    /// CLAHE grid (rows, cols); clamped to the image size for small inputs.
    pub clahe_tiles: (usize, usize),
    pub clahe_clip_limit: f64,
    pub threshold: ThresholdMethod,
    /// Bounding-box padding on all four sides, in pixels.
    pub bbox_pad: usize,
    /// Components smaller than this many pixels are dropped (0 keeps all).
    pub min_component_area: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            median_window: 5,
            clahe_tiles: (8, 8),
            clahe_clip_limit: 2.0,
            threshold: ThresholdMethod::Otsu,
            bbox_pad: 20,
            min_component_area: 0,
        }
    }
}

/// Everything the detection chain produces for one image.
#[derive(Debug, Clone)]
pub struct DetectionOutput {
    /// Contrast-adjusted V channel the threshold was applied to.
    pub enhanced: RasterImage,
    pub mask: BinaryMask,
    pub labels: LabelMap,
    /// One box per kept component, in component-label order.
    pub boxes: Vec<(u32, BBox)>,
}

/// Run the full detection chain on a gray or RGB image.
pub fn detect_nuclei(img: &RasterImage, cfg: &DetectionConfig) -> Result<DetectionOutput> {
    let v = if img.channels == 3 {
        rgb_to_v_channel(img)?
    } else {
        img.clone()
    };
    let filtered = median_filter(&v, cfg.median_window)?;
    let tiles = (
        cfg.clahe_tiles.0.min(filtered.height).max(1),
        cfg.clahe_tiles.1.min(filtered.width).max(1),
    );
    let enhanced = clahe(&filtered, tiles, cfg.clahe_clip_limit)?;
    let mask = global_threshold(&enhanced, cfg.threshold.into())?;
    let labels = connected_components(&mask);
    let mut boxes = Vec::new();
    for comp in 1..=labels.component_count as u32 {
        if cfg.min_component_area > 0 && labels.area(comp) < cfg.min_component_area {
            continue;
        }
        boxes.push((comp, padded_bbox(&labels, comp, cfg.bbox_pad)?));
    }
    Ok(DetectionOutput {
        enhanced,
        mask,
        labels,
        boxes,
    })
}

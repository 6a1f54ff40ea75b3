//! Image containers and the classical operators used by detection and
//! preprocessing: V-channel extraction, median filter, CLAHE, global
//! thresholding, connected components, bounding boxes.

mod detection;
mod io;
mod ops;

pub use detection::{detect_nuclei, DetectionConfig, DetectionOutput, ThresholdMethod};
pub use io::{
    read_image, read_indexed_png, read_mask_png, write_image, write_indexed_png, write_mask_png,
};
pub use ops::{
    clahe, connected_components, global_threshold, median_filter, padded_bbox, resize_bilinear,
    rgb_to_v_channel,
};

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// 8-bit raster image, row-major, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RasterImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(width >= 1 && height >= 1, "empty image");
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        RasterImage {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width < 1 || height < 1 {
            return Err(Error::InvalidInput("image dimensions must be >= 1".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        Ok(RasterImage {
            width,
            height,
            channels,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// All samples of one pixel.
    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn is_gray(&self) -> bool {
        self.channels == 1
    }

    /// Single-channel view of this image: identity for gray images,
    /// HSV Value (max of R,G,B) for color ones.
    pub fn to_gray(&self) -> RasterImage {
        if self.channels == 1 {
            self.clone()
        } else {
            ops::rgb_to_v_channel(self).expect("3-channel image")
        }
    }

    /// Replicate a single channel into three.
    pub fn gray_to_rgb(&self) -> RasterImage {
        assert_eq!(self.channels, 1);
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for &v in &self.data {
            data.extend_from_slice(&[v, v, v]);
        }
        RasterImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Boolean foreground mask with the dimensions of its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask length {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// Connected-component labeling of a mask. Label 0 is background; positive
/// labels are contiguous from 1 in raster-scan discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub component_count: usize,
}

impl LabelMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Pixel count of one component.
    pub fn area(&self, label: u32) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Inclusive pixel-coordinate box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    /// Copy the boxed region out of an image.
    pub fn crop(&self, img: &RasterImage) -> RasterImage {
        let (w, h) = (self.width(), self.height());
        let mut out = RasterImage::new(w, h, img.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..img.channels {
                    out.set(x, y, c, img.get(self.x0 + x, self.y0 + y, c));
                }
            }
        }
        out
    }
}

//! Dataset handling: single-cell records with ground-truth masks,
//! annotated multi-cell slides, stratified splitting, augmentation, and a
//! deterministic synthetic corpus for desk-scale testing.

pub mod augment;
pub mod io;
pub mod split;
pub mod synth;

pub use augment::{augment, AugmentOp, AugmentationSpec};
pub use io::{
    load_herlev, load_herlev_with, load_multicell, write_herlev, write_multicell, GtColorTable,
    LoadReport, SlideSidecar,
};
pub use split::{
    manifest_from_splits, resolve_manifest, stratified_splits, SplitManifest, SplitSpec,
    TrialIds, TrialSplit,
};
pub use synth::{
    synth_cells, synth_multicell, synth_single_cells, synth_single_for_classes, SynthConfig,
};

use crate::imgproc::{BinaryMask, RasterImage};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt;

/// The seven diagnostic cell classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    /// Normal superficial squamous.
    Nsup,
    /// Normal intermediate squamous.
    Nint,
    /// Normal columnar.
    Ncol,
    /// Light dysplastic.
    Ldys,
    /// Moderate dysplastic.
    Mdys,
    /// Severe dysplastic.
    Sdys,
    /// Carcinoma in situ.
    Cis,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::Nsup,
        ClassLabel::Nint,
        ClassLabel::Ncol,
        ClassLabel::Ldys,
        ClassLabel::Mdys,
        ClassLabel::Sdys,
        ClassLabel::Cis,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            ClassLabel::Nsup => "nsup",
            ClassLabel::Nint => "nint",
            ClassLabel::Ncol => "ncol",
            ClassLabel::Ldys => "ldys",
            ClassLabel::Mdys => "mdys",
            ClassLabel::Sdys => "sdys",
            ClassLabel::Cis => "cis",
        }
    }

    pub fn from_short_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.short_name() == s)
    }

    /// Position in [`ClassLabel::ALL`], the canonical table order.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).expect("label in ALL")
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The binary screening label is a pure function of the 7-class label.
    pub fn binary(self) -> BinaryLabel {
        match self {
            ClassLabel::Nsup | ClassLabel::Nint | ClassLabel::Ncol => BinaryLabel::Normal,
            _ => BinaryLabel::Abnormal,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// Normal vs abnormal screening outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryLabel {
    Normal,
    Abnormal,
}

impl BinaryLabel {
    pub fn index(self) -> usize {
        match self {
            BinaryLabel::Normal => 0,
            BinaryLabel::Abnormal => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(BinaryLabel::Normal),
            1 => Some(BinaryLabel::Abnormal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BinaryLabel::Normal => "normal",
            BinaryLabel::Abnormal => "abnormal",
        }
    }
}

impl fmt::Display for BinaryLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One single-cell sample: RGB image, nucleus ground truth, class, id.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub image: RasterImage,
    pub gt_mask: BinaryMask,
    pub label: ClassLabel,
    pub id: String,
}

impl CellRecord {
    pub fn new(
        image: RasterImage,
        gt_mask: BinaryMask,
        label: ClassLabel,
        id: String,
    ) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                actual: image.channels,
            });
        }
        if image.width != gt_mask.width || image.height != gt_mask.height {
            return Err(Error::ShapeMismatch(format!(
                "record {id}: image {}x{} vs mask {}x{}",
                image.width, image.height, gt_mask.width, gt_mask.height
            )));
        }
        Ok(CellRecord {
            image,
            gt_mask,
            label,
            id,
        })
    }
}

/// One annotated nucleus on a multi-cell slide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAnnotation {
    pub x: u32,
    pub y: u32,
    pub label: BinaryLabel,
}

/// Slide-level abnormality grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlideGrade {
    Normal,
    #[serde(rename = "LSIL")]
    Lsil,
    #[serde(rename = "HSIL")]
    Hsil,
    #[serde(rename = "SCC")]
    Scc,
}

/// A multi-cell slide image with per-nucleus annotations and a grade.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCellRecord {
    pub image: RasterImage,
    pub annotations: Vec<CellAnnotation>,
    pub slide_grade: SlideGrade,
    pub id: String,
}

impl MultiCellRecord {
    pub fn new(
        image: RasterImage,
        annotations: Vec<CellAnnotation>,
        slide_grade: SlideGrade,
        id: String,
    ) -> Result<Self> {
        if image.channels != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                actual: image.channels,
            });
        }
        for a in &annotations {
            if a.x as usize >= image.width || a.y as usize >= image.height {
                return Err(Error::InvalidInput(format!(
                    "slide {id}: annotation ({}, {}) outside {}x{} image",
                    a.x, a.y, image.width, image.height
                )));
            }
        }
        Ok(MultiCellRecord {
            image,
            annotations,
            slide_grade,
            id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_label_partition() {
        let normal: Vec<ClassLabel> = ClassLabel::ALL
            .into_iter()
            .filter(|c| c.binary() == BinaryLabel::Normal)
            .collect();
        assert_eq!(
            normal,
            vec![ClassLabel::Nsup, ClassLabel::Nint, ClassLabel::Ncol]
        );
        assert_eq!(
            ClassLabel::ALL
                .into_iter()
                .filter(|c| c.binary() == BinaryLabel::Abnormal)
                .count(),
            4
        );
    }

    #[test]
    fn label_indexing_round_trips() {
        for (i, c) in ClassLabel::ALL.into_iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(c));
            assert_eq!(ClassLabel::from_short_name(c.short_name()), Some(c));
        }
        assert_eq!(ClassLabel::from_index(7), None);
        assert_eq!(ClassLabel::from_short_name("bogus"), None);
    }

    #[test]
    fn record_constructors_validate() {
        let img = RasterImage::new(4, 4, 3);
        let mask = BinaryMask::new(4, 4);
        assert!(CellRecord::new(img.clone(), mask, ClassLabel::Nsup, "a".into()).is_ok());
        let wrong_mask = BinaryMask::new(3, 4);
        assert!(CellRecord::new(img.clone(), wrong_mask, ClassLabel::Nsup, "b".into()).is_err());
        let gray = RasterImage::new(4, 4, 1);
        assert!(CellRecord::new(gray, BinaryMask::new(4, 4), ClassLabel::Nsup, "c".into()).is_err());

        let ann = vec![CellAnnotation {
            x: 5,
            y: 1,
            label: BinaryLabel::Normal,
        }];
        assert!(MultiCellRecord::new(img, ann, SlideGrade::Normal, "d".into()).is_err());
    }

    #[test]
    fn slide_grade_serde_names() {
        assert_eq!(serde_json::to_string(&SlideGrade::Lsil).unwrap(), "\"LSIL\"");
        assert_eq!(
            serde_json::from_str::<SlideGrade>("\"SCC\"").unwrap(),
            SlideGrade::Scc
        );
    }
}

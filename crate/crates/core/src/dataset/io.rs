//! Disk loaders and writers for the two corpus layouts.
//!
//! Single-cell layout: one subdirectory per class (short names like `nsup`
//! or the long names like `normal_superficiel`), each image paired with a
//! ground-truth file whose stem carries a `-d` suffix. Ground truth may be
//! a gray mask (>= 128 is nucleus) or a color map decoded through a
//! [`GtColorTable`].
//!
//! Multi-cell layout: a flat directory of slide images, each with a JSON
//! sidecar `<stem>.json` holding nucleus annotations and a slide grade.

use super::{CellAnnotation, CellRecord, ClassLabel, MultiCellRecord, SlideGrade};
use crate::imgproc::{read_image, write_image, write_mask_png, BinaryMask, RasterImage};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Maps ground-truth colors to the nucleus region. A color-image pixel is
/// nucleus when it matches any entry within `tolerance` per channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtColorTable {
    pub nucleus_colors: Vec<[u8; 3]>,
    pub tolerance: u8,
}

impl Default for GtColorTable {
    /// Nucleus is the dark-blue region class; everything else is not nucleus.
    fn default() -> Self {
        GtColorTable {
            nucleus_colors: vec![[0, 0, 128], [0, 0, 255]],
            tolerance: 0,
        }
    }
}

impl GtColorTable {
    fn is_nucleus(&self, px: &[u8]) -> bool {
        self.nucleus_colors.iter().any(|c| {
            c.iter()
                .zip(px)
                .all(|(&a, &b)| a.abs_diff(b) <= self.tolerance)
        })
    }

    /// Decode a ground-truth image into a nucleus mask. Gray images are
    /// treated as plain masks with foreground >= 128.
    pub fn decode(&self, gt: &RasterImage) -> BinaryMask {
        let mut mask = BinaryMask::new(gt.width, gt.height);
        for y in 0..gt.height {
            for x in 0..gt.width {
                let v = if gt.channels == 1 {
                    gt.get(x, y, 0) >= 128
                } else {
                    self.is_nucleus(gt.pixel(x, y))
                };
                mask.set(x, y, v);
            }
        }
        mask
    }
}

/// What a loader found: per-class counts plus every skipped file and why.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub class_counts: BTreeMap<String, usize>,
    pub skipped: Vec<(String, String)>,
}

impl LoadReport {
    fn skip(&mut self, path: &Path, reason: impl Into<String>) {
        self.skipped.push((path.display().to_string(), reason.into()));
    }
}

const CLASS_DIR_NAMES: [(&str, ClassLabel); 7] = [
    ("normal_superficiel", ClassLabel::Nsup),
    ("normal_intermediate", ClassLabel::Nint),
    ("normal_columnar", ClassLabel::Ncol),
    ("light_dysplastic", ClassLabel::Ldys),
    ("moderate_dysplastic", ClassLabel::Mdys),
    ("severe_dysplastic", ClassLabel::Sdys),
    ("carcinoma_in_situ", ClassLabel::Cis),
];

fn class_for_dir(name: &str) -> Option<ClassLabel> {
    ClassLabel::from_short_name(name).or_else(|| {
        CLASS_DIR_NAMES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, c)| c)
    })
}

fn is_image_ext(ext: &str) -> bool {
    matches!(ext.to_ascii_lowercase().as_str(), "png" | "bmp")
}

/// Locate the ground-truth partner of an image: same stem plus `-d`, same
/// directory, any supported extension.
fn gt_path_for(img_path: &Path) -> Option<PathBuf> {
    let stem = img_path.file_stem()?.to_str()?;
    let dir = img_path.parent()?;
    for ext in ["png", "PNG", "bmp", "BMP"] {
        let candidate = dir.join(format!("{stem}-d.{ext}"));
        if candidate.is_file() {
            return Some(candidate);
        }
    }
    None
}

fn sorted_dir_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::NotFound(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Load a class-per-directory single-cell tree with the default color table.
pub fn load_herlev(root: &Path) -> Result<(Vec<CellRecord>, LoadReport)> {
    load_herlev_with(root, &GtColorTable::default())
}

/// Load a class-per-directory single-cell tree. Per-file problems are
/// collected in the report instead of aborting the whole load; records come
/// back sorted by (class, id).
pub fn load_herlev_with(
    root: &Path,
    table: &GtColorTable,
) -> Result<(Vec<CellRecord>, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::NotFound(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for entry in sorted_dir_entries(root)? {
        if !entry.is_dir() {
            continue;
        }
        let dir_name = entry.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let Some(class) = class_for_dir(dir_name) else {
            report.skip(&entry, "unrecognized class directory");
            continue;
        };
        for file in sorted_dir_entries(&entry)? {
            let Some(ext) = file.extension().and_then(|e| e.to_str()) else {
                continue;
            };
            if !is_image_ext(ext) {
                continue;
            }
            let Some(stem) = file.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if stem.ends_with("-d") {
                continue;
            }
            let Some(gt_path) = gt_path_for(&file) else {
                report.skip(&file, "missing -d ground-truth partner");
                continue;
            };
            let image = match read_image(&file) {
                Ok(img) => img,
                Err(e) => {
                    report.skip(&file, format!("unreadable image: {e}"));
                    continue;
                }
            };
            let image = if image.channels == 1 {
                image.gray_to_rgb()
            } else {
                image
            };
            let gt = match read_image(&gt_path) {
                Ok(img) => img,
                Err(e) => {
                    report.skip(&gt_path, format!("unreadable ground truth: {e}"));
                    continue;
                }
            };
            let mask = table.decode(&gt);
            let id = format!("{}/{}", class.short_name(), stem);
            match CellRecord::new(image, mask, class, id) {
                Ok(rec) => {
                    records.push(rec);
                    report.loaded += 1;
                    *report
                        .class_counts
                        .entry(class.short_name().to_string())
                        .or_insert(0) += 1;
                }
                Err(e) => report.skip(&file, e.to_string()),
            }
        }
    }
    records.sort_by(|a, b| (a.label, &a.id).cmp(&(b.label, &b.id)));
    Ok((records, report))
}

/// Write single-cell records in the layout `load_herlev` reads: class
/// directories with `<id>.png` images and `<id>-d.png` gray masks.
pub fn write_herlev(records: &[CellRecord], root: &Path) -> Result<()> {
    for rec in records {
        let dir = root.join(rec.label.short_name());
        std::fs::create_dir_all(&dir)?;
        let stem = rec
            .id
            .rsplit('/')
            .next()
            .filter(|s| !s.is_empty())
            .unwrap_or(&rec.id);
        write_image(&dir.join(format!("{stem}.png")), &rec.image)?;
        write_mask_png(&dir.join(format!("{stem}-d.png")), &rec.gt_mask)?;
    }
    Ok(())
}

/// JSON sidecar carried next to each multi-cell slide image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlideSidecar {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub nuclei: Vec<CellAnnotation>,
    pub grade: SlideGrade,
}

fn default_schema_version() -> u32 {
    1
}

/// Load a flat directory of slide images with `<stem>.json` sidecars.
/// Slides without a sidecar, or with annotations outside the image, are
/// reported and skipped.
pub fn load_multicell(root: &Path) -> Result<(Vec<MultiCellRecord>, LoadReport)> {
    if !root.is_dir() {
        return Err(Error::NotFound(format!(
            "slide root {} is not a directory",
            root.display()
        )));
    }
    let mut records = Vec::new();
    let mut report = LoadReport::default();
    for file in sorted_dir_entries(root)? {
        let Some(ext) = file.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !is_image_ext(ext) {
            continue;
        }
        let Some(stem) = file.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let sidecar_path = file.with_file_name(format!("{stem}.json"));
        if !sidecar_path.is_file() {
            report.skip(&file, "missing .json sidecar");
            continue;
        }
        let sidecar: SlideSidecar = match std::fs::read_to_string(&sidecar_path)
            .map_err(Error::from)
            .and_then(|s| serde_json::from_str(&s).map_err(Error::from))
        {
            Ok(s) => s,
            Err(e) => {
                report.skip(&sidecar_path, format!("bad sidecar: {e}"));
                continue;
            }
        };
        let image = match read_image(&file) {
            Ok(img) => img,
            Err(e) => {
                report.skip(&file, format!("unreadable image: {e}"));
                continue;
            }
        };
        let image = if image.channels == 1 {
            image.gray_to_rgb()
        } else {
            image
        };
        match MultiCellRecord::new(image, sidecar.nuclei, sidecar.grade, stem.to_string()) {
            Ok(rec) => {
                records.push(rec);
                report.loaded += 1;
            }
            Err(e) => report.skip(&file, e.to_string()),
        }
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((records, report))
}

/// Write one slide as `<id>.png` plus its `<id>.json` sidecar.
pub fn write_multicell(record: &MultiCellRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_image(&dir.join(format!("{}.png", record.id)), &record.image)?;
    let sidecar = SlideSidecar {
        schema_version: 1,
        nuclei: record.annotations.clone(),
        grade: record.slide_grade,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(dir.join(format!("{}.json", record.id)), json)?;
    Ok(())
}

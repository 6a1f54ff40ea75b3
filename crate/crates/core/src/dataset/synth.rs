//! Deterministic synthetic corpus generator.
//!
//! Single-cell images place one elliptical nucleus on a cytoplasm field.
//! Normal classes draw small, smooth, round nuclei on nearly flat
//! cytoplasm; abnormal classes draw larger, darker, lobed nuclei with
//! strong chromatin and cytoplasm texture. The texture contrast is wide
//! enough that homogeneity-based routing separates the two groups, and the
//! ground-truth mask is the exact rasterization of the generating shape.
//!
//! `nint` and `ncol` share one nucleus distribution and differ only in
//! cytoplasm tint, so any classifier that sees only masked nuclei cannot
//! tell them apart. That gives ablation experiments a known direction.
//!
//! Every record is generated from its own counter-indexed RNG stream, so
//! record `i` is identical no matter how many records are requested.

use super::{
    BinaryLabel, CellAnnotation, CellRecord, ClassLabel, MultiCellRecord, SlideGrade,
};
use crate::imgproc::{BinaryMask, RasterImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Side length of square single-cell images.
    pub image_size: usize,
    /// Width and height of multi-cell canvases.
    pub canvas_size: (usize, usize),
    /// Inclusive range for the number of cells per canvas.
    pub cells_per_canvas: (usize, usize),
    /// Radius multiplier applied on canvases so several cells fit.
    pub canvas_cell_scale: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 48,
            canvas_size: (160, 120),
            cells_per_canvas: (3, 6),
            canvas_cell_scale: 0.7,
        }
    }
}

struct ClassParams {
    radius: (f64, f64),
    gray: (f64, f64),
    irregularity: f64,
    lobes: (u32, u32),
    chromatin_amp: f64,
    nucleus_noise: f64,
    cyto_noise: f64,
    tint: [f64; 3],
}

fn params_for(class: ClassLabel) -> ClassParams {
    match class {
        ClassLabel::Nsup => ClassParams {
            radius: (11.0, 13.0),
            gray: (104.0, 116.0),
            irregularity: 0.0,
            lobes: (0, 0),
            chromatin_amp: 0.0,
            nucleus_noise: 2.0,
            cyto_noise: 2.0,
            tint: [208.0, 176.0, 200.0],
        },
        ClassLabel::Nint => ClassParams {
            radius: (12.0, 14.0),
            gray: (88.0, 100.0),
            irregularity: 0.0,
            lobes: (0, 0),
            chromatin_amp: 0.0,
            nucleus_noise: 2.0,
            cyto_noise: 2.0,
            tint: [176.0, 208.0, 176.0],
        },
        // Same nucleus distribution as nint on purpose; only the tint moves.
        ClassLabel::Ncol => ClassParams {
            radius: (12.0, 14.0),
            gray: (88.0, 100.0),
            irregularity: 0.0,
            lobes: (0, 0),
            chromatin_amp: 0.0,
            nucleus_noise: 2.0,
            cyto_noise: 2.0,
            tint: [176.0, 176.0, 208.0],
        },
        ClassLabel::Ldys => ClassParams {
            radius: (13.0, 15.0),
            gray: (84.0, 96.0),
            irregularity: 0.05,
            lobes: (3, 6),
            chromatin_amp: 12.0,
            nucleus_noise: 6.0,
            cyto_noise: 28.0,
            tint: [208.0, 176.0, 176.0],
        },
        ClassLabel::Mdys => ClassParams {
            radius: (14.0, 16.0),
            gray: (72.0, 84.0),
            irregularity: 0.08,
            lobes: (3, 6),
            chromatin_amp: 16.0,
            nucleus_noise: 6.0,
            cyto_noise: 28.0,
            tint: [208.0, 190.0, 170.0],
        },
        ClassLabel::Sdys => ClassParams {
            radius: (14.5, 16.5),
            gray: (60.0, 72.0),
            irregularity: 0.11,
            lobes: (4, 7),
            chromatin_amp: 20.0,
            nucleus_noise: 6.0,
            cyto_noise: 28.0,
            tint: [200.0, 180.0, 208.0],
        },
        ClassLabel::Cis => ClassParams {
            radius: (15.0, 17.0),
            gray: (48.0, 60.0),
            irregularity: 0.14,
            lobes: (4, 7),
            chromatin_amp: 24.0,
            nucleus_noise: 6.0,
            cyto_noise: 28.0,
            tint: [190.0, 170.0, 190.0],
        },
    }
}

/// Everything needed to draw one nucleus; drawing is a pure function of it.
struct NucleusShape {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    irregularity: f64,
    lobes: f64,
    phase: f64,
    gray: f64,
    chromatin_amp: f64,
    chromatin_fx: f64,
    chromatin_fy: f64,
}

impl NucleusShape {
    /// Draw everything the shape needs from the stream, in a fixed order
    /// that does not depend on the class. Scale shrinks radii on canvases.
    fn sample(p: &ClassParams, cx: f64, cy: f64, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let rx = rng.gen_range(p.radius.0..p.radius.1) * scale;
        let ry = rng.gen_range(p.radius.0..p.radius.1) * scale;
        let gray = rng.gen_range(p.gray.0..p.gray.1);
        let lobes = if p.lobes.1 > 0 {
            rng.gen_range(p.lobes.0..=p.lobes.1) as f64
        } else {
            // Keep the stream aligned across classes with and without lobes.
            let _ = rng.gen_range(0..=1u32);
            0.0
        };
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let chromatin_fx = rng.gen_range(0.7..1.3);
        let chromatin_fy = rng.gen_range(0.7..1.3);
        NucleusShape {
            cx,
            cy,
            rx,
            ry,
            irregularity: p.irregularity,
            lobes,
            phase,
            gray,
            chromatin_amp: p.chromatin_amp,
            chromatin_fx,
            chromatin_fy,
        }
    }

    /// Signed normalized radius: <= 1 is inside the generating shape.
    fn norm_radius(&self, x: usize, y: usize) -> f64 {
        let dx = x as f64 - self.cx;
        let dy = y as f64 - self.cy;
        let theta = dy.atan2(dx);
        let wobble = 1.0 + self.irregularity * (self.lobes * theta + self.phase).sin();
        let rx = self.rx * wobble;
        let ry = self.ry * wobble;
        ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt()
    }

    fn chromatin(&self, x: usize, y: usize) -> f64 {
        self.chromatin_amp
            * (x as f64 * 0.9 * self.chromatin_fx).sin()
            * (y as f64 * 1.1 * self.chromatin_fy).sin()
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Paint one cell onto an image region. `cyto_radius` of `None` means the
/// cytoplasm fills the whole image (single-cell crops); `Some(r)` restricts
/// it to an ellipse around the nucleus (canvases). Returns the nucleus mask.
fn draw_cell(
    img: &mut RasterImage,
    class: ClassLabel,
    shape: &NucleusShape,
    tint: [f64; 3],
    cyto_radius: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> BinaryMask {
    let p = params_for(class);
    let mut mask = BinaryMask::new(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let nr = shape.norm_radius(x, y);
            if let Some(rc) = cyto_radius {
                let dx = x as f64 - shape.cx;
                let dy = y as f64 - shape.cy;
                if (dx * dx + dy * dy).sqrt() > rc {
                    continue;
                }
            }
            if nr <= 1.0 {
                mask.set(x, y, true);
                let v = shape.gray
                    + shape.chromatin(x, y)
                    + rng.gen_range(-p.nucleus_noise..=p.nucleus_noise);
                let b = clamp_u8(v);
                for c in 0..3 {
                    img.set(x, y, c, b);
                }
            } else {
                let n = rng.gen_range(-p.cyto_noise..=p.cyto_noise);
                for c in 0..3 {
                    img.set(x, y, c, clamp_u8(tint[c] + n));
                }
            }
        }
    }
    mask
}

fn record_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate `n` single-cell records, cycling through the given classes.
pub fn synth_single_for_classes(
    config: &SynthConfig,
    classes: &[ClassLabel],
    n: usize,
    seed: u64,
) -> Vec<CellRecord> {
    assert!(!classes.is_empty(), "class list must not be empty");
    let s = config.image_size;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = classes[i % classes.len()];
        let mut rng = record_rng(seed, i as u64 + 1);
        let p = params_for(class);
        let cx = s as f64 / 2.0 + rng.gen_range(-3.0..=3.0);
        let cy = s as f64 / 2.0 + rng.gen_range(-3.0..=3.0);
        let shape = NucleusShape::sample(&p, cx, cy, 1.0, &mut rng);
        let tint_jitter = rng.gen_range(-6.0..=6.0);
        let tint = [
            p.tint[0] + tint_jitter,
            p.tint[1] + tint_jitter,
            p.tint[2] + tint_jitter,
        ];
        let mut img = RasterImage::new(s, s, 3);
        let mask = draw_cell(&mut img, class, &shape, tint, None, &mut rng);
        let rec = CellRecord::new(
            img,
            mask,
            class,
            format!("{}/{:04}", class.short_name(), i),
        )
        .expect("synthetic record is well formed");
        out.push(rec);
    }
    out
}

/// Generate `n` single-cell records cycling through all seven classes.
pub fn synth_single_cells(config: &SynthConfig, n: usize, seed: u64) -> Vec<CellRecord> {
    synth_single_for_classes(config, &ClassLabel::ALL, n, seed)
}

fn grade_for(abnormal: usize, total: usize) -> SlideGrade {
    if abnormal == 0 {
        SlideGrade::Normal
    } else {
        let f = abnormal as f64 / total as f64;
        if f <= 1.0 / 3.0 {
            SlideGrade::Lsil
        } else if f <= 2.0 / 3.0 {
            SlideGrade::Hsil
        } else {
            SlideGrade::Scc
        }
    }
}

/// Generate `n` annotated multi-cell canvases.
pub fn synth_multicell(config: &SynthConfig, n: usize, seed: u64) -> Vec<MultiCellRecord> {
    let (w, h) = config.canvas_size;
    let scale = config.canvas_cell_scale;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = record_rng(seed, (1u64 << 32) + i as u64);
        let mut img = RasterImage::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                let v = clamp_u8(235.0 + rng.gen_range(-2.0..=2.0));
                for c in 0..3 {
                    img.set(x, y, c, v);
                }
            }
        }
        let want = rng.gen_range(config.cells_per_canvas.0..=config.cells_per_canvas.1);
        let mut placed: Vec<(f64, f64, f64)> = Vec::new();
        let mut annotations = Vec::new();
        for _ in 0..want {
            let abnormal = rng.gen_bool(0.4);
            let class = if abnormal {
                [
                    ClassLabel::Ldys,
                    ClassLabel::Mdys,
                    ClassLabel::Sdys,
                    ClassLabel::Cis,
                ][rng.gen_range(0..4)]
            } else {
                [ClassLabel::Nsup, ClassLabel::Nint, ClassLabel::Ncol][rng.gen_range(0..3)]
            };
            let p = params_for(class);
            let rc_max = p.radius.1 * scale * (1.0 + p.irregularity) + 10.0;
            let margin = rc_max + 2.0;
            let mut spot = None;
            for _ in 0..60 {
                let cx = rng.gen_range(margin..w as f64 - margin);
                let cy = rng.gen_range(margin..h as f64 - margin);
                let clear = placed
                    .iter()
                    .all(|&(px, py, pr)| ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() > pr + rc_max);
                if clear {
                    spot = Some((cx, cy));
                    break;
                }
            }
            let Some((cx, cy)) = spot else {
                continue;
            };
            let shape = NucleusShape::sample(&p, cx, cy, scale, &mut rng);
            let cyto_r = shape.rx.max(shape.ry) + rng.gen_range(6.0..10.0);
            let tint_jitter = rng.gen_range(-6.0..=6.0);
            let tint = [
                p.tint[0] + tint_jitter,
                p.tint[1] + tint_jitter,
                p.tint[2] + tint_jitter,
            ];
            draw_cell(&mut img, class, &shape, tint, Some(cyto_r), &mut rng);
            placed.push((cx, cy, cyto_r));
            annotations.push(CellAnnotation {
                x: cx.round() as u32,
                y: cy.round() as u32,
                label: class.binary(),
            });
        }
        let abnormal = annotations
            .iter()
            .filter(|a| a.label == BinaryLabel::Abnormal)
            .count();
        let grade = grade_for(abnormal, annotations.len().max(1));
        let rec = MultiCellRecord::new(img, annotations, grade, format!("slide{i:03}"))
            .expect("synthetic slide is well formed");
        out.push(rec);
    }
    out
}

/// Generate a paired corpus: `n` single-cell records plus `ceil(n / 10)`
/// multi-cell canvases, all determined by the seed.
pub fn synth_cells(n: usize, seed: u64) -> (Vec<CellRecord>, Vec<MultiCellRecord>) {
    let config = SynthConfig::default();
    let singles = synth_single_cells(&config, n, seed);
    let multis = synth_multicell(&config, n.div_ceil(10), seed);
    (singles, multis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture::{glcm, homogeneity, GlcmConfig};

    #[test]
    fn generation_is_deterministic_and_index_stable() {
        let cfg = SynthConfig::default();
        let a = synth_single_cells(&cfg, 10, 33);
        let b = synth_single_cells(&cfg, 10, 33);
        assert_eq!(a, b);
        let short = synth_single_cells(&cfg, 4, 33);
        assert_eq!(&a[..4], &short[..]);
        let other_seed = synth_single_cells(&cfg, 4, 34);
        assert_ne!(short, other_seed);

        let m1 = synth_multicell(&cfg, 3, 5);
        let m2 = synth_multicell(&cfg, 5, 5);
        assert_eq!(&m1[..], &m2[..3]);
    }

    #[test]
    fn abnormal_nuclei_are_larger_on_average() {
        let cfg = SynthConfig::default();
        let normal = synth_single_for_classes(
            &cfg,
            &[ClassLabel::Nsup, ClassLabel::Nint, ClassLabel::Ncol],
            120,
            7,
        );
        let abnormal = synth_single_for_classes(
            &cfg,
            &[
                ClassLabel::Ldys,
                ClassLabel::Mdys,
                ClassLabel::Sdys,
                ClassLabel::Cis,
            ],
            120,
            7,
        );
        let mean = |rs: &[CellRecord]| {
            rs.iter().map(|r| r.gt_mask.count()).sum::<usize>() as f64 / rs.len() as f64
        };
        assert!(
            mean(&abnormal) > mean(&normal),
            "abnormal {} vs normal {}",
            mean(&abnormal),
            mean(&normal)
        );
    }

    #[test]
    fn records_are_well_formed() {
        let (singles, multis) = synth_cells(21, 0);
        assert_eq!(singles.len(), 21);
        assert_eq!(multis.len(), 3);
        for r in &singles {
            assert_eq!((r.image.width, r.image.height, r.image.channels), (48, 48, 3));
            assert!(!r.gt_mask.is_empty());
            let inside: f64 = {
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in 0..48 {
                    for x in 0..48 {
                        if r.gt_mask.get(x, y) {
                            sum += r.image.to_gray().get(x, y, 0) as f64;
                            n += 1.0;
                        }
                    }
                }
                sum / n
            };
            let outside: f64 = {
                let gray = r.image.to_gray();
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in 0..48 {
                    for x in 0..48 {
                        if !r.gt_mask.get(x, y) {
                            sum += gray.get(x, y, 0) as f64;
                            n += 1.0;
                        }
                    }
                }
                sum / n
            };
            assert!(
                outside - inside > 50.0,
                "nucleus should be much darker: in {inside:.0} out {outside:.0}"
            );
        }
    }

    #[test]
    fn texture_separates_normal_from_abnormal() {
        let cfg = SynthConfig::default();
        let glcm_cfg = GlcmConfig::default();
        let normal = synth_single_for_classes(
            &cfg,
            &[ClassLabel::Nsup, ClassLabel::Nint, ClassLabel::Ncol],
            45,
            19,
        );
        let abnormal = synth_single_for_classes(
            &cfg,
            &[
                ClassLabel::Ldys,
                ClassLabel::Mdys,
                ClassLabel::Sdys,
                ClassLabel::Cis,
            ],
            45,
            19,
        );
        for r in &normal {
            let he = homogeneity(&glcm(&r.image, &glcm_cfg).unwrap()).unwrap();
            assert!(he >= 0.9, "{}: homogeneity {he:.3} should be >= 0.9", r.id);
        }
        for r in &abnormal {
            let he = homogeneity(&glcm(&r.image, &glcm_cfg).unwrap()).unwrap();
            assert!(he < 0.9, "{}: homogeneity {he:.3} should be < 0.9", r.id);
        }
    }

    #[test]
    fn columnar_and_intermediate_differ_only_in_tint() {
        let cfg = SynthConfig::default();
        let nint = synth_single_for_classes(&cfg, &[ClassLabel::Nint], 12, 4);
        let ncol = synth_single_for_classes(&cfg, &[ClassLabel::Ncol], 12, 4);
        for (a, b) in nint.iter().zip(&ncol) {
            assert_eq!(a.gt_mask, b.gt_mask, "masks must match for {}", a.id);
            assert_ne!(a.image, b.image, "tint must differ for {}", a.id);
        }
    }

    #[test]
    fn canvases_have_valid_annotations_and_grades() {
        let cfg = SynthConfig::default();
        let multis = synth_multicell(&cfg, 12, 77);
        let mut saw_abnormal = false;
        for m in &multis {
            assert!(!m.annotations.is_empty());
            assert!(m.annotations.len() <= cfg.cells_per_canvas.1);
            for a in &m.annotations {
                assert!((a.x as usize) < m.image.width);
                assert!((a.y as usize) < m.image.height);
                // The annotated centroid sits on nucleus-dark pixels.
                let v = m.image.to_gray().get(a.x as usize, a.y as usize, 0);
                assert!(v < 140, "centroid of {} is not dark: {v}", m.id);
                saw_abnormal |= a.label == BinaryLabel::Abnormal;
            }
            let abnormal = m
                .annotations
                .iter()
                .filter(|a| a.label == BinaryLabel::Abnormal)
                .count();
            assert_eq!(m.slide_grade, grade_for(abnormal, m.annotations.len()));
        }
        assert!(saw_abnormal, "at least one canvas should hold abnormal cells");
    }
}

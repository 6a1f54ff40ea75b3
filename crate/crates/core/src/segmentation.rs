//! Patch-CNN nucleus segmentation with selective preprocessing.
//!
//! Images are routed by GLCM homogeneity: smooth low-contrast images get a
//! CLAHE enhancement pass first, textured ones stay raw. Each route has its
//! own small patch classifier (`cnn_p` for preprocessed images, `cnn_w` for
//! raw ones) trained on 3-class patches whose label is the center pixel's
//! class: nucleus interior, boundary edge band, or background. Dense
//! per-pixel inference plus morphological post-processing produce the
//! final nucleus mask: one 8-connected component with its holes filled.
//!
//! A 2-class mode (nucleus vs background, no edge band) exists for
//! ablation; it shares every other code path.

use crate::dataset::CellRecord;
use crate::imgproc::{
    clahe, connected_components, BinaryMask, RasterImage,
};
use crate::metrics::pixel_fscore;
use crate::nnet::{
    evaluate, pack_network, stack, train, unpack_network, image_to_tensor, LayerKind, LayerSpec,
    Network, TrainConfig, TrainData, TrainingCurve, WeightArchive,
};
use crate::texture::{route, GlcmConfig, Route, SeparationRule};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Pixel class codes, also used in exported indexed PNGs.
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_EDGE: u8 = 1;
pub const CLASS_NUCLEUS: u8 = 2;

/// Patch geometry and sampling parameters.
///
/// A patch of size `p` "centered" at pixel (x, y) covers columns
/// `x - p/2 ..= x + p - 1 - p/2`; for even sizes the center sits at index
/// `p/2`, one right of the geometric middle. Out-of-image coordinates are
/// clamped (edge replication).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_size: usize,
    /// Half-width of the edge band around the mask boundary, in pixels.
    pub edge_band: usize,
    /// Training patches sampled per class per image.
    pub per_class_budget: usize,
    /// Dense-inference stride; scores are nearest-neighbor upsampled when > 1.
    pub stride: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_size: 32,
            edge_band: 2,
            per_class_budget: 40,
            stride: 1,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::InvalidParameter(
                "patch size must be at least 2".into(),
            ));
        }
        if self.edge_band < 1 {
            return Err(Error::InvalidParameter("edge band must be >= 1".into()));
        }
        if self.per_class_budget < 1 {
            return Err(Error::InvalidParameter(
                "per-class patch budget must be >= 1".into(),
            ));
        }
        if self.stride < 1 {
            return Err(Error::InvalidParameter("stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel 3-class decision plus the scores behind it. The stored class
/// is always the argmax of the scores (first maximum on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct TriClassMap {
    pub width: usize,
    pub height: usize,
    classes: Vec<u8>,
    scores: Vec<[f32; 3]>,
}

impl TriClassMap {
    /// Build from scores; classes are derived, which keeps the
    /// argmax-equals-class invariant true by construction.
    pub fn from_scores(width: usize, height: usize, scores: Vec<[f32; 3]>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for {}x{} map",
                scores.len(),
                width,
                height
            )));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite class score".into()));
        }
        let classes = scores
            .iter()
            .map(|s| {
                let mut best = 0u8;
                for k in 1..3 {
                    if s[k as usize] > s[best as usize] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Ok(TriClassMap {
            width,
            height,
            classes,
            scores,
        })
    }

    #[inline]
    pub fn class_at(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn scores_at(&self, x: usize, y: usize) -> [f32; 3] {
        self.scores[y * self.width + x]
    }

    /// Raw class indices row-major, for indexed PNG export.
    pub fn indices(&self) -> &[u8] {
        &self.classes
    }

    /// (background, edge, nucleus) pixel counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = [0usize; 3];
        for &k in &self.classes {
            c[k as usize] += 1;
        }
        (c[0], c[1], c[2])
    }

    /// Foreground under the edge-merge rule: nucleus and edge pixels.
    pub fn fg_mask(&self) -> BinaryMask {
        let data = self
            .classes
            .iter()
            .map(|&k| k != CLASS_BACKGROUND)
            .collect();
        BinaryMask::from_data(self.width, self.height, data).expect("same dims")
    }
}

/// Ground-truth pixel labels: the edge class is every pixel within
/// Chebyshev distance `b` of the mask boundary, where a boundary pixel is
/// foreground with at least one background 4-neighbor (pixels outside the
/// image count as background). Remaining foreground is nucleus, remaining
/// pixels background.
pub fn label_pixels(gt: &BinaryMask, b: usize) -> TriClassMap {
    let (w, h) = (gt.width, gt.height);
    let mut is_edge = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !gt.get(x, y) {
                continue;
            }
            let mut boundary = x == 0 || y == 0 || x == w - 1 || y == h - 1;
            if !boundary {
                boundary = !gt.get(x - 1, y)
                    || !gt.get(x + 1, y)
                    || !gt.get(x, y - 1)
                    || !gt.get(x, y + 1);
            }
            if boundary {
                let y0 = y.saturating_sub(b);
                let x0 = x.saturating_sub(b);
                for ny in y0..=(y + b).min(h - 1) {
                    for nx in x0..=(x + b).min(w - 1) {
                        is_edge[ny * w + nx] = true;
                    }
                }
            }
        }
    }
    let scores = (0..w * h)
        .map(|i| {
            let class = if is_edge[i] {
                CLASS_EDGE
            } else if gt.data[i] {
                CLASS_NUCLEUS
            } else {
                CLASS_BACKGROUND
            };
            let mut s = [0.0f32; 3];
            s[class as usize] = 1.0;
            s
        })
        .collect();
    TriClassMap::from_scores(w, h, scores).expect("one-hot scores are valid")
}

/// The enhancement pass for the preprocess route: CLAHE over the grayscale
/// image (the same operator detection uses), replicated back to 3 channels
/// so both routes feed identically shaped patches.
pub fn preprocess_image(img: &RasterImage) -> RasterImage {
    let gray = img.to_gray();
    let tiles = (8.min(gray.height).max(1), 8.min(gray.width).max(1));
    let enhanced = clahe(&gray, tiles, 2.0).expect("grayscale input");
    enhanced.gray_to_rgb()
}

/// Cut the patch centered at (cx, cy) with edge replication.
fn cut_patch(img: &RasterImage, cx: usize, cy: usize, p: usize) -> RasterImage {
    let half = p / 2;
    let mut out = RasterImage::new(p, p, img.channels);
    for py in 0..p {
        let sy = (cy + py).saturating_sub(half).min(img.height - 1);
        for px in 0..p {
            let sx = (cx + px).saturating_sub(half).min(img.width - 1);
            for c in 0..img.channels {
                out.set(px, py, c, img.get(sx, sy, c));
            }
        }
    }
    out
}

/// Sample class-balanced training patches from one record. The patch label
/// is the 3-class label of the center pixel. With `preprocessed` the pixels
/// are read from the enhanced image; labels always come from the ground
/// truth. Deterministic for a fixed seed.
pub fn extract_patches(
    rec: &CellRecord,
    spec: &PatchSpec,
    preprocessed: bool,
    seed: u64,
) -> Result<Vec<(RasterImage, u8)>> {
    Ok(extract_patches_at(rec, spec, preprocessed, seed)?
        .into_iter()
        .map(|(patch, _, class)| (patch, class))
        .collect())
}

/// `extract_patches` plus each patch's center coordinates, for callers that
/// need to re-derive labels from the ground truth at the center.
pub fn extract_patches_at(
    rec: &CellRecord,
    spec: &PatchSpec,
    preprocessed: bool,
    seed: u64,
) -> Result<Vec<(RasterImage, (usize, usize), u8)>> {
    spec.validate()?;
    let source = if preprocessed {
        preprocess_image(&rec.image)
    } else {
        rec.image.clone()
    };
    let tri = label_pixels(&rec.gt_mask, spec.edge_band);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for class in [CLASS_BACKGROUND, CLASS_EDGE, CLASS_NUCLEUS] {
        let mut centers: Vec<(usize, usize)> = (0..rec.image.height)
            .flat_map(|y| (0..rec.image.width).map(move |x| (x, y)))
            .filter(|&(x, y)| tri.class_at(x, y) == class)
            .collect();
        centers.shuffle(&mut rng);
        for &(x, y) in centers.iter().take(spec.per_class_budget) {
            out.push((cut_patch(&source, x, y, spec.patch_size), (x, y), class));
        }
    }
    Ok(out)
}

/// The VGG-like patch classifier: two stacks of stride-1 3x3 convs with a
/// 2x2 pool after the first stack, then a small fully connected head. The
/// pool after the second stack is applied only when the patch is at least 16
/// pixels wide. The center class flips between adjacent pixels at the nucleus
/// boundary, so on small patches a second pool would make that one-pixel
/// distinction sub-resolution and smear the predicted boundary outward.
pub fn seg_network_specs(
    patch_size: usize,
    conv_filters: usize,
    fc_units: usize,
    n_classes: usize,
) -> Vec<LayerSpec> {
    let conv = LayerKind::Conv {
        filters: conv_filters,
        kernel: (3, 3),
        stride: 1,
        pad: 1,
    };
    let pool = LayerKind::MaxPool {
        window: 2,
        stride: 2,
    };
    let mut specs = vec![
        LayerSpec::trainable(conv),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(conv),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(pool),
        LayerSpec::trainable(conv),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(conv),
        LayerSpec::trainable(LayerKind::Relu),
    ];
    if patch_size >= 16 {
        specs.push(LayerSpec::trainable(pool));
    }
    specs.extend([
        LayerSpec::trainable(LayerKind::Fc { units: fc_units }),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(LayerKind::Fc { units: n_classes }),
        LayerSpec::trainable(LayerKind::Softmax),
    ]);
    specs
}

/// Everything `train_seg` needs beyond the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub patch: PatchSpec,
    pub rule: SeparationRule,
    pub glcm: GlcmConfig,
    /// When false every image goes down the raw route and only `cnn_w`
    /// is trained (single-CNN mode).
    pub routing_enabled: bool,
    /// When false the edge band is dropped and networks are binary
    /// nucleus-vs-background (the 2-class ablation).
    pub use_edge_class: bool,
    pub conv_filters: usize,
    pub fc_units: usize,
    /// Fraction of sampled patches held out for the patch-accuracy report.
    pub val_fraction: f64,
    pub train: TrainConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            patch: PatchSpec::default(),
            rule: SeparationRule::default(),
            glcm: GlcmConfig::default(),
            routing_enabled: true,
            use_edge_class: true,
            conv_filters: 32,
            fc_units: 128,
            val_fraction: 0.2,
            train: TrainConfig::default(),
        }
    }
}

impl SegTrainConfig {
    fn n_classes(&self) -> usize {
        if self.use_edge_class {
            3
        } else {
            2
        }
    }
}

/// The trained pair plus everything needed to route at inference time.
#[derive(Debug, Clone)]
pub struct SegModelPair {
    /// Classifier for raw (not preprocessed) images. `None` = untrained.
    pub cnn_w: Option<Network<f32>>,
    /// Classifier for CLAHE-preprocessed images. `None` = untrained.
    pub cnn_p: Option<Network<f32>>,
    pub rule: SeparationRule,
    pub glcm: GlcmConfig,
    pub patch: PatchSpec,
    pub use_edge_class: bool,
}

impl SegModelPair {
    pub fn is_trained(&self) -> bool {
        self.cnn_w.is_some() || self.cnn_p.is_some()
    }

    /// Decide which network handles this image. Falls back to the other
    /// route's network when one side is untrained (single-CNN mode).
    fn pick_route(&self, img: &RasterImage) -> Result<(Route, &Network<f32>)> {
        match (&self.cnn_w, &self.cnn_p) {
            (Some(w), Some(p)) => {
                let r = route(img, &self.rule, &self.glcm)?;
                Ok(match r {
                    Route::Preprocess => (r, p),
                    Route::NoPreprocess => (r, w),
                })
            }
            (Some(w), None) => Ok((Route::NoPreprocess, w)),
            (None, Some(p)) => Ok((Route::Preprocess, p)),
            (None, None) => Err(Error::State("segmentation model is untrained".into())),
        }
    }
}

/// Training outcome details alongside the model pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegTrainReport {
    /// Images that went down (preprocess, raw) routes.
    pub route_counts: (usize, usize),
    pub curve_w: Option<TrainingCurve>,
    pub curve_p: Option<TrainingCurve>,
    /// Held-out patch classification accuracy per network.
    pub patch_val_accuracy_w: Option<f64>,
    pub patch_val_accuracy_p: Option<f64>,
}

fn patch_pool_to_data(
    pool: &[(RasterImage, usize)],
    indices: &[usize],
) -> Result<TrainData<f32>> {
    let tensors: Vec<_> = indices
        .iter()
        .map(|&i| image_to_tensor::<f32>(&pool[i].0))
        .collect();
    let labels = indices.iter().map(|&i| pool[i].1).collect();
    TrainData::new(stack(&tensors)?, labels)
}

/// Train one route's network on its patch pool; returns the network, its
/// curve, and held-out patch accuracy.
fn train_route(
    pool: Vec<(RasterImage, usize)>,
    cfg: &SegTrainConfig,
    seed_offset: u64,
) -> Result<(Network<f32>, TrainingCurve, Option<f64>)> {
    let mut net = Network::<f32>::new(
        &[3, cfg.patch.patch_size, cfg.patch.patch_size],
        &seg_network_specs(
            cfg.patch.patch_size,
            cfg.conv_filters,
            cfg.fc_units,
            cfg.n_classes(),
        ),
        cfg.train.seed.wrapping_add(seed_offset),
    )?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed.wrapping_add(seed_offset));
    order.shuffle(&mut rng);
    let n_val = ((pool.len() as f64 * cfg.val_fraction).round() as usize).min(pool.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let train_data = patch_pool_to_data(&pool, train_idx)?;
    let val_data = if val_idx.is_empty() {
        None
    } else {
        Some(patch_pool_to_data(&pool, val_idx)?)
    };
    let mut train_cfg = cfg.train;
    train_cfg.seed = cfg.train.seed.wrapping_add(seed_offset);
    let curve = train(&mut net, &train_data, val_data.as_ref(), &train_cfg)?;
    let val_acc = match &val_data {
        Some(v) => Some(evaluate(&net, v, train_cfg.loss, train_cfg.batch_size)?.1),
        None => None,
    };
    Ok((net, curve, val_acc))
}

/// Train the segmentation pair. Records are routed by texture; each route's
/// network sees only patches from its own images (preprocessed pixels for
/// the preprocess route). With routing enabled, a route with no images is a
/// configuration error; with routing disabled all images train `cnn_w`.
pub fn train_seg(
    records: &[CellRecord],
    cfg: &SegTrainConfig,
) -> Result<(SegModelPair, SegTrainReport)> {
    cfg.patch.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(Error::InvalidParameter(
            "patch validation fraction must lie in [0, 1)".into(),
        ));
    }
    let mut preprocess_recs = Vec::new();
    let mut raw_recs = Vec::new();
    for rec in records {
        let r = if cfg.routing_enabled {
            route(&rec.image, &cfg.rule, &cfg.glcm)?
        } else {
            Route::NoPreprocess
        };
        match r {
            Route::Preprocess => preprocess_recs.push(rec),
            Route::NoPreprocess => raw_recs.push(rec),
        }
    }
    if cfg.routing_enabled {
        if preprocess_recs.is_empty() {
            return Err(Error::Config(
                "preprocess route received no training images; lower the homogeneity threshold or disable routing".into(),
            ));
        }
        if raw_recs.is_empty() {
            return Err(Error::Config(
                "no-preprocess route received no training images; raise the homogeneity threshold or disable routing".into(),
            ));
        }
    }
    // Sampling is class-balanced up to the per-class budget. In 3-class mode
    // the classes are the tri-class labels, which concentrates a third of the
    // budget on the boundary band. In 2-class mode the classes are just
    // nucleus and background, sampled uniformly over each region, so boundary
    // pixels appear only in proportion to their area. That asymmetry is the
    // point of the edge class: removing it also removes the concentration of
    // training signal at the boundary.
    let collect_pool = |recs: &[&CellRecord], preprocessed: bool| -> Result<Vec<(RasterImage, usize)>> {
        let mut pool = Vec::new();
        for (i, rec) in recs.iter().enumerate() {
            let seed = cfg
                .train
                .seed
                .wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
                ^ (preprocessed as u64);
            if cfg.use_edge_class {
                for (patch, _, class) in
                    extract_patches_at(rec, &cfg.patch, preprocessed, seed)?
                {
                    pool.push((patch, class as usize));
                }
            } else {
                let source = if preprocessed {
                    preprocess_image(&rec.image)
                } else {
                    rec.image.clone()
                };
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for fg in [false, true] {
                    let mut centers: Vec<(usize, usize)> = (0..rec.image.height)
                        .flat_map(|y| (0..rec.image.width).map(move |x| (x, y)))
                        .filter(|&(x, y)| rec.gt_mask.get(x, y) == fg)
                        .collect();
                    centers.shuffle(&mut rng);
                    for &(x, y) in centers.iter().take(cfg.patch.per_class_budget) {
                        pool.push((
                            cut_patch(&source, x, y, cfg.patch.patch_size),
                            fg as usize,
                        ));
                    }
                }
            }
        }
        Ok(pool)
    };

    let mut pair = SegModelPair {
        cnn_w: None,
        cnn_p: None,
        rule: cfg.rule,
        glcm: cfg.glcm.clone(),
        patch: cfg.patch,
        use_edge_class: cfg.use_edge_class,
    };
    let mut report = SegTrainReport {
        route_counts: (preprocess_recs.len(), raw_recs.len()),
        curve_w: None,
        curve_p: None,
        patch_val_accuracy_w: None,
        patch_val_accuracy_p: None,
    };
    // The two routes are independent (own pools, own seeds), so they train
    // concurrently; results are deterministic regardless of scheduling.
    let (res_w, res_p) = rayon::join(
        || {
            if raw_recs.is_empty() {
                return Ok(None);
            }
            let pool = collect_pool(&raw_recs, false)?;
            train_route(pool, cfg, 0).map(Some)
        },
        || {
            if preprocess_recs.is_empty() {
                return Ok(None);
            }
            let pool = collect_pool(&preprocess_recs, true)?;
            train_route(pool, cfg, 1).map(Some)
        },
    );
    if let Some((net, curve, acc)) = res_w? {
        pair.cnn_w = Some(net);
        report.curve_w = Some(curve);
        report.patch_val_accuracy_w = acc;
    }
    if let Some((net, curve, acc)) = res_p? {
        pair.cnn_p = Some(net);
        report.curve_p = Some(curve);
        report.patch_val_accuracy_p = acc;
    }
    Ok((pair, report))
}

/// Keep the largest 8-connected component (ties resolved by centroid
/// distance to the image center), then fill its holes: background not
/// reachable from the border through 4-connected background becomes
/// foreground. Idempotent; an empty mask stays empty.
pub fn post_process(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width, mask.height);
    if mask.is_empty() {
        return mask.clone();
    }
    let labels = connected_components(mask);
    let n = labels.component_count;
    let mut area = vec![0usize; n + 1];
    let mut sum_x = vec![0f64; n + 1];
    let mut sum_y = vec![0f64; n + 1];
    for y in 0..h {
        for x in 0..w {
            let l = labels.get(x, y) as usize;
            if l > 0 {
                area[l] += 1;
                sum_x[l] += x as f64;
                sum_y[l] += y as f64;
            }
        }
    }
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut best = 1usize;
    for l in 2..=n {
        if area[l] > area[best] {
            best = l;
        } else if area[l] == area[best] {
            let dist = |k: usize| {
                let mx = sum_x[k] / area[k] as f64;
                let my = sum_y[k] / area[k] as f64;
                (mx - cx).powi(2) + (my - cy).powi(2)
            };
            if dist(l) < dist(best) {
                best = l;
            }
        }
    }
    let mut out = BinaryMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, labels.get(x, y) as usize == best);
        }
    }
    // Flood-fill outside background from the border; anything not reached
    // is a hole.
    let mut outside = vec![false; w * h];
    let mut stack_px: Vec<(usize, usize)> = Vec::new();
    for x in 0..w {
        for y in [0, h - 1] {
            if !out.get(x, y) && !outside[y * w + x] {
                outside[y * w + x] = true;
                stack_px.push((x, y));
            }
        }
    }
    for y in 0..h {
        for x in [0, w - 1] {
            if !out.get(x, y) && !outside[y * w + x] {
                outside[y * w + x] = true;
                stack_px.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack_px.pop() {
        let push = |nx: usize, ny: usize, outside: &mut Vec<bool>, stack_px: &mut Vec<(usize, usize)>| {
            if !out.get(nx, ny) && !outside[ny * w + nx] {
                outside[ny * w + nx] = true;
                stack_px.push((nx, ny));
            }
        };
        if x > 0 {
            push(x - 1, y, &mut outside, &mut stack_px);
        }
        if x + 1 < w {
            push(x + 1, y, &mut outside, &mut stack_px);
        }
        if y > 0 {
            push(x, y - 1, &mut outside, &mut stack_px);
        }
        if y + 1 < h {
            push(x, y + 1, &mut outside, &mut stack_px);
        }
    }
    for y in 0..h {
        for x in 0..w {
            if !out.get(x, y) && !outside[y * w + x] {
                out.set(x, y, true);
            }
        }
    }
    out
}

/// Dense inference with an explicit network choice; `segment` picks the
/// route, `calibrate_threshold` forces each side.
fn segment_with(
    img: &RasterImage,
    net: &Network<f32>,
    preprocessed: bool,
    spec: &PatchSpec,
    use_edge_class: bool,
) -> Result<(TriClassMap, BinaryMask)> {
    spec.validate()?;
    let p = spec.patch_size;
    if net.input_shape != [3, p, p] {
        return Err(Error::ShapeMismatch(format!(
            "network expects input {:?}, patch spec gives [3, {p}, {p}]",
            net.input_shape
        )));
    }
    let source = if preprocessed {
        preprocess_image(img)
    } else if img.channels == 3 {
        img.clone()
    } else {
        img.gray_to_rgb()
    };
    let (w, h) = (img.width, img.height);
    let s = spec.stride;
    let grid_x: Vec<usize> = (0..w).step_by(s).collect();
    let grid_y: Vec<usize> = (0..h).step_by(s).collect();
    let centers: Vec<(usize, usize)> = grid_y
        .iter()
        .flat_map(|&y| grid_x.iter().map(move |&x| (x, y)))
        .collect();
    let n_out = net.output_dim();
    // Chunked batch inference; chunks are independent so row order is
    // preserved by the ordered collect.
    let chunk_scores: Vec<Result<Vec<[f32; 3]>>> = centers
        .par_chunks(512)
        .map(|chunk| {
            let tensors: Vec<_> = chunk
                .iter()
                .map(|&(x, y)| image_to_tensor::<f32>(&cut_patch(&source, x, y, p)))
                .collect();
            let out = net.forward(&stack(&tensors)?)?;
            Ok(chunk
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    let row = &out.data[i * n_out..(i + 1) * n_out];
                    if use_edge_class {
                        [row[0], row[1], row[2]]
                    } else {
                        [row[0], 0.0, row[1]]
                    }
                })
                .collect())
        })
        .collect();
    let mut grid_scores = Vec::with_capacity(centers.len());
    for c in chunk_scores {
        grid_scores.extend(c?);
    }
    let (nx, ny) = (grid_x.len(), grid_y.len());
    let scores: Vec<[f32; 3]> = (0..h)
        .flat_map(|y| {
            let gy = ((y + s / 2) / s).min(ny - 1);
            (0..w).map(move |x| {
                let gx = ((x + s / 2) / s).min(nx - 1);
                (gx, gy)
            })
        })
        .map(|(gx, gy)| grid_scores[gy * nx + gx])
        .collect();
    let tri = TriClassMap::from_scores(w, h, scores)?;
    let mask = post_process(&tri.fg_mask());
    Ok((tri, mask))
}

/// Route the image, densely classify every pixel's patch, and post-process
/// into the final nucleus mask. Deterministic for a fixed model and image.
pub fn segment(
    img: &RasterImage,
    model: &SegModelPair,
    spec: &PatchSpec,
) -> Result<(TriClassMap, BinaryMask)> {
    let (route_taken, net) = model.pick_route(img)?;
    segment_with(
        img,
        net,
        route_taken == Route::Preprocess,
        spec,
        model.use_edge_class,
    )
}

/// Replace everything outside the mask with white (255) in all channels.
pub fn mask_background(img: &RasterImage, mask: &BinaryMask) -> Result<RasterImage> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            if !mask.get(x, y) {
                for c in 0..img.channels {
                    out.set(x, y, c, 255);
                }
            }
        }
    }
    Ok(out)
}

/// Mean F-score per candidate threshold, and the best threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub best_threshold: f64,
    /// (threshold, mean F-score) over the calibration records.
    pub grid: Vec<(f64, f64)>,
}

/// Pick the routing threshold that maximizes mean segmentation F-score
/// over the given records, searching the grid {0.05, 0.10, ..., 0.95}.
///
/// Routing only affects which network an image lands on, so each record is
/// segmented once per network and per-threshold scores are assembled from
/// those two results; this is exactly equivalent to re-running segment at
/// every threshold. Ties prefer the lowest threshold.
pub fn calibrate_threshold(
    records: &[CellRecord],
    model: &SegModelPair,
    spec: &PatchSpec,
) -> Result<ThresholdCalibration> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no calibration records".into()));
    }
    let (Some(w_net), Some(p_net)) = (&model.cnn_w, &model.cnn_p) else {
        return Err(Error::State(
            "threshold calibration needs both route networks trained".into(),
        ));
    };
    let mut homogeneity = Vec::with_capacity(records.len());
    let mut f_raw = Vec::with_capacity(records.len());
    let mut f_pre = Vec::with_capacity(records.len());
    for rec in records {
        let m = crate::texture::glcm(&rec.image, &model.glcm)?;
        homogeneity.push(crate::texture::homogeneity(&m)?);
        let (_, mask_w) = segment_with(&rec.image, w_net, false, spec, model.use_edge_class)?;
        let (_, mask_p) = segment_with(&rec.image, p_net, true, spec, model.use_edge_class)?;
        f_raw.push(pixel_fscore(&mask_w, &rec.gt_mask)?.fscore);
        f_pre.push(pixel_fscore(&mask_p, &rec.gt_mask)?.fscore);
    }
    let mut grid = Vec::new();
    let mut best = (0.05, f64::NEG_INFINITY);
    for step in 1..=19 {
        let t = step as f64 * 0.05;
        let mean = homogeneity
            .iter()
            .zip(f_raw.iter().zip(&f_pre))
            .map(|(&h, (&fw, &fp))| if h >= t { fp } else { fw })
            .sum::<f64>()
            / records.len() as f64;
        grid.push((t, mean));
        if mean > best.1 {
            best = (t, mean);
        }
    }
    Ok(ThresholdCalibration {
        best_threshold: best.0,
        grid,
    })
}

#[derive(Serialize, Deserialize)]
struct SegPairMeta {
    kind: String,
    rule: SeparationRule,
    glcm: GlcmConfig,
    patch: PatchSpec,
    use_edge_class: bool,
    net_w: Option<serde_json::Value>,
    net_p: Option<serde_json::Value>,
}

/// Persist the pair (both networks plus routing state) in one archive.
pub fn save_seg_model(model: &SegModelPair, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut archive = WeightArchive::new();
    let net_w = model
        .cnn_w
        .as_ref()
        .map(|n| pack_network(&mut archive, "cnn_w", n))
        .transpose()?;
    let net_p = model
        .cnn_p
        .as_ref()
        .map(|n| pack_network(&mut archive, "cnn_p", n))
        .transpose()?;
    archive.meta = Some(serde_json::to_value(SegPairMeta {
        kind: "seg_pair".into(),
        rule: model.rule,
        glcm: model.glcm.clone(),
        patch: model.patch,
        use_edge_class: model.use_edge_class,
        net_w,
        net_p,
    })?);
    archive.save(path)
}

/// Load a pair written by [`save_seg_model`].
pub fn load_seg_model(path: impl AsRef<std::path::Path>) -> Result<SegModelPair> {
    let archive = WeightArchive::load(&path)?;
    let meta_value = archive.meta.clone().ok_or_else(|| {
        Error::WeightLoad(vec![format!(
            "{}: archive has no metadata",
            path.as_ref().display()
        )])
    })?;
    let meta: SegPairMeta = serde_json::from_value(meta_value)?;
    if meta.kind != "seg_pair" {
        return Err(Error::WeightLoad(vec![format!(
            "{}: archive holds '{}', not a segmentation pair",
            path.as_ref().display(),
            meta.kind
        )]));
    }
    let cnn_w = meta
        .net_w
        .as_ref()
        .map(|m| unpack_network::<f32>(&archive, "cnn_w", m))
        .transpose()?;
    let cnn_p = meta
        .net_p
        .as_ref()
        .map(|m| unpack_network::<f32>(&archive, "cnn_p", m))
        .transpose()?;
    Ok(SegModelPair {
        cnn_w,
        cnn_p,
        rule: meta.rule,
        glcm: meta.glcm,
        patch: meta.patch,
        use_edge_class: meta.use_edge_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_single_cells, ClassLabel, SynthConfig};
    use crate::nnet::Loss;
    use rand::Rng;

    fn square_mask(w: usize, h: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for y in y0..=y1 {
            for x in x0..=x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    /// Brute-force reference: Chebyshev distance from each pixel to the
    /// nearest boundary pixel, computed by scanning all pairs.
    fn oracle_labels(gt: &BinaryMask, b: usize) -> Vec<u8> {
        let (w, h) = (gt.width, gt.height);
        let mut boundary = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !gt.get(x, y) {
                    continue;
                }
                let bg_at = |x: i64, y: i64| {
                    x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !gt.get(x as usize, y as usize)
                };
                let (xi, yi) = (x as i64, y as i64);
                if bg_at(xi - 1, yi) || bg_at(xi + 1, yi) || bg_at(xi, yi - 1) || bg_at(xi, yi + 1)
                {
                    boundary.push((xi, yi));
                }
            }
        }
        (0..h as i64)
            .flat_map(|y| (0..w as i64).map(move |x| (x, y)))
            .map(|(x, y)| {
                let near = boundary
                    .iter()
                    .any(|&(bx, by)| (x - bx).abs().max((y - by).abs()) <= b as i64);
                if near {
                    CLASS_EDGE
                } else if gt.get(x as usize, y as usize) {
                    CLASS_NUCLEUS
                } else {
                    CLASS_BACKGROUND
                }
            })
            .collect()
    }

    #[test]
    fn all_false_mask_is_all_background() {
        let tri = label_pixels(&BinaryMask::new(7, 5), 2);
        assert_eq!(tri.counts(), (35, 0, 0));
    }

    #[test]
    fn solid_square_band_matches_distance_oracle() {
        let gt = square_mask(10, 10, 2, 2, 7, 7);
        let tri = label_pixels(&gt, 1);
        assert_eq!(tri.indices(), &oracle_labels(&gt, 1)[..]);
        // Interior shrinks by the band: 6x6 square minus 1px boundary ring
        // minus 1px band inward leaves a 2x2... compute via the oracle
        // instead of hand arithmetic. Nucleus must be nonempty and central.
        let (_, edge, nucleus) = tri.counts();
        assert!(edge > 0 && nucleus > 0);
        assert_eq!(tri.class_at(4, 4), CLASS_NUCLEUS);
        assert_eq!(tri.class_at(2, 2), CLASS_EDGE);
        assert_eq!(tri.class_at(0, 0), CLASS_BACKGROUND);
    }

    #[test]
    fn single_pixel_has_no_interior() {
        let mut gt = BinaryMask::new(5, 5);
        gt.set(2, 2, true);
        let tri = label_pixels(&gt, 1);
        let (_, edge, nucleus) = tri.counts();
        assert_eq!(nucleus, 0);
        assert_eq!(edge, 9, "pixel plus its 8-neighborhood");
        assert_eq!(tri.class_at(2, 2), CLASS_EDGE);
    }

    #[test]
    fn random_masks_match_distance_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let (w, h) = (rng.gen_range(4..14), rng.gen_range(4..14));
            let data = (0..w * h).map(|_| rng.gen_bool(0.35)).collect();
            let gt = BinaryMask::from_data(w, h, data).unwrap();
            let b = rng.gen_range(1..3);
            let tri = label_pixels(&gt, b);
            assert_eq!(tri.indices(), &oracle_labels(&gt, b)[..]);
            // Partition: every foreground pixel is nucleus or edge.
            for y in 0..h {
                for x in 0..w {
                    if gt.get(x, y) {
                        assert_ne!(tri.class_at(x, y), CLASS_BACKGROUND);
                    }
                }
            }
        }
    }

    fn test_records(n: usize) -> Vec<CellRecord> {
        synth_single_cells(&SynthConfig::default(), n, 5)
    }

    fn quick_cfg() -> SegTrainConfig {
        SegTrainConfig {
            patch: PatchSpec {
                patch_size: 12,
                edge_band: 2,
                per_class_budget: 14,
                stride: 2,
            },
            conv_filters: 8,
            fc_units: 32,
            train: TrainConfig {
                epochs: 40,
                batch_size: 32,
                loss: Loss::CrossEntropy,
                stop_at_train_accuracy: Some(0.99),
                ..TrainConfig::default()
            },
            ..SegTrainConfig::default()
        }
    }

    #[test]
    fn extract_patches_respects_budget_and_labels() {
        let rec = &test_records(1)[0];
        let spec = PatchSpec {
            patch_size: 12,
            edge_band: 2,
            per_class_budget: 10,
            stride: 1,
        };
        let patches = extract_patches(rec, &spec, false, 3).unwrap();
        assert!(patches.len() <= 30);
        let tri = label_pixels(&rec.gt_mask, spec.edge_band);
        let mut counts = [0usize; 3];
        for (patch, class) in &patches {
            assert_eq!((patch.width, patch.height, patch.channels), (12, 12, 3));
            counts[*class as usize] += 1;
        }
        // Each class is sampled up to the budget, capped by availability.
        // A small nucleus with a wide edge band can have very few interior
        // pixels, so the nucleus count may be below budget.
        let avail = tri.counts();
        for (got, have) in counts.iter().zip([avail.0, avail.1, avail.2]) {
            assert_eq!(*got, have.min(10), "counts: {counts:?}, avail: {avail:?}");
        }
        // Determinism.
        let again = extract_patches(rec, &spec, false, 3).unwrap();
        assert_eq!(patches, again);
        let other = extract_patches(rec, &spec, false, 4).unwrap();
        assert_ne!(patches, other);
    }

    #[test]
    fn extracted_centers_agree_with_label_pixels() {
        // Re-derive each patch's center label by matching patch pixels
        // against a freshly cut patch at every candidate center of that
        // class; every patch must correspond to some center of its class.
        let rec = &test_records(1)[0];
        let spec = PatchSpec {
            patch_size: 8,
            edge_band: 2,
            per_class_budget: 6,
            stride: 1,
        };
        let tri = label_pixels(&rec.gt_mask, spec.edge_band);
        for (patch, class) in extract_patches(rec, &spec, false, 9).unwrap() {
            let found = (0..rec.image.height)
                .flat_map(|y| (0..rec.image.width).map(move |x| (x, y)))
                .filter(|&(x, y)| tri.class_at(x, y) == class)
                .any(|(x, y)| cut_patch(&rec.image, x, y, spec.patch_size) == patch);
            assert!(found, "patch of class {class} matches no center of that class");
        }
    }

    #[test]
    fn small_image_is_edge_replicated() {
        let rec = CellRecord::new(
            {
                let mut img = RasterImage::new(5, 4, 3);
                img.data.fill(100);
                img
            },
            square_mask(5, 4, 1, 1, 3, 2),
            ClassLabel::Nsup,
            "tiny".into(),
        )
        .unwrap();
        let spec = PatchSpec {
            patch_size: 8,
            edge_band: 1,
            per_class_budget: 2,
            stride: 1,
        };
        for (patch, _) in extract_patches(&rec, &spec, false, 0).unwrap() {
            assert_eq!((patch.width, patch.height), (8, 8));
        }
    }

    #[test]
    fn preprocessing_produces_rgb_of_same_size() {
        let rec = &test_records(1)[0];
        let pre = preprocess_image(&rec.image);
        assert_eq!(
            (pre.width, pre.height, pre.channels),
            (rec.image.width, rec.image.height, 3)
        );
        assert_ne!(pre, rec.image);
        // All three channels equal (it came from grayscale).
        assert_eq!(pre.get(10, 10, 0), pre.get(10, 10, 1));
    }

    #[test]
    fn post_process_keeps_largest_component_and_fills_holes() {
        // Two components: a 3x3 block and a 5x5 ring with a hole.
        let mut m = BinaryMask::new(16, 10);
        for y in 1..4 {
            for x in 1..4 {
                m.set(x, y, true);
            }
        }
        for y in 2..7 {
            for x in 8..13 {
                if y == 2 || y == 6 || x == 8 || x == 12 {
                    m.set(x, y, true);
                }
            }
        }
        let out = post_process(&m);
        // The ring (16 px) beats the block (9 px) and its hole is filled.
        assert!(!out.get(2, 2));
        assert!(out.get(10, 4), "hole filled");
        assert_eq!(out.count(), 25);
        // Idempotence.
        assert_eq!(post_process(&out), out);
    }

    #[test]
    fn post_process_tie_prefers_central_component() {
        let mut m = BinaryMask::new(21, 9);
        // Equal 2x2 blocks: one near the border, one at the center.
        for (x0, y0) in [(0usize, 0usize), (9, 4)] {
            for y in y0..y0 + 2 {
                for x in x0..x0 + 2 {
                    m.set(x, y, true);
                }
            }
        }
        let out = post_process(&m);
        assert!(out.get(9, 4));
        assert!(!out.get(0, 0));
    }

    #[test]
    fn post_process_is_idempotent_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..40 {
            let (w, h) = (rng.gen_range(5..20), rng.gen_range(5..20));
            let data = (0..w * h).map(|_| rng.gen_bool(0.4)).collect();
            let m = BinaryMask::from_data(w, h, data).unwrap();
            let once = post_process(&m);
            assert_eq!(post_process(&once), once);
            // Single component, if any foreground survived.
            if !once.is_empty() {
                assert_eq!(connected_components(&once).component_count, 1);
            }
        }
    }

    #[test]
    fn mask_background_select_semantics() {
        let rec = &test_records(1)[0];
        let full = BinaryMask::from_data(48, 48, vec![true; 48 * 48]).unwrap();
        assert_eq!(mask_background(&rec.image, &full).unwrap(), rec.image);
        let none = BinaryMask::new(48, 48);
        let blank = mask_background(&rec.image, &none).unwrap();
        assert!(blank.data.iter().all(|&v| v == 255));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<bool> = (0..48 * 48).map(|_| rng.gen_bool(0.5)).collect();
        let m = BinaryMask::from_data(48, 48, data).unwrap();
        let out = mask_background(&rec.image, &m).unwrap();
        for y in 0..48 {
            for x in 0..48 {
                for c in 0..3 {
                    let expect = if m.get(x, y) {
                        rec.image.get(x, y, c)
                    } else {
                        255
                    };
                    assert_eq!(out.get(x, y, c), expect);
                }
            }
        }
        let wrong = BinaryMask::new(10, 10);
        assert!(mask_background(&rec.image, &wrong).is_err());
    }

    #[test]
    fn train_seg_is_deterministic_and_routes() {
        let records = test_records(8);
        let cfg = quick_cfg();
        let (pair_a, report) = train_seg(&records, &cfg).unwrap();
        assert!(report.route_counts.0 > 0 && report.route_counts.1 > 0);
        assert!(pair_a.cnn_w.is_some() && pair_a.cnn_p.is_some());
        let (pair_b, _) = train_seg(&records, &cfg).unwrap();
        let weights = |p: &SegModelPair| {
            p.cnn_w.as_ref().unwrap().layers[0]
                .weight
                .as_ref()
                .unwrap()
                .data
                .clone()
        };
        assert_eq!(weights(&pair_a), weights(&pair_b));
    }

    #[test]
    fn starved_route_is_a_config_error() {
        // All-normal records are smooth, so nothing goes down the raw route.
        let records = crate::dataset::synth_single_for_classes(
            &SynthConfig::default(),
            &[ClassLabel::Nsup, ClassLabel::Nint],
            6,
            2,
        );
        let err = train_seg(&records, &quick_cfg()).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("no-preprocess"), "got: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn routing_disabled_trains_single_cnn() {
        let records = test_records(6);
        let cfg = SegTrainConfig {
            routing_enabled: false,
            ..quick_cfg()
        };
        let (pair, report) = train_seg(&records, &cfg).unwrap();
        assert!(pair.cnn_w.is_some());
        assert!(pair.cnn_p.is_none());
        assert_eq!(report.route_counts, (0, 6));
        // Degenerate mode still segments any image.
        let (_, mask) = segment(&records[0].image, &pair, &cfg.patch).unwrap();
        assert_eq!((mask.width, mask.height), (48, 48));
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let model = SegModelPair {
            cnn_w: None,
            cnn_p: None,
            rule: SeparationRule::default(),
            glcm: GlcmConfig::default(),
            patch: PatchSpec::default(),
            use_edge_class: true,
        };
        let img = RasterImage::new(16, 16, 3);
        assert!(matches!(
            segment(&img, &model, &PatchSpec::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn segment_produces_single_component_mask() {
        let records = test_records(8);
        let cfg = quick_cfg();
        let (pair, _) = train_seg(&records, &cfg).unwrap();
        let rec = &records[0];
        let (tri, mask) = segment(&rec.image, &pair, &cfg.patch).unwrap();
        assert_eq!((tri.width, tri.height), (48, 48));
        if !mask.is_empty() {
            assert_eq!(connected_components(&mask).component_count, 1);
        }
        let f = pixel_fscore(&mask, &rec.gt_mask).unwrap().fscore;
        assert!(f > 0.5, "trained model should roughly find the nucleus: F={f:.2}");
        // Determinism.
        let (_, mask2) = segment(&rec.image, &pair, &cfg.patch).unwrap();
        assert_eq!(mask, mask2);
    }

    #[test]
    fn model_round_trips_through_archive() {
        let records = test_records(6);
        let cfg = quick_cfg();
        let (pair, _) = train_seg(&records, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seg.wgt");
        save_seg_model(&pair, &path).unwrap();
        let loaded = load_seg_model(&path).unwrap();
        assert_eq!(loaded.patch, pair.patch);
        assert_eq!(loaded.rule, pair.rule);
        let (_, m1) = segment(&records[1].image, &pair, &cfg.patch).unwrap();
        let (_, m2) = segment(&records[1].image, &loaded, &cfg.patch).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn calibration_scores_cover_the_grid() {
        let records = test_records(8);
        let cfg = quick_cfg();
        let (pair, _) = train_seg(&records, &cfg).unwrap();
        let cal = calibrate_threshold(&records[..4], &pair, &cfg.patch).unwrap();
        assert_eq!(cal.grid.len(), 19);
        let best_score = cal
            .grid
            .iter()
            .find(|(t, _)| *t == cal.best_threshold)
            .unwrap()
            .1;
        assert!(cal.grid.iter().all(|&(_, s)| s <= best_score));
        // Spot-check the caching shortcut against a direct re-route for
        // one interior threshold.
        let t = 0.5;
        let mut model_t = pair.clone();
        model_t.rule.homogeneity_threshold = t;
        let mut direct = 0.0;
        for rec in &records[..4] {
            let (_, mask) = segment(&rec.image, &model_t, &cfg.patch).unwrap();
            direct += pixel_fscore(&mask, &rec.gt_mask).unwrap().fscore;
        }
        direct /= 4.0;
        let cached = cal.grid.iter().find(|(g, _)| (*g - t).abs() < 1e-9).unwrap().1;
        assert!((cached - direct).abs() < 1e-12);
    }

    #[test]
    fn two_class_mode_trains_and_segments() {
        let records = test_records(8);
        let cfg = SegTrainConfig {
            use_edge_class: false,
            ..quick_cfg()
        };
        let (pair, _) = train_seg(&records, &cfg).unwrap();
        assert_eq!(pair.cnn_w.as_ref().unwrap().output_dim(), 2);
        let (tri, mask) = segment(&records[0].image, &pair, &cfg.patch).unwrap();
        let (_, edge, _) = tri.counts();
        assert_eq!(edge, 0, "2-class mode never emits edge pixels");
        assert_eq!((mask.width, mask.height), (48, 48));
    }
}

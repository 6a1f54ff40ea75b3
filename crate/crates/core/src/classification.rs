//! Frozen-feature transfer classification.
//!
//! A fixed convolutional bank (the first one, three, or five conv layers
//! of the classic 227x227 ImageNet geometry) acts as a frozen feature
//! extractor; only a small fully connected head is trained. On top of the
//! flat 7-class head this module builds the binary decision cascade, the
//! multi-cell classifier with max-pooling dropout, and the
//! masked-background ablation.
//!
//! Because the bank never changes during training, features are computed
//! once per image and heads are trained directly on the cached features.
//! The resulting parameters are identical to training through the full
//! network; only the wasted frozen-prefix forward passes are skipped.

use crate::dataset::{BinaryLabel, CellRecord, ClassLabel, MultiCellRecord};
use crate::imgproc::{
    detect_nuclei, resize_bilinear, BBox, DetectionConfig, RasterImage,
};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::nnet::{
    image_to_tensor, load_weights, pack_network, stack, train, unpack_network, LayerKind,
    LayerSpec, Network, ParamSlot, Tensor, TrainConfig, TrainData, TrainingCurve, WeightArchive,
};
use crate::segmentation::{mask_background, segment, SegModelPair};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Classifier input edge length; sub-images are bilinearly resized to this.
pub const CLF_INPUT_SIZE: usize = 227;

/// How deep into the canonical convolutional stack features are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorDepth {
    Conv1,
    Conv3,
    Conv5,
}

impl ExtractorDepth {
    pub fn name(&self) -> &'static str {
        match self {
            ExtractorDepth::Conv1 => "conv1",
            ExtractorDepth::Conv3 => "conv3",
            ExtractorDepth::Conv5 => "conv5",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "conv1" => Ok(ExtractorDepth::Conv1),
            "conv3" => Ok(ExtractorDepth::Conv3),
            "conv5" => Ok(ExtractorDepth::Conv5),
            other => Err(Error::InvalidParameter(format!(
                "unknown extractor depth '{other}' (expected conv1, conv3, or conv5)"
            ))),
        }
    }
}

fn conv(filters: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::frozen(LayerKind::Conv {
        filters,
        kernel: (kernel, kernel),
        stride,
        pad,
    })
}

/// Frozen extractor layers for a depth. The geometry follows the classic
/// five-conv 227x227 network; deeper banks extend shallower ones.
pub fn bank_specs(depth: ExtractorDepth) -> Vec<LayerSpec> {
    let mut specs = vec![
        conv(96, 11, 4, 0),
        LayerSpec::frozen(LayerKind::Relu),
        LayerSpec::frozen(LayerKind::MaxPool { window: 3, stride: 2 }),
    ];
    if depth == ExtractorDepth::Conv1 {
        return specs;
    }
    specs.extend([
        conv(256, 5, 1, 2),
        LayerSpec::frozen(LayerKind::Relu),
        LayerSpec::frozen(LayerKind::MaxPool { window: 3, stride: 2 }),
        conv(384, 3, 1, 1),
        LayerSpec::frozen(LayerKind::Relu),
    ]);
    if depth == ExtractorDepth::Conv3 {
        return specs;
    }
    specs.extend([
        conv(384, 3, 1, 1),
        LayerSpec::frozen(LayerKind::Relu),
        conv(256, 3, 1, 1),
        LayerSpec::frozen(LayerKind::Relu),
        LayerSpec::frozen(LayerKind::MaxPool { window: 3, stride: 2 }),
    ]);
    specs
}

/// Trainable head: fc(units) + relu + fc(n_classes) + softmax.
pub fn head_specs(fc_units: usize, n_classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::trainable(LayerKind::Fc { units: fc_units }),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(LayerKind::Fc { units: n_classes }),
        LayerSpec::trainable(LayerKind::Softmax),
    ]
}

/// Archive names for a bank's conv parameters: conv1.weight, conv1.bias,
/// conv2.weight, ... mapped onto the conv layers in bank order.
pub fn bank_weight_map(depth: ExtractorDepth) -> Vec<(String, usize, ParamSlot)> {
    let mut map = Vec::new();
    let mut conv_no = 0;
    for (idx, spec) in bank_specs(depth).iter().enumerate() {
        if matches!(spec.kind, LayerKind::Conv { .. }) {
            conv_no += 1;
            map.push((format!("conv{conv_no}.weight"), idx, ParamSlot::Weight));
            map.push((format!("conv{conv_no}.bias"), idx, ParamSlot::Bias));
        }
    }
    map
}

/// Export a model's frozen bank under the conv1..convN naming, so it can
/// seed other builds via [`build_convnt`].
pub fn bank_to_archive(model: &ClfModel) -> Result<WeightArchive> {
    let mut archive = WeightArchive::new();
    for (name, idx, slot) in bank_weight_map(model.depth) {
        let layer = &model.net.layers[idx];
        let tensor = match slot {
            ParamSlot::Weight => layer.weight.as_ref(),
            ParamSlot::Bias => layer.bias.as_ref(),
        }
        .ok_or_else(|| Error::State(format!("bank layer {idx} has no parameters")))?;
        archive.add(&name, tensor)?;
    }
    Ok(archive)
}

/// A frozen-bank classifier: extractor prefix plus trainable head.
#[derive(Debug, Clone)]
pub struct ClfModel {
    pub net: Network<f32>,
    pub depth: ExtractorDepth,
    /// Layer count of the frozen prefix.
    pub frozen_len: usize,
    pub n_classes: usize,
    /// Output slot names, in score order.
    pub class_names: Vec<String>,
    pub trained: bool,
}

impl ClfModel {
    /// The frozen extractor as a standalone network.
    pub fn bank(&self) -> Result<Network<f32>> {
        self.net.subnet(0, self.frozen_len)
    }

    fn head(&self) -> Result<Network<f32>> {
        self.net.subnet(self.frozen_len, self.net.layers.len())
    }

    pub fn frozen_digest(&self) -> [u8; 32] {
        self.net.frozen_digest()
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("classifier head is untrained".into()))
        }
    }
}

/// Build a classifier with a frozen extractor and a fresh head. Without an
/// archive the bank is seeded random (deterministic per seed); with one,
/// conv parameters are loaded by the conv1..convN naming and any shape or
/// name mismatch fails the load.
pub fn build_convnt(
    depth: ExtractorDepth,
    n_classes: usize,
    weights: Option<&WeightArchive>,
    seed: u64,
) -> Result<ClfModel> {
    if n_classes < 2 {
        return Err(Error::InvalidParameter(
            "classifier needs at least 2 classes".into(),
        ));
    }
    let bank = bank_specs(depth);
    let frozen_len = bank.len();
    let mut specs = bank;
    specs.extend(head_specs(256, n_classes));
    let mut net = Network::<f32>::new(&[3, CLF_INPUT_SIZE, CLF_INPUT_SIZE], &specs, seed)?;
    if let Some(archive) = weights {
        load_weights(&mut net, archive, &bank_weight_map(depth))?;
    }
    Ok(ClfModel {
        net,
        depth,
        frozen_len,
        n_classes,
        class_names: (0..n_classes).map(|i| format!("class{i}")).collect(),
        trained: false,
    })
}

/// Deterministic input policy: 3 channels, bilinear resize to 227x227.
pub fn record_input_tensor(img: &RasterImage) -> Tensor<f32> {
    let rgb;
    let img = if img.channels == 3 {
        img
    } else {
        rgb = img.gray_to_rgb();
        &rgb
    };
    let resized;
    let img = if img.width == CLF_INPUT_SIZE && img.height == CLF_INPUT_SIZE {
        img
    } else {
        resized = resize_bilinear(img, CLF_INPUT_SIZE, CLF_INPUT_SIZE);
        &resized
    };
    image_to_tensor(img)
}

/// Run the frozen bank over every image once, in parallel chunks, and
/// return features stacked along the first dimension.
pub fn extract_features(bank: &Network<f32>, images: &[&RasterImage]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to featurize".into()));
    }
    let chunk_outputs: Vec<Result<Tensor<f32>>> = images
        .par_chunks(4)
        .map(|chunk| {
            let inputs: Vec<_> = chunk.iter().map(|img| record_input_tensor(img)).collect();
            bank.forward(&stack(&inputs)?)
        })
        .collect();
    let mut feature_shape: Vec<usize> = Vec::new();
    let mut data = Vec::new();
    let mut n = 0usize;
    for out in chunk_outputs {
        let t = out?;
        n += t.shape[0];
        feature_shape = t.shape[1..].to_vec();
        data.extend_from_slice(&t.data);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&feature_shape);
    Tensor::from_data(&shape, data)
}

/// Select rows of a stacked feature tensor.
fn gather_rows(feats: &Tensor<f32>, rows: &[usize]) -> Result<Tensor<f32>> {
    let row_len: usize = feats.shape[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        data.extend_from_slice(&feats.data[r * row_len..(r + 1) * row_len]);
    }
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(&feats.shape[1..]);
    Tensor::from_data(&shape, data)
}

/// Knobs shared by all classifier training entry points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfTrainConfig {
    pub depth: ExtractorDepth,
    /// Seed for the random frozen bank. Kept separate from the training
    /// seed so multi-seed experiments reuse one bank (and its cached
    /// features).
    pub bank_seed: u64,
    pub train: TrainConfig,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        ClfTrainConfig {
            depth: ExtractorDepth::Conv1,
            bank_seed: 17,
            train: TrainConfig::default(),
        }
    }
}

/// Train the model's head on cached features, then fold the trained
/// parameters back into the full network.
fn train_head_on_features(
    model: &mut ClfModel,
    feats: &Tensor<f32>,
    labels: Vec<usize>,
    val: Option<(&Tensor<f32>, Vec<usize>)>,
    cfg: &TrainConfig,
) -> Result<TrainingCurve> {
    let mut head = model.head()?;
    let data = TrainData::new(feats.clone(), labels)?;
    let val_data = val
        .map(|(f, y)| TrainData::new(f.clone(), y))
        .transpose()?;
    let curve = train(&mut head, &data, val_data.as_ref(), cfg)?;
    model.net.adopt_params(&head, model.frozen_len)?;
    model.trained = true;
    Ok(curve)
}

fn fit_records(
    train_images: &[&RasterImage],
    train_labels: Vec<usize>,
    val: Option<(&[&RasterImage], Vec<usize>)>,
    n_classes: usize,
    class_names: Vec<String>,
    cfg: &ClfTrainConfig,
    weights: Option<&WeightArchive>,
) -> Result<(ClfModel, TrainingCurve)> {
    let mut model = build_convnt(cfg.depth, n_classes, weights, cfg.bank_seed)?;
    model.class_names = class_names;
    let bank = model.bank()?;
    let feats = extract_features(&bank, train_images)?;
    let val_feats = val
        .map(|(imgs, y)| Ok::<_, Error>((extract_features(&bank, imgs)?, y)))
        .transpose()?;
    let curve = train_head_on_features(
        &mut model,
        &feats,
        train_labels,
        val_feats.as_ref().map(|(f, y)| (f, y.clone())),
        &cfg.train,
    )?;
    Ok((model, curve))
}

/// Train the flat 7-class classifier.
pub fn train_flat(
    train_recs: &[CellRecord],
    val_recs: Option<&[CellRecord]>,
    cfg: &ClfTrainConfig,
) -> Result<(ClfModel, TrainingCurve)> {
    train_flat_with(train_recs, val_recs, cfg, None)
}

/// Train the flat 7-class classifier, optionally loading the frozen bank
/// from a pretrained weight archive instead of the seeded random bank.
pub fn train_flat_with(
    train_recs: &[CellRecord],
    val_recs: Option<&[CellRecord]>,
    cfg: &ClfTrainConfig,
    weights: Option<&WeightArchive>,
) -> Result<(ClfModel, TrainingCurve)> {
    if train_recs.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let images: Vec<&RasterImage> = train_recs.iter().map(|r| &r.image).collect();
    let labels = train_recs.iter().map(|r| r.label.index()).collect();
    let val_images: Vec<&RasterImage> = val_recs
        .unwrap_or(&[])
        .iter()
        .map(|r| &r.image)
        .collect();
    let val = val_recs.map(|recs| {
        (
            &val_images[..],
            recs.iter().map(|r| r.label.index()).collect::<Vec<_>>(),
        )
    });
    let names = ClassLabel::ALL
        .iter()
        .map(|c| c.short_name().to_string())
        .collect();
    fit_records(&images, labels, val, 7, names, cfg, weights)
}

/// Train a binary normal/abnormal classifier directly on cell records.
pub fn train_binary_direct(
    train_recs: &[CellRecord],
    val_recs: Option<&[CellRecord]>,
    cfg: &ClfTrainConfig,
) -> Result<(ClfModel, TrainingCurve)> {
    train_binary_direct_with(train_recs, val_recs, cfg, None)
}

/// Binary training with an optional pretrained bank archive.
pub fn train_binary_direct_with(
    train_recs: &[CellRecord],
    val_recs: Option<&[CellRecord]>,
    cfg: &ClfTrainConfig,
    weights: Option<&WeightArchive>,
) -> Result<(ClfModel, TrainingCurve)> {
    if train_recs.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let images: Vec<&RasterImage> = train_recs.iter().map(|r| &r.image).collect();
    let labels = train_recs
        .iter()
        .map(|r| r.label.binary().index())
        .collect();
    let val_images: Vec<&RasterImage> = val_recs
        .unwrap_or(&[])
        .iter()
        .map(|r| &r.image)
        .collect();
    let val = val_recs.map(|recs| {
        (
            &val_images[..],
            recs.iter()
                .map(|r| r.label.binary().index())
                .collect::<Vec<_>>(),
        )
    });
    fit_records(
        &images,
        labels,
        val,
        2,
        vec!["normal".into(), "abnormal".into()],
        cfg,
        weights,
    )
}

/// One decision step on the cascade path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStep {
    pub stage: String,
    pub went_left: bool,
    /// Probability the stage assigned to its left branch.
    pub p_left: f64,
}

/// A classified record: predicted label, score vector, and (for the
/// cascade) the stage path that led to the leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub true_label: Option<String>,
    pub label: String,
    pub scores: Vec<f64>,
    pub path: Vec<PathStep>,
}

/// Render predictions as CSV: id, true, predicted, one score column per
/// class, then the path (empty for flat classifiers).
pub fn predictions_to_csv(preds: &[Prediction], class_names: &[String]) -> String {
    let mut out = String::from("id,true,predicted");
    for name in class_names {
        out.push_str(",score_");
        out.push_str(name);
    }
    out.push_str(",path\n");
    for p in preds {
        out.push_str(&p.id);
        out.push(',');
        out.push_str(p.true_label.as_deref().unwrap_or(""));
        out.push(',');
        out.push_str(&p.label);
        for s in &p.scores {
            out.push_str(&format!(",{s:.6}"));
        }
        out.push(',');
        let path: Vec<String> = p
            .path
            .iter()
            .map(|s| format!("{}:{}", s.stage, if s.went_left { "L" } else { "R" }))
            .collect();
        out.push_str(&path.join(">"));
        out.push('\n');
    }
    out
}

/// Classify records with a flat model; returns per-record predictions and
/// an evaluation report against the records' true labels.
pub fn classify_flat(
    model: &ClfModel,
    records: &[CellRecord],
) -> Result<(Vec<Prediction>, EvalReport)> {
    model.require_trained()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to classify".into()));
    }
    let images: Vec<&RasterImage> = records.iter().map(|r| &r.image).collect();
    let feats = extract_features(&model.bank()?, &images)?;
    let out = model.head()?.forward(&feats)?;
    let n_out = model.n_classes;
    let mut preds = Vec::with_capacity(records.len());
    let mut cm = ConfusionMatrix::new(n_out);
    for (i, rec) in records.iter().enumerate() {
        let row = &out.data[i * n_out..(i + 1) * n_out];
        let scores: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let pred = (0..n_out)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        let truth = if n_out == 2 {
            rec.label.binary().index()
        } else {
            rec.label.index()
        };
        cm.record(truth, pred);
        preds.push(Prediction {
            id: rec.id.clone(),
            true_label: Some(model.class_names[truth].clone()),
            label: model.class_names[pred].clone(),
            scores,
            path: Vec::new(),
        });
    }
    Ok((preds, EvalReport::from_confusion(cm)?))
}

/// Collapse 7-class predictions into normal/abnormal through the class
/// partition and re-evaluate.
pub fn binary_report_from_flat(preds: &[Prediction]) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(2);
    for p in preds {
        let truth = p
            .true_label
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("prediction lacks a true label".into()))?;
        let parse = |s: &str| {
            ClassLabel::from_short_name(s)
                .ok_or_else(|| Error::InvalidInput(format!("unknown class label '{s}'")))
        };
        let truth = parse(truth)?.binary().index();
        let pred = parse(&p.label)?.binary().index();
        cm.record(truth, pred);
    }
    EvalReport::from_confusion(cm)
}

/// One binary stage of the decision cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeStage {
    pub name: String,
    pub left: Vec<ClassLabel>,
    pub right: Vec<ClassLabel>,
}

/// The ordered stage chain. Stage i+1 refines stage i's right branch;
/// stage 1's left branch is the normal group, resolved by a separate
/// 3-way classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub stages: Vec<CascadeStage>,
}

impl CascadeSpec {
    /// The standard 4-stage chain: normal vs abnormal, then peel off the
    /// most severe abnormal class, then the mildest, then split the rest.
    pub fn standard() -> Self {
        use ClassLabel::*;
        CascadeSpec {
            stages: vec![
                CascadeStage {
                    name: "stage1_normal_vs_abnormal".into(),
                    left: vec![Nsup, Nint, Ncol],
                    right: vec![Ldys, Mdys, Sdys, Cis],
                },
                CascadeStage {
                    name: "stage2_cis_vs_dysplastic".into(),
                    left: vec![Cis],
                    right: vec![Ldys, Mdys, Sdys],
                },
                CascadeStage {
                    name: "stage3_ldys_vs_higher".into(),
                    left: vec![Ldys],
                    right: vec![Mdys, Sdys],
                },
                CascadeStage {
                    name: "stage4_mdys_vs_sdys".into(),
                    left: vec![Mdys],
                    right: vec![Sdys],
                },
            ],
        }
    }

    /// Enforce the chain shape: stage 1 covers all classes, every later
    /// stage partitions the previous right branch, interior left branches
    /// are singletons, and the leaves partition all 7 classes.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("cascade has no stages".into()));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.left.is_empty() || stage.right.is_empty() {
                return Err(Error::Config(format!(
                    "{} has an empty branch",
                    stage.name
                )));
            }
            let mut union: Vec<ClassLabel> =
                stage.left.iter().chain(&stage.right).copied().collect();
            let before = union.len();
            union.sort_by_key(|c| c.index());
            union.dedup();
            if union.len() != before {
                return Err(Error::Config(format!(
                    "{} branches overlap",
                    stage.name
                )));
            }
            let expected: Vec<ClassLabel> = if i == 0 {
                ClassLabel::ALL.to_vec()
            } else {
                let mut prev = self.stages[i - 1].right.clone();
                prev.sort_by_key(|c| c.index());
                prev
            };
            if union != expected {
                return Err(Error::Config(format!(
                    "{} does not partition the preceding branch: {:?} vs {:?}",
                    stage.name, union, expected
                )));
            }
            if i > 0 && stage.left.len() != 1 {
                return Err(Error::Config(format!(
                    "{} left branch must be a single class",
                    stage.name
                )));
            }
        }
        let last = self.stages.last().unwrap();
        if last.right.len() != 1 {
            return Err(Error::Config(format!(
                "{} right branch must be a single class",
                last.name
            )));
        }
        let mut leaves = self.leaves();
        leaves.sort_by_key(|c| c.index());
        let mut all = ClassLabel::ALL.to_vec();
        all.sort_by_key(|c| c.index());
        if leaves != all {
            return Err(Error::Config(
                "cascade leaves do not partition the classes".into(),
            ));
        }
        Ok(())
    }

    /// Every class reachable as a leaf: the normal group members plus each
    /// interior left singleton plus the final right singleton.
    pub fn leaves(&self) -> Vec<ClassLabel> {
        let mut out = self.stages[0].left.clone();
        for stage in &self.stages[1..] {
            out.extend(&stage.left);
        }
        out.extend(&self.stages.last().unwrap().right);
        out
    }
}

/// Trained cascade: one binary model per stage plus the 3-way classifier
/// for the normal branch.
#[derive(Debug, Clone)]
pub struct Cascade {
    pub spec: CascadeSpec,
    pub stages: Vec<ClfModel>,
    pub normal_clf: ClfModel,
    pub depth: ExtractorDepth,
}

/// Stage-by-stage training counts and curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeTrainReport {
    /// (stage name, left-side count, right-side count) over training data.
    pub stage_counts: Vec<(String, usize, usize)>,
    pub stage_curves: Vec<TrainingCurve>,
    pub normal_curve: TrainingCurve,
}

/// Train every cascade stage on exactly the records whose label belongs to
/// that stage's branch union, plus the 3-way normal-branch classifier.
/// A stage with an empty branch in the training data is a configuration
/// error naming the stage. All stage models share one frozen bank, so
/// features are extracted once.
pub fn train_cascade(
    train_recs: &[CellRecord],
    val_recs: Option<&[CellRecord]>,
    spec: &CascadeSpec,
    cfg: &ClfTrainConfig,
) -> Result<(Cascade, CascadeTrainReport)> {
    spec.validate()?;
    if train_recs.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let train_images: Vec<&RasterImage> = train_recs.iter().map(|r| &r.image).collect();
    let bank = build_convnt(cfg.depth, 2, None, cfg.bank_seed)?.bank()?;
    let feats = extract_features(&bank, &train_images)?;
    let val_feats = match val_recs {
        Some(recs) if !recs.is_empty() => {
            let imgs: Vec<&RasterImage> = recs.iter().map(|r| &r.image).collect();
            Some(extract_features(&bank, &imgs)?)
        }
        _ => None,
    };
    let member_rows = |labels: &[ClassLabel], recs: &[CellRecord]| -> Vec<usize> {
        recs.iter()
            .enumerate()
            .filter(|(_, r)| labels.contains(&r.label))
            .map(|(i, _)| i)
            .collect()
    };
    let mut stages = Vec::new();
    let mut stage_counts = Vec::new();
    let mut stage_curves = Vec::new();
    for stage in &spec.stages {
        let left_rows = member_rows(&stage.left, train_recs);
        let right_rows = member_rows(&stage.right, train_recs);
        if left_rows.is_empty() || right_rows.is_empty() {
            return Err(Error::Config(format!(
                "cascade {} has no training records on its {} side",
                stage.name,
                if left_rows.is_empty() { "left" } else { "right" }
            )));
        }
        stage_counts.push((stage.name.clone(), left_rows.len(), right_rows.len()));
        let rows: Vec<usize> = left_rows.iter().chain(&right_rows).copied().collect();
        let labels: Vec<usize> = rows
            .iter()
            .map(|&i| usize::from(stage.right.contains(&train_recs[i].label)))
            .collect();
        let stage_feats = gather_rows(&feats, &rows)?;
        let val = match (&val_feats, val_recs) {
            (Some(vf), Some(vr)) => {
                let vrows: Vec<usize> = member_rows(&stage.left, vr)
                    .into_iter()
                    .chain(member_rows(&stage.right, vr))
                    .collect();
                if vrows.is_empty() {
                    None
                } else {
                    let vy: Vec<usize> = vrows
                        .iter()
                        .map(|&i| usize::from(stage.right.contains(&vr[i].label)))
                        .collect();
                    Some((gather_rows(vf, &vrows)?, vy))
                }
            }
            _ => None,
        };
        let mut model = build_convnt(cfg.depth, 2, None, cfg.bank_seed)?;
        model.class_names = vec!["left".into(), "right".into()];
        let curve = train_head_on_features(
            &mut model,
            &stage_feats,
            labels,
            val.as_ref().map(|(f, y)| (f, y.clone())),
            &cfg.train,
        )?;
        stages.push(model);
        stage_curves.push(curve);
    }
    // Normal-branch 3-way classifier over the stage-1 left group.
    let normal_classes = &spec.stages[0].left;
    let normal_rows = member_rows(normal_classes, train_recs);
    if normal_rows.is_empty() {
        return Err(Error::Config(
            "cascade normal branch has no training records".into(),
        ));
    }
    let pos = |label: ClassLabel| {
        normal_classes
            .iter()
            .position(|&c| c == label)
            .expect("member row label is in the branch")
    };
    let normal_labels: Vec<usize> = normal_rows
        .iter()
        .map(|&i| pos(train_recs[i].label))
        .collect();
    let normal_feats = gather_rows(&feats, &normal_rows)?;
    let normal_val = match (&val_feats, val_recs) {
        (Some(vf), Some(vr)) => {
            let vrows = member_rows(normal_classes, vr);
            if vrows.is_empty() {
                None
            } else {
                let vy: Vec<usize> = vrows.iter().map(|&i| pos(vr[i].label)).collect();
                Some((gather_rows(vf, &vrows)?, vy))
            }
        }
        _ => None,
    };
    let mut normal_clf = build_convnt(cfg.depth, normal_classes.len(), None, cfg.bank_seed)?;
    normal_clf.class_names = normal_classes
        .iter()
        .map(|c| c.short_name().to_string())
        .collect();
    let normal_curve = train_head_on_features(
        &mut normal_clf,
        &normal_feats,
        normal_labels,
        normal_val.as_ref().map(|(f, y)| (f, y.clone())),
        &cfg.train,
    )?;
    Ok((
        Cascade {
            spec: spec.clone(),
            stages,
            normal_clf,
            depth: cfg.depth,
        },
        CascadeTrainReport {
            stage_counts,
            stage_curves,
            normal_curve,
        },
    ))
}

/// Pure tree walk over stage probabilities. `stage_p_left[i]` is stage
/// i+1's probability for its left branch; `normal_scores` resolves the
/// normal group. Returns the greedy leaf, the visited path, and the full
/// joint score vector over the 7 classes (products of branch
/// probabilities, summing to 1).
pub fn cascade_walk(
    spec: &CascadeSpec,
    stage_p_left: &[f64],
    normal_scores: &[f64],
) -> Result<(ClassLabel, Vec<PathStep>, Vec<f64>)> {
    if stage_p_left.len() != spec.stages.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} stage probabilities for {} stages",
            stage_p_left.len(),
            spec.stages.len()
        )));
    }
    if normal_scores.len() != spec.stages[0].left.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} normal scores for a {}-class normal branch",
            normal_scores.len(),
            spec.stages[0].left.len()
        )));
    }
    // Joint distribution over leaves.
    let mut scores = vec![0.0f64; 7];
    let mut mass = 1.0;
    let normal_total: f64 = normal_scores.iter().sum();
    for (i, stage) in spec.stages.iter().enumerate() {
        let p = stage_p_left[i].clamp(0.0, 1.0);
        if i == 0 {
            for (j, &class) in stage.left.iter().enumerate() {
                let share = if normal_total > 0.0 {
                    normal_scores[j] / normal_total
                } else {
                    1.0 / stage.left.len() as f64
                };
                scores[class.index()] = mass * p * share;
            }
        } else {
            scores[stage.left[0].index()] = mass * p;
        }
        mass *= 1.0 - p;
    }
    scores[spec.stages.last().unwrap().right[0].index()] = mass;
    // Greedy walk, recording the path.
    let mut path = Vec::new();
    let mut label = None;
    for (i, stage) in spec.stages.iter().enumerate() {
        let p = stage_p_left[i];
        let went_left = p >= 0.5;
        path.push(PathStep {
            stage: stage.name.clone(),
            went_left,
            p_left: p,
        });
        if went_left {
            label = Some(if i == 0 {
                let best = (0..normal_scores.len())
                    .max_by(|&a, &b| normal_scores[a].total_cmp(&normal_scores[b]))
                    .unwrap();
                stage.left[best]
            } else {
                stage.left[0]
            });
            break;
        }
    }
    let label = label.unwrap_or_else(|| spec.stages.last().unwrap().right[0]);
    Ok((label, path, scores))
}

/// Classify records by walking the cascade root to leaf. Features go
/// through the shared bank once; every stage head scores every record in
/// one batched pass.
pub fn classify_cascade(
    cascade: &Cascade,
    records: &[CellRecord],
) -> Result<(Vec<Prediction>, EvalReport)> {
    for stage in &cascade.stages {
        stage.require_trained()?;
    }
    cascade.normal_clf.require_trained()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no records to classify".into()));
    }
    let images: Vec<&RasterImage> = records.iter().map(|r| &r.image).collect();
    let feats = extract_features(&cascade.stages[0].bank()?, &images)?;
    let stage_outs: Vec<Tensor<f32>> = cascade
        .stages
        .iter()
        .map(|m| m.head()?.forward(&feats))
        .collect::<Result<_>>()?;
    let normal_out = cascade.normal_clf.head()?.forward(&feats)?;
    let n_normal = cascade.normal_clf.n_classes;
    let mut preds = Vec::with_capacity(records.len());
    let mut cm = ConfusionMatrix::new(7);
    for (i, rec) in records.iter().enumerate() {
        let p_left: Vec<f64> = stage_outs.iter().map(|t| t.data[i * 2] as f64).collect();
        let normal_scores: Vec<f64> = normal_out.data[i * n_normal..(i + 1) * n_normal]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let (label, path, scores) = cascade_walk(&cascade.spec, &p_left, &normal_scores)?;
        cm.record(rec.label.index(), label.index());
        preds.push(Prediction {
            id: rec.id.clone(),
            true_label: Some(rec.label.short_name().to_string()),
            label: label.short_name().to_string(),
            scores,
            path,
        });
    }
    Ok((preds, EvalReport::from_confusion(cm)?))
}

/// Trainable tail of the multi-cell classifier: two fresh conv layers,
/// each followed by max-pooling dropout and relu, then the head.
pub fn multicell_tail_specs() -> Vec<LayerSpec> {
    let conv32 = LayerKind::Conv {
        filters: 32,
        kernel: (3, 3),
        stride: 1,
        pad: 1,
    };
    let mpd = LayerKind::MaxPoolDropout {
        window: 2,
        stride: 2,
        p: 0.5,
    };
    vec![
        LayerSpec::trainable(conv32),
        LayerSpec::trainable(mpd),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(conv32),
        LayerSpec::trainable(mpd),
        LayerSpec::trainable(LayerKind::Relu),
        LayerSpec::trainable(LayerKind::Fc { units: 256 }),
        LayerSpec::trainable(LayerKind::Fc { units: 2 }),
        LayerSpec::trainable(LayerKind::Softmax),
    ]
}

/// Build the multi-cell binary classifier: frozen conv1 bank, trainable
/// conv tail with max-pooling dropout.
pub fn build_multicell(weights: Option<&WeightArchive>, seed: u64) -> Result<ClfModel> {
    let bank = bank_specs(ExtractorDepth::Conv1);
    let frozen_len = bank.len();
    let mut specs = bank;
    specs.extend(multicell_tail_specs());
    let mut net = Network::<f32>::new(&[3, CLF_INPUT_SIZE, CLF_INPUT_SIZE], &specs, seed)?;
    if let Some(archive) = weights {
        load_weights(&mut net, archive, &bank_weight_map(ExtractorDepth::Conv1))?;
    }
    Ok(ClfModel {
        net,
        depth: ExtractorDepth::Conv1,
        frozen_len,
        n_classes: 2,
        class_names: vec!["normal".into(), "abnormal".into()],
        trained: false,
    })
}

/// Majority vote over matched annotation labels; ties go to abnormal, the
/// recall-preserving choice for screening.
pub fn majority_binary(labels: &[BinaryLabel]) -> Option<BinaryLabel> {
    if labels.is_empty() {
        return None;
    }
    let abnormal = labels.iter().filter(|&&l| l == BinaryLabel::Abnormal).count();
    let normal = labels.len() - abnormal;
    Some(if abnormal >= normal {
        BinaryLabel::Abnormal
    } else {
        BinaryLabel::Normal
    })
}

/// One detection on a slide, with its ground-truth match if any.
#[derive(Debug, Clone)]
pub struct MatchedDetection {
    pub component: u32,
    pub bbox: BBox,
    /// Majority binary label of annotations whose centroid falls inside
    /// the padded box; `None` = unmatched.
    pub label: Option<BinaryLabel>,
    pub matched_annotations: usize,
}

/// Run detection on a slide and match each padded box against the slide's
/// annotations by centroid containment.
pub fn match_detections(
    slide: &MultiCellRecord,
    det: &DetectionConfig,
) -> Result<Vec<MatchedDetection>> {
    let output = detect_nuclei(&slide.image, det)?;
    Ok(output
        .boxes
        .iter()
        .map(|&(component, bbox)| {
            let labels: Vec<BinaryLabel> = slide
                .annotations
                .iter()
                .filter(|a| bbox.contains(a.x as usize, a.y as usize))
                .map(|a| a.label)
                .collect();
            MatchedDetection {
                component,
                bbox,
                label: majority_binary(&labels),
                matched_annotations: labels.len(),
            }
        })
        .collect())
}

/// Counts from building a multi-cell training or evaluation set.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MatchStats {
    pub detections: usize,
    pub matched: usize,
    pub unmatched: usize,
    pub slides_without_detections: Vec<String>,
}

/// Multi-cell training configuration: the detection chain that proposes
/// nuclei plus the classifier training knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiCellTrainConfig {
    pub detection: DetectionConfig,
    pub bank_seed: u64,
    pub train: TrainConfig,
}

impl Default for MultiCellTrainConfig {
    fn default() -> Self {
        MultiCellTrainConfig {
            detection: DetectionConfig::default(),
            bank_seed: 17,
            train: TrainConfig::default(),
        }
    }
}

/// Detect, match, and crop training sub-images over a slide set. Unmatched
/// detections are excluded (counted in the stats).
pub fn multicell_training_set(
    slides: &[MultiCellRecord],
    det: &DetectionConfig,
) -> Result<(Vec<RasterImage>, Vec<usize>, MatchStats)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut stats = MatchStats::default();
    for slide in slides {
        let matches = match_detections(slide, det)?;
        if matches.is_empty() {
            stats.slides_without_detections.push(slide.id.clone());
        }
        for m in matches {
            stats.detections += 1;
            match m.label {
                Some(label) => {
                    stats.matched += 1;
                    images.push(m.bbox.crop(&slide.image));
                    labels.push(label.index());
                }
                None => stats.unmatched += 1,
            }
        }
    }
    Ok((images, labels, stats))
}

/// Train the multi-cell binary classifier on detections matched against
/// slide annotations.
pub fn train_multicell(
    train_slides: &[MultiCellRecord],
    val_slides: Option<&[MultiCellRecord]>,
    cfg: &MultiCellTrainConfig,
) -> Result<(ClfModel, TrainingCurve, MatchStats)> {
    let (images, labels, stats) = multicell_training_set(train_slides, &cfg.detection)?;
    if images.is_empty() {
        return Err(Error::InvalidInput(
            "no matched detections to train on; check detection settings and annotations".into(),
        ));
    }
    let mut model = build_multicell(None, cfg.bank_seed)?;
    let bank = model.bank()?;
    let image_refs: Vec<&RasterImage> = images.iter().collect();
    let feats = extract_features(&bank, &image_refs)?;
    let val = match val_slides {
        Some(slides) => {
            let (vi, vy, _) = multicell_training_set(slides, &cfg.detection)?;
            if vi.is_empty() {
                None
            } else {
                let refs: Vec<&RasterImage> = vi.iter().collect();
                Some((extract_features(&bank, &refs)?, vy))
            }
        }
        None => None,
    };
    let curve = train_head_on_features(
        &mut model,
        &feats,
        labels,
        val.as_ref().map(|(f, y)| (f, y.clone())),
        &cfg.train,
    )?;
    Ok((model, curve, stats))
}

/// Per-slide classification result.
#[derive(Debug, Clone)]
pub struct MultiCellOutput {
    pub predictions: Vec<Prediction>,
    pub boxes: Vec<(u32, BBox)>,
    pub warnings: Vec<String>,
}

/// Detect nuclei on a slide and classify each padded sub-image as normal
/// or abnormal. Zero detections yield an empty list plus a warning in the
/// output.
pub fn classify_multicell(
    slide: &MultiCellRecord,
    det: &DetectionConfig,
    model: &ClfModel,
) -> Result<MultiCellOutput> {
    model.require_trained()?;
    let matches = match_detections(slide, det)?;
    if matches.is_empty() {
        return Ok(MultiCellOutput {
            predictions: Vec::new(),
            boxes: Vec::new(),
            warnings: vec![format!("no nuclei detected on slide {}", slide.id)],
        });
    }
    let crops: Vec<RasterImage> = matches.iter().map(|m| m.bbox.crop(&slide.image)).collect();
    let refs: Vec<&RasterImage> = crops.iter().collect();
    let feats = extract_features(&model.bank()?, &refs)?;
    let out = model.head()?.forward(&feats)?;
    let mut predictions = Vec::with_capacity(matches.len());
    for (k, m) in matches.iter().enumerate() {
        let row = &out.data[k * 2..(k + 1) * 2];
        let scores: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        let pred = usize::from(scores[1] > scores[0]);
        predictions.push(Prediction {
            id: format!("{}#det{}", slide.id, m.component),
            true_label: m.label.map(|l| l.name().to_string()),
            label: model.class_names[pred].clone(),
            scores,
            path: Vec::new(),
        });
    }
    Ok(MultiCellOutput {
        predictions,
        boxes: matches.iter().map(|m| (m.component, m.bbox)).collect(),
        warnings: Vec::new(),
    })
}

/// Evaluate the multi-cell classifier over slides; only detections with a
/// ground-truth match count toward the confusion matrix.
pub fn evaluate_multicell(
    slides: &[MultiCellRecord],
    det: &DetectionConfig,
    model: &ClfModel,
) -> Result<(EvalReport, MatchStats, Vec<Prediction>)> {
    let mut cm = ConfusionMatrix::new(2);
    let mut stats = MatchStats::default();
    let mut all_preds = Vec::new();
    for slide in slides {
        let output = classify_multicell(slide, det, model)?;
        if output.predictions.is_empty() {
            stats.slides_without_detections.push(slide.id.clone());
        }
        for p in &output.predictions {
            stats.detections += 1;
            match &p.true_label {
                Some(truth) => {
                    stats.matched += 1;
                    let t = usize::from(truth == "abnormal");
                    let y = usize::from(p.label == "abnormal");
                    cm.record(t, y);
                }
                None => stats.unmatched += 1,
            }
        }
        all_preds.extend(output.predictions);
    }
    if cm.total() == 0 {
        return Err(Error::InvalidInput(
            "no matched detections to evaluate".into(),
        ));
    }
    Ok((EvalReport::from_confusion(cm)?, stats, all_preds))
}

/// One seed's worth of the segmentation ablation: the same 7-class
/// classifier trained on raw, ground-truth-masked, and predicted-mask
/// images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub raw: EvalReport,
    pub gt_masked: EvalReport,
    /// Absent when no segmentation model was supplied.
    pub pred_masked: Option<EvalReport>,
}

/// Train and evaluate the 7-class classifier on raw images, on images
/// whose background is masked by the ground truth, and (given a trained
/// segmentation model) by predicted masks. One report per requested seed;
/// the frozen bank and all image features are shared across seeds, so only
/// head training repeats.
pub fn ablate_segmentation(
    train_recs: &[CellRecord],
    val_recs: &[CellRecord],
    seg: Option<&SegModelPair>,
    cfg: &ClfTrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationReport>> {
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(Error::InvalidInput(
            "ablation needs both training and validation records".into(),
        ));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidInput("no seeds requested".into()));
    }
    let gt_mask_images = |recs: &[CellRecord]| -> Result<Vec<RasterImage>> {
        recs.iter()
            .map(|r| mask_background(&r.image, &r.gt_mask))
            .collect()
    };
    let pred_mask_images = |recs: &[CellRecord], model: &SegModelPair| -> Result<Vec<RasterImage>> {
        recs.par_iter()
            .map(|r| {
                let (_, mask) = segment(&r.image, model, &model.patch)?;
                mask_background(&r.image, &mask)
            })
            .collect()
    };
    let bank = build_convnt(cfg.depth, 7, None, cfg.bank_seed)?.bank()?;
    let featurize = |imgs: &[RasterImage]| -> Result<Tensor<f32>> {
        let refs: Vec<&RasterImage> = imgs.iter().collect();
        extract_features(&bank, &refs)
    };
    let raw_train: Vec<RasterImage> = train_recs.iter().map(|r| r.image.clone()).collect();
    let raw_val: Vec<RasterImage> = val_recs.iter().map(|r| r.image.clone()).collect();
    let mut conditions = vec![
        (featurize(&raw_train)?, featurize(&raw_val)?),
        (
            featurize(&gt_mask_images(train_recs)?)?,
            featurize(&gt_mask_images(val_recs)?)?,
        ),
    ];
    if let Some(model) = seg {
        conditions.push((
            featurize(&pred_mask_images(train_recs, model)?)?,
            featurize(&pred_mask_images(val_recs, model)?)?,
        ));
    }
    let y_train: Vec<usize> = train_recs.iter().map(|r| r.label.index()).collect();
    let y_val: Vec<usize> = val_recs.iter().map(|r| r.label.index()).collect();
    let head_input: Vec<usize> = conditions[0].0.shape[1..].to_vec();
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut train_cfg = cfg.train;
        train_cfg.seed = seed;
        let mut evals = Vec::new();
        for (feats_tr, feats_val) in &conditions {
            let mut head = Network::<f32>::new(&head_input, &head_specs(256, 7), seed)?;
            let data = TrainData::new(feats_tr.clone(), y_train.clone())?;
            train(&mut head, &data, None, &train_cfg)?;
            let out = head.forward(feats_val)?;
            let mut cm = ConfusionMatrix::new(7);
            for (i, &t) in y_val.iter().enumerate() {
                let row = &out.data[i * 7..(i + 1) * 7];
                let pred = (0..7)
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .unwrap();
                cm.record(t, pred);
            }
            evals.push(EvalReport::from_confusion(cm)?);
        }
        let pred_masked = if evals.len() == 3 { Some(evals.remove(2)) } else { None };
        let gt_masked = evals.remove(1);
        let raw = evals.remove(0);
        reports.push(AblationReport {
            seed,
            raw,
            gt_masked,
            pred_masked,
        });
    }
    Ok(reports)
}

#[derive(Serialize, Deserialize)]
struct ClfMeta {
    kind: String,
    depth: String,
    frozen_len: usize,
    n_classes: usize,
    class_names: Vec<String>,
    trained: bool,
    net: serde_json::Value,
}

fn pack_clf(archive: &mut WeightArchive, prefix: &str, model: &ClfModel) -> Result<ClfMeta> {
    Ok(ClfMeta {
        kind: "clf".into(),
        depth: model.depth.name().into(),
        frozen_len: model.frozen_len,
        n_classes: model.n_classes,
        class_names: model.class_names.clone(),
        trained: model.trained,
        net: pack_network(archive, prefix, &model.net)?,
    })
}

fn unpack_clf(archive: &WeightArchive, prefix: &str, meta: &ClfMeta) -> Result<ClfModel> {
    Ok(ClfModel {
        net: unpack_network(archive, prefix, &meta.net)?,
        depth: ExtractorDepth::from_name(&meta.depth)?,
        frozen_len: meta.frozen_len,
        n_classes: meta.n_classes,
        class_names: meta.class_names.clone(),
        trained: meta.trained,
    })
}

/// Save a single classifier (flat, binary, or multi-cell) to an archive.
pub fn save_clf_model(model: &ClfModel, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut archive = WeightArchive::new();
    let meta = pack_clf(&mut archive, "clf", model)?;
    archive.meta = Some(serde_json::to_value(meta)?);
    archive.save(path)
}

pub fn load_clf_model(path: impl AsRef<std::path::Path>) -> Result<ClfModel> {
    let archive = WeightArchive::load(&path)?;
    let meta: ClfMeta = serde_json::from_value(archive.meta.clone().ok_or_else(|| {
        Error::WeightLoad(vec![format!(
            "{}: archive has no metadata",
            path.as_ref().display()
        )])
    })?)?;
    if meta.kind != "clf" {
        return Err(Error::WeightLoad(vec![format!(
            "{}: archive holds '{}', not a classifier",
            path.as_ref().display(),
            meta.kind
        )]));
    }
    unpack_clf(&archive, "clf", &meta)
}

#[derive(Serialize, Deserialize)]
struct CascadeMeta {
    kind: String,
    spec: CascadeSpec,
    depth: String,
    stages: Vec<ClfMeta>,
    normal: ClfMeta,
}

/// Save a trained cascade (all stage models plus the normal branch).
pub fn save_cascade(cascade: &Cascade, path: impl AsRef<std::path::Path>) -> Result<()> {
    let mut archive = WeightArchive::new();
    let mut stages = Vec::new();
    for (i, stage) in cascade.stages.iter().enumerate() {
        stages.push(pack_clf(&mut archive, &format!("stage{i}"), stage)?);
    }
    let normal = pack_clf(&mut archive, "normal", &cascade.normal_clf)?;
    archive.meta = Some(serde_json::to_value(CascadeMeta {
        kind: "cascade".into(),
        spec: cascade.spec.clone(),
        depth: cascade.depth.name().into(),
        stages,
        normal,
    })?);
    archive.save(path)
}

pub fn load_cascade(path: impl AsRef<std::path::Path>) -> Result<Cascade> {
    let archive = WeightArchive::load(&path)?;
    let meta: CascadeMeta = serde_json::from_value(archive.meta.clone().ok_or_else(|| {
        Error::WeightLoad(vec![format!(
            "{}: archive has no metadata",
            path.as_ref().display()
        )])
    })?)?;
    if meta.kind != "cascade" {
        return Err(Error::WeightLoad(vec![format!(
            "{}: archive holds '{}', not a cascade",
            path.as_ref().display(),
            meta.kind
        )]));
    }
    meta.spec.validate()?;
    let mut stages = Vec::new();
    for (i, m) in meta.stages.iter().enumerate() {
        stages.push(unpack_clf(&archive, &format!("stage{i}"), m)?);
    }
    Ok(Cascade {
        spec: meta.spec.clone(),
        normal_clf: unpack_clf(&archive, "normal", &meta.normal)?,
        stages,
        depth: ExtractorDepth::from_name(&meta.depth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_cells, synth_single_cells, SlideGrade, SynthConfig};

    #[test]
    fn bank_geometry_matches_hand_computed_shapes() {
        // 227 -> conv 11/4: (227-11)/4+1 = 55 -> pool 3/2: 27.
        let m1 = build_convnt(ExtractorDepth::Conv1, 7, None, 0).unwrap();
        assert_eq!(m1.bank().unwrap().output_shape(), &[96, 27, 27]);
        // 27 -> conv 5/1 pad 2: 27 -> pool: 13 -> conv 3/1 pad 1: 13.
        let m3 = build_convnt(ExtractorDepth::Conv3, 7, None, 0).unwrap();
        assert_eq!(m3.bank().unwrap().output_shape(), &[384, 13, 13]);
        // 13 -> conv -> conv: 13 -> pool: 6.
        let m5 = build_convnt(ExtractorDepth::Conv5, 7, None, 0).unwrap();
        assert_eq!(m5.bank().unwrap().output_shape(), &[256, 6, 6]);
        // Deeper bank: smaller spatial extent, more channels than conv1.
        assert!(6 < 27 && 256 > 96);
        assert_eq!(m5.net.output_dim(), 7);
    }

    #[test]
    fn conv1_head_has_exactly_two_trainable_param_layers() {
        let m = build_convnt(ExtractorDepth::Conv1, 7, None, 0).unwrap();
        let trainable_with_params = m
            .net
            .layers
            .iter()
            .filter(|l| l.spec.trainable && l.weight.is_some())
            .count();
        assert_eq!(trainable_with_params, 2);
        let feat = 96 * 27 * 27;
        assert_eq!(
            m.net.trainable_param_count(),
            feat * 256 + 256 + 256 * 7 + 7
        );
    }

    #[test]
    fn same_seed_builds_identical_banks() {
        let a = build_convnt(ExtractorDepth::Conv1, 7, None, 42).unwrap();
        let b = build_convnt(ExtractorDepth::Conv1, 7, None, 42).unwrap();
        assert_eq!(a.frozen_digest(), b.frozen_digest());
        let c = build_convnt(ExtractorDepth::Conv1, 7, None, 43).unwrap();
        assert_ne!(a.frozen_digest(), c.frozen_digest());
        // Head width doesn't perturb the bank draw.
        let d = build_convnt(ExtractorDepth::Conv1, 2, None, 42).unwrap();
        assert_eq!(a.frozen_digest(), d.frozen_digest());
    }

    #[test]
    fn bank_archive_round_trips_and_rejects_bad_shapes() {
        let a = build_convnt(ExtractorDepth::Conv1, 7, None, 5).unwrap();
        let archive = bank_to_archive(&a).unwrap();
        let b = build_convnt(ExtractorDepth::Conv1, 7, Some(&archive), 99).unwrap();
        assert_eq!(a.frozen_digest(), b.frozen_digest());
        // Wrong-shaped conv1 weight must fail with the offending name.
        let mut bad = WeightArchive::new();
        bad.add("conv1.weight", &Tensor::<f32>::zeros(&[96, 3, 9, 9]))
            .unwrap();
        bad.add("conv1.bias", &Tensor::<f32>::zeros(&[96])).unwrap();
        let err = build_convnt(ExtractorDepth::Conv1, 7, Some(&bad), 0).unwrap_err();
        match err {
            Error::WeightLoad(problems) => {
                assert!(problems.iter().any(|p| p.contains("conv1.weight")));
            }
            other => panic!("expected WeightLoad, got {other:?}"),
        }
    }

    #[test]
    fn input_tensor_policy_is_deterministic() {
        let rec = &synth_single_cells(&SynthConfig::default(), 1, 3)[0];
        let a = record_input_tensor(&rec.image);
        let b = record_input_tensor(&rec.image);
        assert_eq!(a.shape, vec![3, 227, 227]);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn standard_cascade_validates_and_partitions() {
        let spec = CascadeSpec::standard();
        spec.validate().unwrap();
        let mut leaves = spec.leaves();
        leaves.sort_by_key(|c| c.index());
        assert_eq!(leaves.len(), 7);
        let mut broken = spec.clone();
        broken.stages[2].left = vec![ClassLabel::Cis];
        assert!(matches!(broken.validate(), Err(Error::Config(_))));
        let mut overlap = spec.clone();
        overlap.stages[0].right.push(ClassLabel::Nsup);
        assert!(matches!(overlap.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn cascade_walk_follows_decisions_and_is_exact_with_oracles() {
        let spec = CascadeSpec::standard();
        // Decisions (R, R, R, L) must land on mdys with a full 4-step path.
        let (label, path, scores) =
            cascade_walk(&spec, &[0.1, 0.2, 0.3, 0.9], &[0.5, 0.3, 0.2]).unwrap();
        assert_eq!(label, ClassLabel::Mdys);
        assert_eq!(path.len(), 4);
        assert_eq!(
            path.iter().map(|s| s.went_left).collect::<Vec<_>>(),
            vec![false, false, false, true]
        );
        assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Oracle stages classify every label perfectly.
        for truth in ClassLabel::ALL {
            let p_left: Vec<f64> = spec
                .stages
                .iter()
                .map(|s| f64::from(s.left.contains(&truth)))
                .collect();
            let normal_scores: Vec<f64> = spec.stages[0]
                .left
                .iter()
                .map(|&c| f64::from(c == truth))
                .collect();
            let (label, path, scores) = cascade_walk(&spec, &p_left, &normal_scores).unwrap();
            assert_eq!(label, truth, "oracle walk must recover {truth}");
            assert!(path.len() <= 4);
            assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(scores[truth.index()], 1.0);
        }
    }

    #[test]
    fn untrained_model_refuses_to_classify() {
        let model = build_convnt(ExtractorDepth::Conv1, 7, None, 0).unwrap();
        let recs = synth_single_cells(&SynthConfig::default(), 2, 1);
        assert!(matches!(
            classify_flat(&model, &recs),
            Err(Error::State(_))
        ));
    }

    fn quick_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: 0.002,
            loss: crate::nnet::Loss::CrossEntropy,
            stop_at_train_accuracy: Some(1.0),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn flat_classifier_overfits_and_reports_consistently() {
        let train_recs = synth_single_cells(&SynthConfig::default(), 14, 11);
        let val_recs = synth_single_cells(&SynthConfig::default(), 7, 12);
        let cfg = ClfTrainConfig {
            train: quick_train_cfg(60),
            ..ClfTrainConfig::default()
        };
        let (model, curve) = train_flat(&train_recs, Some(&val_recs), &cfg).unwrap();
        assert!(
            curve.final_train_accuracy() > 0.9,
            "head should overfit 14 samples, got {}",
            curve.final_train_accuracy()
        );
        let digest_before = model.frozen_digest();
        let (preds, report) = classify_flat(&model, &val_recs).unwrap();
        assert_eq!(model.frozen_digest(), digest_before);
        assert_eq!(preds.len(), 7);
        for p in &preds {
            let sum: f64 = p.scores.iter().sum();
            assert!((sum - 1.0).abs() < 1e-4, "scores sum to {sum}");
            assert!(p.path.is_empty());
        }
        // Accuracy equals confusion trace over total.
        assert!(
            (report.overall_accuracy
                - report.confusion.trace() as f64 / report.confusion.total() as f64)
                .abs()
                < 1e-12
        );
        let binary = binary_report_from_flat(&preds).unwrap();
        assert_eq!(binary.confusion.total(), 7);
        // CSV has a header plus one row per record.
        let csv = predictions_to_csv(&preds, &model.class_names);
        assert_eq!(csv.lines().count(), 8);
        assert!(csv.starts_with("id,true,predicted,score_nsup"));
    }

    #[test]
    fn cascade_trains_on_stage_unions_only() {
        let train_recs = synth_single_cells(&SynthConfig::default(), 14, 21);
        let spec = CascadeSpec::standard();
        let cfg = ClfTrainConfig {
            train: quick_train_cfg(8),
            ..ClfTrainConfig::default()
        };
        let (cascade, report) = train_cascade(&train_recs, None, &spec, &cfg).unwrap();
        // Stage 1 sees everything; stage 4 only mdys and sdys.
        let count = |label: ClassLabel| train_recs.iter().filter(|r| r.label == label).count();
        assert_eq!(
            report.stage_counts[0].1 + report.stage_counts[0].2,
            train_recs.len()
        );
        assert_eq!(
            report.stage_counts[3],
            (
                "stage4_mdys_vs_sdys".into(),
                count(ClassLabel::Mdys),
                count(ClassLabel::Sdys)
            )
        );
        let (preds, eval) = classify_cascade(&cascade, &train_recs).unwrap();
        assert_eq!(eval.confusion.total(), train_recs.len() as u64);
        for p in &preds {
            assert!(!p.path.is_empty() && p.path.len() <= 4);
            assert!((p.scores.iter().sum::<f64>() - 1.0).abs() < 1e-4);
            // The path's last step is consistent with the leaf.
            let last = p.path.last().unwrap();
            let label = ClassLabel::from_short_name(&p.label).unwrap();
            if p.path.len() < 4 || last.went_left {
                let stage = cascade
                    .spec
                    .stages
                    .iter()
                    .find(|s| s.name == last.stage)
                    .unwrap();
                assert!(stage.left.contains(&label));
            }
        }
    }

    #[test]
    fn starved_stage_names_itself() {
        // No sdys records: stage 4's right side is empty.
        let mut recs = synth_single_cells(&SynthConfig::default(), 21, 33);
        recs.retain(|r| r.label != ClassLabel::Sdys);
        let cfg = ClfTrainConfig {
            train: quick_train_cfg(2),
            ..ClfTrainConfig::default()
        };
        let err = train_cascade(&recs, None, &CascadeSpec::standard(), &cfg).unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("stage4"), "got: {msg}"),
            other => panic!("expected Config error, got {other:?}"),
        }
    }

    #[test]
    fn majority_vote_breaks_ties_toward_abnormal() {
        use BinaryLabel::*;
        assert_eq!(majority_binary(&[]), None);
        assert_eq!(majority_binary(&[Normal]), Some(Normal));
        assert_eq!(majority_binary(&[Normal, Abnormal]), Some(Abnormal));
        assert_eq!(
            majority_binary(&[Normal, Normal, Abnormal]),
            Some(Normal)
        );
    }

    #[test]
    fn multicell_pipeline_detects_matches_and_classifies() {
        let (_, slides) = synth_cells(60, 7);
        assert!(slides.len() >= 5);
        let det = DetectionConfig::default();
        // Planted annotations are mostly recovered by padded boxes.
        let mut planted = 0usize;
        let mut recovered = 0usize;
        for slide in &slides {
            let matches = match_detections(slide, &det).unwrap();
            for a in &slide.annotations {
                planted += 1;
                if matches
                    .iter()
                    .any(|m| m.bbox.contains(a.x as usize, a.y as usize))
                {
                    recovered += 1;
                }
            }
        }
        assert!(
            recovered * 5 >= planted * 4,
            "recovered {recovered}/{planted} planted nuclei"
        );
        let cfg = MultiCellTrainConfig {
            train: quick_train_cfg(6),
            ..MultiCellTrainConfig::default()
        };
        let (model, _, stats) = train_multicell(&slides[..3], None, &cfg).unwrap();
        assert!(stats.matched > 0);
        let out = classify_multicell(&slides[3], &det, &model).unwrap();
        assert!(!out.predictions.is_empty());
        for p in &out.predictions {
            assert!(p.label == "normal" || p.label == "abnormal");
        }
        // A blank slide: zero detections, warning, empty predictions.
        let blank = MultiCellRecord::new(
            {
                let mut img = RasterImage::new(40, 30, 3);
                img.data.fill(235);
                img
            },
            Vec::new(),
            SlideGrade::Normal,
            "blank".into(),
        )
        .unwrap();
        let out = classify_multicell(&blank, &det, &model).unwrap();
        assert!(out.predictions.is_empty());
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn unannotated_slides_train_nothing() {
        let (_, slides) = synth_cells(20, 9);
        let stripped: Vec<MultiCellRecord> = slides
            .iter()
            .map(|s| {
                MultiCellRecord::new(s.image.clone(), Vec::new(), s.slide_grade, s.id.clone())
                    .unwrap()
            })
            .collect();
        let det = DetectionConfig::default();
        let (images, _, stats) = multicell_training_set(&stripped, &det).unwrap();
        assert!(images.is_empty());
        assert_eq!(stats.matched, 0);
        assert_eq!(stats.unmatched, stats.detections);
        let cfg = MultiCellTrainConfig::default();
        assert!(matches!(
            train_multicell(&stripped, None, &cfg),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn full_true_masks_reproduce_the_raw_condition() {
        let mut train_recs = synth_single_cells(&SynthConfig::default(), 10, 41);
        let mut val_recs = synth_single_cells(&SynthConfig::default(), 5, 42);
        for r in train_recs.iter_mut().chain(val_recs.iter_mut()) {
            r.gt_mask = crate::imgproc::BinaryMask::from_data(
                48,
                48,
                vec![true; 48 * 48],
            )
            .unwrap();
        }
        let cfg = ClfTrainConfig {
            train: quick_train_cfg(4),
            ..ClfTrainConfig::default()
        };
        let reports = ablate_segmentation(&train_recs, &val_recs, None, &cfg, &[5]).unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert!(r.pred_masked.is_none());
        assert_eq!(r.raw.confusion.counts, r.gt_masked.confusion.counts);
        assert_eq!(r.raw.overall_accuracy, r.gt_masked.overall_accuracy);
    }

    #[test]
    fn models_round_trip_through_archives() {
        let train_recs = synth_single_cells(&SynthConfig::default(), 14, 51);
        let cfg = ClfTrainConfig {
            train: quick_train_cfg(4),
            ..ClfTrainConfig::default()
        };
        let (model, _) = train_flat(&train_recs, None, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("flat.wgt");
        save_clf_model(&model, &path).unwrap();
        let loaded = load_clf_model(&path).unwrap();
        assert!(loaded.trained);
        assert_eq!(loaded.class_names, model.class_names);
        let (p1, _) = classify_flat(&model, &train_recs[..3]).unwrap();
        let (p2, _) = classify_flat(&loaded, &train_recs[..3]).unwrap();
        assert_eq!(p1, p2);
    }
}

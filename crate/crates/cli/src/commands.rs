//! The eight pipeline commands. Each loads what it needs, writes its
//! artifacts under the fixed output layout, and drops a run manifest
//! beside them.

use cytoscreen_core::classification::{
    classify_cascade, classify_flat, load_cascade, load_clf_model, predictions_to_csv,
    save_cascade, save_clf_model, train_binary_direct_with, train_cascade, train_flat_with,
    CascadeSpec,
};
use cytoscreen_core::dataset::{
    load_herlev, manifest_from_splits, resolve_manifest, stratified_splits,
    synth_multicell, synth_single_cells, write_herlev, write_multicell, CellRecord, SplitManifest,
    TrialSplit,
};
use cytoscreen_core::imgproc::{
    detect_nuclei, read_image, write_image, write_indexed_png, write_mask_png,
};
use cytoscreen_core::metrics::{pixel_fscore, seg_class_fscores, SegAveraging};
use cytoscreen_core::nnet::WeightArchive;
use cytoscreen_core::pipeline::{
    class_row_from_section, confusion_from_predictions, confusion_to_csv, derive_seed,
    label_boxes, missing_artifact, predictions_from_csv, render_overlay, seg_metrics_to_csv,
    seg_section_from_rows, seg_section_from_scores, ClfEvalSection, ClfMode, EvalSummary,
    LabeledBox, OutLayout, RunConfig, RunManifest, SegMetricsRow, Timings, CLASS_MAP_PALETTE,
};
use cytoscreen_core::segmentation::{
    load_seg_model, save_seg_model, segment, train_seg, SegModelPair,
};
use cytoscreen_core::texture::{route, Route};
use cytoscreen_core::{metrics, Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

fn finish_manifest(
    mut manifest: RunManifest,
    timings: Timings,
    layout: &OutLayout,
) -> Result<()> {
    manifest.timings_ms = timings.into_map();
    manifest.write(&layout.root)?;
    Ok(())
}

/// Load single-cell records from the configured directory, falling back
/// to the synthetic corpus under the output root.
fn load_cells(cfg: &RunConfig, layout: &OutLayout) -> Result<(Vec<CellRecord>, PathBuf)> {
    let dir = cfg
        .cells_dir
        .clone()
        .unwrap_or_else(|| layout.synth_cells());
    if !dir.is_dir() {
        return Err(missing_artifact(&dir, "synth"));
    }
    let (records, report) = load_herlev(&dir)?;
    if !report.skipped.is_empty() {
        eprintln!("warning: skipped {} files under {}", report.skipped.len(), dir.display());
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no records under {}",
            dir.display()
        )));
    }
    Ok((records, dir))
}

fn load_split_manifest(layout: &OutLayout) -> Result<SplitManifest> {
    let path = layout.split_manifest();
    if !path.is_file() {
        return Err(missing_artifact(&path, "split"));
    }
    let text = std::fs::read_to_string(&path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Resolve the stored split against records and return the first trial;
/// commands that train or score use trial 0, the pinned experiment.
fn first_trial(records: &[CellRecord], layout: &OutLayout) -> Result<TrialSplit> {
    let manifest = load_split_manifest(layout)?;
    let mut trials = resolve_manifest(records, &manifest)?;
    if trials.is_empty() {
        return Err(Error::InvalidInput("split manifest holds no trials".into()));
    }
    Ok(trials.remove(0))
}

fn select<'a>(records: &'a [CellRecord], idx: &[usize]) -> Vec<&'a CellRecord> {
    idx.iter().map(|&i| &records[i]).collect()
}

fn cloned(records: &[&CellRecord]) -> Vec<CellRecord> {
    records.iter().map(|&r| r.clone()).collect()
}

pub fn cmd_synth(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("synth", cfg);
    let mut timings = Timings::new();
    let seed = derive_seed(cfg.seed, "synth");
    let cells = timings.time("generate_cells", || {
        synth_single_cells(&cfg.synth.image, cfg.synth.n_cells, seed)
    });
    let slides = timings.time("generate_slides", || {
        synth_multicell(&cfg.synth.image, cfg.synth.n_slides, seed)
    });
    timings.time("write", || -> Result<()> {
        write_herlev(&cells, &layout.synth_cells())?;
        for s in &slides {
            write_multicell(s, &layout.synth_slides())?;
        }
        Ok(())
    })?;
    manifest.inputs.push(format!("seed {seed}"));
    manifest
        .outputs
        .push(format!("{} ({} cells)", layout.rel(&layout.synth_cells()), cells.len()));
    manifest
        .outputs
        .push(format!("{} ({} slides)", layout.rel(&layout.synth_slides()), slides.len()));
    finish_manifest(manifest, timings, layout)?;
    println!(
        "synth: {} cells, {} slides under {}",
        cells.len(),
        slides.len(),
        layout.root.display()
    );
    Ok(())
}

pub fn cmd_split(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("split", cfg);
    let mut timings = Timings::new();
    let (records, dir) = load_cells(cfg, layout)?;
    let splits = timings.time("split", || stratified_splits(&records, &cfg.split))?;
    let split_manifest = manifest_from_splits(&records, &cfg.split, &splits);
    let path = layout.split_manifest();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, serde_json::to_string_pretty(&split_manifest)? + "\n")?;
    manifest
        .inputs
        .push(format!("{} ({} records)", dir.display(), records.len()));
    manifest.outputs.push(layout.rel(&path));
    finish_manifest(manifest, timings, layout)?;
    println!(
        "split: {} trials of {} records -> {}",
        splits.len(),
        records.len(),
        path.display()
    );
    Ok(())
}

/// Expand detect inputs: explicit files stay; directories contribute
/// their image files in sorted order.
fn detect_inputs(cfg: &RunConfig, layout: &OutLayout, inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let roots: Vec<PathBuf> = if inputs.is_empty() {
        let dir = cfg
            .slides_dir
            .clone()
            .unwrap_or_else(|| layout.synth_slides());
        if !dir.is_dir() {
            return Err(missing_artifact(&dir, "synth"));
        }
        vec![dir]
    } else {
        inputs.to_vec()
    };
    let mut files = Vec::new();
    for root in roots {
        if root.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&root)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "bmp"))
                })
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(root);
        }
    }
    if files.is_empty() {
        return Err(Error::InvalidInput("no input images to detect on".into()));
    }
    Ok(files)
}

/// Annotations for a slide, when its `<stem>.json` sidecar exists.
fn sidecar_annotations(img_path: &Path) -> Vec<cytoscreen_core::dataset::CellAnnotation> {
    let Some(stem) = img_path.file_stem().and_then(|s| s.to_str()) else {
        return Vec::new();
    };
    let sidecar = img_path.with_file_name(format!("{stem}.json"));
    let Ok(text) = std::fs::read_to_string(&sidecar) else {
        return Vec::new();
    };
    match serde_json::from_str::<cytoscreen_core::dataset::SlideSidecar>(&text) {
        Ok(s) => s.nuclei,
        Err(_) => Vec::new(),
    }
}

/// Run detection over files; per-file failures are collected, not fatal.
/// Returns the number of failed files (0 means full success).
pub fn cmd_detect(cfg: &RunConfig, layout: &OutLayout, inputs: &[PathBuf]) -> Result<usize> {
    let mut manifest = RunManifest::new("detect", cfg);
    let mut timings = Timings::new();
    let files = detect_inputs(cfg, layout, inputs)?;
    let mut failures: Vec<(PathBuf, Error)> = Vec::new();
    let mut done = 0usize;
    for file in &files {
        let result = timings.time("detect", || -> Result<()> {
            let img = read_image(file)?;
            let out = detect_nuclei(&img, &cfg.detection)?;
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_string();
            let boxes: Vec<LabeledBox> = label_boxes(&out.boxes, &sidecar_annotations(file));
            write_mask_png(&layout.detect_mask(&stem), &out.mask)?;
            std::fs::write(
                layout.detect_boxes(&stem),
                serde_json::to_string_pretty(&boxes)? + "\n",
            )?;
            write_image(&layout.detect_overlay(&stem), &render_overlay(&img, &boxes))?;
            for suffix in ["mask.png", "boxes.json", "overlay.png"] {
                manifest.outputs.push(format!("detect/{stem}_{suffix}"));
            }
            Ok(())
        });
        match result {
            Ok(()) => done += 1,
            Err(e) => failures.push((file.clone(), e)),
        }
        manifest.inputs.push(file.display().to_string());
    }
    finish_manifest(manifest, timings, layout)?;
    println!("detect: {done}/{} images processed", files.len());
    if !failures.is_empty() {
        eprintln!("detect: {} input(s) failed:", failures.len());
        for (path, err) in &failures {
            eprintln!("  {}: {err}", path.display());
        }
    }
    Ok(failures.len())
}

pub fn cmd_train_seg(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("train-seg", cfg);
    let mut timings = Timings::new();
    let (records, dir) = load_cells(cfg, layout)?;
    let trial = first_trial(&records, layout)?;
    let train_recs = cloned(&select(&records, &trial.train));
    let (pair, report) = timings.time("train", || train_seg(&train_recs, &cfg.seg))?;
    let model_path = layout.seg_model();
    save_seg_model(&pair, &model_path)?;
    manifest
        .inputs
        .push(format!("{} ({} training records)", dir.display(), train_recs.len()));
    manifest.inputs.push(format!(
        "routes clahe/raw: {}/{}",
        report.route_counts.0, report.route_counts.1
    ));
    if let Some(acc) = report.patch_val_accuracy_w {
        manifest.inputs.push(format!("patch val acc raw-route: {acc:.4}"));
    }
    if let Some(acc) = report.patch_val_accuracy_p {
        manifest.inputs.push(format!("patch val acc clahe-route: {acc:.4}"));
    }
    manifest.outputs.push(layout.rel(&model_path));
    finish_manifest(manifest, timings, layout)?;
    println!("train-seg: model -> {}", model_path.display());
    Ok(())
}

fn route_name(model: &SegModelPair, rec: &CellRecord) -> Result<&'static str> {
    Ok(match (&model.cnn_w, &model.cnn_p) {
        (Some(_), Some(_)) => match route(&rec.image, &model.rule, &model.glcm)? {
            Route::Preprocess => "clahe",
            Route::NoPreprocess => "raw",
        },
        (None, Some(_)) => "clahe",
        _ => "raw",
    })
}

pub fn cmd_segment(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("segment", cfg);
    let mut timings = Timings::new();
    let model_path = layout.seg_model();
    if !model_path.is_file() {
        return Err(missing_artifact(&model_path, "train-seg"));
    }
    let model = load_seg_model(&model_path)?;
    let (records, dir) = load_cells(cfg, layout)?;
    let trial = first_trial(&records, layout)?;
    let test_recs = select(&records, &trial.test);
    let mut rows = Vec::with_capacity(test_recs.len());
    for rec in &test_recs {
        let (tri, mask) = timings.time("segment", || segment(&rec.image, &model, &model.patch))?;
        write_indexed_png(
            &layout.seg_classes(&rec.id),
            tri.width,
            tri.height,
            tri.indices(),
            &CLASS_MAP_PALETTE,
        )?;
        write_mask_png(&layout.seg_mask(&rec.id), &mask)?;
        let score = pixel_fscore(&mask, &rec.gt_mask)?;
        rows.push(SegMetricsRow {
            id: rec.id.clone(),
            class: rec.label.short_name().to_string(),
            route: route_name(&model, rec)?.to_string(),
            precision: score.precision,
            recall: score.recall,
            fscore: score.fscore,
            zsi: score.zsi,
        });
        manifest.outputs.push(layout.rel(&layout.seg_mask(&rec.id)));
    }
    std::fs::write(layout.seg_metrics_csv(), seg_metrics_to_csv(&rows))?;
    manifest.outputs.push(layout.rel(&layout.seg_metrics_csv()));
    manifest
        .inputs
        .push(format!("{} ({} test records)", dir.display(), test_recs.len()));
    manifest.inputs.push(format!("model {}", model_path.display()));
    let mean = rows.iter().map(|r| r.fscore).sum::<f64>() / rows.len().max(1) as f64;
    finish_manifest(manifest, timings, layout)?;
    println!(
        "segment: {} images, mean F {:.4} -> {}",
        rows.len(),
        mean,
        layout.seg_metrics_csv().display()
    );
    Ok(())
}

fn load_weight_archive(cfg: &RunConfig) -> Result<Option<WeightArchive>> {
    match &cfg.weights {
        Some(path) => Ok(Some(WeightArchive::load(path)?)),
        None => Ok(None),
    }
}

pub fn cmd_train_clf(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("train-clf", cfg);
    let mut timings = Timings::new();
    let (records, dir) = load_cells(cfg, layout)?;
    let trial = first_trial(&records, layout)?;
    let train_recs = cloned(&select(&records, &trial.train));
    let val_recs = cloned(&select(&records, &trial.val));
    let val = if val_recs.is_empty() {
        None
    } else {
        Some(&val_recs[..])
    };
    let archive = load_weight_archive(cfg)?;
    let model_path = match cfg.clf_mode {
        ClfMode::Flat => {
            let (model, _) = timings.time("train", || {
                train_flat_with(&train_recs, val, &cfg.clf, archive.as_ref())
            })?;
            let path = layout.clf_model();
            save_clf_model(&model, &path)?;
            path
        }
        ClfMode::Binary => {
            let (model, _) = timings.time("train", || {
                train_binary_direct_with(&train_recs, val, &cfg.clf, archive.as_ref())
            })?;
            let path = layout.clf_model();
            save_clf_model(&model, &path)?;
            path
        }
        ClfMode::Cascade => {
            let (cascade, _) = timings.time("train", || {
                train_cascade(&train_recs, val, &CascadeSpec::standard(), &cfg.clf)
            })?;
            let path = layout.cascade_model();
            save_cascade(&cascade, &path)?;
            path
        }
    };
    manifest
        .inputs
        .push(format!("{} ({} train / {} val)", dir.display(), train_recs.len(), val_recs.len()));
    if let Some(w) = &cfg.weights {
        manifest.inputs.push(format!("weights {}", w.display()));
    }
    manifest.outputs.push(layout.rel(&model_path));
    finish_manifest(manifest, timings, layout)?;
    println!(
        "train-clf ({}): model -> {}",
        cfg.clf_mode.name(),
        model_path.display()
    );
    Ok(())
}

pub fn cmd_classify(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("classify", cfg);
    let mut timings = Timings::new();
    let (records, dir) = load_cells(cfg, layout)?;
    let trial = first_trial(&records, layout)?;
    let test_recs = cloned(&select(&records, &trial.test));
    let (preds, report, class_names) = match cfg.clf_mode {
        ClfMode::Cascade => {
            let path = layout.cascade_model();
            if !path.is_file() {
                return Err(missing_artifact(&path, "train-clf"));
            }
            let cascade = load_cascade(&path)?;
            manifest.inputs.push(format!("model {}", path.display()));
            let (preds, report) = timings.time("classify", || classify_cascade(&cascade, &test_recs))?;
            let names = cytoscreen_core::dataset::ClassLabel::ALL
                .iter()
                .map(|c| c.short_name().to_string())
                .collect::<Vec<_>>();
            (preds, report, names)
        }
        _ => {
            let path = layout.clf_model();
            if !path.is_file() {
                return Err(missing_artifact(&path, "train-clf"));
            }
            let model = load_clf_model(&path)?;
            manifest.inputs.push(format!("model {}", path.display()));
            let names = model.class_names.clone();
            let (preds, report) = timings.time("classify", || classify_flat(&model, &test_recs))?;
            (preds, report, names)
        }
    };
    let csv_path = layout.predictions_csv();
    if let Some(parent) = csv_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&csv_path, predictions_to_csv(&preds, &class_names))?;
    manifest
        .inputs
        .push(format!("{} ({} test records)", dir.display(), test_recs.len()));
    manifest.outputs.push(layout.rel(&csv_path));
    finish_manifest(manifest, timings, layout)?;
    println!(
        "classify ({}): {} records, accuracy {:.4} -> {}",
        cfg.clf_mode.name(),
        preds.len(),
        report.overall_accuracy,
        csv_path.display()
    );
    Ok(())
}

/// Ground-truth masks keyed by record id, for pooled seg evaluation.
fn gt_by_id(records: &[CellRecord]) -> BTreeMap<String, &CellRecord> {
    records.iter().map(|r| (r.id.clone(), r)).collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, layout: &OutLayout) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate", cfg);
    let mut timings = Timings::new();
    let seg_csv = layout.seg_metrics_csv();
    let preds_csv = layout.predictions_csv();
    if !seg_csv.is_file() && !preds_csv.is_file() {
        return Err(missing_artifact(&preds_csv, "segment and/or classify"));
    }

    let seg_section = if seg_csv.is_file() {
        let rows = cytoscreen_core::pipeline::seg_metrics_from_csv(&std::fs::read_to_string(
            &seg_csv,
        )?)?;
        manifest.inputs.push(layout.rel(&seg_csv));
        let section = match cfg.seg_averaging {
            SegAveraging::PerImage => seg_section_from_rows(&rows, cfg.seg_averaging)?,
            SegAveraging::PooledPixels => {
                // Pooling needs pixel counts, so re-score the stored masks
                // against ground truth.
                let (records, _) = load_cells(cfg, layout)?;
                let by_id = gt_by_id(&records);
                let mut items = Vec::new();
                let mut masks = Vec::new();
                for row in &rows {
                    let rec = by_id.get(&row.id).ok_or_else(|| {
                        Error::InvalidInput(format!("record {} not in dataset", row.id))
                    })?;
                    let mask_path = layout.seg_mask(&row.id);
                    if !mask_path.is_file() {
                        return Err(missing_artifact(&mask_path, "segment"));
                    }
                    masks.push((rec.label, cytoscreen_core::imgproc::read_mask_png(&mask_path)?));
                    items.push(rec.gt_mask.clone());
                }
                let pairs: Vec<_> = masks
                    .iter()
                    .zip(&items)
                    .map(|((label, pred), gt)| (*label, pred, gt))
                    .collect();
                let scores = timings.time("pool", || {
                    seg_class_fscores(&pairs, SegAveraging::PooledPixels)
                })?;
                let clahe = rows.iter().filter(|r| r.route == "clahe").count();
                seg_section_from_scores(
                    &scores,
                    rows.len(),
                    cfg.seg_averaging,
                    (clahe, rows.len() - clahe),
                )
            }
        };
        let row = class_row_from_section(&section);
        std::fs::create_dir_all(layout.eval_dir())?;
        std::fs::write(layout.eval_class_fscore(), metrics::class_table_csv(&row))?;
        manifest.outputs.push(layout.rel(&layout.eval_class_fscore()));
        Some(section)
    } else {
        None
    };

    let clf_section = if preds_csv.is_file() {
        let preds = predictions_from_csv(&std::fs::read_to_string(&preds_csv)?)?;
        manifest.inputs.push(layout.rel(&preds_csv));
        let mut classes: Vec<String> = Vec::new();
        for p in &preds {
            for name in [p.true_label.as_deref(), Some(p.predicted.as_str())]
                .into_iter()
                .flatten()
            {
                if !classes.iter().any(|c| c == name) {
                    classes.push(name.to_string());
                }
            }
        }
        // Keep canonical ordering when the labels are the known classes.
        let canonical: Vec<String> = if classes.len() == 2 {
            vec!["normal".into(), "abnormal".into()]
        } else {
            cytoscreen_core::dataset::ClassLabel::ALL
                .iter()
                .map(|c| c.short_name().to_string())
                .collect()
        };
        let names = if classes.iter().all(|c| canonical.contains(c)) {
            canonical
        } else {
            classes
        };
        let cm = confusion_from_predictions(&preds, &names)?;
        let (overall, per_class) = metrics::accuracy(&cm)?;
        let binary = if names.len() == 7 {
            let binary_names: Vec<String> = vec!["normal".into(), "abnormal".into()];
            let to_binary = |s: &str| -> Option<String> {
                cytoscreen_core::dataset::ClassLabel::from_short_name(s)
                    .map(|c| binary_names[c.binary().index()].clone())
            };
            let collapsed: Vec<_> = preds
                .iter()
                .filter_map(|p| {
                    Some(cytoscreen_core::pipeline::StoredPrediction {
                        id: p.id.clone(),
                        true_label: to_binary(p.true_label.as_deref()?),
                        predicted: to_binary(&p.predicted)?,
                    })
                })
                .collect();
            let bcm = confusion_from_predictions(&collapsed, &binary_names)?;
            Some(metrics::accuracy(&bcm)?.0)
        } else {
            None
        };
        std::fs::create_dir_all(layout.eval_dir())?;
        std::fs::write(layout.eval_confusion(), confusion_to_csv(&cm, &names))?;
        manifest.outputs.push(layout.rel(&layout.eval_confusion()));
        Some(ClfEvalSection {
            records: preds.len(),
            classes: names,
            overall_accuracy: overall,
            per_class_recall: per_class,
            binary_accuracy: binary,
        })
    } else {
        None
    };

    let summary = EvalSummary {
        schema_version: 1,
        seg: seg_section,
        clf: clf_section,
    };
    std::fs::create_dir_all(layout.eval_dir())?;
    std::fs::write(layout.eval_summary(), summary.to_json()?)?;
    manifest.outputs.push(layout.rel(&layout.eval_summary()));
    finish_manifest(manifest, timings, layout)?;
    if let Some(seg) = &summary.seg {
        println!(
            "evaluate: seg mean F {:.4} / ZSI {:.4} over {} images",
            seg.mean_fscore, seg.mean_zsi, seg.images
        );
    }
    if let Some(clf) = &summary.clf {
        println!(
            "evaluate: clf accuracy {:.4} over {} records",
            clf.overall_accuracy, clf.records
        );
    }
    println!("evaluate: summary -> {}", layout.eval_summary().display());
    Ok(())
}

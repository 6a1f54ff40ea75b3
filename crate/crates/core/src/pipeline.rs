//! Run orchestration: the validated run configuration shared by every
//! command, run manifests for reproducibility, the fixed output layout,
//! and the small codecs for on-disk artifacts (overlays, metric tables,
//! prediction files).
//!
//! Seeding model: `RunConfig.seed` is the only seed a user sets. Every
//! stage derives its own independent stream from it with [`derive_seed`],
//! so the seed fields inside the embedded sub-configs are overwritten at
//! load time and need not appear in config files.
//!
//! Reproducibility: a manifest stores the hash of the effective config,
//! the resolved seed, a best-effort `git describe`, and wall-clock
//! timings. Timings live only in manifests; metric files are pure
//! functions of config and data, so identical runs produce byte-identical
//! metric JSON and CSV.

use crate::classification::ClfTrainConfig;
use crate::dataset::{BinaryLabel, CellAnnotation, ClassLabel, SplitSpec};
use crate::imgproc::{BBox, DetectionConfig, RasterImage};
use crate::metrics::{ConfusionMatrix, SegAveraging, SegClassScores, TrialStat};
use crate::segmentation::SegTrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Version stamp expected in every config file.
pub const CONFIG_VERSION: u32 = 1;

/// Which classifier `train-clf` and `classify` operate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClfMode {
    /// Seven-way flat classifier.
    #[default]
    Flat,
    /// Direct normal-vs-abnormal classifier.
    Binary,
    /// Decision-tree cascade of binary stages.
    Cascade,
}

impl ClfMode {
    pub fn name(self) -> &'static str {
        match self {
            ClfMode::Flat => "flat",
            ClfMode::Binary => "binary",
            ClfMode::Cascade => "cascade",
        }
    }
}

/// Synthetic-corpus section of the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Number of single-cell records to generate.
    pub n_cells: usize,
    /// Number of multi-cell canvases to generate.
    pub n_slides: usize,
    pub image: crate::dataset::SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_cells: 250,
            n_slides: 8,
            image: crate::dataset::SynthConfig::default(),
        }
    }
}

/// One config file drives every command. Unknown keys are rejected so
/// typos fail loudly instead of silently running defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// Master seed; see the module docs for how stages derive theirs.
    pub seed: u64,
    /// Single-cell dataset root (class-per-directory layout). Commands
    /// that need cells fall back to `<out_dir>/synth/cells` when unset.
    pub cells_dir: Option<PathBuf>,
    /// Multi-cell slide directory; detect falls back to explicit inputs.
    pub slides_dir: Option<PathBuf>,
    /// Optional pretrained weight archive for the frozen banks.
    pub weights: Option<PathBuf>,
    /// Root for all command outputs; the CLI `--out` flag overrides it.
    pub out_dir: PathBuf,
    pub split: SplitSpec,
    pub detection: DetectionConfig,
    pub seg: SegTrainConfig,
    pub clf: ClfTrainConfig,
    pub clf_mode: ClfMode,
    /// How per-class segmentation F is averaged in evaluation tables.
    pub seg_averaging: SegAveraging,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            cells_dir: None,
            slides_dir: None,
            weights: None,
            out_dir: PathBuf::from("out"),
            split: SplitSpec::default(),
            detection: DetectionConfig::default(),
            seg: SegTrainConfig::default(),
            clf: ClfTrainConfig::default(),
            clf_mode: ClfMode::default(),
            seg_averaging: SegAveraging::default(),
            synth: SynthSection::default(),
        }
    }
}

/// Derive a stage seed from the master seed and a stage tag. Uses a hash
/// so distinct tags give unrelated streams and adding a stage never
/// shifts the seeds of existing ones.
pub fn derive_seed(master: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is long enough"))
}

impl RunConfig {
    /// Parse and validate a config file, then resolve stage seeds.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::NotFound(format!("config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg.with_derived_seeds())
    }

    /// Copy with every stage seed overwritten from the master seed.
    pub fn with_derived_seeds(mut self) -> RunConfig {
        self.split.seed = derive_seed(self.seed, "split");
        self.seg.train.seed = derive_seed(self.seed, "seg-train");
        self.clf.bank_seed = derive_seed(self.seed, "clf-bank");
        self.clf.train.seed = derive_seed(self.seed, "clf-train");
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config_version {} not supported; this build reads version {}",
                self.config_version, CONFIG_VERSION
            )));
        }
        for (name, path) in [
            ("cells_dir", &self.cells_dir),
            ("slides_dir", &self.slides_dir),
            ("weights", &self.weights),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::Config(format!(
                        "{name} {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        self.split.validate()?;
        if self.synth.n_cells == 0 {
            return Err(Error::Config("synth.n_cells must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let d = h.finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Best-effort `git describe --always --dirty`; `None` outside a work tree.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8_lossy(&out.stdout).trim().to_string();
    if s.is_empty() {
        None
    } else {
        Some(s)
    }
}

/// Named wall-clock timings, collected as a command runs.
#[derive(Debug, Default)]
pub struct Timings {
    laps: BTreeMap<String, u64>,
}

impl Timings {
    pub fn new() -> Self {
        Timings::default()
    }

    /// Run a closure and record its wall time under `name`.
    pub fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        let ms = t0.elapsed().as_millis() as u64;
        *self.laps.entry(name.to_string()).or_insert(0) += ms;
        out
    }

    pub fn into_map(self) -> BTreeMap<String, u64> {
        self.laps
    }
}

/// Everything needed to audit or re-run one command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: Option<String>,
    pub timings_ms: BTreeMap<String, u64>,
    /// Inputs the command resolved (paths, counts), for the audit trail.
    pub inputs: Vec<String>,
    /// Files the command wrote, relative to the output root.
    pub outputs: Vec<String>,
    /// The effective config, embedded so `--from-manifest` can re-run.
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            schema_version: 1,
            command: command.to_string(),
            config_hash: config.hash(),
            seed: config.seed,
            git_describe: git_describe(),
            timings_ms: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: config.clone(),
        }
    }

    /// Write as `<command>.manifest.json` under the output root.
    pub fn write(&self, out_root: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_root)?;
        let path = out_root.join(format!("{}.manifest.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::NotFound(format!("manifest {}: {e}", path.display())))?;
        let m: RunManifest = serde_json::from_str(&text)?;
        m.config.validate()?;
        Ok(m)
    }
}

/// Fixed relative layout of all artifacts under one output root.
#[derive(Debug, Clone)]
pub struct OutLayout {
    pub root: PathBuf,
}

impl OutLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutLayout { root: root.into() }
    }

    pub fn synth_cells(&self) -> PathBuf {
        self.root.join("synth").join("cells")
    }

    pub fn synth_slides(&self) -> PathBuf {
        self.root.join("synth").join("slides")
    }

    pub fn split_manifest(&self) -> PathBuf {
        self.root.join("split").join("splits.json")
    }

    pub fn seg_model(&self) -> PathBuf {
        self.root.join("models").join("seg.wgt")
    }

    pub fn clf_model(&self) -> PathBuf {
        self.root.join("models").join("clf.wgt")
    }

    pub fn cascade_model(&self) -> PathBuf {
        self.root.join("models").join("cascade.wgt")
    }

    pub fn seg_dir(&self) -> PathBuf {
        self.root.join("seg")
    }

    /// Per-pixel class map PNG for one record.
    pub fn seg_classes(&self, id: &str) -> PathBuf {
        self.seg_dir().join(format!("{}_classes.png", flatten_id(id)))
    }

    /// Post-processed nucleus mask PNG for one record.
    pub fn seg_mask(&self, id: &str) -> PathBuf {
        self.seg_dir().join(format!("{}_mask.png", flatten_id(id)))
    }

    pub fn seg_metrics_csv(&self) -> PathBuf {
        self.seg_dir().join("metrics.csv")
    }

    pub fn predictions_csv(&self) -> PathBuf {
        self.root.join("classify").join("predictions.csv")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn eval_summary(&self) -> PathBuf {
        self.eval_dir().join("summary.json")
    }

    pub fn eval_class_fscore(&self) -> PathBuf {
        self.eval_dir().join("class_fscore.csv")
    }

    pub fn eval_confusion(&self) -> PathBuf {
        self.eval_dir().join("confusion.csv")
    }

    pub fn detect_dir(&self) -> PathBuf {
        self.root.join("detect")
    }

    pub fn detect_mask(&self, stem: &str) -> PathBuf {
        self.detect_dir().join(format!("{stem}_mask.png"))
    }

    pub fn detect_boxes(&self, stem: &str) -> PathBuf {
        self.detect_dir().join(format!("{stem}_boxes.json"))
    }

    pub fn detect_overlay(&self, stem: &str) -> PathBuf {
        self.detect_dir().join(format!("{stem}_overlay.png"))
    }

    /// Relative display path of an artifact, for manifest output lists.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

/// Record ids use `/` between class and stem; artifact files flatten it.
pub fn flatten_id(id: &str) -> String {
    id.replace(['/', '\\'], "_")
}

/// Palette for the per-pixel class map PNG: background, edge, nucleus.
pub const CLASS_MAP_PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [255, 215, 0], [178, 34, 34]];

const GREEN: [u8; 3] = [0, 190, 0];
const RED: [u8; 3] = [220, 30, 30];
const YELLOW: [u8; 3] = [235, 200, 0];

/// One detection box plus the label assigned from annotations, if any.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledBox {
    pub component: u32,
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Absent when the slide carries no annotations for this box.
    pub label: Option<BinaryLabel>,
}

/// Label each detection box by the annotations its area contains. A box
/// containing any abnormal annotation is labeled abnormal (screening
/// favors recall); one with only normal annotations is normal; one with
/// none keeps no label.
pub fn label_boxes(boxes: &[(u32, BBox)], annotations: &[CellAnnotation]) -> Vec<LabeledBox> {
    boxes
        .iter()
        .map(|&(component, b)| {
            let mut label = None;
            for a in annotations {
                let inside = (b.x0..=b.x1).contains(&(a.x as usize))
                    && (b.y0..=b.y1).contains(&(a.y as usize));
                if !inside {
                    continue;
                }
                label = match (label, a.label) {
                    (_, BinaryLabel::Abnormal) => Some(BinaryLabel::Abnormal),
                    (Some(BinaryLabel::Abnormal), _) => Some(BinaryLabel::Abnormal),
                    _ => Some(BinaryLabel::Normal),
                };
            }
            LabeledBox {
                component,
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                label,
            }
        })
        .collect()
}

fn draw_rect(img: &mut RasterImage, b: &LabeledBox, color: [u8; 3]) {
    let (x0, y0) = (b.x0.min(img.width - 1), b.y0.min(img.height - 1));
    let (x1, y1) = (b.x1.min(img.width - 1), b.y1.min(img.height - 1));
    let mut put = |x: usize, y: usize| {
        for c in 0..img.channels.min(3) {
            img.set(x, y, c, color[c]);
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
}

/// Draw box outlines over a copy of the image: green normal, red
/// abnormal, yellow when the box has no label.
pub fn render_overlay(img: &RasterImage, boxes: &[LabeledBox]) -> RasterImage {
    let mut out = if img.channels == 1 {
        img.gray_to_rgb()
    } else {
        img.clone()
    };
    for b in boxes {
        let color = match b.label {
            Some(BinaryLabel::Normal) => GREEN,
            Some(BinaryLabel::Abnormal) => RED,
            None => YELLOW,
        };
        draw_rect(&mut out, b, color);
    }
    out
}

/// One row of the per-image segmentation metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetricsRow {
    pub id: String,
    pub class: String,
    /// Which route the image took: `clahe` or `raw`.
    pub route: String,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub zsi: f64,
}

pub fn seg_metrics_to_csv(rows: &[SegMetricsRow]) -> String {
    let mut out = String::from("id,class,route,precision,recall,fscore,zsi\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.id, r.class, r.route, r.precision, r.recall, r.fscore, r.zsi
        ));
    }
    out
}

pub fn seg_metrics_from_csv(text: &str) -> Result<Vec<SegMetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty segmentation metrics file".into()))?;
    if header != "id,class,route,precision,recall,fscore,zsi" {
        return Err(Error::InvalidInput(format!(
            "unexpected segmentation metrics header: {header}"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::InvalidInput(format!(
                "segmentation metrics line {}: expected 7 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number {s:?} on line {}", i + 2)))
        };
        rows.push(SegMetricsRow {
            id: parts[0].to_string(),
            class: parts[1].to_string(),
            route: parts[2].to_string(),
            precision: num(parts[3])?,
            recall: num(parts[4])?,
            fscore: num(parts[5])?,
            zsi: num(parts[6])?,
        });
    }
    Ok(rows)
}

/// Minimal prediction view parsed back from `predictions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredPrediction {
    pub id: String,
    pub true_label: Option<String>,
    pub predicted: String,
}

/// Parse the id / true / predicted columns of a stored predictions file.
/// Score and path columns are tolerated and ignored.
pub fn predictions_from_csv(text: &str) -> Result<Vec<StoredPrediction>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty predictions file".into()))?;
    if !header.starts_with("id,true,predicted") {
        return Err(Error::InvalidInput(format!(
            "unexpected predictions header: {header}"
        )));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 3 {
            return Err(Error::InvalidInput(format!(
                "predictions line {}: expected at least 3 fields",
                i + 2
            )));
        }
        out.push(StoredPrediction {
            id: parts[0].to_string(),
            true_label: if parts[1].is_empty() {
                None
            } else {
                Some(parts[1].to_string())
            },
            predicted: parts[2].to_string(),
        });
    }
    Ok(out)
}

/// Confusion matrix over stored predictions whose labels all parse as the
/// given class-name list. Rows are truth, columns predictions.
pub fn confusion_from_predictions(
    preds: &[StoredPrediction],
    class_names: &[String],
) -> Result<ConfusionMatrix> {
    let index_of = |name: &str| -> Result<usize> {
        class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown class label {name:?}")))
    };
    let mut cm = ConfusionMatrix::new(class_names.len());
    for p in preds {
        let truth = p.true_label.as_deref().ok_or_else(|| {
            Error::InvalidInput(format!("prediction {} lacks a true label", p.id))
        })?;
        cm.record(index_of(truth)?, index_of(&p.predicted)?);
    }
    Ok(cm)
}

pub fn confusion_to_csv(cm: &ConfusionMatrix, class_names: &[String]) -> String {
    let mut out = String::from("true\\pred");
    for n in class_names {
        out.push(',');
        out.push_str(n);
    }
    out.push('\n');
    for i in 0..cm.n {
        out.push_str(&class_names[i]);
        for j in 0..cm.n {
            out.push_str(&format!(",{}", cm.get(i, j)));
        }
        out.push('\n');
    }
    out
}

/// Machine-readable evaluation summary; the byte-identical artifact of
/// criterion-style reproducibility checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub schema_version: u32,
    pub seg: Option<SegEvalSection>,
    pub clf: Option<ClfEvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegEvalSection {
    pub images: usize,
    pub averaging: SegAveraging,
    pub mean_fscore: f64,
    pub mean_zsi: f64,
    /// Per-class F in class order, `None` for classes with no images.
    pub per_class_fscore: Vec<Option<f64>>,
    /// Images routed to (clahe, raw).
    pub route_counts: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClfEvalSection {
    pub records: usize,
    pub classes: Vec<String>,
    pub overall_accuracy: f64,
    pub per_class_recall: Vec<Option<f64>>,
    /// Normal-vs-abnormal accuracy when labels collapse to two groups.
    pub binary_accuracy: Option<f64>,
}

impl EvalSummary {
    /// Serialize with a trailing newline; field order is fixed by the
    /// struct, so equal summaries are byte-equal.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Build the segmentation section from stored per-image rows.
pub fn seg_section_from_rows(rows: &[SegMetricsRow], averaging: SegAveraging) -> Result<SegEvalSection> {
    if rows.is_empty() {
        return Err(Error::InvalidInput("no segmentation rows to evaluate".into()));
    }
    let k = ClassLabel::ALL.len();
    let per_class = match averaging {
        SegAveraging::PerImage => {
            let mut sums = vec![(0.0, 0usize); k];
            for r in rows {
                let class = ClassLabel::from_short_name(&r.class).ok_or_else(|| {
                    Error::InvalidInput(format!("unknown class {:?} in metrics row", r.class))
                })?;
                let e = &mut sums[class.index()];
                e.0 += r.fscore;
                e.1 += 1;
            }
            sums.iter()
                .map(|&(s, n)| if n == 0 { None } else { Some(s / n as f64) })
                .collect::<Vec<_>>()
        }
        SegAveraging::PooledPixels => {
            return Err(Error::Config(
                "pooled averaging needs masks; evaluate recomputes it only when \
                 segment ran with pooled averaging configured"
                    .into(),
            ));
        }
    };
    let routes = rows.iter().filter(|r| r.route == "clahe").count();
    Ok(SegEvalSection {
        images: rows.len(),
        averaging,
        mean_fscore: rows.iter().map(|r| r.fscore).sum::<f64>() / rows.len() as f64,
        mean_zsi: rows.iter().map(|r| r.zsi).sum::<f64>() / rows.len() as f64,
        per_class_fscore: per_class,
        route_counts: (routes, rows.len() - routes),
    })
}

/// Build the segmentation section directly from scored masks, which
/// supports both averaging modes.
pub fn seg_section_from_scores(
    scores: &SegClassScores,
    images: usize,
    averaging: SegAveraging,
    route_counts: (usize, usize),
) -> SegEvalSection {
    SegEvalSection {
        images,
        averaging,
        mean_fscore: scores.mean_fscore,
        mean_zsi: scores.mean_zsi,
        per_class_fscore: scores.per_class.clone(),
        route_counts,
    }
}

/// Per-class F row (class order then average) from an eval section, in
/// the layout of the class table CSV.
pub fn class_row_from_section(sec: &SegEvalSection) -> Vec<f64> {
    let finite: Vec<f64> = sec.per_class_fscore.iter().flatten().copied().collect();
    let mut row: Vec<f64> = sec
        .per_class_fscore
        .iter()
        .map(|v| v.unwrap_or(f64::NAN))
        .collect();
    row.push(finite.iter().sum::<f64>() / finite.len().max(1) as f64);
    row
}

/// Summary statistics of repeated scalar measurements, serialized in
/// manifests of multi-trial commands.
pub fn trial_stat(values: &[f64]) -> TrialStat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    TrialStat {
        mean,
        std: var.sqrt(),
    }
}

/// The error a command raises when an expected artifact is missing; names
/// the command that produces it.
pub fn missing_artifact(path: &Path, producer: &str) -> Error {
    Error::NotFound(format!(
        "{} not found; run `cytoscreen {producer}` first",
        path.display()
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::BBox;

    #[test]
    fn config_round_trips_and_hash_is_stable() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"config_version":1,"sed":3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn version_mismatch_is_a_config_error() {
        let cfg = RunConfig {
            config_version: 99,
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn missing_path_is_a_config_error() {
        let cfg = RunConfig {
            cells_dir: Some(PathBuf::from("/definitely/not/here")),
            ..RunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn derived_seeds_are_distinct_and_deterministic() {
        let tags = ["split", "seg-train", "clf-bank", "clf-train", "synth"];
        let seeds: Vec<u64> = tags.iter().map(|t| derive_seed(7, t)).collect();
        let again: Vec<u64> = tags.iter().map(|t| derive_seed(7, t)).collect();
        assert_eq!(seeds, again);
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j], "{} vs {}", tags[i], tags[j]);
            }
        }
        assert_ne!(derive_seed(7, "split"), derive_seed(8, "split"));
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_derived_seeds();
        let mut m = RunManifest::new("segment", &cfg);
        m.timings_ms.insert("train".into(), 1234);
        m.outputs.push("seg/metrics.csv".into());
        let path = m.write(dir.path()).unwrap();
        assert!(path.ends_with("segment.manifest.json"));
        let back = RunManifest::load(&path).unwrap();
        assert_eq!(back.command, "segment");
        assert_eq!(back.config_hash, cfg.hash());
        assert_eq!(back.timings_ms.get("train"), Some(&1234));
        assert_eq!(back.config, cfg);
    }

    #[test]
    fn layout_paths_are_fixed_and_ids_flatten() {
        let l = OutLayout::new("/tmp/run");
        assert_eq!(l.seg_mask("nsup/0001"), PathBuf::from("/tmp/run/seg/nsup_0001_mask.png"));
        assert_eq!(l.split_manifest(), PathBuf::from("/tmp/run/split/splits.json"));
        assert_eq!(l.rel(&l.predictions_csv()), "classify/predictions.csv");
        assert_eq!(flatten_id("a/b\\c"), "a_b_c");
    }

    #[test]
    fn boxes_take_label_from_contained_annotations() {
        let boxes = vec![
            (1u32, BBox { x0: 0, y0: 0, x1: 10, y1: 10 }),
            (2u32, BBox { x0: 20, y0: 0, x1: 30, y1: 10 }),
            (3u32, BBox { x0: 40, y0: 0, x1: 50, y1: 10 }),
        ];
        let ann = vec![
            CellAnnotation { x: 5, y: 5, label: BinaryLabel::Normal },
            CellAnnotation { x: 25, y: 5, label: BinaryLabel::Normal },
            CellAnnotation { x: 26, y: 5, label: BinaryLabel::Abnormal },
        ];
        let labeled = label_boxes(&boxes, &ann);
        assert_eq!(labeled[0].label, Some(BinaryLabel::Normal));
        // Mixed contents collapse to abnormal.
        assert_eq!(labeled[1].label, Some(BinaryLabel::Abnormal));
        assert_eq!(labeled[2].label, None);
    }

    #[test]
    fn overlay_draws_the_right_colors() {
        let img = RasterImage::new(60, 20, 3);
        let boxes = vec![
            LabeledBox { component: 1, x0: 0, y0: 0, x1: 10, y1: 10, label: Some(BinaryLabel::Normal) },
            LabeledBox { component: 2, x0: 20, y0: 0, x1: 30, y1: 10, label: Some(BinaryLabel::Abnormal) },
            LabeledBox { component: 3, x0: 40, y0: 0, x1: 50, y1: 10, label: None },
        ];
        let out = render_overlay(&img, &boxes);
        assert_eq!(out.pixel(5, 0), &GREEN);
        assert_eq!(out.pixel(25, 0), &RED);
        assert_eq!(out.pixel(45, 0), &YELLOW);
        // Interior pixels are untouched.
        assert_eq!(out.pixel(5, 5), &[0, 0, 0]);
    }

    #[test]
    fn seg_metrics_csv_round_trips() {
        let rows = vec![
            SegMetricsRow {
                id: "nsup/0001".into(),
                class: "nsup".into(),
                route: "clahe".into(),
                precision: 0.9,
                recall: 0.8,
                fscore: 0.847059,
                zsi: 0.847059,
            },
            SegMetricsRow {
                id: "cis/0002".into(),
                class: "cis".into(),
                route: "raw".into(),
                precision: 1.0,
                recall: 1.0,
                fscore: 1.0,
                zsi: 1.0,
            },
        ];
        let csv = seg_metrics_to_csv(&rows);
        let back = seg_metrics_from_csv(&csv).unwrap();
        assert_eq!(rows, back);
        assert!(seg_metrics_from_csv("nope\n").is_err());
    }

    #[test]
    fn predictions_csv_parses_and_builds_confusion() {
        let text = "id,true,predicted,score_a,score_b,path\nx,a,a,0.9,0.1,\ny,b,a,0.6,0.4,\n";
        let preds = predictions_from_csv(text).unwrap();
        assert_eq!(preds.len(), 2);
        let names = vec!["a".to_string(), "b".to_string()];
        let cm = confusion_from_predictions(&preds, &names).unwrap();
        assert_eq!(cm.get(0, 0), 1);
        assert_eq!(cm.get(1, 0), 1);
        assert_eq!(cm.get(1, 1), 0);
        let csv = confusion_to_csv(&cm, &names);
        assert!(csv.starts_with("true\\pred,a,b\n"));
        assert!(csv.contains("a,1,0\n"));
    }

    #[test]
    fn seg_section_aggregates_rows_per_class() {
        let rows = vec![
            SegMetricsRow { id: "nsup/1".into(), class: "nsup".into(), route: "clahe".into(), precision: 1.0, recall: 1.0, fscore: 0.9, zsi: 0.9 },
            SegMetricsRow { id: "nsup/2".into(), class: "nsup".into(), route: "clahe".into(), precision: 1.0, recall: 1.0, fscore: 0.7, zsi: 0.7 },
            SegMetricsRow { id: "cis/1".into(), class: "cis".into(), route: "raw".into(), precision: 1.0, recall: 1.0, fscore: 1.0, zsi: 1.0 },
        ];
        let sec = seg_section_from_rows(&rows, SegAveraging::PerImage).unwrap();
        assert_eq!(sec.images, 3);
        assert_eq!(sec.route_counts, (2, 1));
        let nsup = sec.per_class_fscore[ClassLabel::Nsup.index()].unwrap();
        assert!((nsup - 0.8).abs() < 1e-12);
        assert!(sec.per_class_fscore[ClassLabel::Nint.index()].is_none());
        let row = class_row_from_section(&sec);
        assert_eq!(row.len(), 8);
        assert!((row[7] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn eval_summary_serialization_is_stable() {
        let s = EvalSummary {
            schema_version: 1,
            seg: None,
            clf: Some(ClfEvalSection {
                records: 10,
                classes: vec!["normal".into(), "abnormal".into()],
                overall_accuracy: 0.9,
                per_class_recall: vec![Some(1.0), Some(0.8)],
                binary_accuracy: Some(0.9),
            }),
        };
        let a = s.to_json().unwrap();
        let b = s.to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.ends_with('\n'));
    }

    #[test]
    fn missing_artifact_names_the_producer() {
        let e = missing_artifact(Path::new("out/models/seg.wgt"), "train-seg");
        let msg = e.to_string();
        assert!(msg.contains("train-seg"), "{msg}");
        assert_eq!(e.exit_code(), 2);
    }
}

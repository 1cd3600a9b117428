//! Paired experiment runner: an image-only and an image+metadata softmax head
//! trained on the same split with the same configuration, then compared.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, AugmentSpec, TRANSFORM_ORDER};
use crate::features::{self, fuse, ExtractorProvider, FeatureMatrix, FeatureProvider, ProviderConfig, StoreProvider};
use crate::interpret::{self, ClassRatio, ImageWeightShift, WeightReport};
use crate::metadata::{encode_table, read_table, MetadataSchema, SchemaDeclaration};
use crate::metrics::{improvement, ImprovementReport, MetricReport};
use crate::softmax::{train, SoftmaxModel, StopReason, TrainConfig, TrainingMeta};
use crate::splits::{
    apply_label_map, filter_unique, split_raw_labels, stratified_split, validate_fractions, DatasetIndex, LabelMap,
    RawIndex, SplitSummary, Subset,
};

pub const LOCK_FILE: &str = ".lock";

pub const SEED_DERIVATION: &str =
    "stage seed = first 8 bytes (little-endian u64) of SHA-256(top-level seed as little-endian u64 || stage name)";

const AUGMENT_TEST_WARNING: &str = "augmentation is applied to the evaluation images as well as the training images";

/// Seed for `stage` derived from the top-level seed.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Load,
    Augment,
    Encode,
    Fuse,
    Split,
    Train,
    Evaluate,
    Report,
    Output,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Load => "load",
            Stage::Augment => "augment",
            Stage::Encode => "encode",
            Stage::Fuse => "fuse",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Output => "output",
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Load => 3,
            Stage::Encode => 4,
            Stage::Fuse => 5,
            Stage::Split => 6,
            Stage::Train => 7,
            Stage::Evaluate => 8,
            Stage::Report => 9,
            Stage::Output => 10,
            Stage::Augment => 11,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: BoxError,
    /// Everything recorded before the failure.
    pub manifest: Box<RunManifest>,
}

/// How the extractor obtains image features: bottleneck features from the
/// pretrained network, or features after fine tuning on the target data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TransferMode {
    #[default]
    BN,
    FT,
}

impl TransferMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::BN => "BN",
            TransferMode::FT => "FT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentTarget {
    #[default]
    TrainAndTest,
    TrainOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// `seed` is replaced by the seed derived for the `augment` stage.
    pub spec: AugmentSpec,
    pub apply_to: AugmentTarget,
    /// Augmented copies of every training image; evaluation images get one.
    pub copies_per_image: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            spec: AugmentSpec::default(),
            apply_to: AugmentTarget::TrainAndTest,
            copies_per_image: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub features: ProviderConfig,
    pub metadata: PathBuf,
    pub schema: PathBuf,
    /// `sample_id,label` CSV; when absent the labels stored with the features are used.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub label_map: Option<PathBuf>,
    #[serde(default)]
    pub transfer_mode: TransferMode,
    #[serde(default)]
    pub augmentation: Option<AugmentationConfig>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, BoxError> {
        let mut cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.features {
            ProviderConfig::File(p) | ProviderConfig::Directory(p) => fix(p),
            ProviderConfig::Extractor { images, .. } => fix(images),
        }
        fix(&mut self.metadata);
        fix(&mut self.schema);
        self.labels.as_mut().map(fix);
        self.label_map.as_mut().map(fix);
        fix(&mut self.output_dir);
    }

    pub fn augmentation_enabled(&self) -> bool {
        self.augmentation.as_ref().is_some_and(|a| a.enabled)
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        validate_fractions(self.split.fractions)?;
        self.train.validate()?;
        if let Some(a) = self.augmentation.as_ref().filter(|a| a.enabled) {
            a.spec.validate()?;
            if a.copies_per_image < 1 {
                return Err("copies_per_image must be at least 1".into());
            }
            if !matches!(self.features, ProviderConfig::Extractor { .. }) {
                return Err("augmentation needs an extractor feature source to featurize the augmented images".into());
            }
        }
        if matches!(self.features, ProviderConfig::Extractor { .. }) && self.labels.is_none() {
            return Err("an extractor feature source needs a labels file".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err("output_dir is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub spec: AugmentSpec,
    pub apply_to: AugmentTarget,
    pub copies_per_image: usize,
    pub transform_order: Vec<String>,
    pub fill_value: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub labelled: usize,
    pub removed_by_label_filter: usize,
    pub classes: Vec<String>,
    pub train_rows: usize,
    pub val_rows: usize,
    pub test_rows: usize,
    /// The validation subset is held out but not used by head training.
    pub val_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRecord {
    pub input_width: usize,
    pub train_config: TrainConfig,
    pub train_rows: Vec<String>,
    pub test_rows: Vec<String>,
    pub training: Option<TrainingMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRun {
    pub same_split: bool,
    pub same_train_config: bool,
    pub image_width: usize,
    pub fused_width: usize,
    pub split_point: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config: Option<ExperimentConfig>,
    pub seeds: BTreeMap<String, u64>,
    pub seed_derivation: String,
    pub inputs: BTreeMap<String, String>,
    pub augmentation: Option<AugmentationRecord>,
    pub samples: Option<SampleCounts>,
    pub split_summary: Option<SplitSummary>,
    pub metadata_features: Vec<String>,
    pub heads: BTreeMap<String, HeadRecord>,
    pub paired_run: Option<PairedRun>,
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per stage; the only non-reproducible part of a run.
    pub timings: Vec<StageTiming>,
    pub head_training_seconds: f64,
}

impl RunManifest {
    fn new() -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed_derivation: SEED_DERIVATION.to_string(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutputs {
    pub image_metrics: MetricReport,
    pub fused_metrics: MetricReport,
    pub improvement: ImprovementReport,
    pub image_weights: WeightReport,
    pub fused_weights: WeightReport,
    pub image_model: SoftmaxModel<f64>,
    pub fused_model: SoftmaxModel<f64>,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretabilitySummary {
    pub magnitude_ratio: Vec<ClassRatio>,
    pub image_weight_shift: Vec<ImageWeightShift>,
    pub note: String,
}

/// Exclusive claim on an output directory, released on drop.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    std::io::Error::new(e.kind(), format!("{} is locked by another run", dir.display()))
                } else {
                    e
                }
            })?;
        Ok(Self(path))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

struct Runner {
    manifest: RunManifest,
    out: PathBuf,
    stage_start: Instant,
}

impl Runner {
    fn fail(&mut self, stage: Stage, source: impl Into<BoxError>) -> StageError {
        self.manifest.timings.push(StageTiming {
            stage: stage.name().to_string(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        StageError {
            stage,
            source: source.into(),
            manifest: Box::new(self.manifest.clone()),
        }
    }

    fn done(&mut self, stage: &str) {
        self.manifest.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        self.stage_start = Instant::now();
    }

    fn hash_input(&mut self, path: &Path) -> std::io::Result<()> {
        let digest = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> std::io::Result<()> {
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        self.manifest.outputs.insert(name.to_string(), hex::encode(Sha256::digest(contents)));
        Ok(())
    }

    fn write_json<S: Serialize>(&mut self, name: &str, value: &S) -> Result<(), BoxError> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())?;
        Ok(())
    }
}

/// One feature row: `row_id` names the (possibly augmented) image,
/// `base` indexes the labelled sample it came from.
struct Row {
    row_id: String,
    base: usize,
    subset: Subset,
}

/// Runs the full experiment and writes every report into `cfg.output_dir`.
///
/// Reports and models are reproducible byte for byte; only the timings in
/// `manifest.json` vary between runs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutputs, StageError> {
    let mut r = Runner {
        manifest: RunManifest::new(),
        out: cfg.output_dir.clone(),
        stage_start: Instant::now(),
    };
    let result = run_stages(cfg, &mut r);
    if let Err(e) = &result {
        if e.stage != Stage::Output && r.out.is_dir() {
            if let Ok(text) = serde_json::to_string_pretty(&*e.manifest) {
                let _ = fs::write(r.out.join("manifest.json"), text + "\n");
            }
        }
    }
    result
}

fn run_stages(cfg: &ExperimentConfig, r: &mut Runner) -> Result<RunOutputs, StageError> {
    // config
    let mut cfg = cfg.clone();
    let seeds: BTreeMap<String, u64> = [
        ("top".to_string(), cfg.seed),
        ("split".to_string(), derive_seed(cfg.seed, "split")),
        ("augment".to_string(), derive_seed(cfg.seed, "augment")),
        ("train".to_string(), derive_seed(cfg.seed, "train")),
    ]
    .into();
    cfg.train.seed = seeds["train"];
    if let Some(a) = cfg.augmentation.as_mut() {
        a.spec.seed = seeds["augment"];
    }
    r.manifest.seeds = seeds.clone();
    r.manifest.config = Some(cfg.clone());
    cfg.validate().map_err(|e| r.fail(Stage::Config, e))?;
    r.done("config");

    let _lock = RunLock::acquire(&r.out).map_err(|e| r.fail(Stage::Output, e))?;

    // load
    let store = match &cfg.features {
        ProviderConfig::File(p) => {
            r.hash_input(p).map_err(|e| r.fail(Stage::Load, e))?;
            Some(StoreProvider::from_matrix(features::read_fmx(p).map_err(|e| r.fail(Stage::Load, e))?))
        }
        ProviderConfig::Directory(d) => Some(StoreProvider::open_dir(d)),
        ProviderConfig::Extractor { images, .. } => {
            r.hash_input(images).map_err(|e| r.fail(Stage::Load, e))?;
            None
        }
    }
    .transpose()
    .map_err(|e| r.fail(Stage::Load, e))?;
    if let (Some(_), ProviderConfig::Directory(d)) = (&store, &cfg.features) {
        let mut files: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| r.fail(Stage::Load, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "fmx"))
            .collect();
        files.sort();
        for f in files {
            r.hash_input(&f).map_err(|e| r.fail(Stage::Load, e))?;
        }
    }

    let raw = match &cfg.labels {
        Some(p) => {
            r.hash_input(p).map_err(|e| r.fail(Stage::Load, e))?;
            RawIndex::read_csv(p).map_err(|e| r.fail(Stage::Load, e))?
        }
        None => {
            let m = store.as_ref().expect("validated").matrix();
            let labels = m
                .labels
                .as_ref()
                .ok_or_else(|| r.fail(Stage::Load, "features carry no labels and no labels file is configured"))?;
            RawIndex {
                sample_ids: m.sample_ids.clone(),
                raw_labels: labels.iter().map(|l| split_raw_labels(l)).collect(),
            }
        }
    };
    let map = match &cfg.label_map {
        Some(p) => {
            r.hash_input(p).map_err(|e| r.fail(Stage::Load, e))?;
            LabelMap::load(p).map_err(|e| r.fail(Stage::Load, e))?
        }
        None => raw.identity_map(),
    };
    let grouped = apply_label_map(&raw, &map).map_err(|e| r.fail(Stage::Load, e))?;
    let (index, removed) = filter_unique(&grouped).map_err(|e| r.fail(Stage::Load, e))?;
    if removed > 0 {
        r.manifest
            .warnings
            .push(format!("{removed} sample(s) without exactly one class after label mapping were dropped"));
    }
    let classes = index.classes();
    if classes.len() < 2 {
        return Err(r.fail(Stage::Load, format!("need at least 2 classes, found {}", classes.len())));
    }

    r.hash_input(&cfg.schema).map_err(|e| r.fail(Stage::Load, e))?;
    r.hash_input(&cfg.metadata).map_err(|e| r.fail(Stage::Load, e))?;
    let decl = SchemaDeclaration::load(&cfg.schema).map_err(|e| r.fail(Stage::Load, e))?;
    let records = read_table(&cfg.metadata, &decl).map_err(|e| r.fail(Stage::Load, e))?;
    r.done("load");

    // split
    let (index, summary) = stratified_split(&index, cfg.split.fractions, seeds["split"]).map_err(|e| r.fail(Stage::Split, e))?;
    for c in &summary.rare_classes {
        r.manifest.warnings.push(format!("class `{c}` is too small to appear in every subset"));
    }
    let assignment = index.split_assignment.clone().expect("split assigns every sample");
    r.manifest.split_summary = Some(summary);
    r.done("split");

    // augment
    let mut rows: Vec<Row> = Vec::new();
    let mut image_index = BTreeMap::new();
    match (&cfg.features, cfg.augmentation.as_ref().filter(|a| a.enabled)) {
        (ProviderConfig::Extractor { images, .. }, Some(aug)) => {
            let original = features::read_image_index(images).map_err(|e| r.fail(Stage::Augment, e))?;
            let dir = r.out.join("augmented");
            fs::create_dir_all(&dir).map_err(|e| r.fail(Stage::Augment, e))?;
            let copies = aug.copies_per_image;
            for (i, (id, &subset)) in index.sample_ids.iter().zip(&assignment).enumerate() {
                let src = original
                    .get(id)
                    .ok_or_else(|| r.fail(Stage::Augment, format!("no image listed for sample `{id}`")))?;
                let augmented = subset == Subset::Train || aug.apply_to == AugmentTarget::TrainAndTest;
                if !augmented {
                    image_index.insert(id.clone(), src.clone());
                    rows.push(Row { row_id: id.clone(), base: i, subset });
                    continue;
                }
                let n = if subset == Subset::Train { copies } else { 1 };
                let img = augment::read_png(src).map_err(|e| r.fail(Stage::Augment, e))?;
                for k in 0..n {
                    let row_id = if n == 1 { id.clone() } else { format!("{id}~aug{k}") };
                    let draw = (i * copies + k) as u64;
                    let out = augment::augment(&img, &aug.spec, draw).map_err(|e| r.fail(Stage::Augment, e))?;
                    let path = dir.join(format!("{:06}_{k}.png", i));
                    augment::write_png(&out, &path).map_err(|e| r.fail(Stage::Augment, e))?;
                    image_index.insert(row_id.clone(), path);
                    rows.push(Row { row_id, base: i, subset });
                }
            }
            r.manifest.augmentation = Some(AugmentationRecord {
                spec: aug.spec,
                apply_to: aug.apply_to,
                copies_per_image: copies,
                transform_order: TRANSFORM_ORDER.iter().map(|s| s.to_string()).collect(),
                fill_value: 0.0,
                warning: (aug.apply_to == AugmentTarget::TrainAndTest).then(|| AUGMENT_TEST_WARNING.to_string()),
            });
            if aug.apply_to == AugmentTarget::TrainAndTest {
                log::warn!("{AUGMENT_TEST_WARNING}");
                r.manifest.warnings.push(AUGMENT_TEST_WARNING.to_string());
            }
        }
        (features_cfg, _) => {
            if let ProviderConfig::Extractor { images, .. } = features_cfg {
                image_index = features::read_image_index(images).map_err(|e| r.fail(Stage::Load, e))?;
            }
            for (i, (id, &subset)) in index.sample_ids.iter().zip(&assignment).enumerate() {
                rows.push(Row { row_id: id.clone(), base: i, subset });
            }
        }
    }
    r.done("augment");

    // features
    let row_ids: Vec<String> = rows.iter().map(|row| row.row_id.clone()).collect();
    let image = match (&cfg.features, &store) {
        (ProviderConfig::Extractor { command, .. }, _) => {
            let mut command = command.clone();
            if !command.iter().any(|a| a == "--mode") {
                command.extend(["--mode".to_string(), cfg.transfer_mode.as_str().to_string()]);
            }
            ExtractorProvider::new(command, image_index).get(&row_ids)
        }
        (_, Some(store)) => store.get(&row_ids),
        _ => unreachable!("stores are loaded for file and directory sources"),
    }
    .map_err(|e| r.fail(Stage::Load, e))?;
    r.done("features");

    // encode
    let specs = decl.column_specs().map_err(|e| r.fail(Stage::Encode, e))?;
    let schema = MetadataSchema::build(&records, &specs).map_err(|e| r.fail(Stage::Encode, e))?;
    let encoded = encode_table(&records, &schema).map_err(|e| r.fail(Stage::Encode, e))?;
    let record_ids: Vec<String> = records.iter().map(|rec| rec.sample_id.clone()).collect();
    let meta_all = FeatureMatrix::from_f64(&encoded, record_ids, None, "metadata").map_err(|e| r.fail(Stage::Encode, e))?;
    let base_ids: Vec<String> = rows.iter().map(|row| index.sample_ids[row.base].clone()).collect();
    let mut meta = meta_all.select_ids(&base_ids).map_err(|e| r.fail(Stage::Encode, e))?;
    meta.sample_ids = row_ids.clone();
    r.manifest.metadata_features = schema.feature_names();
    r.done("encode");

    // fuse
    let fused = fuse(&image, &meta).map_err(|e| r.fail(Stage::Fuse, e))?;
    let split_point = fused.split_point();
    r.done("fuse");

    // train
    let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let pick = |s: Subset| -> Vec<usize> { rows.iter().enumerate().filter(|(_, row)| row.subset == s).map(|(i, _)| i).collect() };
    let (train_rows, test_rows) = (pick(Subset::Train), pick(Subset::Test));
    let val_rows = pick(Subset::Val).len();
    r.manifest.samples = Some(SampleCounts {
        labelled: raw.sample_ids.len(),
        removed_by_label_filter: removed,
        classes: classes.clone(),
        train_rows: train_rows.len(),
        val_rows,
        test_rows: test_rows.len(),
        val_used: false,
    });
    if test_rows.is_empty() {
        return Err(r.fail(Stage::Split, "the test subset is empty"));
    }
    let labels_of = |sel: &[usize]| -> Vec<usize> { sel.iter().map(|&i| class_of[index.labels[rows[i].base].as_str()]).collect() };
    let (y_train, y_test) = (labels_of(&train_rows), labels_of(&test_rows));
    let x_image: Array2<f64> = image.to_scalar();
    let x_fused: Array2<f64> = fused.matrix().to_scalar();

    let ids_of = |sel: &[usize]| -> Vec<String> { sel.iter().map(|&i| rows[i].row_id.clone()).collect() };
    let mut heads = Vec::new();
    for (name, x) in [("image", &x_image), ("fused", &x_fused)] {
        let start = Instant::now();
        let model = train(x.select(Axis(0), &train_rows).view(), &y_train, classes.clone(), &cfg.train)
            .map_err(|e| r.fail(Stage::Train, format!("{name} head: {e}")))?;
        let secs = start.elapsed().as_secs_f64();
        if let Some(meta) = model.training_meta.as_ref().filter(|m| m.stop_reason == StopReason::MaxEpochs) {
            let largest = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            r.manifest.warnings.push(format!(
                "{name} head stopped after {} epochs with gradient norm {:.3e} (loss {:.4}); features are unscaled \
                 (largest |x| = {largest:.4e}), a smaller learning_rate may be needed",
                meta.epochs_run, meta.final_gradient_norm, meta.final_loss
            ));
        }
        r.manifest.head_training_seconds += secs;
        r.manifest.timings.push(StageTiming {
            stage: format!("train_{name}"),
            seconds: secs,
        });
        r.manifest.heads.insert(
            name.to_string(),
            HeadRecord {
                input_width: x.ncols(),
                train_config: cfg.train.clone(),
                train_rows: ids_of(&train_rows),
                test_rows: ids_of(&test_rows),
                training: model.training_meta.clone(),
            },
        );
        heads.push(model);
    }
    let fused_model = heads.pop().expect("two heads");
    let image_model = heads.pop().expect("two heads");
    let (hi, hf) = (&r.manifest.heads["image"], &r.manifest.heads["fused"]);
    r.manifest.paired_run = Some(PairedRun {
        same_split: hi.train_rows == hf.train_rows && hi.test_rows == hf.test_rows,
        same_train_config: hi.train_config == hf.train_config,
        image_width: hi.input_width,
        fused_width: hf.input_width,
        split_point,
    });
    r.stage_start = Instant::now();

    // evaluate
    let evaluate = |model: &SoftmaxModel<f64>, x: &Array2<f64>| -> Result<MetricReport, BoxError> {
        let xt = x.select(Axis(0), &test_rows);
        let proba = model.predict_proba_batch(xt.view())?;
        let pred = model.predict(xt.view())?;
        Ok(MetricReport::evaluate(&y_test, &pred, proba.view(), &classes)?)
    };
    let image_metrics = evaluate(&image_model, &x_image).map_err(|e| r.fail(Stage::Evaluate, e))?;
    let fused_metrics = evaluate(&fused_model, &x_fused).map_err(|e| r.fail(Stage::Evaluate, e))?;
    r.done("evaluate");

    // report
    let improvement = improvement(&image_metrics, &fused_metrics).map_err(|e| r.fail(Stage::Report, e))?;
    let mut image_weights = interpret::image_only_weights(&image_model);
    let mut fused_weights = interpret::split_weights(&fused_model, split_point, &r.manifest.metadata_features)
        .map_err(|e| r.fail(Stage::Report, e))?;
    interpret::share_bin_edges(&mut [&mut image_weights, &mut fused_weights]);
    let summary = InterpretabilitySummary {
        magnitude_ratio: interpret::magnitude_ratio(&fused_weights).map_err(|e| r.fail(Stage::Report, e))?,
        image_weight_shift: interpret::image_weight_shift(&image_weights, &fused_weights)
            .map_err(|e| r.fail(Stage::Report, e))?,
        note: interpret::WEIGHT_SIGN_NOTE.to_string(),
    };
    write_reports(
        r,
        &index,
        &schema,
        [&image_model, &fused_model],
        [&image_metrics, &fused_metrics],
        &improvement,
        [&image_weights, &fused_weights],
        &summary,
    )
    .map_err(|e| r.fail(Stage::Report, e))?;
    r.done("report");

    let manifest = r.manifest.clone();
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| r.fail(Stage::Output, e))?;
    text.push('\n');
    fs::write(r.out.join("manifest.json"), text).map_err(|e| r.fail(Stage::Output, e))?;

    Ok(RunOutputs {
        image_metrics,
        fused_metrics,
        improvement,
        image_weights,
        fused_weights,
        image_model,
        fused_model,
        manifest,
    })
}

#[allow(clippy::too_many_arguments)]
fn write_reports(
    r: &mut Runner,
    index: &DatasetIndex,
    schema: &MetadataSchema,
    models: [&SoftmaxModel<f64>; 2],
    metrics: [&MetricReport; 2],
    improvement: &ImprovementReport,
    weights: [&WeightReport; 2],
    summary: &InterpretabilitySummary,
) -> Result<(), BoxError> {
    for (name, ((model, m), w)) in ["image", "fused"].iter().zip(models.iter().zip(metrics).zip(weights)) {
        r.write_json(&format!("model_{name}.json"), &model.to_file())?;
        r.write_json(&format!("metrics_{name}.json"), m)?;
        r.write(&format!("metrics_{name}.csv"), m.to_csv().as_bytes())?;
        r.write_json(&format!("weights_{name}.json"), w)?;
        r.write(&format!("weights_{name}.csv"), w.weights_csv().as_bytes())?;
        r.write(&format!("weight_histogram_{name}.csv"), w.histogram_csv().as_bytes())?;
    }
    r.write_json("improvement.json", improvement)?;
    r.write("improvement.csv", improvement.to_csv().as_bytes())?;
    r.write("auroc_boxplot.csv", improvement.boxplot_csv("image vs image+metadata").as_bytes())?;
    r.write_json("interpretability.json", summary)?;
    r.write_json("metadata_schema.json", schema)?;
    let split_path = r.out.join("split.csv");
    index.write_manifest(&split_path)?;
    let digest = sha256_file(&split_path)?;
    r.manifest.outputs.insert("split.csv".into(), digest);
    Ok(())
}

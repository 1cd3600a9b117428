use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use medfuse::augment::{self, AugmentSpec};
use medfuse::features::{fuse, read_fmx, write_fmx, FeatureMatrix};
use medfuse::interpret::{image_only_weights, split_weights};
use medfuse::metadata::{encode_table, read_table, MetadataSchema, SchemaDeclaration};
use medfuse::metrics::{improvement, MetricReport};
use medfuse::scalogram::{montage, read_signal_csv, Layout, ScalogramValue, TileSize, WaveletSpec};
use medfuse::softmax::{train, SoftmaxModel, TrainConfig};
use medfuse::splits::{apply_label_map, filter_unique, stratified_split, DatasetIndex, LabelMap, RawIndex, Subset};
use medfuse::{run_experiment, ExperimentConfig, Stage};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "medfuse", version, about = "Image/metadata feature fusion experiments")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Encode a metadata table into a feature matrix.
    Encode(EncodeArgs),
    /// Render a 12-lead ECG CSV as a scalogram montage PNG.
    Scalogram(ScalogramArgs),
    /// Apply one seeded augmentation draw to a PNG.
    Augment(AugmentArgs),
    /// Concatenate image features with metadata features.
    Fuse(FuseArgs),
    /// Stratified train/val/test split of a label file.
    Split(SplitArgs),
    /// Train a softmax head on the train subset.
    Train(TrainArgs),
    /// Evaluate a model on one subset.
    Evaluate(EvaluateArgs),
    /// Compare two metric reports.
    Report(ReportArgs),
    /// Export per-class weights and histograms for a model.
    Weights(WeightsArgs),
    /// Run a full paired experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct EncodeArgs {
    /// CSV or JSONL table.
    #[arg(long)]
    metadata: PathBuf,
    /// Column declaration JSON.
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Where to store the built schema with its category indices.
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ValueArg {
    Magnitude,
    Power,
}

#[derive(Args)]
struct ScalogramArgs {
    /// CSV with one column per lead and a header row of lead names.
    #[arg(long)]
    signal: PathBuf,
    /// Sampling rate in Hz; read from `<signal>.json` when omitted.
    #[arg(long)]
    fs: Option<f64>,
    #[arg(long, default_value = "3x4")]
    layout: Layout,
    /// Tile size as HEIGHTxWIDTH.
    #[arg(long, default_value = "75x56")]
    tile: String,
    #[arg(long, value_enum, default_value = "magnitude")]
    value: ValueArg,
    /// Keep the CSV column order instead of the clinical lead order.
    #[arg(long)]
    keep_order: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw index; each index gets independent parameters.
    #[arg(long, default_value_t = 0)]
    draw: u64,
    #[arg(long, default_value_t = 30)]
    max_shift: u32,
    #[arg(long, default_value_t = 90.0)]
    max_rotate: f64,
    #[arg(long)]
    no_reflect_x: bool,
    #[arg(long)]
    no_reflect_y: bool,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// `sample_id,label` CSV; multiple labels are separated by `;`.
    #[arg(long)]
    labels: PathBuf,
    /// JSON map from raw label to class (or null to ignore it).
    #[arg(long)]
    label_map: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.7, 0.15, 0.15])]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output `sample_id,label,subset` CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    /// Split CSV written by `medfuse split`.
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SubsetArg {
    Train,
    Val,
    Test,
}

impl From<SubsetArg> for Subset {
    fn from(s: SubsetArg) -> Self {
        match s {
            SubsetArg::Train => Subset::Train,
            SubsetArg::Val => Subset::Val,
            SubsetArg::Test => Subset::Test,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    subset: SubsetArg,
    /// Metrics JSON; a CSV with the same stem is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSON of the baseline (image-only) head.
    #[arg(long)]
    base: PathBuf,
    /// Metrics JSON of the fused head.
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    model: PathBuf,
    /// Number of leading image features; omit for an image-only model.
    #[arg(long)]
    split_point: Option<usize>,
    /// Built schema (from `encode --schema-out`) naming the metadata columns.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, overrides_with = "no_augment")]
    augment: bool,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Error tagged with the stage whose exit code it maps to.
struct Failure {
    stage: Stage,
    error: anyhow::Error,
}

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> StageExt<T> for Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T, Failure> {
        self.map_err(|e| Failure { stage, error: e.into() })
    }
}

type CmdResult = Result<(), Failure>;

fn write_json<S: Serialize>(path: &Path, value: &S) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<S: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<S> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn parse_tile(s: &str) -> anyhow::Result<TileSize> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("tile `{s}` is not HEIGHTxWIDTH"))?;
    Ok(TileSize {
        height: h.trim().parse()?,
        width: w.trim().parse()?,
    })
}

fn encode(a: EncodeArgs) -> CmdResult {
    let decl = SchemaDeclaration::load(&a.schema).stage(Stage::Load)?;
    let records = read_table(&a.metadata, &decl).stage(Stage::Load)?;
    let specs = decl.column_specs().stage(Stage::Encode)?;
    let schema = MetadataSchema::build(&records, &specs).stage(Stage::Encode)?;
    let encoded = encode_table(&records, &schema).stage(Stage::Encode)?;
    let ids = records.iter().map(|r| r.sample_id.clone()).collect();
    let m = FeatureMatrix::from_f64(&encoded, ids, None, "metadata").stage(Stage::Encode)?;
    write_fmx(&m, &a.out).stage(Stage::Output)?;
    if let Some(p) = &a.schema_out {
        schema.save(p).stage(Stage::Output)?;
    }
    println!("encoded {} records into {} columns", m.nrows(), m.ncols());
    Ok(())
}

fn scalogram(a: ScalogramArgs) -> CmdResult {
    let tile = parse_tile(&a.tile).stage(Stage::Config)?;
    let value = match a.value {
        ValueArg::Magnitude => ScalogramValue::Magnitude,
        ValueArg::Power => ScalogramValue::Power,
    };
    let signal = read_signal_csv::<f64>(&a.signal, a.fs).stage(Stage::Load)?;
    let signal = if a.keep_order { signal } else { signal.in_clinical_order() };
    let m = montage(&signal, &WaveletSpec::default(), a.layout, tile, value).stage(Stage::Encode)?;
    m.write_png(&a.out).stage(Stage::Output)?;
    println!("wrote {} ({} leads)", a.out.display(), signal.leads.len());
    Ok(())
}

fn augment_cmd(a: AugmentArgs) -> CmdResult {
    let spec = AugmentSpec {
        max_shift_px: a.max_shift,
        allow_reflect_x: !a.no_reflect_x,
        allow_reflect_y: !a.no_reflect_y,
        max_rotate_deg: a.max_rotate,
        seed: a.seed,
    };
    spec.validate().stage(Stage::Config)?;
    let img = augment::read_png(&a.image).stage(Stage::Load)?;
    let out = augment::augment(&img, &spec, a.draw).stage(Stage::Augment)?;
    augment::write_png(&out, &a.out).stage(Stage::Output)?;
    let p = augment::draw_params(&spec, a.draw);
    println!(
        "shift ({}, {}), reflect x {} y {}, rotate {:.2} deg",
        p.dx, p.dy, p.reflect_x, p.reflect_y, p.angle_deg
    );
    Ok(())
}

fn fuse_cmd(a: FuseArgs) -> CmdResult {
    let image = read_fmx(&a.image).stage(Stage::Load)?;
    let meta = read_fmx(&a.metadata).stage(Stage::Load)?;
    let fused = fuse(&image, &meta).stage(Stage::Fuse)?;
    println!(
        "fused {} rows: {} image + {} metadata columns",
        fused.matrix().nrows(),
        fused.split_point(),
        fused.matrix().ncols() - fused.split_point()
    );
    write_fmx(fused.matrix(), &a.out).stage(Stage::Output)?;
    Ok(())
}

fn split(a: SplitArgs) -> CmdResult {
    let fractions: [f64; 3] = a
        .fractions
        .as_slice()
        .try_into()
        .map_err(|_| anyhow!("expected three fractions"))
        .stage(Stage::Config)?;
    let raw = RawIndex::read_csv(&a.labels).stage(Stage::Load)?;
    let map = match &a.label_map {
        Some(p) => LabelMap::load(p).stage(Stage::Load)?,
        None => raw.identity_map(),
    };
    let grouped = apply_label_map(&raw, &map).stage(Stage::Split)?;
    let (index, removed) = filter_unique(&grouped).stage(Stage::Split)?;
    let (index, summary) = stratified_split(&index, fractions, a.seed).stage(Stage::Split)?;
    index.write_manifest(&a.out).stage(Stage::Output)?;
    if removed > 0 {
        println!("dropped {removed} samples without exactly one class");
    }
    for (s, n) in &summary.totals {
        println!("{}: {n}", s.as_str());
    }
    for c in &summary.rare_classes {
        println!("warning: class `{c}` is too small to appear in every subset");
    }
    Ok(())
}

/// Features and class indices for the rows of `subset`, ordered as in the split file.
fn subset_rows(
    features: &FeatureMatrix,
    index: &DatasetIndex,
    subset: Subset,
    classes: &[String],
) -> anyhow::Result<(FeatureMatrix, Vec<usize>)> {
    if index.split_assignment.is_none() {
        bail!("split file has no subset column");
    }
    let class_of: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let rows = index.indices(subset);
    let ids: Vec<String> = rows.iter().map(|&i| index.sample_ids[i].clone()).collect();
    let y = rows
        .iter()
        .map(|&i| {
            let label = &index.labels[i];
            class_of.get(label.as_str()).copied().ok_or_else(|| anyhow!("label `{label}` is not a model class"))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok((features.select_ids(&ids)?, y))
}

fn train_cmd(a: TrainArgs) -> CmdResult {
    let features = read_fmx(&a.features).stage(Stage::Load)?;
    let index = DatasetIndex::read_csv(&a.split).stage(Stage::Load)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        max_epochs: a.max_epochs.unwrap_or(defaults.max_epochs),
        gradient_tol: a.tol.unwrap_or(defaults.gradient_tol),
        learning_rate: a.learning_rate.unwrap_or(defaults.learning_rate),
        seed: defaults.seed,
    };
    cfg.validate().stage(Stage::Config)?;
    let classes = index.classes();
    let (x, y) = subset_rows(&features, &index, Subset::Train, &classes).stage(Stage::Split)?;
    let model = train(x.to_scalar::<f64>().view(), &y, classes, &cfg).stage(Stage::Train)?;
    model.save(&a.out).stage(Stage::Output)?;
    if let Some(meta) = &model.training_meta {
        println!(
            "{} epochs, stop: {:?}, final loss {:.6}",
            meta.epochs_run, meta.stop_reason, meta.final_loss
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let model = SoftmaxModel::<f64>::load(&a.model).stage(Stage::Load)?;
    let features = read_fmx(&a.features).stage(Stage::Load)?;
    let index = DatasetIndex::read_csv(&a.split).stage(Stage::Load)?;
    let (x, y) = subset_rows(&features, &index, a.subset.into(), &model.class_names).stage(Stage::Evaluate)?;
    let x = x.to_scalar::<f64>();
    let proba = model.predict_proba_batch(x.view()).stage(Stage::Evaluate)?;
    let pred = model.predict(x.view()).stage(Stage::Evaluate)?;
    let report = MetricReport::evaluate(&y, &pred, proba.view(), &model.class_names).stage(Stage::Evaluate)?;
    write_json(&a.out, &report).stage(Stage::Output)?;
    fs::write(a.out.with_extension("csv"), report.to_csv()).stage(Stage::Output)?;
    println!("n = {}, overall accuracy {:.4}", report.n, report.overall_accuracy);
    Ok(())
}

fn report(a: ReportArgs) -> CmdResult {
    let base: MetricReport = read_json(&a.base).stage(Stage::Load)?;
    let fused: MetricReport = read_json(&a.fused).stage(Stage::Load)?;
    let imp = improvement(&base, &fused).stage(Stage::Report)?;
    write_json(&a.out, &imp).stage(Stage::Output)?;
    fs::write(a.out.with_extension("csv"), imp.to_csv()).stage(Stage::Output)?;
    for d in &imp.deltas {
        println!("{:<13} {:+.2} pp", d.metric, d.macro_delta);
    }
    println!("{:<13} {:+.2} pp", "overall", imp.overall_accuracy_delta);
    Ok(())
}

fn weights(a: WeightsArgs) -> CmdResult {
    let model = SoftmaxModel::<f64>::load(&a.model).stage(Stage::Load)?;
    let report = match a.split_point {
        None => image_only_weights(&model),
        Some(sp) => {
            let width = model.n_features().saturating_sub(sp);
            let names = match &a.schema {
                Some(p) => MetadataSchema::load(p).stage(Stage::Load)?.feature_names(),
                None => (0..width).map(|j| format!("meta{j}")).collect(),
            };
            split_weights(&model, sp, &names).stage(Stage::Report)?
        }
    };
    write_json(&a.out, &report).stage(Stage::Output)?;
    fs::write(a.out.with_extension("csv"), report.weights_csv()).stage(Stage::Output)?;
    let hist = a.out.with_file_name(format!(
        "{}_histogram.csv",
        a.out.file_stem().unwrap_or_default().to_string_lossy()
    ));
    fs::write(hist, report.histogram_csv()).stage(Stage::Output)?;
    Ok(())
}

fn run(a: RunArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(|e| anyhow!(e)).stage(Stage::Config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    if a.no_augment {
        if let Some(aug) = cfg.augmentation.as_mut() {
            aug.enabled = false;
        }
    } else if a.augment {
        cfg.augmentation.get_or_insert_with(Default::default).enabled = true;
    }
    fs::create_dir_all(&cfg.output_dir).stage(Stage::Output)?;
    let out = run_experiment(&cfg).map_err(|e| Failure {
        stage: e.stage,
        error: anyhow!(e),
    })?;
    for (name, m) in [("image", &out.image_metrics), ("fused", &out.fused_metrics)] {
        println!("{name:<6} overall accuracy {:.4}", m.overall_accuracy);
    }
    println!("delta  {:+.2} pp", out.improvement.overall_accuracy_delta);
    for w in &out.manifest.warnings {
        println!("warning: {w}");
    }
    println!("reports in {}", cfg.output_dir.display());
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("MEDFUSE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("MEDFUSE_THREADS must be a number, got `{v}`"))
            .stage(Stage::Config)?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().stage(Stage::Config)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = configure_threads().and_then(|()| match cli.command {
        Cmd::Encode(a) => encode(a),
        Cmd::Scalogram(a) => scalogram(a),
        Cmd::Augment(a) => augment_cmd(a),
        Cmd::Fuse(a) => fuse_cmd(a),
        Cmd::Split(a) => split(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Evaluate(a) => evaluate(a),
        Cmd::Report(a) => report(a),
        Cmd::Weights(a) => weights(a),
        Cmd::Run(a) => run(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error [{}]: {:#}", f.stage, f.error);
            ExitCode::from(f.stage.exit_code() as u8)
        }
    }
}

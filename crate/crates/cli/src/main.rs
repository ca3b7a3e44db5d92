//! `stoneview`: synthetic data, patch preparation, training, evaluation and reporting.

mod run_dir;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use stoneview::backbone::{BackboneSpec, HeadSpec};
use stoneview::dataset::{
    balance, extract_patches, load_manifest, read_patch_cache, split, synth_write, write_patch_cache, PatchRecord,
    SynthConfig, DEFAULT_MAX_OVERLAP, DEFAULT_PATCH_BUDGET, DEFAULT_PATCH_SIZE,
};
use stoneview::evaluation::{
    aggregate_runs, cluster_stats, extract_embeddings, project_3d, read_json, render_confusion_heatmap,
    render_scatter_3d, render_table, write_atomic, write_embeddings_csv, write_json, EmbeddingInput,
};
use stoneview::fusion::FusionStrategy;
use stoneview::training::{
    evaluate_multiview, evaluate_single_view, load_checkpoint, test_pairs, train_multiview, train_single_view,
    LoadedModel, RunOptions, RunRecord, TrainConfig, TrainData, TrainMode,
};
use stoneview::Error;

use run_dir::{finish, RunDir};

#[derive(Parser)]
#[command(name = "stoneview", version, about = "Multi-view stone classification experiments")]
struct Cli {
    /// Omit timestamps so identical inputs give byte-identical artifacts.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired-view dataset and its manifest.
    Synth(SynthArgs),
    /// Tile, balance and split a manifest into train/test patch caches.
    Prepare(PrepareArgs),
    /// Train single-view or multi-view models for every configured run.
    Train(TrainArgs),
    /// Test metrics and confusion heatmap of a checkpoint.
    Eval(EvalArgs),
    /// Feature embeddings, 3-D projection and cluster statistics of a checkpoint.
    Embed(EmbedArgs),
    /// Mean ± std table over the runs of one or more training directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Flat JSON synthetic-data config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH_SIZE)]
    patch_size: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_OVERLAP)]
    max_overlap: usize,
    /// Patches per class and view after balancing.
    #[arg(long, default_value_t = DEFAULT_PATCH_BUDGET)]
    budget: usize,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Surface,
    Section,
    Mixed,
    Mv,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Surface => TrainMode::SingleViewSurface,
            ModeArg::Section => TrainMode::SingleViewSection,
            ModeArg::Mixed => TrainMode::SingleViewMixed,
            ModeArg::Mv => TrainMode::MultiView,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Max,
    Concat,
}

impl From<FusionArg> for FusionStrategy {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Max => FusionStrategy::MaxPool,
            FusionArg::Concat => FusionStrategy::Concatenation,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Resnet50,
    Tiny,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared data directory with `train/` and `test/` patch caches.
    #[arg(long)]
    data: PathBuf,
    /// Flat JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum, default_value = "concat")]
    fusion: FusionArg,
    #[arg(long, value_enum, default_value = "on")]
    attention: Switch,
    #[arg(long, value_enum, default_value = "tiny")]
    arch: ArchArg,
    /// Mixed-view checkpoint whose extractor the multi-view model reuses.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    tag: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Seed of the test pairing for multi-view checkpoints.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, default_value = "eval")]
    tag: String,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to embed.
    #[arg(long, default_value = "test")]
    set: String,
    /// Seed of the projection (and of the test pairing for multi-view checkpoints).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, default_value = "embed")]
    tag: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Training run directories; one table row each.
    #[arg(required = true)]
    run_dirs: Vec<PathBuf>,
    /// Output directory for `report.md` and `report.json`; defaults to the first run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// What a successful command produced.
#[derive(Serialize)]
struct Outcome {
    artifacts: Vec<PathBuf>,
    summary: String,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidConfig(_) | Error::CheckpointMismatch(_) | Error::CheckpointVersion { .. }) => 2,
        Some(Error::Divergence { .. }) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let det = cli.deterministic;
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a, det),
        Command::Prepare(a) => cmd_prepare(a, det),
        Command::Train(a) => cmd_train(a, det),
        Command::Eval(a) => cmd_eval(a, det),
        Command::Embed(a) => cmd_embed(a, det),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::InvalidConfig(msg.into()).into()
}

fn read_config<C: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
}

fn cmd_synth(args: SynthArgs, det: bool) -> Result<Outcome> {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (manifest, written) = synth_write(&cfg, &args.out)?;
    let mut artifacts: Vec<PathBuf> =
        written.iter().map(|p| p.strip_prefix(&args.out).unwrap_or(p).to_path_buf()).collect();
    write_json(&args.out.join("synth_config.json"), &cfg)?;
    artifacts.push("synth_config.json".into());
    let summary = format!("wrote {} images and manifest.jsonl to {}", manifest.records.len(), args.out.display());
    run_dir::write_index(&args.out, "synth", det, &artifacts, &summary)?;
    Ok(Outcome { artifacts, summary })
}

fn cmd_prepare(args: PrepareArgs, det: bool) -> Result<Outcome> {
    if !(args.train_fraction > 0.0 && args.train_fraction < 1.0) {
        return Err(config_error(format!("train fraction {} outside (0, 1)", args.train_fraction)));
    }
    let manifest = load_manifest(&args.manifest)?;
    let root = args.manifest.parent().unwrap_or(Path::new("."));
    let mut patches = Vec::new();
    for record in &manifest.records {
        let path = root.join(&record.image_path);
        let img = image::open(&path).map_err(|e| Error::Image { path: path.clone(), source: e })?.to_rgb8();
        patches.extend(extract_patches(&img, record, args.patch_size, args.max_overlap)?);
    }
    let extracted = patches.len();
    let balanced = balance(patches, args.budget, args.seed)?;
    let (train, test) = split(balanced, args.train_fraction, args.seed)?;
    let dir = RunDir::create(&args.out)?;
    write_patch_cache(&dir.path().join("train"), &train)?;
    write_patch_cache(&dir.path().join("test"), &test)?;
    let artifacts = vec![PathBuf::from("train/index.jsonl"), PathBuf::from("test/index.jsonl")];
    let summary = format!(
        "{} images → {extracted} patches → {} train / {} test in {}",
        manifest.records.len(),
        train.len(),
        test.len(),
        args.out.display()
    );
    finish(dir, "prepare", det, artifacts, summary)
}

fn load_split(data: &Path, set: &str) -> Result<Vec<PatchRecord>> {
    let dir = data.join(set);
    read_patch_cache(&dir).with_context(|| format!("loading {set} patches from {}", data.display()))
}

fn timestamped(runs_dir: &Path, tag: &str, det: bool) -> PathBuf {
    if det {
        return runs_dir.join(tag);
    }
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    runs_dir.join(format!("{secs}-{tag}"))
}

fn cmd_train(args: TrainArgs, det: bool) -> Result<Outcome> {
    let mut config: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = args.mode {
        config.mode = mode.into();
    }
    config.validate()?;
    let head = HeadSpec::default();
    let options = |out: &Path| RunOptions { out_dir: Some(out.to_path_buf()), jobs: args.jobs.max(1) };

    if config.mode == TrainMode::MultiView {
        // Guards come first so a bad invocation leaves nothing behind.
        let Some(base_path) = &args.base else {
            return Err(config_error("multi-view training needs --base <mixed-view checkpoint>"));
        };
        if !base_path.is_file() {
            return Err(config_error(format!("base checkpoint {} does not exist", base_path.display())));
        }
        let (_, loaded) = load_checkpoint::<f32>(base_path, None)?;
        let base = loaded.into_single()?;
        if base.trained_on != Some(TrainMode::SingleViewMixed) {
            return Err(config_error("the base checkpoint was not trained in mixed mode"));
        }
        let data = TrainData { train: load_split(&args.data, "train")?, test: load_split(&args.data, "test")? };
        let strategy: FusionStrategy = args.fusion.into();
        let tag = args.tag.clone().unwrap_or_else(|| format!("mv-{}", strategy.as_str()));
        let dir = RunDir::create(&timestamped(&args.runs_dir, &tag, det))?;
        write_json(&dir.path().join("config.json"), &config)?;
        let (_, records) = train_multiview(&config, &base, strategy, &head, &data, &options(dir.path()))?;
        return finish_training(dir, &tag, det, &config, &records);
    }

    let attention = args.attention == Switch::On;
    let backbone = match args.arch {
        ArchArg::Tiny => BackboneSpec::tiny(attention),
        ArchArg::Resnet50 => BackboneSpec::resnet50(attention),
    };
    let data = TrainData { train: load_split(&args.data, "train")?, test: load_split(&args.data, "test")? };
    if let Some(p) = data.train.first() {
        if p.size() != backbone.input_size {
            return Err(config_error(format!(
                "{} expects {}-pixel patches, data has {}",
                backbone.architecture.as_str(),
                backbone.input_size,
                p.size()
            )));
        }
    }
    let tag = args.tag.clone().unwrap_or_else(|| {
        format!("{}-{}-att-{}", backbone.architecture.as_str(), config.mode.as_str(), if attention { "on" } else { "off" })
    });
    let dir = RunDir::create(&timestamped(&args.runs_dir, &tag, det))?;
    write_json(&dir.path().join("config.json"), &config)?;
    write_json(&dir.path().join("backbone.json"), &backbone)?;
    let (_, records) = train_single_view::<f32>(&config, &backbone, &head, &data, &options(dir.path()))?;
    finish_training(dir, &tag, det, &config, &records)
}

fn finish_training(dir: RunDir, tag: &str, det: bool, config: &TrainConfig, records: &[RunRecord]) -> Result<Outcome> {
    let mut artifacts = vec![PathBuf::from("config.json")];
    if dir.path().join("backbone.json").exists() {
        artifacts.push("backbone.json".into());
    }
    for r in records {
        artifacts.push(format!("run-{}/record.json", r.run_index).into());
        artifacts.push(format!("run-{}/epochs.jsonl", r.run_index).into());
        artifacts.extend(r.checkpoint.as_ref().map(PathBuf::from));
    }
    let accs: Vec<String> = records.iter().map(|r| format!("{:.3}", r.test.accuracy)).collect();
    let summary = format!("{tag}: {} runs of {} (test accuracy {})", records.len(), config.mode, accs.join(", "));
    finish(dir, tag, det, artifacts, summary)
}

fn cmd_eval(args: EvalArgs, det: bool) -> Result<Outcome> {
    let (header, mut model) = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let test = load_split(&args.data, "test")?;
    let report = match &mut model {
        LoadedModel::Single(m) => {
            let views = header.trained_on.unwrap_or(TrainMode::SingleViewMixed).views();
            let subset: Vec<&PatchRecord> = test.iter().filter(|p| views.contains(&p.view())).collect();
            evaluate_single_view(m, &subset)?
        }
        LoadedModel::Multi(m) => {
            let pairs = test_pairs(&test, args.seed)?;
            evaluate_multiview(m, &test, &pairs)?
        }
    };
    let dir = RunDir::create(&timestamped(&args.runs_dir, &args.tag, det))?;
    write_json(&dir.path().join("metrics.json"), &report)?;
    render_confusion_heatmap(&report, 48, &dir.path().join("confusion.png"))?;
    let summary = format!(
        "accuracy {:.3}, macro precision {:.3}, recall {:.3}, F1 {:.3} on {} test items",
        report.accuracy,
        report.macro_precision,
        report.macro_recall,
        report.macro_f1,
        report.total()
    );
    finish(dir, &args.tag, det, vec!["metrics.json".into(), "confusion.png".into()], summary)
}

fn cmd_embed(args: EmbedArgs, det: bool) -> Result<Outcome> {
    if args.set != "train" && args.set != "test" {
        return Err(config_error(format!("--set must be train or test, got {:?}", args.set)));
    }
    let (header, mut model) = load_checkpoint::<f32>(&args.checkpoint, None)?;
    let patches = load_split(&args.data, &args.set)?;
    let tag = header.model_tag();
    let set = match &mut model {
        LoadedModel::Single(_) => {
            let views = header.trained_on.unwrap_or(TrainMode::SingleViewMixed).views();
            let subset: Vec<PatchRecord> = patches.iter().filter(|p| views.contains(&p.view())).cloned().collect();
            extract_embeddings(model.as_mut(), EmbeddingInput::Patches(&subset), &tag)?
        }
        LoadedModel::Multi(_) => {
            let pairs = test_pairs(&patches, args.seed)?;
            extract_embeddings(model.as_mut(), EmbeddingInput::Pairs(&patches, &pairs), &tag)?
        }
    };
    let stats = cluster_stats(&set.features, &set.labels)?;
    let projected = project_3d(&set, args.seed)?;
    let coords = projected.coords3d.as_ref().expect("projected");
    let dir = RunDir::create(&timestamped(&args.runs_dir, &args.tag, det))?;
    write_embeddings_csv(&dir.path().join("embeddings.csv"), &projected)?;
    render_scatter_3d(coords, &projected.labels, 640, &dir.path().join("scatter.png"))?;
    write_json(&dir.path().join("cluster_stats.json"), &stats)?;
    let summary = format!(
        "{} embeddings of width {}: inter/intra ratio {:.3}, silhouette {:.3}",
        set.labels.len(),
        set.features.ncols(),
        stats.ratio,
        stats.silhouette
    );
    let artifacts = vec!["embeddings.csv".into(), "scatter.png".into(), "cluster_stats.json".into()];
    finish(dir, &args.tag, det, artifacts, summary)
}

#[derive(Serialize)]
struct ReportRow {
    model: String,
    #[serde(flatten)]
    aggregate: stoneview::evaluation::AggregateReport,
}

fn run_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    let mut i = 0;
    loop {
        let path = dir.join(format!("run-{i}")).join("record.json");
        if !path.is_file() {
            break;
        }
        records.push(read_json::<RunRecord>(&path)?);
        i += 1;
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no run-<i>/record.json files", dir.display())).into());
    }
    Ok(records)
}

fn row_name(dir: &Path) -> String {
    let index = dir.join("index.json");
    let tag = read_json::<serde_json::Value>(&index)
        .ok()
        .and_then(|v| v.get("tag").and_then(|t| t.as_str()).map(str::to_string));
    tag.unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
}

fn cmd_report(args: ReportArgs) -> Result<Outcome> {
    let mut rows = Vec::with_capacity(args.run_dirs.len());
    for dir in &args.run_dirs {
        let records = run_records(dir)?;
        let reports: Vec<_> = records.into_iter().map(|r| r.test).collect();
        rows.push((row_name(dir), aggregate_runs(&reports)?));
    }
    let out = args.out.clone().unwrap_or_else(|| args.run_dirs[0].clone());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let table = render_table(&rows);
    write_atomic(&out.join("report.md"), table.as_bytes())?;
    let json: Vec<ReportRow> = rows.into_iter().map(|(model, aggregate)| ReportRow { model, aggregate }).collect();
    write_json(&out.join("report.json"), &json)?;
    if json.is_empty() {
        bail!("nothing to report");
    }
    Ok(Outcome { artifacts: vec![out.join("report.md"), out.join("report.json")], summary: table })
}

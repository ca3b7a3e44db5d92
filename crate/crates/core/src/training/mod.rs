//! Single-view and multi-view training loops, checkpoints and gradient checks.

pub mod checkpoint;
mod gradcheck;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{build_model, BackboneSpec, HeadSpec, SingleViewModel};
use crate::dataset::{derive_seed, patches_to_tensor, PatchRecord, View};
use crate::error::{Error, Result};
use crate::evaluation::{compute_metrics, write_json, MetricsReport};
use crate::fusion::{build_multiview, fuse_batch, pair_views, FusionStrategy, MultiViewModel, ViewPair};
use crate::nn::{softmax_cross_entropy, Adam, AdamConfig, Parameters, Pass};
use crate::scalar::Scalar;

pub use checkpoint::{
    load_checkpoint, load_pretrained_into, save_checkpoint, CheckpointHeader, LoadedModel, ModelKind, TensorEntry,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{check_cbam_block, check_extractor, verify_gradients, GradientReport, TensorGradError};

const EVAL_BATCH: usize = 64;
const SALT_SHUFFLE: u64 = 1;
const SALT_DROPOUT: u64 = 2;
const SALT_HEAD: u64 = 3;
const SALT_PAIRS: u64 = 4;
const SALT_TEST_PAIRS: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SingleViewSurface,
    SingleViewSection,
    SingleViewMixed,
    MultiView,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::SingleViewSurface => "single_view_surface",
            TrainMode::SingleViewSection => "single_view_section",
            TrainMode::SingleViewMixed => "single_view_mixed",
            TrainMode::MultiView => "multi_view",
        }
    }

    /// Views whose patches a single-view mode trains on.
    pub fn views(self) -> &'static [View] {
        match self {
            TrainMode::SingleViewSurface => &[View::Surface],
            TrainMode::SingleViewSection => &[View::Section],
            TrainMode::SingleViewMixed | TrainMode::MultiView => &View::ALL,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "surface" | "single_view_surface" => Ok(TrainMode::SingleViewSurface),
            "section" | "single_view_section" => Ok(TrainMode::SingleViewSection),
            "mixed" | "single_view_mixed" => Ok(TrainMode::SingleViewMixed),
            "mv" | "multi_view" => Ok(TrainMode::MultiView),
            other => Err(Error::InvalidConfig(format!("unknown training mode {other:?}"))),
        }
    }
}

/// Training hyperparameters. Adam moment coefficients and epsilon stay at their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub runs: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 2e-4,
            dropout: 0.5,
            runs: 5,
            seed: 0,
            mode: TrainMode::SingleViewMixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2 for batch statistics".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Seed of run `run_index`.
    pub fn run_seed(&self, run_index: usize) -> u64 {
        self.seed.wrapping_add(run_index as u64)
    }

    /// Short SHA-256 digest of the serialized config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(json)[..8])
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, ..AdamConfig::default() }
    }

    fn head_spec(&self, head: &HeadSpec) -> HeadSpec {
        HeadSpec { dropout_probability: self.dropout, ..head.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub epochs: Vec<EpochLog>,
    pub test: MetricsReport,
    /// Path relative to the output directory.
    pub checkpoint: Option<String>,
    /// Frozen extractor digest before and after multi-view training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_checksum: Option<(String, String)>,
}

impl RunRecord {
    pub fn initial_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Train and test patches of a prepared dataset.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<PatchRecord>,
    pub test: Vec<PatchRecord>,
}

/// Where and how runs execute.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Per-run checkpoints, epoch logs and records go to `out_dir/run-<i>/`.
    pub out_dir: Option<PathBuf>,
    /// Runs trained concurrently.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { out_dir: None, jobs: 1 }
    }
}

pub enum ModelMut<'a, T> {
    Single(&'a mut SingleViewModel<T>),
    Multi(&'a mut MultiViewModel<T>),
}

fn argmax_rows<T: Scalar>(logits: &Array2<T>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn labels_of(patches: &[&PatchRecord]) -> Vec<usize> {
    patches.iter().map(|p| p.class().index()).collect()
}

/// Runs `f(run_index)` for every run, at most `jobs` at a time, and returns results in run order.
fn for_each_run<R: Send>(runs: usize, jobs: usize, f: impl Fn(usize) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, runs.max(1));
    if jobs == 1 {
        return (0..runs).map(&f).collect();
    }
    let mut out: Vec<Option<Result<R>>> = (0..runs).map(|_| None).collect();
    for start in (0..runs).step_by(jobs) {
        let end = (start + jobs).min(runs);
        let results: Vec<Result<R>> = std::thread::scope(|s| {
            let f = &f;
            let handles: Vec<_> = (start..end).map(|i| s.spawn(move || f(i))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        });
        for (k, r) in results.into_iter().enumerate() {
            out[start + k] = Some(r);
        }
    }
    out.into_iter().map(|r| r.expect("every run executed")).collect()
}

struct RunFiles {
    dir: PathBuf,
    rel: String,
}

impl RunFiles {
    fn new(out: Option<&Path>, run_index: usize) -> Option<RunFiles> {
        out.map(|o| RunFiles { dir: o.join(format!("run-{run_index}")), rel: format!("run-{run_index}") })
    }

    fn write(&self, record: &RunRecord) -> Result<()> {
        let mut lines = String::new();
        for e in &record.epochs {
            lines.push_str(&serde_json::to_string(e)?);
            lines.push('\n');
        }
        crate::evaluation::write_atomic(&self.dir.join("epochs.jsonl"), lines.as_bytes())?;
        write_json(&self.dir.join("record.json"), record)
    }
}

struct EpochMeter {
    loss: f64,
    correct: usize,
    seen: usize,
}

impl EpochMeter {
    fn new() -> Self {
        EpochMeter { loss: 0.0, correct: 0, seen: 0 }
    }

    fn add<T: Scalar>(&mut self, loss: T, logits: &Array2<T>, labels: &[usize]) {
        self.loss += loss.as_f64() * labels.len() as f64;
        self.correct += argmax_rows(logits).iter().zip(labels).filter(|(p, l)| p == l).count();
        self.seen += labels.len();
    }

    fn finish(&self, epoch: usize) -> EpochLog {
        let n = self.seen.max(1) as f64;
        EpochLog { epoch, loss: self.loss / n, accuracy: self.correct as f64 / n }
    }
}

fn check_finite<T: Scalar>(loss: T, run: usize, seed: u64, epoch: usize) -> Result<()> {
    if loss.as_f64().is_finite() {
        Ok(())
    } else {
        log::error!("run {run} (seed {seed}) diverged in epoch {epoch}");
        Err(Error::Divergence { run, seed, epoch })
    }
}

fn warn_if_not_learning(record: &RunRecord) {
    if let (Some(a), Some(b)) = (record.initial_loss(), record.final_loss()) {
        if record.epochs.len() > 1 && b >= a {
            log::warn!("run {}: final training loss {b:.4} did not fall below initial {a:.4}", record.run_index);
        }
    }
}

fn view_subset(patches: &[PatchRecord], mode: TrainMode) -> Vec<&PatchRecord> {
    patches.iter().filter(|p| mode.views().contains(&p.view())).collect()
}

/// Inference-mode test metrics of a single-view model.
pub fn evaluate_single_view<T: Scalar>(model: &mut SingleViewModel<T>, patches: &[&PatchRecord]) -> Result<MetricsReport> {
    let mut preds = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(EVAL_BATCH) {
        let x = patches_to_tensor::<T>(chunk)?;
        preds.extend(argmax_rows(&model.forward(&x, Pass::EVAL)?));
    }
    compute_metrics(&preds, &labels_of(patches))
}

/// Trains `config.runs` single-view models on the patches of `config.mode`'s views.
///
/// Run `i` uses seed `config.seed + i` for initialization, shuffling and dropout.
/// Returns the model of run 0 and every run's record.
pub fn train_single_view<T: Scalar>(
    config: &TrainConfig,
    backbone: &BackboneSpec,
    head: &HeadSpec,
    data: &TrainData,
    options: &RunOptions,
) -> Result<(SingleViewModel<T>, Vec<RunRecord>)> {
    config.validate()?;
    if config.mode == TrainMode::MultiView {
        return Err(Error::InvalidConfig("multi-view mode needs a base model; use train_multiview".into()));
    }
    let train = view_subset(&data.train, config.mode);
    let test = view_subset(&data.test, config.mode);
    if train.len() < 2 || test.is_empty() {
        return Err(Error::Data(format!(
            "{} mode needs train and test patches, got {} and {}",
            config.mode,
            train.len(),
            test.len()
        )));
    }
    let x = patches_to_tensor::<T>(&train)?;
    let y = labels_of(&train);
    let results = for_each_run(config.runs, options.jobs, |run| {
        train_single_run(config, backbone, head, &x, &y, &test, run, options.out_dir.as_deref())
    })?;
    let mut records = Vec::with_capacity(results.len());
    let mut first = None;
    for (model, record) in results {
        first.get_or_insert(model);
        records.push(record);
    }
    Ok((first.expect("at least one run"), records))
}

#[allow(clippy::too_many_arguments)]
fn train_single_run<T: Scalar>(
    config: &TrainConfig,
    backbone: &BackboneSpec,
    head: &HeadSpec,
    x: &Array4<T>,
    y: &[usize],
    test: &[&PatchRecord],
    run: usize,
    out: Option<&Path>,
) -> Result<(SingleViewModel<T>, RunRecord)> {
    let seed = config.run_seed(run);
    let mut model = build_model::<T>(&backbone.clone().with_seed(seed), &config.head_spec(head))?;
    model.head.reseed_dropout(derive_seed(seed, &[SALT_DROPOUT]));
    let mut opt = Adam::new(config.adam());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SALT_SHUFFLE]));
    let mut order: Vec<usize> = (0..y.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut meter = EpochMeter::new();
        for idx in order.chunks(config.batch_size) {
            // Batch statistics are undefined for a single sample.
            if idx.len() < 2 {
                continue;
            }
            let xb = x.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            model.zero_grad();
            let logits = model.forward(&xb, Pass::TRAIN)?;
            let (loss, d) = softmax_cross_entropy(&logits, &yb);
            check_finite(loss, run, seed, epoch)?;
            model.backward(&d);
            opt.step(&mut model);
            meter.add(loss, &logits, &yb);
        }
        let log = meter.finish(epoch);
        log::debug!("{} run {run} epoch {epoch}: loss {:.4} acc {:.4}", config.mode, log.loss, log.accuracy);
        epochs.push(log);
    }
    model.trained_on = Some(config.mode);
    let test_report = evaluate_single_view(&mut model, test)?;
    let files = RunFiles::new(out, run);
    let record = RunRecord {
        run_index: run,
        seed,
        mode: config.mode,
        epochs,
        test: test_report,
        checkpoint: files.as_ref().map(|f| format!("{}/model.ckpt", f.rel)),
        extractor_checksum: None,
    };
    if let Some(files) = &files {
        save_checkpoint(ModelMut::Single(&mut model), Some(config), &files.dir.join("model.ckpt"))?;
        files.write(&record)?;
    }
    warn_if_not_learning(&record);
    log::info!("{} run {run}: test accuracy {:.4}", config.mode, record.test.accuracy);
    Ok((model, record))
}

/// Frozen-extractor features of every patch, computed with the copy matching its view.
fn cached_features<T: Scalar>(model: &mut MultiViewModel<T>, patches: &[PatchRecord]) -> Result<Array2<T>> {
    let mut out = Array2::<T>::zeros((patches.len(), model.feature_dim()));
    for view in View::ALL {
        let idx: Vec<usize> = (0..patches.len()).filter(|&i| patches[i].view() == view).collect();
        let refs: Vec<&PatchRecord> = idx.iter().map(|&i| &patches[i]).collect();
        let extractor = match view {
            View::Surface => &mut model.surface_extractor,
            View::Section => &mut model.section_extractor,
        };
        let f = extractor.features_of(&refs, EVAL_BATCH)?;
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(i).assign(&f.row(row));
        }
    }
    Ok(out)
}

fn fused_rows<T: Scalar>(features: &Array2<T>, pairs: &[ViewPair], strategy: FusionStrategy) -> Result<Array2<T>> {
    let s: Vec<usize> = pairs.iter().map(|p| p.surface).collect();
    let e: Vec<usize> = pairs.iter().map(|p| p.section).collect();
    fuse_batch(&features.select(Axis(0), &s), &features.select(Axis(0), &e), strategy)
}

/// Test pairs drawn once from a seed shared by all runs.
pub fn test_pairs(patches: &[PatchRecord], config_seed: u64) -> Result<Vec<ViewPair>> {
    pair_views(patches, derive_seed(config_seed, &[SALT_TEST_PAIRS]))
}

/// Trains `config.runs` fresh heads on top of a frozen, duplicated mixed-view extractor.
///
/// Extractor features are computed once; only head weights are updated.
/// Returns the model of run 0 and every run's record.
pub fn train_multiview<T: Scalar>(
    config: &TrainConfig,
    base: &SingleViewModel<T>,
    strategy: FusionStrategy,
    head: &HeadSpec,
    data: &TrainData,
    options: &RunOptions,
) -> Result<(MultiViewModel<T>, Vec<RunRecord>)> {
    config.validate()?;
    let head = config.head_spec(head);
    let mut template = build_multiview(base, strategy, &head, 0)?;
    // Fails early when a class lacks one of the views.
    let probe = pair_views(&data.train, 0)?;
    let test_pairs = test_pairs(&data.test, config.seed)?;
    if probe.len() < 2 || test_pairs.is_empty() {
        return Err(Error::Data("multi-view training needs paired train and test patches".into()));
    }
    let reference = template.extractor_checksum();
    let train_features = cached_features(&mut template, &data.train)?;
    let test_features = cached_features(&mut template, &data.test)?;
    let test_x = fused_rows(&test_features, &test_pairs, strategy)?;
    let test_y: Vec<usize> = test_pairs.iter().map(|p| p.label.index()).collect();

    let results = for_each_run(config.runs, options.jobs, |run| {
        let seed = config.run_seed(run);
        let mut model = build_multiview(base, strategy, &head, derive_seed(seed, &[SALT_HEAD]))?;
        model.head.reseed_dropout(derive_seed(seed, &[SALT_DROPOUT]));
        let before = model.extractor_checksum();
        let mut opt = Adam::new(config.adam());
        let mut epochs = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            let pairs = pair_views(&data.train, derive_seed(seed, &[SALT_PAIRS, epoch as u64]))?;
            let mut meter = EpochMeter::new();
            for chunk in pairs.chunks(config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let xb = fused_rows(&train_features, chunk, strategy)?;
                let yb: Vec<usize> = chunk.iter().map(|p| p.label.index()).collect();
                model.head.zero_grad();
                let logits = model.head.forward(&xb, Pass::TRAIN)?;
                let (loss, d) = softmax_cross_entropy(&logits, &yb);
                check_finite(loss, run, seed, epoch)?;
                model.head.backward(&d);
                opt.step(&mut model.head);
                meter.add(loss, &logits, &yb);
            }
            epochs.push(meter.finish(epoch));
        }
        let after = model.extractor_checksum();
        if before != after || before != reference {
            return Err(Error::Data("frozen extractor parameters changed during multi-view training".into()));
        }
        let mut preds = Vec::with_capacity(test_y.len());
        for rows in (0..test_y.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
            preds.extend(argmax_rows(&model.head.forward(&test_x.select(Axis(0), rows), Pass::EVAL)?));
        }
        let files = RunFiles::new(options.out_dir.as_deref(), run);
        let record = RunRecord {
            run_index: run,
            seed,
            mode: TrainMode::MultiView,
            epochs,
            test: compute_metrics(&preds, &test_y)?,
            checkpoint: files.as_ref().map(|f| format!("{}/model.ckpt", f.rel)),
            extractor_checksum: Some((before, after)),
        };
        if let Some(files) = &files {
            save_checkpoint(ModelMut::Multi(&mut model), Some(config), &files.dir.join("model.ckpt"))?;
            files.write(&record)?;
        }
        warn_if_not_learning(&record);
        log::info!("multi-view {} run {run}: test accuracy {:.4}", strategy.as_str(), record.test.accuracy);
        Ok((model, record))
    })?;
    let mut records = Vec::with_capacity(results.len());
    let mut first = None;
    for (model, record) in results {
        first.get_or_insert(model);
        records.push(record);
    }
    Ok((first.expect("at least one run"), records))
}

/// Inference-mode test metrics of a multi-view model on seeded test pairs.
pub fn evaluate_multiview<T: Scalar>(model: &mut MultiViewModel<T>, patches: &[PatchRecord], pairs: &[ViewPair]) -> Result<MetricsReport> {
    let features = cached_features(model, patches)?;
    let x = fused_rows(&features, pairs, model.strategy)?;
    let mut preds = Vec::with_capacity(pairs.len());
    for rows in (0..pairs.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        preds.extend(argmax_rows(&model.head.forward(&x.select(Axis(0), rows), Pass::EVAL)?));
    }
    compute_metrics(&preds, &pairs.iter().map(|p| p.label.index()).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_serializes_exactly() {
        let json = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(json["epochs"], 30);
        assert_eq!(json["batch_size"], 32);
        assert_eq!(json["learning_rate"], 2e-4);
        assert_eq!(json["dropout"], 0.5);
        assert_eq!(json["runs"], 5);
        let back: TrainConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, TrainConfig::default());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { runs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { dropout: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "momentum": 0.9}"#).is_err());
        let partial: TrainConfig = serde_json::from_str(r#"{"epochs": 2, "mode": "multi_view"}"#).unwrap();
        assert_eq!(partial.batch_size, 32);
        assert_eq!(partial.mode, TrainMode::MultiView);
    }

    #[test]
    fn run_seeds_and_modes() {
        let c = TrainConfig { seed: 40, ..TrainConfig::default() };
        assert_eq!((0..5).map(|i| c.run_seed(i)).collect::<Vec<_>>(), vec![40, 41, 42, 43, 44]);
        assert_eq!("mv".parse::<TrainMode>().unwrap(), TrainMode::MultiView);
        assert_eq!("surface".parse::<TrainMode>().unwrap(), TrainMode::SingleViewSurface);
        assert!("both".parse::<TrainMode>().is_err());
        assert_ne!(c.fingerprint(), TrainConfig::default().fingerprint());
    }

    #[test]
    fn run_scheduler_keeps_order() {
        let out = for_each_run(7, 3, |i| Ok(i * 10)).unwrap();
        assert_eq!(out, vec![0, 10, 20, 30, 40, 50, 60]);
        assert!(for_each_run(3, 2, |i| if i == 1 { Err(Error::Data("x".into())) } else { Ok(i) }).is_err());
    }
}

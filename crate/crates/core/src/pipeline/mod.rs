//! End-to-end runs: run configs, whole-scan prediction, single training
//! runs, and the patient-level cross-validation driver.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

pub use config::{Arch, RunConfig, KEYS};

use crate::eval::{aggregate, scan_csv, AggregateReport, EvalError, ScanMetrics};
use crate::io::{load_manifest, read_body_mask, read_labels, read_volume, IoError, ManifestRecord};
use crate::nn::{Checkpoint, CropOrder, NetSpec, Network, NnError};
use crate::preprocess::{ff_threshold, prepare_scan, BodyMask, Dims, LabelMask, PreprocessError, PreprocessOptions, Volume};
use crate::train::{
    curve_csv, init_network, make_folds, make_samples, select_checkpoint, train, CurvePoint, FoldSplit, TrainError,
    TrainEvent, TrainOutcome, TrainScan,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("{path}: {source}")]
    Fs { path: PathBuf, source: std::io::Error },
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("fold {fold} failed: {source}")]
    Fold { fold: usize, source: Box<PipelineError> },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";
pub const CURVE_CSV: &str = "curve.csv";
pub const BEST_CHECKPOINT: &str = "best.asck";
pub const FINAL_CHECKPOINT: &str = "final.asck";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const SCANS_CSV: &str = "scans.csv";
pub const SCATTER_CSV: &str = "scatter.csv";
pub const FOLDS_CSV: &str = "folds.csv";
pub const FOLD_REPORT_CSV: &str = "report.csv";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| PipelineError::Fs { path: path.into(), source })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| PipelineError::Fs { path: path.into(), source })
}

/// A manifest entry with its files read.
#[derive(Clone, Debug)]
pub struct LoadedScan {
    pub record: ManifestRecord,
    /// Raw `(water, fat, fat fraction)` channels.
    pub raw: Volume,
    pub labels: LabelMask,
    pub body: Option<BodyMask>,
}

pub fn load_scan(record: &ManifestRecord) -> Result<LoadedScan> {
    let raw = read_volume(&record.image_path)?;
    let labels = read_labels(&record.label_path)?;
    raw.dims().check_same("labels", labels.dims())?;
    let body = record.body_mask_path.as_ref().map(read_body_mask).transpose()?;
    if let Some(b) = &body {
        raw.dims().check_same("body mask", b.dims())?;
    }
    Ok(LoadedScan { record: record.clone(), raw, labels, body })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PredictOptions {
    pub pad_xy: (usize, usize),
    /// Zero the background outside the body mask; off reproduces the
    /// unmasked robustness setting.
    pub mask_background: bool,
    pub ff_threshold: bool,
    pub crop_order: CropOrder,
}

impl PredictOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        PredictOptions {
            pad_xy: config.pad_xy,
            mask_background: config.mask_background,
            ff_threshold: config.ff_threshold_enabled,
            crop_order: CropOrder::default(),
        }
    }

    fn preprocess(&self) -> PreprocessOptions {
        PreprocessOptions { pad_xy: self.pad_xy, mask_background: self.mask_background }
    }
}

/// Rejects scans the network cannot take after padding to `pad_xy`.
pub fn check_geometry(spec: &NetSpec, dims: Dims, pad_xy: (usize, usize)) -> Result<()> {
    if dims.height > pad_xy.0 || dims.width > pad_xy.1 {
        return Err(PipelineError::Geometry(format!(
            "slices of {}x{} exceed the padded size {}x{}",
            dims.height, dims.width, pad_xy.0, pad_xy.1
        )));
    }
    let shape = match spec {
        NetSpec::Unet(u) => vec![1, u.in_channels, pad_xy.0, pad_xy.1],
        NetSpec::Vnet(v) => {
            if dims.depth > v.input_depth {
                return Err(PipelineError::Geometry(format!(
                    "{} slices exceed the V-Net input depth {}",
                    dims.depth, v.input_depth
                )));
            }
            vec![1, v.in_channels, v.input_depth, pad_xy.0, pad_xy.1]
        }
    };
    spec.check_input(&shape).map_err(|e| PipelineError::Geometry(e.to_string()))
}

/// Preprocess, segment, undo the in-plane padding (padding slices are
/// dropped by the network) and optionally apply the fat-fraction threshold.
/// The result has the raw scan's dimensions.
pub fn predict_scan(net: &Network, raw: &Volume, body: Option<&BodyMask>, options: &PredictOptions) -> Result<LabelMask> {
    check_geometry(net.spec(), raw.dims(), options.pad_xy)?;
    let prepared = prepare_scan(raw, body, options.preprocess())?;
    let padded = net.segment_with(&prepared.volume, options.crop_order)?;
    let labels = padded.crop_xy(&prepared.xy_padding)?;
    Ok(if options.ff_threshold { ff_threshold(&labels, raw)? } else { labels })
}

/// Predicts a loaded scan and scores it against its reference.
pub fn evaluate_scan(net: &Network, scan: &LoadedScan, options: &PredictOptions) -> Result<(LabelMask, ScanMetrics)> {
    let pred = predict_scan(net, &scan.raw, scan.body.as_ref(), options)?;
    let metrics = ScanMetrics::compute(scan.record.scan_id(), &scan.record.center_tag, &pred, &scan.labels)?;
    Ok((pred, metrics))
}

/// Preprocessed network input and in-plane padded reference labels.
pub fn training_scan(scan: &LoadedScan, pad_xy: (usize, usize), mask_background: bool) -> Result<TrainScan> {
    let prepared = prepare_scan(&scan.raw, scan.body.as_ref(), PreprocessOptions { pad_xy, mask_background })?;
    let (labels, _) = scan.labels.pad_xy(pad_xy)?;
    Ok(TrainScan { id: scan.record.scan_id(), volume: prepared.volume, labels })
}

/// Outcome of [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub outcome: TrainOutcome,
    /// State at the curve point chosen by [`select_checkpoint`].
    pub best: Checkpoint,
}

impl TrainRun {
    pub fn curve(&self) -> &[CurvePoint] {
        &self.outcome.curve
    }
}

/// Trains one network from `config` and writes `curve.csv`, `best.asck` and
/// `final.asck` into `out_dir`; with `periodic` every checkpoint also goes
/// to `out_dir/checkpoints/iter_NNNNNN.asck` as soon as it is taken.
pub fn run_training(
    config: &RunConfig,
    train_scans: &[LoadedScan],
    validation: &[LoadedScan],
    out_dir: &Path,
    periodic: bool,
) -> Result<TrainRun> {
    let spec = config.net_spec();
    for s in train_scans.iter().chain(validation) {
        check_geometry(&spec, s.raw.dims(), config.pad_xy)?;
    }
    create_dir(out_dir)?;
    let ck_dir = out_dir.join("checkpoints");
    if periodic {
        create_dir(&ck_dir)?;
    }
    let prep = |scans: &[LoadedScan]| {
        scans.iter().map(|s| training_scan(s, config.pad_xy, config.mask_background)).collect::<Result<Vec<_>>>()
    };
    let train_set = prep(train_scans)?;
    let val_set = prep(validation)?;
    let samples = make_samples(&spec, &train_set)?;
    let net = init_network(spec, config.seed)?;
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut io_error = None;
    let outcome = train(net, &samples, &val_set, &config.train_config(), &mut |event| {
        match event {
            TrainEvent::Eval { point, checkpoint } => {
                if best.as_ref().is_none_or(|(d, _)| point.mean_dice() > *d) {
                    best = Some((point.mean_dice(), checkpoint.clone()));
                }
            }
            TrainEvent::Checkpoint(ck) if periodic => {
                let path = ck_dir.join(format!("iter_{:06}.asck", ck.iteration));
                if let Err(e) = ck.save(&path) {
                    io_error = Some(e);
                    return Err(TrainError::Config(format!("cannot write {}", path.display())));
                }
            }
            TrainEvent::Checkpoint(_) => {}
        }
        Ok(())
    });
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = outcome?;
    let (_, best) = best.expect("the final iteration is always evaluated");
    debug_assert_eq!(select_checkpoint(&outcome.curve), Some(best.iteration));
    write(&out_dir.join(CURVE_CSV), curve_csv(&outcome.curve))?;
    best.save(out_dir.join(BEST_CHECKPOINT))?;
    outcome.final_checkpoint.save(out_dir.join(FINAL_CHECKPOINT))?;
    Ok(TrainRun { outcome, best })
}

fn load_records(config: &RunConfig) -> Result<Vec<ManifestRecord>> {
    let manifest = config
        .manifest
        .as_ref()
        .ok_or_else(|| PipelineError::Config { line: 0, msg: "no manifest given".into() })?;
    Ok(load_manifest(manifest)?)
}

fn load_all<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>) -> Result<Vec<LoadedScan>> {
    records.into_iter().map(load_scan).collect()
}

/// Trains on every scan of the manifest. The training curve is measured
/// on the training scans themselves, since there is no held-out side.
pub fn cmd_train(config: &RunConfig) -> Result<TrainRun> {
    let records = load_records(config)?;
    create_dir(&config.output)?;
    write(&config.output.join(RESOLVED_CONFIG), config.to_text())?;
    let scans = load_all(&records)?;
    log::info!("event=train_start scans={} arch={} iterations={}", scans.len(), config.arch.name(), config.iterations());
    run_training(config, &scans, &scans, &config.output, true)
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub best: Checkpoint,
    pub curve: Vec<CurvePoint>,
    /// Metrics of the validation scans under the selected checkpoint.
    pub scans: Vec<ScanMetrics>,
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub folds: Vec<FoldResult>,
    pub report: AggregateReport,
}

impl CvResult {
    /// Per-scan metrics of all folds in fold order.
    pub fn all_scans(&self) -> Vec<ScanMetrics> {
        self.folds.iter().flat_map(|f| f.scans.iter().cloned()).collect()
    }
}

pub fn fold_dir(output: &Path, fold: usize) -> PathBuf {
    output.join(format!("fold_{fold:02}"))
}

fn run_fold(config: &RunConfig, records: &[ManifestRecord], split: &FoldSplit) -> Result<FoldResult> {
    let dir = fold_dir(&config.output, split.fold);
    let (train_records, val_records) = split.split(records);
    log::info!(
        "event=fold_start fold={} train_scans={} validation_scans={}",
        split.fold,
        train_records.len(),
        val_records.len()
    );
    let train_scans = load_all(train_records)?;
    let val_scans = load_all(val_records)?;
    let run = run_training(config, &train_scans, &val_scans, &dir, false)?;
    let net = run.best.network()?;
    let options = PredictOptions::from_config(config);
    let scans = val_scans.iter().map(|s| evaluate_scan(&net, s, &options).map(|(_, m)| m)).collect::<Result<Vec<_>>>()?;
    write(&dir.join(SCANS_CSV), scan_csv(&scans))?;
    write(&dir.join(FOLD_REPORT_CSV), aggregate(&scans)?.to_csv())?;
    let mean: f64 = scans.iter().flat_map(|s| s.classes.iter().map(|c| c.dice)).sum::<f64>() / (2 * scans.len()) as f64;
    log::info!("event=fold_done fold={} best_iteration={} mean_dice={mean:.6}", split.fold, run.best.iteration);
    Ok(FoldResult { split: split.clone(), best: run.best, curve: run.outcome.curve, scans })
}

fn folds_csv(folds: &[FoldSplit]) -> String {
    let mut out = String::from("fold,patient_id\n");
    for f in folds {
        for p in &f.validation_patients {
            writeln!(out, "{},{p}", f.fold).unwrap();
        }
    }
    out
}

/// Patient-level k-fold cross-validation.
///
/// Each fold trains a fresh network on the other folds' patients, keeps
/// the checkpoint with the best validation curve point and evaluates its
/// validation scans. Folds run on up to `config.workers` threads and share
/// nothing but the input files; outputs are identical for any worker count.
/// The first failing fold stops dispatch; finished fold outputs stay on disk.
pub fn run_cv(config: &RunConfig) -> Result<CvResult> {
    let records = load_records(config)?;
    let splits = make_folds(&records, config.folds, config.seed)?;
    create_dir(&config.output)?;
    write(&config.output.join(RESOLVED_CONFIG), config.to_text())?;
    write(&config.output.join(FOLDS_CSV), folds_csv(&splits))?;
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let results: Mutex<Vec<Option<Result<FoldResult>>>> = Mutex::new((0..splits.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.min(splits.len()) {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(split) = splits.get(i) else { break };
                let r = run_fold(config, &records, split);
                if let Err(e) = &r {
                    log::error!("event=fold_failed fold={} error={e}", split.fold);
                    stop.store(true, Ordering::SeqCst);
                }
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut folds = Vec::with_capacity(splits.len());
    for (i, r) in results.into_inner().unwrap().into_iter().enumerate() {
        match r {
            Some(Ok(f)) => folds.push(f),
            Some(Err(e)) => return Err(PipelineError::Fold { fold: i, source: Box::new(e) }),
            None => {}
        }
    }
    let all: Vec<ScanMetrics> = folds.iter().flat_map(|f| f.scans.iter().cloned()).collect();
    let report = aggregate(&all)?;
    write(&config.output.join(AGGREGATE_CSV), report.to_csv())?;
    write(&config.output.join(SCANS_CSV), scan_csv(&all))?;
    write(&config.output.join(SCATTER_CSV), report.scatter_csv())?;
    log::info!("event=cv_done folds={} scans={}", folds.len(), all.len());
    Ok(CvResult { folds, report })
}

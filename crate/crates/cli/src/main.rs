//! `fatseg`: batch commands for phantom generation, training,
//! cross-validation, prediction and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fatseg_core::eval::{aggregate, parse_scan_csv, scan_csv, ScanMetrics};
use fatseg_core::io::{
    generate_cohort, load_manifest, read_body_mask, read_labels, read_volume, write_labels, CohortSpec, PhantomParams,
    Range,
};
use fatseg_core::nn::Checkpoint;
use fatseg_core::pipeline::{
    cmd_train, evaluate_scan, load_scan, predict_scan, run_cv, PredictOptions, RunConfig, AGGREGATE_CSV, SCANS_CSV,
    SCATTER_CSV,
};
use fatseg_core::preprocess::{Dims, Label};

#[derive(Parser)]
#[command(name = "fatseg", version, about = "VAT/SAT segmentation of water-fat MRI")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-visit cohort and its manifest.
    Phantom(PhantomArgs),
    /// Train one network on every scan of the manifest.
    Train(ConfigArgs),
    /// Patient-level k-fold cross-validation with an aggregate report.
    Cv(ConfigArgs),
    /// Segment scans with a checkpoint.
    Predict(PredictArgs),
    /// Score predicted label files against references.
    Evaluate(EvaluateArgs),
    /// Aggregate a per-scan metrics CSV into the summary report.
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    patients: usize,
    #[arg(long, default_value_t = 2)]
    visits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    /// In-plane size; slices are square.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Fill the background with noise instead of zeros.
    #[arg(long)]
    background_noise: bool,
    #[arg(long, default_value = "phantom")]
    center_tag: String,
    /// SAT ring thickness range `min:max` as a fraction of the half image.
    #[arg(long, value_parser = parse_range)]
    sat_thickness: Option<Range>,
    /// Muscle wall thickness range `min:max` as a fraction of the half image.
    #[arg(long, value_parser = parse_range)]
    wall_thickness: Option<Range>,
    /// VAT blob radius range `min:max` as a fraction of the cavity.
    #[arg(long, value_parser = parse_range)]
    vat_radius: Option<Range>,
    /// Spine disk radius as a fraction of the cavity.
    #[arg(long)]
    spine_radius: Option<f64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Predict every scan of a manifest into the `--out` directory.
    #[arg(long, conflicts_with = "image")]
    manifest: Option<PathBuf>,
    /// A single raw `(water, fat, fat fraction)` volume.
    #[arg(long, required_unless_present = "manifest")]
    image: Option<PathBuf>,
    #[arg(long, requires = "image")]
    body: Option<PathBuf>,
    /// Output label file (single image) or directory (manifest).
    #[arg(long)]
    out: PathBuf,
    /// In-plane padded size, `HxW` or one number.
    #[arg(long, default_value = "256")]
    pad_xy: String,
    /// Keep the background noise instead of masking it out.
    #[arg(long)]
    skip_background_mask: bool,
    /// Reset labels where the fat fraction is below 0.5.
    #[arg(long)]
    ff_threshold: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Manifest with the reference labels.
    #[arg(long, conflicts_with = "reference")]
    manifest: Option<PathBuf>,
    /// Directory with `<scan_id>_pred.mvf` files for `--manifest`.
    #[arg(long, requires = "manifest")]
    predictions: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    reference: Option<PathBuf>,
    #[arg(long, default_value = "scan")]
    scan_id: String,
    #[arg(long, default_value = "unknown")]
    center_tag: String,
    /// Per-scan metrics CSV; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-scan metrics CSV as written by `evaluate` or `cv`.
    #[arg(long)]
    scans: PathBuf,
    /// Directory for the aggregate and scatter CSVs.
    #[arg(long)]
    out: PathBuf,
}

type Result<T> = std::result::Result<T, String>;

fn parse_range(s: &str) -> Result<Range> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected min:max, got {s:?}"))?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number {a:?}"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number {b:?}"))?;
    Ok(Range::new(a, b))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    fs::write(path, contents).map_err(|e| format!("{}: {e}", path.display()))
}

fn phantom(args: PhantomArgs) -> Result<()> {
    let mut params =
        PhantomParams { dims: Dims::new(args.depth, args.size, args.size), include_background_noise: args.background_noise, ..PhantomParams::default() };
    if let Some(r) = args.sat_thickness {
        params.sat_thickness = r;
    }
    if let Some(r) = args.wall_thickness {
        params.wall_thickness = r;
    }
    if let Some(r) = args.vat_radius {
        params.vat_radius = r;
    }
    if let Some(r) = args.spine_radius {
        params.spine_radius = r;
    }
    let mut spec = CohortSpec::new(args.patients, args.visits, params, args.seed);
    spec.center_tag = args.center_tag;
    let records = generate_cohort(&spec, &args.out).map_err(err)?;
    log::info!("event=phantom_done scans={} out={}", records.len(), args.out.display());
    Ok(())
}

fn run_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).map_err(err)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got {o:?}"))?;
        config.set(k.trim(), v.trim(), None)?;
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn train(args: ConfigArgs) -> Result<()> {
    let config = run_config(&args)?;
    let run = cmd_train(&config).map_err(err)?;
    log::info!("event=train_done best_iteration={} out={}", run.best.iteration, config.output.display());
    Ok(())
}

fn cv(args: ConfigArgs) -> Result<()> {
    let config = run_config(&args)?;
    let result = run_cv(&config).map_err(err)?;
    print!("{}", result.report.to_csv());
    Ok(())
}

fn parse_pad(s: &str) -> Result<(usize, usize)> {
    let mut c = RunConfig::default();
    c.set("pad_xy", s, None)?;
    Ok(c.pad_xy)
}

fn predict(args: PredictArgs) -> Result<()> {
    let net = Checkpoint::load(&args.checkpoint).map_err(err)?.network().map_err(err)?;
    let options = PredictOptions {
        pad_xy: parse_pad(&args.pad_xy)?,
        mask_background: !args.skip_background_mask,
        ff_threshold: args.ff_threshold,
        crop_order: Default::default(),
    };
    let Some(manifest) = &args.manifest else {
        let image = args.image.as_ref().expect("clap requires --image without --manifest");
        let raw = read_volume(image).map_err(err)?;
        let body = args.body.as_ref().map(read_body_mask).transpose().map_err(err)?;
        let labels = predict_scan(&net, &raw, body.as_ref(), &options).map_err(err)?;
        return write_labels(&args.out, &labels).map_err(err);
    };
    let records = load_manifest(manifest).map_err(err)?;
    fs::create_dir_all(&args.out).map_err(|e| format!("{}: {e}", args.out.display()))?;
    let mut scans = Vec::new();
    let mut deltas = String::from("scan_id,depot,dice,dice_masked,delta\n");
    for record in &records {
        let scan = load_scan(record).map_err(err)?;
        let (pred, metrics) = evaluate_scan(&net, &scan, &options).map_err(err)?;
        write_labels(args.out.join(format!("{}_pred.mvf", record.scan_id())), &pred).map_err(err)?;
        if args.skip_background_mask {
            let masked = PredictOptions { mask_background: true, ..options };
            let (_, reference) = evaluate_scan(&net, &scan, &masked).map_err(err)?;
            for label in Label::FOREGROUND {
                let (a, b) = (metrics.class(label).unwrap().dice, reference.class(label).unwrap().dice);
                writeln!(deltas, "{},{},{a},{b},{}", metrics.scan_id, label.name(), a - b).unwrap();
            }
        }
        log::info!("event=predicted scan={}", record.scan_id());
        scans.push(metrics);
    }
    write_file(&args.out.join(SCANS_CSV), scan_csv(&scans))?;
    if args.skip_background_mask {
        write_file(&args.out.join("robustness.csv"), deltas)?;
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let scans: Vec<ScanMetrics> = if let (Some(manifest), Some(dir)) = (&args.manifest, &args.predictions) {
        let records = load_manifest(manifest).map_err(err)?;
        records
            .iter()
            .map(|r| {
                let pred = read_labels(dir.join(format!("{}_pred.mvf", r.scan_id()))).map_err(err)?;
                let reference = read_labels(&r.label_path).map_err(err)?;
                ScanMetrics::compute(r.scan_id(), &r.center_tag, &pred, &reference).map_err(err)
            })
            .collect::<Result<_>>()?
    } else if let (Some(p), Some(r)) = (&args.pred, &args.reference) {
        let pred = read_labels(p).map_err(err)?;
        let reference = read_labels(r).map_err(err)?;
        vec![ScanMetrics::compute(&args.scan_id, &args.center_tag, &pred, &reference).map_err(err)?]
    } else {
        return Err("give --manifest with --predictions, or --pred with --reference".into());
    };
    let csv = scan_csv(&scans);
    match &args.out {
        Some(path) => write_file(path, csv),
        None => std::io::stdout().write_all(csv.as_bytes()).map_err(err),
    }
}

fn report(args: ReportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.scans).map_err(|e| format!("{}: {e}", args.scans.display()))?;
    let scans = parse_scan_csv(&text).map_err(err)?;
    let report = aggregate(&scans).map_err(err)?;
    write_file(&args.out.join(AGGREGATE_CSV), report.to_csv())?;
    write_file(&args.out.join(SCATTER_CSV), report.scatter_csv())?;
    print!("{}", report.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train(a),
        Command::Cv(a) => cv(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

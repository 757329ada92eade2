//! Segmentation metrics: dice overlap, depot volumes, volume errors and their
//! per-center aggregation into report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::preprocess::{Label, LabelMask, PreprocessError, Spacing};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Dims(#[from] PreprocessError),
    #[error("cannot aggregate an empty set of scans")]
    Empty,
    #[error("metrics csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check_dims(a: &LabelMask, b: &LabelMask) -> Result<()> {
    Ok(a.dims().check_same("dice", b.dims())?)
}

/// `2|X∩Y| / (|X|+|Y|)` over the voxels of `class`; 1 when both are empty.
pub fn dice(pred: &LabelMask, reference: &LabelMask, class: Label) -> Result<f64> {
    check_dims(pred, reference)?;
    Ok(dice_of(pred.data(), reference.data(), class as u8))
}

fn dice_of(a: &[u8], b: &[u8], class: u8) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Volume of `class` in mL.
pub fn depot_volume(mask: &LabelMask, spacing: Spacing, class: Label) -> f64 {
    mask.count(class) as f64 * spacing.voxel_mm3() / 1000.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeError {
    /// `pred - ref` in mL.
    pub signed_ml: f64,
    /// `|pred - ref| / ref * 100`; `None` when the reference is empty but
    /// the prediction is not.
    pub abs_percent: Option<f64>,
}

pub fn volume_errors(pred_ml: f64, ref_ml: f64) -> VolumeError {
    let signed_ml = pred_ml - ref_ml;
    let abs_percent = if ref_ml > 0.0 {
        Some(signed_ml.abs() / ref_ml * 100.0)
    } else if pred_ml == 0.0 {
        Some(0.0)
    } else {
        None
    };
    VolumeError { signed_ml, abs_percent }
}

/// `pred / ref - 1`, undefined for an empty reference.
pub fn relative_signed_error(pred_ml: f64, ref_ml: f64) -> Option<f64> {
    (ref_ml > 0.0).then(|| pred_ml / ref_ml - 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub label: Label,
    pub dice: f64,
    pub predicted_ml: f64,
    pub reference_ml: f64,
    pub signed_error_ml: f64,
    pub abs_error_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanMetrics {
    pub scan_id: String,
    pub center_tag: String,
    /// VAT then SAT.
    pub classes: Vec<ClassMetrics>,
}

impl ScanMetrics {
    pub fn compute(
        scan_id: impl Into<String>,
        center_tag: impl Into<String>,
        pred: &LabelMask,
        reference: &LabelMask,
    ) -> Result<Self> {
        check_dims(pred, reference)?;
        let spacing = reference.spacing();
        let classes = Label::FOREGROUND
            .iter()
            .map(|&label| {
                let predicted_ml = depot_volume(pred, spacing, label);
                let reference_ml = depot_volume(reference, spacing, label);
                let err = volume_errors(predicted_ml, reference_ml);
                ClassMetrics {
                    label,
                    dice: dice_of(pred.data(), reference.data(), label as u8),
                    predicted_ml,
                    reference_ml,
                    signed_error_ml: err.signed_ml,
                    abs_error_percent: err.abs_percent,
                }
            })
            .collect();
        Ok(ScanMetrics { scan_id: scan_id.into(), center_tag: center_tag.into(), classes })
    }

    pub fn class(&self, label: Label) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.label == label)
    }
}

/// Per-class dice between two reference segmentations, `[VAT, SAT]`.
pub fn compare_masks(a: &LabelMask, b: &LabelMask) -> Result<[f64; 2]> {
    check_dims(a, b)?;
    Ok(Label::FOREGROUND.map(|l| dice_of(a.data(), b.data(), l as u8)))
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    /// Values are sorted before summation so the result does not depend on
    /// input order. An empty input gives NaN statistics with `n = 0`.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let mut v: Vec<f64> = values.into_iter().collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
        dev.sort_by(f64::total_cmp);
        let std = (dev.iter().sum::<f64>() / n as f64).sqrt();
        Summary { mean, std, n }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassReport {
    pub label: Label,
    pub dice: Summary,
    /// Over scans with a defined percent error.
    pub error_percent: Summary,
    pub error_ml: Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub n_scans: usize,
    pub classes: Vec<ClassReport>,
}

impl GroupReport {
    pub fn class(&self, label: Label) -> Option<&ClassReport> {
        self.classes.iter().find(|c| c.label == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterRow {
    pub label: Label,
    pub reference_ml: f64,
    pub relative_signed_error: f64,
    pub center_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateReport {
    pub overall: GroupReport,
    /// Sorted by center tag.
    pub by_center: Vec<GroupReport>,
    /// Sorted; scans with an empty reference are left out.
    pub scatter: Vec<ScatterRow>,
}

pub const ALL_GROUP: &str = "all";

fn group_report(group: &str, scans: &[&ScanMetrics]) -> GroupReport {
    let classes = Label::FOREGROUND
        .iter()
        .map(|&label| {
            let rows: Vec<&ClassMetrics> = scans.iter().filter_map(|s| s.class(label)).collect();
            ClassReport {
                label,
                dice: Summary::of(rows.iter().map(|c| c.dice)),
                error_percent: Summary::of(rows.iter().filter_map(|c| c.abs_error_percent)),
                error_ml: Summary::of(rows.iter().map(|c| c.signed_error_ml)),
            }
        })
        .collect();
    GroupReport { group: group.to_string(), n_scans: scans.len(), classes }
}

pub fn aggregate(scans: &[ScanMetrics]) -> Result<AggregateReport> {
    if scans.is_empty() {
        return Err(EvalError::Empty);
    }
    let all: Vec<&ScanMetrics> = scans.iter().collect();
    let mut centers: BTreeMap<&str, Vec<&ScanMetrics>> = BTreeMap::new();
    for s in scans {
        centers.entry(&s.center_tag).or_default().push(s);
    }
    let mut scatter: Vec<ScatterRow> = scans
        .iter()
        .flat_map(|s| {
            s.classes.iter().filter_map(move |c| {
                relative_signed_error(c.predicted_ml, c.reference_ml).map(|e| ScatterRow {
                    label: c.label,
                    reference_ml: c.reference_ml,
                    relative_signed_error: e,
                    center_tag: s.center_tag.clone(),
                })
            })
        })
        .collect();
    scatter.sort_by(|a, b| {
        (a.label, &a.center_tag)
            .cmp(&(b.label, &b.center_tag))
            .then(a.reference_ml.total_cmp(&b.reference_ml))
            .then(a.relative_signed_error.total_cmp(&b.relative_signed_error))
    });
    Ok(AggregateReport {
        overall: group_report(ALL_GROUP, &all),
        by_center: centers.iter().map(|(tag, s)| group_report(tag, s)).collect(),
        scatter,
    })
}

const METRICS: [&str; 3] = ["Dice", "Error in %", "Error in mL"];

impl AggregateReport {
    /// Table rows `group,depot,metric,mean,std,n`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,depot,metric,mean,std,n\n");
        for g in std::iter::once(&self.overall).chain(&self.by_center) {
            for c in &g.classes {
                for (metric, s) in METRICS.iter().zip([c.dice, c.error_percent, c.error_ml]) {
                    writeln!(out, "{},{},{},{:.6},{:.6},{}", g.group, c.label.name(), metric, s.mean, s.std, s.n).unwrap();
                }
            }
        }
        out
    }

    pub fn scatter_csv(&self) -> String {
        let mut out = String::from("class,reference_ml,relative_signed_error,center_tag\n");
        for r in &self.scatter {
            writeln!(out, "{},{},{},{}", r.label.name(), r.reference_ml, r.relative_signed_error, r.center_tag).unwrap();
        }
        out
    }
}

const SCAN_HEADER: &str =
    "scan_id,center_tag,depot,dice,predicted_ml,reference_ml,signed_error_ml,abs_error_percent";

/// One row per scan and depot; numbers round-trip exactly through
/// [`parse_scan_csv`].
pub fn scan_csv(scans: &[ScanMetrics]) -> String {
    let mut out = format!("{SCAN_HEADER}\n");
    for s in scans {
        for c in &s.classes {
            let pct = c.abs_error_percent.map(|p| p.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.scan_id,
                s.center_tag,
                c.label.name(),
                c.dice,
                c.predicted_ml,
                c.reference_ml,
                c.signed_error_ml,
                pct
            )
            .unwrap();
        }
    }
    out
}

pub fn parse_scan_csv(text: &str) -> Result<Vec<ScanMetrics>> {
    let mut scans: Vec<ScanMetrics> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() || line == SCAN_HEADER {
            continue;
        }
        let err = |msg: String| EvalError::Csv { line: line_no, msg };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", f.len())));
        }
        let label = Label::FOREGROUND
            .into_iter()
            .find(|l| l.name() == f[2])
            .ok_or_else(|| err(format!("unknown depot {:?}", f[2])))?;
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| err(format!("field {} is not a number: {:?}", k + 1, f[k])));
        let metrics = ClassMetrics {
            label,
            dice: num(3)?,
            predicted_ml: num(4)?,
            reference_ml: num(5)?,
            signed_error_ml: num(6)?,
            abs_error_percent: if f[7].is_empty() { None } else { Some(num(7)?) },
        };
        match scans.last_mut() {
            Some(s) if s.scan_id == f[0] && s.center_tag == f[1] => s.classes.push(metrics),
            _ => scans.push(ScanMetrics { scan_id: f[0].into(), center_tag: f[1].into(), classes: vec![metrics] }),
        }
    }
    Ok(scans)
}

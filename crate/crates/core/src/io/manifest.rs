//! Study manifests: one scan per line,
//! `patient_id, visit, image_path, label_path, center_tag[, body_mask_path]`.
//!
//! Blank lines and text after `#` are ignored. Relative paths resolve against
//! the manifest's directory.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{IoError, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub patient_id: String,
    pub visit: u32,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub center_tag: String,
    pub body_mask_path: Option<PathBuf>,
}

impl ManifestRecord {
    /// `patient_v<visit>`, unique within a manifest.
    pub fn scan_id(&self) -> String {
        format!("{}_v{}", self.patient_id, self.visit)
    }
}

fn field_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Manifest { line, msg: msg.into() }
}

/// Parses manifest text; `base` anchors relative paths.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestRecord>> {
    let resolve = |p: &str| match base {
        Some(b) if Path::new(p).is_relative() => b.join(p),
        _ => PathBuf::from(p),
    };
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        if !(5..=6).contains(&fields.len()) {
            return Err(field_err(line, format!("expected 5 or 6 comma-separated fields, found {}", fields.len())));
        }
        if let Some(pos) = fields.iter().position(|f| f.is_empty()) {
            return Err(field_err(line, format!("field {} is empty", pos + 1)));
        }
        let visit: u32 =
            fields[1].parse().map_err(|_| field_err(line, format!("visit {:?} is not a non-negative integer", fields[1])))?;
        let record = ManifestRecord {
            patient_id: fields[0].to_string(),
            visit,
            image_path: resolve(fields[2]),
            label_path: resolve(fields[3]),
            center_tag: fields[4].to_string(),
            body_mask_path: fields.get(5).map(|p| resolve(p)),
        };
        if !seen.insert((record.patient_id.clone(), visit)) {
            return Err(field_err(line, format!("duplicate scan: patient {} visit {visit}", record.patient_id)));
        }
        records.push(record);
    }
    Ok(records)
}

/// Reads and validates a manifest; every referenced file must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let records = parse_manifest(&text, Some(base))?;
    for (r, line) in records.iter().zip(record_lines(&text)) {
        let files = [Some(&r.image_path), Some(&r.label_path), r.body_mask_path.as_ref()];
        for p in files.into_iter().flatten() {
            if !p.is_file() {
                return Err(field_err(line, format!("referenced file {} does not exist", p.display())));
            }
        }
    }
    Ok(records)
}

fn record_lines(text: &str) -> impl Iterator<Item = usize> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.split('#').next().unwrap_or("").trim().is_empty())
        .map(|(i, _)| i + 1)
}

/// Writes records, storing paths relative to the manifest directory when
/// they lie beneath it.
pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new(""));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut out = String::from("# patient_id,visit,image_path,label_path,center_tag,body_mask_path\n");
    for r in records {
        write!(out, "{},{},{},{},{}", r.patient_id, r.visit, rel(&r.image_path), rel(&r.label_path), r.center_tag)
            .unwrap();
        if let Some(b) = &r.body_mask_path {
            write!(out, ",{}", rel(b)).unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| IoError::io(path, e))
}

//! Multi-visit phantom cohorts written as MVF files plus a manifest.

use std::fs;
use std::path::Path;

use super::manifest::{write_manifest, ManifestRecord};
use super::mvf::{write_body_mask, write_labels, write_volume};
use super::phantom::{render_phantom, stream_rng, PhantomGeometry, PhantomParams, VisitJitter};
use super::{IoError, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub visits_per_patient: usize,
    /// Shape distribution; its `seed` is ignored in favor of `seed`.
    pub params: PhantomParams,
    pub seed: u64,
    pub center_tag: String,
    pub jitter: VisitJitter,
}

impl CohortSpec {
    pub fn new(n_patients: usize, visits_per_patient: usize, params: PhantomParams, seed: u64) -> Self {
        CohortSpec {
            n_patients,
            visits_per_patient,
            params,
            seed,
            center_tag: "phantom".into(),
            jitter: VisitJitter::default(),
        }
    }
}

// Streams: patient p owns 256 consecutive ids; 0 is its anatomy, then one
// (perturbation, rendering) pair per visit.
fn patient_stream(patient: usize, slot: u64) -> u64 {
    ((patient as u64) << 8) | slot
}

/// Writes `P###_v#_{image,label,body}.mvf` and `manifest.csv` into `out_dir`
/// and returns the records (paths under `out_dir`).
pub fn generate_cohort(spec: &CohortSpec, out_dir: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let out = out_dir.as_ref();
    if spec.n_patients == 0 {
        return Err(IoError::Geometry("a cohort needs at least one patient".into()));
    }
    if spec.visits_per_patient == 0 || spec.visits_per_patient > 127 {
        return Err(IoError::Geometry(format!("visits per patient {} outside 1..=127", spec.visits_per_patient)));
    }
    spec.params.validate()?;
    fs::create_dir_all(out).map_err(|e| IoError::io(out, e))?;
    let mut records = Vec::with_capacity(spec.n_patients * spec.visits_per_patient);
    for p in 0..spec.n_patients {
        let patient_id = format!("P{:03}", p + 1);
        let anatomy = PhantomGeometry::sample(&spec.params, &mut stream_rng(spec.seed, patient_stream(p, 0)))?;
        for v in 0..spec.visits_per_patient {
            let slot = 1 + 2 * v as u64;
            let geometry = anatomy.perturb(spec.jitter, &mut stream_rng(spec.seed, patient_stream(p, slot)))?;
            let phantom = render_phantom(&geometry, &spec.params, &mut stream_rng(spec.seed, patient_stream(p, slot + 1)))?;
            let visit = v as u32 + 1;
            let stem = format!("{patient_id}_v{visit}");
            let record = ManifestRecord {
                patient_id: patient_id.clone(),
                visit,
                image_path: out.join(format!("{stem}_image.mvf")),
                label_path: out.join(format!("{stem}_label.mvf")),
                center_tag: spec.center_tag.clone(),
                body_mask_path: Some(out.join(format!("{stem}_body.mvf"))),
            };
            write_volume(&record.image_path, &phantom.volume)?;
            write_labels(&record.label_path, &phantom.labels)?;
            write_body_mask(record.body_mask_path.as_ref().unwrap(), &phantom.body, geometry.spacing)?;
            records.push(record);
        }
    }
    write_manifest(out.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{load_manifest, read_labels};
    use crate::preprocess::{Dims, Label};

    fn small() -> PhantomParams {
        PhantomParams { dims: Dims::new(8, 48, 48), ..PhantomParams::default() }
    }

    #[test]
    fn ten_patients_two_visits() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_cohort(&CohortSpec::new(10, 2, small(), 7), dir.path()).unwrap();
        assert_eq!(records.len(), 20);
        let images = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_image.mvf"))
            .count();
        assert_eq!(images, 20);
        assert_eq!(load_manifest(dir.path().join(MANIFEST_NAME)).unwrap(), records);
    }

    #[test]
    fn visits_differ_by_less_than_ten_percent_and_patients_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let records = generate_cohort(&CohortSpec::new(10, 2, PhantomParams::default(), 3), dir.path()).unwrap();
        let masks: Vec<_> = records.iter().map(|r| read_labels(&r.label_path).unwrap()).collect();
        for pair in masks.chunks(2) {
            for class in Label::FOREGROUND {
                let (a, b) = (pair[0].count(class) as f64, pair[1].count(class) as f64);
                let rel = (a - b).abs() / a.max(b);
                assert!(rel < 0.10, "{} visit volumes {a} vs {b}", class.name());
            }
        }
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                assert_ne!(masks[i], masks[j], "scans {i} and {j} share a mask");
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bytes() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = CohortSpec::new(2, 2, small(), 1);
        generate_cohort(&spec, a.path()).unwrap();
        generate_cohort(&spec, b.path()).unwrap();
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 13);
        for n in names {
            assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
        }
    }

    #[test]
    fn zero_patients_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_cohort(&CohortSpec::new(0, 2, small(), 1), dir.path()).is_err());
    }
}

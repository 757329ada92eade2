use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};
use crate::io::ManifestRecord;

/// One cross-validation fold over patient ids (both sides sorted).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub validation_patients: Vec<String>,
}

impl FoldSplit {
    /// Manifest records of the training and validation side, in manifest order.
    pub fn split<'a>(&self, records: &'a [ManifestRecord]) -> (Vec<&'a ManifestRecord>, Vec<&'a ManifestRecord>) {
        records.iter().partition(|r| self.train_patients.binary_search(&r.patient_id).is_ok())
    }
}

/// Splits patients into `k` groups whose sizes differ by at most one and
/// makes each group the validation side of one fold.
///
/// Patients are sorted, shuffled with a ChaCha8 stream seeded by `seed` and
/// dealt round-robin, so the split depends only on the patient set and the
/// seed. All scans of a patient therefore share a side.
pub fn make_folds(records: &[ManifestRecord], k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut seen = HashSet::new();
    for r in records {
        for p in [&r.image_path, &r.label_path] {
            if !seen.insert(p) {
                return Err(TrainError::Folds(format!("scan path {} appears twice", p.display())));
            }
        }
    }
    let patients: BTreeSet<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    if k < 2 || k > patients.len() {
        return Err(TrainError::Folds(format!("{k} folds need 2 <= k <= {} patients", patients.len())));
    }
    let mut order: Vec<&str> = patients.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, p) in order.iter().enumerate() {
        groups[i % k].push(p.to_string());
    }
    for g in &mut groups {
        g.sort();
    }
    Ok((0..k)
        .map(|fold| {
            let mut train: Vec<String> =
                groups.iter().enumerate().filter(|&(j, _)| j != fold).flat_map(|(_, g)| g.iter().cloned()).collect();
            train.sort();
            FoldSplit { fold, train_patients: train, validation_patients: groups[fold].clone() }
        })
        .collect())
}

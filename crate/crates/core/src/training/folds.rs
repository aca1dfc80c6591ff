//! Patient-grouped, label-stratified k-fold assignment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::manifest::{DatasetManifest, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub k: usize,
    pub seed: u64,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { k: 4, seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignments.get(patient_id).copied()
    }

    pub fn in_fold(&self, record: &ImageRecord, fold: usize) -> bool {
        self.fold_of(&record.patient_id) == Some(fold)
    }

    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn check_fold(&self, fold: usize) -> Result<(), TrainError> {
        if fold < self.k {
            Ok(())
        } else {
            Err(TrainError::InvalidFold { fold, k: self.k })
        }
    }
}

/// Shuffles patients with `seed`, splits them by patient-level label, and
/// deals each stratum round-robin (negatives continue where positives ended).
pub fn make_folds(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<FoldSplit, TrainError> {
    if k < 2 {
        return Err(TrainError::InvalidConfig(format!(
            "fold count must be >= 2, got {k}"
        )));
    }
    let patients = manifest.patients();
    if patients.len() < k {
        return Err(TrainError::TooFewPatients {
            found: patients.len(),
            k,
        });
    }
    let (mut pos, mut neg): (Vec<&str>, Vec<&str>) = patients
        .into_iter()
        .partition(|p| manifest.patient_cancer(p));
    if pos.len() < k {
        return Err(TrainError::TooFewPositives {
            found: pos.len(),
            k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let assignments = pos
        .iter()
        .chain(&neg)
        .enumerate()
        .map(|(i, p)| (p.to_string(), i % k))
        .collect();
    Ok(FoldSplit { k, assignments })
}

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientEntry {
    pub patient_id: String,
    pub dataset: String,
}

/// Number of training patients to draw from each dataset. Datasets without
/// an entry contribute only test patients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_counts: BTreeMap<String, usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train_patients: BTreeSet<String>,
    pub test_patients: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn is_train(&self, patient_id: &str) -> bool {
        self.train_patients.contains(patient_id)
    }
}

/// Patient-level split. Within each dataset, IDs are sorted, shuffled with
/// a generator seeded from `spec.seed`, and the first `count` go to training.
pub fn split_patients(manifest: &[PatientEntry], spec: &SplitSpec) -> Result<DatasetSplit> {
    let mut by_dataset: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for e in manifest {
        by_dataset
            .entry(&e.dataset)
            .or_default()
            .insert(&e.patient_id);
    }
    for (name, &count) in &spec.train_counts {
        let available = by_dataset.get(name.as_str()).map_or(0, BTreeSet::len);
        if count > available {
            return Err(Error::Split(format!(
                "dataset `{name}` has {available} patients, {count} requested for training"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = DatasetSplit::default();
    for (name, ids) in by_dataset {
        let mut ids: Vec<&str> = ids.into_iter().collect();
        ids.shuffle(&mut rng);
        let count = spec.train_counts.get(name).copied().unwrap_or(0);
        for (i, id) in ids.into_iter().enumerate() {
            if i < count {
                split.train_patients.insert(id.to_string());
            } else {
                split.test_patients.insert(id.to_string());
            }
        }
    }
    let overlap: Vec<_> = split
        .train_patients
        .intersection(&split.test_patients)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Split(format!(
            "patient IDs shared across datasets: {overlap:?}"
        )));
    }
    Ok(split)
}

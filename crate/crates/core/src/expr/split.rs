use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_kv, write_kv};
use super::table::SpotTable;
use crate::error::{Result, SealError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(SealError::Malformed(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub assignments: BTreeMap<String, Split>,
    pub ratios: (f64, f64, f64),
    pub stratify_key: String,
}

impl SplitManifest {
    pub fn split_of(&self, patient: &str) -> Option<Split> {
        self.assignments.get(patient).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|s| **s == split).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let pairs: Vec<(String, String)> = self
            .assignments
            .iter()
            .map(|(k, v)| (k.clone(), v.as_str().to_string()))
            .collect();
        write_kv(path, &pairs)
    }

    pub fn read(path: &Path) -> Result<SplitManifest> {
        let kv = read_kv(path)?;
        let mut assignments = BTreeMap::new();
        for (k, v) in kv {
            assignments.insert(k, Split::parse(&v)?);
        }
        Ok(SplitManifest {
            assignments,
            ratios: (f64::NAN, f64::NAN, f64::NAN),
            stratify_key: "organ".into(),
        })
    }
}

/// Patient-level split stratified by organ.
///
/// A patient's organ is the organ holding most of its spots (ties by name).
/// Within each organ, patients are shuffled with the seeded generator and
/// walked in order; a patient lands in the split whose cumulative ratio band
/// contains the midpoint of its spot-count interval. Organs with fewer
/// patients than non-empty splits go entirely to train.
pub fn split_by_patient(samples: &[SpotTable], ratios: (f64, f64, f64), seed: u64) -> Result<SplitManifest> {
    let (rt, rv, rte) = ratios;
    if rt < 0.0 || rv < 0.0 || rte < 0.0 || ((rt + rv + rte) - 1.0).abs() > 1e-9 {
        return Err(SealError::InvalidArgument(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    if samples.is_empty() {
        return Err(SealError::Empty("no samples to split".into()));
    }
    // patient -> organ -> spots
    let mut spots: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for s in samples {
        *spots
            .entry(s.patient_id.as_str())
            .or_default()
            .entry(s.organ.as_str())
            .or_default() += s.n_spots();
    }
    let mut by_organ: BTreeMap<&str, Vec<(&str, usize)>> = BTreeMap::new();
    for (patient, organs) in &spots {
        let (organ, _) = organs
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .expect("patient has at least one sample");
        let total = organs.values().sum();
        by_organ.entry(organ).or_default().push((patient, total));
    }

    let n_splits = [rt, rv, rte].iter().filter(|r| **r > 0.0).count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    for patients in by_organ.values_mut() {
        patients.shuffle(&mut rng);
        if patients.len() < n_splits {
            for (p, _) in patients.iter() {
                assignments.insert(p.to_string(), Split::Train);
            }
            continue;
        }
        let total: usize = patients.iter().map(|(_, n)| n).sum();
        let mut before = 0usize;
        for (p, n) in patients.iter() {
            let mid = (before as f64 + *n as f64 / 2.0) / total.max(1) as f64;
            let split = if mid < rt {
                Split::Train
            } else if mid < rt + rv {
                Split::Val
            } else {
                Split::Test
            };
            assignments.insert(p.to_string(), split);
            before += n;
        }
    }
    Ok(SplitManifest {
        assignments,
        ratios,
        stratify_key: "organ".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::table::{SpotCoord, Stage};
    use ndarray::Array2;

    fn sample(id: &str, patient: &str, organ: &str, n: usize) -> SpotTable {
        SpotTable {
            sample_id: id.into(),
            patient_id: patient.into(),
            organ: organ.into(),
            domain_id: 0,
            barcodes: (0..n).map(|i| format!("b{i}")).collect(),
            coords: vec![
                SpotCoord {
                    row: 0,
                    col: 0,
                    x_um: 0.0,
                    y_um: 0.0
                };
                n
            ],
            values: Array2::zeros((n, 1)),
            gene_names: vec!["g".into()],
            stage: Stage::RawCounts,
        }
    }

    #[test]
    fn ten_patients_split_eight_one_one() {
        let s: Vec<SpotTable> = (0..10).map(|i| sample(&format!("s{i}"), &format!("p{i}"), "lung", 100)).collect();
        let m = split_by_patient(&s, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((m.count(Split::Train), m.count(Split::Val), m.count(Split::Test)), (8, 1, 1));
        assert_eq!(split_by_patient(&s, (0.8, 0.1, 0.1), 3).unwrap(), m);
        let all = split_by_patient(&s, (1.0, 0.0, 0.0), 3).unwrap();
        assert_eq!(all.count(Split::Train), 10);
    }

    #[test]
    fn patients_with_several_samples_stay_together() {
        let mut s = Vec::new();
        for p in 0..6 {
            for k in 0..3 {
                s.push(sample(&format!("s{p}_{k}"), &format!("p{p}"), if k == 0 { "skin" } else { "lung" }, 10 + k));
            }
        }
        let m = split_by_patient(&s, (0.5, 0.25, 0.25), 9).unwrap();
        assert_eq!(m.assignments.len(), 6);
    }

    #[test]
    fn small_organ_goes_to_train_and_bad_ratios_rejected() {
        let s = vec![sample("a", "p1", "kidney", 5), sample("b", "p2", "kidney", 5)];
        let m = split_by_patient(&s, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!(m.count(Split::Train), 2);
        assert!(split_by_patient(&s, (0.5, 0.1, 0.1), 1).is_err());
    }
}

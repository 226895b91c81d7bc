//! Patient-disjoint train/val/test splitting: seeded holdout, five-fold
//! rotation, or an explicit test-id list mirroring an official split.

use super::Sample;
use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SplitMode {
    Holdout,
    FiveFold { fold: usize },
    /// Text file with one test image id per line; remaining patients are
    /// split into train/val by the fractions.
    TestList { path: String },
}

// no deny_unknown_fields: serde cannot combine it with the flattened mode tag
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    #[serde(flatten)]
    pub mode: SplitMode,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.7,
            val_frac: 0.1,
            test_frac: 0.2,
            mode: SplitMode::Holdout,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.train_frac + self.val_frac + self.test_frac;
        if (s - 1.0).abs() > 1e-9 || self.train_frac <= 0.0 || self.val_frac <= 0.0 || self.test_frac < 0.0 {
            return Err(Error::Config(format!("split fractions {s} must sum to 1 with train/val > 0")));
        }
        if let SplitMode::FiveFold { fold } = self.mode {
            if fold >= 5 {
                return Err(Error::Config(format!("fold {fold} out of range 0..5")));
            }
        }
        Ok(())
    }
}

/// Index sets into the sample list.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Greedy patient-level fill of train/val/test by sample counts.
fn fill(groups: &[(String, Vec<usize>)], spec: &SplitSpec, total: usize, out: &mut Splits) -> Result<()> {
    let max_frac = spec.train_frac.max(spec.val_frac).max(spec.test_frac);
    let (mut nt, mut nv) = (0usize, 0usize);
    let t_target = spec.train_frac * total as f64;
    let v_target = spec.val_frac * total as f64;
    for (pid, idxs) in groups {
        if idxs.len() as f64 > max_frac * total as f64 {
            return Err(Error::Data(format!(
                "patient {pid} owns {} of {total} samples, more than the largest split fraction",
                idxs.len()
            )));
        }
        if (nt as f64) < t_target {
            out.train.extend(idxs);
            nt += idxs.len();
        } else if (nv as f64) < v_target {
            out.val.extend(idxs);
            nv += idxs.len();
        } else {
            out.test.extend(idxs);
        }
    }
    Ok(())
}

/// Split samples patient-disjointly. In five-fold mode the annotated and
/// unannotated subsets are each rotated by the fold and split 70/10/20.
pub fn split(samples: &[Sample], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut out = Splits::default();
    match &spec.mode {
        SplitMode::Holdout => {
            // keep annotated coverage in every split by splitting the two
            // subsets independently (patients never mix subsets for the
            // synthetic data; for real data a patient is "annotated" if any
            // of their images carries a box)
            let annotated_patients: HashSet<&str> = samples
                .iter()
                .filter(|s| s.annotated)
                .map(|s| s.patient_id.as_str())
                .collect();
            for (salt, keep) in [("annotated", true), ("plain", false)] {
                let subset: Vec<usize> = (0..samples.len())
                    .filter(|&i| annotated_patients.contains(samples[i].patient_id.as_str()) == keep)
                    .collect();
                if subset.is_empty() {
                    continue;
                }
                let subset_samples: Vec<&Sample> = subset.iter().map(|&i| &samples[i]).collect();
                let groups = patient_groups_ref(&subset_samples, &subset, spec.seed, salt);
                fill(&groups, spec, subset.len(), &mut out)?;
            }
        }
        SplitMode::FiveFold { fold } => {
            let annotated_patients: HashSet<&str> = samples
                .iter()
                .filter(|s| s.annotated)
                .map(|s| s.patient_id.as_str())
                .collect();
            for (salt, keep) in [("annotated", true), ("plain", false)] {
                let subset: Vec<usize> = (0..samples.len())
                    .filter(|&i| annotated_patients.contains(samples[i].patient_id.as_str()) == keep)
                    .collect();
                if subset.is_empty() {
                    continue;
                }
                let subset_samples: Vec<&Sample> = subset.iter().map(|&i| &samples[i]).collect();
                let mut groups = patient_groups_ref(&subset_samples, &subset, spec.seed, salt);
                let shift = fold * groups.len() / 5;
                groups.rotate_left(shift);
                fill(&groups, spec, subset.len(), &mut out)?;
            }
        }
        SplitMode::TestList { path } => {
            let ids: HashSet<String> = std::fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("{path}: {e}")))?
                .lines()
                .map(|l| l.trim().to_string())
                .filter(|l| !l.is_empty())
                .collect();
            let test_patients: HashSet<&str> = samples
                .iter()
                .filter(|s| ids.contains(&s.image_id))
                .map(|s| s.patient_id.as_str())
                .collect();
            let rest: Vec<usize> = (0..samples.len())
                .filter(|&i| !test_patients.contains(samples[i].patient_id.as_str()))
                .collect();
            out.test = (0..samples.len())
                .filter(|&i| test_patients.contains(samples[i].patient_id.as_str()))
                .collect();
            // renormalize train/val over the remainder
            let tv = spec.train_frac + spec.val_frac;
            let sub_spec = SplitSpec {
                train_frac: spec.train_frac / tv,
                val_frac: spec.val_frac / tv,
                test_frac: 0.0,
                mode: SplitMode::Holdout,
                seed: spec.seed,
            };
            let subset_samples: Vec<&Sample> = rest.iter().map(|&i| &samples[i]).collect();
            let groups = patient_groups_ref(&subset_samples, &rest, spec.seed, "official-rest");
            fill(&groups, &sub_spec, rest.len(), &mut out)?;
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

fn patient_groups_ref(
    subset: &[&Sample],
    global_idx: &[usize],
    seed: u64,
    salt: &str,
) -> Vec<(String, Vec<usize>)> {
    let mut by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (local, s) in subset.iter().enumerate() {
        by_patient.entry(s.patient_id.clone()).or_default().push(global_idx[local]);
    }
    let mut groups: Vec<(String, Vec<usize>)> = by_patient.into_iter().collect();
    let mut r = rng::stream(seed, "split", &[rng::tag(salt)]);
    groups.shuffle(&mut r);
    groups
}

/// Write split manifests: one text file of image ids per split.
pub fn write_manifests(dir: &Path, samples: &[Sample], splits: &Splits) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, idxs) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let mut f = std::fs::File::create(dir.join(format!("split_{name}.txt")))?;
        for &i in idxs {
            writeln!(f, "{}", samples[i].image_id)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn sample(i: usize, patient: usize, annotated: bool) -> Sample {
        Sample {
            image_id: format!("img{i:04}.png"),
            pixels: Array2::zeros((4, 4)),
            labels: vec![0],
            patient_id: format!("p{patient:03}"),
            boxes: vec![],
            annotated,
        }
    }

    fn corpus(n: usize, per_patient: usize) -> Vec<Sample> {
        (0..n).map(|i| sample(i, i / per_patient, i % 10 == 0)).collect()
    }

    fn patients<'a>(samples: &'a [Sample], idxs: &[usize]) -> HashSet<&'a str> {
        idxs.iter().map(|&i| samples[i].patient_id.as_str()).collect()
    }

    #[test]
    fn splits_are_patient_disjoint_and_cover_everything() {
        let samples = corpus(200, 4);
        let spec = SplitSpec::default();
        let s = split(&samples, &spec).unwrap();
        let (pt, pv, pe) = (patients(&samples, &s.train), patients(&samples, &s.val), patients(&samples, &s.test));
        assert!(pt.is_disjoint(&pv) && pt.is_disjoint(&pe) && pv.is_disjoint(&pe));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 200);
        // fractions realized within one patient group (4 samples)
        assert!((s.train.len() as f64 - 140.0).abs() <= 8.0);
        assert!((s.val.len() as f64 - 20.0).abs() <= 8.0);
    }

    #[test]
    fn same_seed_reproduces_and_different_seed_differs() {
        let samples = corpus(120, 3);
        let spec = SplitSpec::default();
        let a = split(&samples, &spec).unwrap();
        let b = split(&samples, &spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let c = split(&samples, &SplitSpec { seed: 7, ..SplitSpec::default() }).unwrap();
        assert_ne!(a.train, c.train);
    }

    #[test]
    fn oversized_patient_is_an_error() {
        let mut samples = corpus(20, 2);
        for s in samples.iter_mut().take(18) {
            s.patient_id = "p000".into();
            s.annotated = false;
        }
        for s in samples.iter_mut() {
            s.annotated = false;
        }
        let err = split(&samples, &SplitSpec::default()).unwrap_err();
        assert!(err.to_string().contains("p000"));
    }

    #[test]
    fn five_folds_shift_the_test_set() {
        let samples = corpus(100, 2);
        let f0 = split(&samples, &SplitSpec { mode: SplitMode::FiveFold { fold: 0 }, ..SplitSpec::default() }).unwrap();
        let f2 = split(&samples, &SplitSpec { mode: SplitMode::FiveFold { fold: 2 }, ..SplitSpec::default() }).unwrap();
        assert_ne!(f0.test, f2.test);
        let pt = patients(&samples, &f2.train);
        let pe = patients(&samples, &f2.test);
        assert!(pt.is_disjoint(&pe));
    }

    #[test]
    fn test_list_mode_pins_the_test_set() {
        let samples = corpus(60, 2);
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("test_list.txt");
        std::fs::write(&list, "img0000.png\nimg0005.png\n").unwrap();
        let spec = SplitSpec {
            mode: SplitMode::TestList { path: list.to_string_lossy().into_owned() },
            ..SplitSpec::default()
        };
        let s = split(&samples, &spec).unwrap();
        // both listed images (and their patients' other images) are in test
        assert!(s.test.contains(&0) && s.test.contains(&5));
        let pt = patients(&samples, &s.train);
        let pe = patients(&samples, &s.test);
        assert!(pt.is_disjoint(&pe));
    }

    #[test]
    fn manifests_round_trip() {
        let samples = corpus(30, 3);
        let s = split(&samples, &SplitSpec::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifests(dir.path(), &samples, &s).unwrap();
        let train = std::fs::read_to_string(dir.path().join("split_train.txt")).unwrap();
        assert_eq!(train.lines().count(), s.train.len());
    }
}

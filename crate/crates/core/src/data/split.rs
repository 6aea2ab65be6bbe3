//! Train/test split protocols: random (S1), cross-subject (S2) and
//! cross-environment (S3).

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, DatasetIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Random 3:1 split over samples.
    S1,
    /// Disjoint subjects, 80/20 (32/8 for 40 subjects).
    S2,
    /// One held-out environment.
    S3,
}

impl std::str::FromStr for SplitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "S1" | "RANDOM" => Ok(Self::S1),
            "S2" | "CROSS_SUBJECT" => Ok(Self::S2),
            "S3" | "CROSS_ENVIRONMENT" => Ok(Self::S3),
            other => Err(format!("unknown split strategy {other:?} (expected S1, S2 or S3)")),
        }
    }
}

impl std::fmt::Display for SplitStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub strategy: SplitStrategy,
    pub seed: u64,
    /// S1 fraction of samples held out.
    pub test_ratio: f64,
    /// S2 explicit test subjects; chosen by seed when empty.
    pub test_subjects: Vec<String>,
    /// S3 explicit test environment; chosen by seed when absent.
    pub test_environment: Option<String>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            strategy: SplitStrategy::S1,
            seed: 0,
            test_ratio: 0.25,
            test_subjects: Vec::new(),
            test_environment: None,
        }
    }
}

impl SplitSpec {
    pub fn new(strategy: SplitStrategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            ..Self::default()
        }
    }
}

/// Number of held-out subjects for S2: 20% rounded, at least one, leaving at
/// least one for training.
pub fn s2_test_subject_count(n_subjects: usize) -> usize {
    ((n_subjects as f64 * 0.2).round() as usize).clamp(1, n_subjects - 1)
}

/// Partitions `index` into `(train, test)`. Deterministic in `spec.seed`.
pub fn make_split(index: &DatasetIndex, spec: &SplitSpec) -> Result<(DatasetIndex, DatasetIndex), DataError> {
    if index.is_empty() {
        return Err(DataError::Split("cannot split an empty index".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let entries = index.entries();
    let is_test: Vec<bool> = match spec.strategy {
        SplitStrategy::S1 => {
            if !(0.0..1.0).contains(&spec.test_ratio) {
                return Err(DataError::Split(format!("test_ratio {} outside [0, 1)", spec.test_ratio)));
            }
            let n = entries.len();
            let mut n_test = (n as f64 * spec.test_ratio).round() as usize;
            if n >= 2 && spec.test_ratio > 0.0 {
                n_test = n_test.clamp(1, n - 1);
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut flags = vec![false; n];
            for &i in &order[..n_test] {
                flags[i] = true;
            }
            flags
        }
        SplitStrategy::S2 => {
            let subjects: Vec<String> = index.counts_by_subject().into_keys().collect();
            if subjects.len() < 2 {
                return Err(DataError::Split(format!(
                    "cross-subject split needs at least 2 subjects, corpus has {}",
                    subjects.len()
                )));
            }
            let test: BTreeSet<String> = if spec.test_subjects.is_empty() {
                let mut shuffled = subjects.clone();
                shuffled.shuffle(&mut rng);
                shuffled.truncate(s2_test_subject_count(subjects.len()));
                shuffled.into_iter().collect()
            } else {
                for s in &spec.test_subjects {
                    if !subjects.contains(s) {
                        return Err(DataError::Split(format!("test subject {s:?} not in corpus")));
                    }
                }
                let chosen: BTreeSet<String> = spec.test_subjects.iter().cloned().collect();
                if chosen.len() == subjects.len() {
                    return Err(DataError::Split("every subject is held out; nothing left to train on".into()));
                }
                chosen
            };
            entries.iter().map(|e| test.contains(&e.subject_id)).collect()
        }
        SplitStrategy::S3 => {
            let envs: Vec<String> = index.counts_by_environment().into_keys().collect();
            if envs.len() < 2 {
                return Err(DataError::Split(format!(
                    "cross-environment split needs at least 2 environments, corpus has {}",
                    envs.len()
                )));
            }
            let test = match &spec.test_environment {
                Some(e) if envs.contains(e) => e.clone(),
                Some(e) => return Err(DataError::Split(format!("test environment {e:?} not in corpus"))),
                None => envs.choose(&mut rng).expect("non-empty").clone(),
            };
            entries.iter().map(|e| e.environment_id == test).collect()
        }
    };
    let train: Vec<usize> = (0..entries.len()).filter(|&i| !is_test[i]).collect();
    let test: Vec<usize> = (0..entries.len()).filter(|&i| is_test[i]).collect();
    Ok((index.subset(&train), index.subset(&test)))
}

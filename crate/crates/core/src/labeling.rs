//! Three-class cognitive-state labels from task performance and NASA-TLX.
//!
//! Each trial gets a combined score; the pooled cohort's first and third
//! quartiles split the scores into low, transition and high states.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{Recording, Task};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("quartile labelling needs at least 4 scores, got {0}")]
    TooFewScores(usize),
    #[error("unknown cognitive state {0:?}")]
    UnknownState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CognitiveState {
    Low,
    Transition,
    High,
}

impl CognitiveState {
    pub const ALL: [CognitiveState; 3] = [CognitiveState::Low, CognitiveState::Transition, CognitiveState::High];

    /// Class index used by the classifiers.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for CognitiveState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CognitiveState::Low => "low",
            CognitiveState::Transition => "transition",
            CognitiveState::High => "high",
        })
    }
}

impl std::str::FromStr for CognitiveState {
    type Err = LabelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(CognitiveState::Low),
            "transition" => Ok(CognitiveState::Transition),
            "high" => Ok(CognitiveState::High),
            other => Err(LabelError::UnknownState(other.to_string())),
        }
    }
}

/// Average of performance and workload. With `invert_tlx` the workload enters
/// as `1 - nasa_tlx`, so heavy workload pulls the score down.
pub fn combined_score(performance: f64, nasa_tlx: f64, invert_tlx: bool) -> Result<f64, LabelError> {
    if !(0.0..=1.0).contains(&performance) {
        return Err(LabelError::OutOfRange { name: "performance", value: performance });
    }
    if !(0.0..=1.0).contains(&nasa_tlx) {
        return Err(LabelError::OutOfRange { name: "nasa_tlx", value: nasa_tlx });
    }
    let tlx = if invert_tlx { 1.0 - nasa_tlx } else { nasa_tlx };
    Ok((performance + tlx) / 2.0)
}

/// Quantile `q` of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// First and third quartiles of `scores`.
pub fn quartiles(scores: &[f64]) -> Result<(f64, f64), LabelError> {
    if scores.len() < 4 {
        return Err(LabelError::TooFewScores(scores.len()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&sorted, 0.25), quantile_sorted(&sorted, 0.75)))
}

/// Labels each score against the cohort quartiles. Scores equal to a
/// quartile fall into the transition class.
pub fn quartile_label(scores: &[f64]) -> Result<Vec<CognitiveState>, LabelError> {
    let (q1, q3) = quartiles(scores)?;
    Ok(scores
        .iter()
        .map(|&s| {
            if s < q1 {
                CognitiveState::Low
            } else if s > q3 {
                CognitiveState::High
            } else {
                CognitiveState::Transition
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrial {
    pub subject_id: String,
    pub task: Task,
    pub difficulty: u8,
    pub performance: f64,
    pub nasa_tlx: f64,
    pub score: f64,
    pub state: CognitiveState,
}

/// Labels every annotated round of a cohort using pooled quartiles.
pub fn label_cohort(recordings: &[Recording], invert_tlx: bool) -> Result<Vec<LabeledTrial>, LabelError> {
    label_rounds(
        recordings.iter().flat_map(|r| r.annotations().iter().map(move |a| (r.subject_id(), a))),
        invert_tlx,
    )
}

/// Same as [`label_cohort`] over `(subject_id, round)` pairs.
pub fn label_rounds<'a, I>(rounds: I, invert_tlx: bool) -> Result<Vec<LabeledTrial>, LabelError>
where
    I: IntoIterator<Item = (&'a str, &'a crate::recording::TaskRound)>,
{
    let mut trials = Vec::new();
    for (subject, r) in rounds {
        let score = combined_score(r.performance, r.nasa_tlx, invert_tlx)?;
        trials.push(LabeledTrial {
            subject_id: subject.to_string(),
            task: r.task,
            difficulty: r.difficulty,
            performance: r.performance,
            nasa_tlx: r.nasa_tlx,
            score,
            state: CognitiveState::Transition,
        });
    }
    let scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    for (t, s) in trials.iter_mut().zip(quartile_label(&scores)?) {
        t.state = s;
    }
    Ok(trials)
}

/// Writes `subject_id,task,difficulty,performance,nasa_tlx,score,state`.
pub fn write_labels_csv(trials: &[LabeledTrial], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "subject_id,task,difficulty,performance,nasa_tlx,score,state")?;
    for t in trials {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            t.subject_id, t.task, t.difficulty, t.performance, t.nasa_tlx, t.score, t.state
        )?;
    }
    out.flush()
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<LabeledTrial>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let field = |k: usize| rec.get(k).ok_or_else(|| format!("row {}: missing field {k}", i + 1));
        let num = |k: usize| -> Result<f64, String> {
            field(k)?.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1))
        };
        out.push(LabeledTrial {
            subject_id: field(0)?.to_string(),
            task: field(1)?.parse()?,
            difficulty: field(2)?.parse().map_err(|e| format!("row {}: {e}", i + 1))?,
            performance: num(3)?,
            nasa_tlx: num(4)?,
            score: num(5)?,
            state: field(6)?.parse().map_err(|e: LabelError| e.to_string())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use CognitiveState::*;

    #[test]
    fn combined_score_cases() {
        assert_eq!(combined_score(1.0, 0.0, true).unwrap(), 1.0);
        assert_eq!(combined_score(0.0, 1.0, true).unwrap(), 0.0);
        // N-back level 1 averages.
        assert!((combined_score(0.8315, 0.4770, true).unwrap() - 0.67725).abs() < 1e-12);
        assert!((combined_score(0.8315, 0.4770, false).unwrap() - 0.65425).abs() < 1e-12);
        assert!(combined_score(1.2, 0.0, true).is_err());
        assert!(combined_score(0.5, -0.1, true).is_err());
    }

    #[test]
    fn uniform_grid_splits_into_quarters() {
        let scores: Vec<f64> = (0..8).map(|i| i as f64 / 7.0).collect();
        let labels = quartile_label(&scores).unwrap();
        assert_eq!(labels, vec![Low, Low, Transition, Transition, Transition, Transition, High, High]);
    }

    #[test]
    fn equal_scores_are_all_transition() {
        assert_eq!(quartile_label(&[0.4; 6]).unwrap(), vec![Transition; 6]);
    }

    #[test]
    fn too_few_scores() {
        assert_eq!(quartile_label(&[0.1, 0.2, 0.3]), Err(LabelError::TooFewScores(3)));
    }

    #[test]
    fn matches_sort_and_threshold_reference() {
        use rand::Rng;
        let mut rng = crate::rng::stream(11, "labels");
        let scores: Vec<f64> = (0..270).map(|_| rng.random::<f64>()).collect();
        // Reference: index arithmetic on the sorted copy.
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let at = |p: f64| {
            let pos = p * 269.0;
            let i = pos as usize;
            sorted[i] * (1.0 - (pos - i as f64)) + sorted[(i + 1).min(269)] * (pos - i as f64)
        };
        let (q1, q3) = (at(0.25), at(0.75));
        let expected_low = scores.iter().filter(|&&s| s < q1).count();
        let expected_high = scores.iter().filter(|&&s| s > q3).count();
        let labels = quartile_label(&scores).unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == Low).count(), expected_low);
        assert_eq!(labels.iter().filter(|&&l| l == High).count(), expected_high);
        assert_eq!(expected_low, 68);
        assert_eq!(expected_high, 68);
    }

    proptest! {
        #[test]
        fn monotone_transform_preserves_labels(scores in prop::collection::vec(0.0f64..1.0, 4..60)) {
            let base = quartile_label(&scores).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| s.powi(3) * 5.0 - 2.0).collect();
            // Cubing can merge near-equal scores through rounding.
            let mut distinct = mapped.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            let mut orig = scores.clone();
            orig.sort_by(f64::total_cmp);
            orig.dedup();
            prop_assume!(distinct.len() == orig.len());
            // Quartiles interpolate between the same two order statistics
            // before and after the map, so every comparison is preserved.
            prop_assert_eq!(quartile_label(&mapped).unwrap(), base);
        }

        #[test]
        fn permutation_permutes_labels(scores in prop::collection::vec(0.0f64..1.0, 4..40), rot in 0usize..40) {
            let labels = quartile_label(&scores).unwrap();
            let k = rot % scores.len();
            let mut rotated = scores.clone();
            rotated.rotate_left(k);
            let mut expected = labels.clone();
            expected.rotate_left(k);
            prop_assert_eq!(quartile_label(&rotated).unwrap(), expected);
        }

        #[test]
        fn extreme_classes_are_bounded(scores in prop::collection::hash_set(0u32..100_000, 4..80)) {
            let scores: Vec<f64> = scores.into_iter().map(|v| v as f64 / 1e5).collect();
            let labels = quartile_label(&scores).unwrap();
            let cap = scores.len().div_ceil(4);
            prop_assert!(labels.iter().filter(|&&l| l == Low).count() <= cap);
            prop_assert!(labels.iter().filter(|&&l| l == High).count() <= cap);
        }
    }
}

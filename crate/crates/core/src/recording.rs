//! Recordings, task annotations and fixed-length epochs.

use std::fmt;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::CognitiveState;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("channel {0} absent")]
    MissingChannel(String),
    #[error("row {row}, field {field}: non-numeric value {value:?}")]
    NonNumeric { row: usize, field: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("row {row}: time column {value} breaks 1/fs spacing")]
    TimeColumn { row: usize, value: f64 },
    #[error("malformed csv: {0}")]
    Csv(String),
    #[error("malformed sidecar {path}: {message}")]
    Sidecar { path: String, message: String },
    #[error("sampling_rate must be positive, got {0}")]
    SamplingRate(f64),
    #[error("rounds {first} and {second} overlap")]
    OverlappingRounds { first: usize, second: usize },
    #[error("round {index}: {message}")]
    InvalidRound { index: usize, message: String },
    #[error("sample matrix has {found} channels, expected {expected}")]
    ChannelCount { expected: usize, found: usize },
    #[error("recording holds no samples")]
    Empty,
    #[error("window of {window} samples is longer than round {round} ({length} samples)")]
    WindowTooLong { round: usize, window: usize, length: usize },
    #[error("invalid epoching parameters: {0}")]
    EpochParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nback,
    Arithmetic,
    Graphic,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Nback, Task::Arithmetic, Task::Graphic];
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Nback => "nback",
            Task::Arithmetic => "arithmetic",
            Task::Graphic => "graphic",
        })
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nback" => Ok(Task::Nback),
            "arithmetic" => Ok(Task::Arithmetic),
            "graphic" => Ok(Task::Graphic),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// One annotated task round inside a recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRound {
    pub task: Task,
    /// Difficulty level, 1 to 3.
    pub difficulty: u8,
    pub start_s: f64,
    pub end_s: f64,
    /// Fraction of correct responses.
    pub performance: f64,
    /// NASA-TLX workload rescaled to [0, 1].
    pub nasa_tlx: f64,
}

impl TaskRound {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Sample range `[start, end)` covered by the round at rate `fs`.
    pub fn sample_range(&self, fs: f64) -> (usize, usize) {
        let start = (self.start_s * fs - 1e-6).ceil().max(0.0) as usize;
        let end = (self.end_s * fs + 1e-6).floor() as usize;
        (start, end.max(start))
    }

    fn validate(&self, index: usize) -> Result<(), DataError> {
        let bad = |message: String| DataError::InvalidRound { index, message };
        if !(1..=3).contains(&self.difficulty) {
            return Err(bad(format!("difficulty {} outside 1..=3", self.difficulty)));
        }
        if !(self.start_s.is_finite() && self.end_s.is_finite() && self.start_s < self.end_s) {
            return Err(bad(format!("start {} must precede end {}", self.start_s, self.end_s)));
        }
        if !(0.0..=1.0).contains(&self.performance) {
            return Err(bad(format!("performance {} outside [0,1]", self.performance)));
        }
        if !(0.0..=1.0).contains(&self.nasa_tlx) {
            return Err(bad(format!("nasa_tlx {} outside [0,1]", self.nasa_tlx)));
        }
        Ok(())
    }
}

/// Multi-channel EEG in microvolts, channel-major, in montage order.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    subject_id: String,
    gender: Gender,
    sampling_rate: f64,
    channels: Vec<String>,
    samples: Array2<f64>,
    annotations: Vec<TaskRound>,
    stage: Option<String>,
}

impl Recording {
    pub fn new(
        subject_id: impl Into<String>,
        gender: Gender,
        sampling_rate: f64,
        channels: Vec<String>,
        samples: Array2<f64>,
        annotations: Vec<TaskRound>,
    ) -> Result<Self, DataError> {
        if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
            return Err(DataError::SamplingRate(sampling_rate));
        }
        if samples.nrows() != channels.len() {
            return Err(DataError::ChannelCount { expected: channels.len(), found: samples.nrows() });
        }
        if samples.ncols() == 0 {
            return Err(DataError::Empty);
        }
        let duration = samples.ncols() as f64 / sampling_rate;
        for (i, r) in annotations.iter().enumerate() {
            r.validate(i)?;
            if r.start_s < 0.0 || r.end_s > duration + 1e-9 {
                return Err(DataError::InvalidRound {
                    index: i,
                    message: format!(
                        "interval [{}, {}] exceeds recording duration {duration}",
                        r.start_s, r.end_s
                    ),
                });
            }
        }
        let mut order: Vec<usize> = (0..annotations.len()).collect();
        order.sort_by(|&a, &b| annotations[a].start_s.total_cmp(&annotations[b].start_s));
        for w in order.windows(2) {
            if annotations[w[1]].start_s < annotations[w[0]].end_s {
                return Err(DataError::OverlappingRounds { first: w[0], second: w[1] });
            }
        }
        Ok(Recording {
            subject_id: subject_id.into(),
            gender,
            sampling_rate,
            channels,
            samples,
            annotations,
            stage: None,
        })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn samples(&self) -> ArrayView2<'_, f64> {
        self.samples.view()
    }

    pub fn annotations(&self) -> &[TaskRound] {
        &self.annotations
    }

    pub fn n_samples(&self) -> usize {
        self.samples.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.samples.nrows()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.sampling_rate
    }

    /// Processing stage recorded in the sidecar, if any.
    pub fn stage(&self) -> Option<&str> {
        self.stage.as_deref()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    /// Same metadata with new samples of identical shape.
    pub fn with_samples(&self, samples: Array2<f64>) -> Result<Self, DataError> {
        if samples.dim() != self.samples.dim() {
            return Err(DataError::ChannelCount { expected: self.n_channels(), found: samples.nrows() });
        }
        Ok(Recording { samples, ..self.clone() })
    }

    pub fn with_stage(mut self, stage: impl Into<String>) -> Self {
        self.stage = Some(stage.into());
        self
    }

    /// Samples of round `index`, all channels.
    pub fn round_samples(&self, index: usize) -> ArrayView2<'_, f64> {
        let (a, b) = self.annotations[index].sample_range(self.sampling_rate);
        let b = b.min(self.n_samples());
        self.samples.slice(s![.., a..b])
    }
}

/// A fixed-length window cut from one task round.
#[derive(Debug, Clone, PartialEq)]
pub struct Epoch {
    pub recording_id: String,
    pub round_index: usize,
    /// First sample of the window within the recording.
    pub start_sample: usize,
    pub samples: Array2<f64>,
    pub label: Option<CognitiveState>,
}

/// Window length in samples and stride for the given parameters.
pub fn epoch_geometry(fs: f64, window_s: f64, overlap: f64) -> Result<(usize, usize), DataError> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(DataError::EpochParams(format!("overlap {overlap} outside [0, 1)")));
    }
    let window = (window_s * fs).round();
    if !(window >= 2.0) {
        return Err(DataError::EpochParams(format!("window of {window} samples is shorter than 2")));
    }
    let window = window as usize;
    let stride = ((window as f64) * (1.0 - overlap)).round().max(1.0) as usize;
    Ok((window, stride))
}

/// Number of windows of length `window` at `stride` inside `length` samples.
pub fn epoch_count(length: usize, window: usize, stride: usize) -> usize {
    if length < window {
        0
    } else {
        (length - window) / stride + 1
    }
}

/// Cuts every round into windows of `window_s` seconds with fractional `overlap`.
///
/// Windows never straddle a round boundary; partial tail windows are dropped.
pub fn epoch_recording(rec: &Recording, window_s: f64, overlap: f64) -> Result<Vec<Epoch>, DataError> {
    let (window, stride) = epoch_geometry(rec.sampling_rate(), window_s, overlap)?;
    let mut epochs = Vec::new();
    for (index, round) in rec.annotations().iter().enumerate() {
        let (start, end) = round.sample_range(rec.sampling_rate());
        let end = end.min(rec.n_samples());
        let length = end - start;
        if length < window {
            return Err(DataError::WindowTooLong { round: index, window, length });
        }
        for k in 0..epoch_count(length, window, stride) {
            let a = start + k * stride;
            epochs.push(Epoch {
                recording_id: rec.subject_id().to_string(),
                round_index: index,
                start_sample: a,
                samples: rec.samples.slice(s![.., a..a + window]).to_owned(),
                label: None,
            });
        }
    }
    Ok(epochs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round(start: f64, end: f64) -> TaskRound {
        TaskRound { task: Task::Nback, difficulty: 1, start_s: start, end_s: end, performance: 0.5, nasa_tlx: 0.5 }
    }

    fn rec(fs: f64, n: usize, rounds: Vec<TaskRound>) -> Result<Recording, DataError> {
        Recording::new("s", Gender::Male, fs, vec!["a".into(), "b".into()], Array2::zeros((2, n)), rounds)
    }

    #[test]
    fn ten_second_round_epoch_counts() {
        let r = rec(100.0, 1000, vec![round(0.0, 10.0)]).unwrap();
        assert_eq!(epoch_recording(&r, 2.0, 0.5).unwrap().len(), 9);
        assert_eq!(epoch_recording(&r, 2.0, 0.0).unwrap().len(), 5);
    }

    #[test]
    fn epochs_stay_inside_their_round() {
        let r = rec(50.0, 2000, vec![round(1.0, 13.3), round(14.0, 30.0), round(31.0, 39.9)]).unwrap();
        let epochs = epoch_recording(&r, 1.7, 0.3).unwrap();
        let (w, stride) = epoch_geometry(50.0, 1.7, 0.3).unwrap();
        for (i, round) in r.annotations().iter().enumerate() {
            let (a, b) = round.sample_range(50.0);
            let mine: Vec<_> = epochs.iter().filter(|e| e.round_index == i).collect();
            assert_eq!(mine.len(), epoch_count(b - a, w, stride));
            assert_eq!(mine.len(), (b - a - w) / stride + 1);
            for e in mine {
                assert!(e.start_sample >= a && e.start_sample + w <= b);
                assert_eq!(e.samples.ncols(), w);
            }
        }
    }

    #[test]
    fn window_longer_than_round_names_the_round() {
        let r = rec(100.0, 1000, vec![round(0.0, 5.0), round(5.0, 6.0)]).unwrap();
        match epoch_recording(&r, 2.0, 0.5) {
            Err(DataError::WindowTooLong { round, .. }) => assert_eq!(round, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(matches!(rec(0.0, 10, vec![]), Err(DataError::SamplingRate(_))));
        assert!(matches!(
            rec(10.0, 100, vec![round(0.0, 5.0), round(4.0, 6.0)]),
            Err(DataError::OverlappingRounds { .. })
        ));
        assert!(matches!(rec(10.0, 100, vec![round(5.0, 11.0)]), Err(DataError::InvalidRound { .. })));
        assert!(epoch_geometry(100.0, 2.0, 1.0).is_err());
        assert!(epoch_geometry(100.0, 0.01, 0.0).is_err());
    }
}

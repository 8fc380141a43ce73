//! Classifier datasets cut from labelled, pre-processed recordings.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connectivity::pcc;
use crate::labeling::LabeledTrial;
use crate::neural::{self, NeuralError, Tensor};
use crate::preprocess::{design_filter, FilterSpec, PreprocessError};
use crate::recording::{epoch_count, epoch_geometry, DataError, Recording};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Filter(#[from] PreprocessError),
    #[error("subject {subject}: {message}")]
    Labels { subject: String, message: String },
    #[error("no epochs were produced")]
    Empty,
    #[error("invalid dataset settings: {0}")]
    Config(String),
}

/// What the network sees for each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputKind {
    /// Decimated, scaled samples as a `[1, channels, times]` map.
    #[default]
    Epochs,
    /// Upper-triangle Pearson coefficients as a `[1, 1, pairs]` map.
    Connectivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub window_s: f64,
    pub overlap: f64,
    /// Keep every `decimation`-th sample after the anti-alias low-pass.
    pub decimation: usize,
    pub antialias_hz: f64,
    /// Evenly spaced subset of each round's windows; `None` keeps all.
    pub max_epochs_per_round: Option<usize>,
    /// Samples are divided by this many microvolts.
    pub scale_uv: f64,
    pub input: InputKind,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            window_s: 2.0,
            overlap: 0.5,
            decimation: 8,
            antialias_hz: 25.0,
            max_epochs_per_round: Some(4),
            scale_uv: 10.0,
            input: InputKind::Epochs,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self, fs: f64) -> Result<(), DatasetError> {
        if self.decimation == 0 {
            return Err(DatasetError::Config("decimation must be at least 1".into()));
        }
        if !(self.scale_uv > 0.0 && self.scale_uv.is_finite()) {
            return Err(DatasetError::Config(format!("scale {} must be positive", self.scale_uv)));
        }
        if self.max_epochs_per_round == Some(0) {
            return Err(DatasetError::Config("max_epochs_per_round must be positive".into()));
        }
        let nyquist = fs / self.decimation as f64 / 2.0;
        if self.decimation > 1 && !(self.antialias_hz > 0.0 && self.antialias_hz < nyquist) {
            return Err(DatasetError::Config(format!(
                "anti-alias cutoff {} Hz must lie below the decimated Nyquist {nyquist} Hz",
                self.antialias_hz
            )));
        }
        epoch_geometry(fs, self.window_s, self.overlap)?;
        Ok(())
    }
}

/// Where one epoch came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSource {
    pub subject_id: String,
    pub round_index: usize,
    pub start_sample: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDataset {
    channels: Vec<String>,
    sampling_rate: f64,
    n_times: usize,
    /// `[epoch][channel][time]`, flattened.
    samples: Vec<f64>,
    labels: Vec<usize>,
    sources: Vec<EpochSource>,
    input: InputKind,
}

pub const ANTIALIAS_ORDER: usize = 8;

impl EpochDataset {
    pub fn new(
        channels: Vec<String>,
        sampling_rate: f64,
        n_times: usize,
        samples: Vec<f64>,
        labels: Vec<usize>,
        sources: Vec<EpochSource>,
    ) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Empty);
        }
        if samples.len() != labels.len() * channels.len() * n_times || sources.len() != labels.len() {
            return Err(DatasetError::Config("sample buffer does not match the epoch count".into()));
        }
        Ok(EpochDataset { channels, sampling_rate, n_times, samples, labels, sources, input: InputKind::Epochs })
    }

    /// Stacks datasets with identical channels, rate and window.
    pub fn concat(parts: &[EpochDataset]) -> Result<EpochDataset, DatasetError> {
        let first = parts.first().ok_or(DatasetError::Empty)?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.channels != first.channels || p.sampling_rate != first.sampling_rate || p.n_times != first.n_times || p.input != first.input {
                return Err(DatasetError::Config("datasets differ in channels, rate, window or input kind".into()));
            }
            out.samples.extend_from_slice(&p.samples);
            out.labels.extend_from_slice(&p.labels);
            out.sources.extend_from_slice(&p.sources);
        }
        Ok(out)
    }

    pub fn with_input(mut self, input: InputKind) -> Self {
        self.input = input;
        self
    }

    pub fn input(&self) -> InputKind {
        self.input
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn sampling_rate(&self) -> f64 {
        self.sampling_rate
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labels.clone()
    }

    pub fn n_classes(&self) -> usize {
        3
    }

    pub fn sources(&self) -> &[EpochSource] {
        &self.sources
    }

    pub fn subjects(&self) -> Vec<&str> {
        self.sources.iter().map(|s| s.subject_id.as_str()).collect()
    }

    /// Samples of epoch `i` as `channels × times`.
    pub fn epoch(&self, i: usize) -> &[f64] {
        let size = self.channels.len() * self.n_times;
        &self.samples[i * size..(i + 1) * size]
    }

    /// Height and width of the single input map.
    pub fn model_dims(&self) -> (usize, usize) {
        match self.input {
            InputKind::Epochs => (self.n_channels(), self.n_times),
            InputKind::Connectivity => (1, self.n_channels() * (self.n_channels() - 1) / 2),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> EpochDataset {
        let mut samples = Vec::with_capacity(idx.len() * self.n_channels() * self.n_times);
        for &i in idx {
            samples.extend_from_slice(self.epoch(i));
        }
        EpochDataset {
            channels: self.channels.clone(),
            sampling_rate: self.sampling_rate,
            n_times: self.n_times,
            samples,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            sources: idx.iter().map(|&i| self.sources[i].clone()).collect(),
            input: self.input,
        }
    }

    /// Keeps the named channels in the given order.
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<EpochDataset, String> {
        let rows: Vec<usize> = names
            .iter()
            .map(|n| self.channels.iter().position(|c| c == n.as_ref()).ok_or_else(|| n.as_ref().to_string()))
            .collect::<Result<_, _>>()?;
        let mut samples = Vec::with_capacity(self.len() * rows.len() * self.n_times);
        for i in 0..self.len() {
            let e = self.epoch(i);
            for &r in &rows {
                samples.extend_from_slice(&e[r * self.n_times..(r + 1) * self.n_times]);
            }
        }
        Ok(EpochDataset {
            channels: names.iter().map(|n| n.as_ref().to_string()).collect(),
            sampling_rate: self.sampling_rate,
            n_times: self.n_times,
            samples,
            labels: self.labels.clone(),
            sources: self.sources.clone(),
            input: self.input,
        })
    }

    /// Pearson coefficients of every channel pair `(i < j)` of one epoch.
    /// Constant channels contribute 0.
    pub fn connectivity_features(&self, i: usize) -> Vec<f64> {
        let e = self.epoch(i);
        let t = self.n_times;
        let c = self.n_channels();
        let mut out = Vec::with_capacity(c * (c - 1) / 2);
        for a in 0..c {
            for b in a + 1..c {
                out.push(pcc(&e[a * t..(a + 1) * t], &e[b * t..(b + 1) * t]).unwrap_or(0.0));
            }
        }
        out
    }

    pub fn to_neural(&self) -> Result<neural::Dataset, NeuralError> {
        let (h, w) = self.model_dims();
        let data = match self.input {
            InputKind::Epochs => self.samples.clone(),
            InputKind::Connectivity => (0..self.len()).flat_map(|i| self.connectivity_features(i)).collect(),
        };
        neural::Dataset::new(Tensor::new(vec![self.len(), 1, h, w], data)?, self.labels.clone())
    }
}

/// Indices of `keep` windows spread evenly over `available`.
fn spread(available: usize, keep: Option<usize>) -> Vec<usize> {
    match keep {
        Some(m) if m < available => (0..m).map(|j| ((2 * j + 1) * available) / (2 * m)).collect(),
        _ => (0..available).collect(),
    }
}

/// Cuts labelled rounds into windows, low-passes, decimates and scales them.
///
/// `trials` must list each subject's rounds in annotation order, as
/// [`crate::labeling::label_cohort`] produces them.
pub fn build_dataset(recordings: &[Recording], trials: &[LabeledTrial], config: &DatasetConfig) -> Result<EpochDataset, DatasetError> {
    let first = recordings.first().ok_or(DatasetError::Empty)?;
    let fs = first.sampling_rate();
    config.validate(fs)?;
    let (window, stride) = epoch_geometry(fs, config.window_s, config.overlap)?;
    let n_times = window.div_ceil(config.decimation);
    let antialias = if config.decimation > 1 {
        Some(design_filter(&FilterSpec::lowpass(config.antialias_hz, ANTIALIAS_ORDER), fs)?)
    } else {
        None
    };

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for rec in recordings {
        if rec.channels() != first.channels() || rec.sampling_rate() != fs {
            return Err(DatasetError::Config(format!("{} differs in channels or rate from {}", rec.subject_id(), first.subject_id())));
        }
        let mine: Vec<&LabeledTrial> = trials.iter().filter(|t| t.subject_id == rec.subject_id()).collect();
        let bad = |message: String| DatasetError::Labels { subject: rec.subject_id().to_string(), message };
        if mine.len() != rec.annotations().len() {
            return Err(bad(format!("{} labels for {} rounds", mine.len(), rec.annotations().len())));
        }
        for (ri, (round, trial)) in rec.annotations().iter().zip(&mine).enumerate() {
            if round.task != trial.task || round.difficulty != trial.difficulty {
                return Err(bad(format!("round {ri} is {} level {} but its label row is {} level {}", round.task, round.difficulty, trial.task, trial.difficulty)));
            }
            let view = rec.round_samples(ri);
            let length = view.ncols();
            let count = epoch_count(length, window, stride);
            if count == 0 {
                return Err(DataError::WindowTooLong { round: ri, window, length }.into());
            }
            let rows: Vec<Vec<f64>> = view
                .rows()
                .into_iter()
                .map(|r| {
                    let r = r.to_vec();
                    match &antialias {
                        Some(f) => f.filtfilt(&r),
                        None => r,
                    }
                })
                .collect();
            let (offset, _) = round.sample_range(fs);
            for k in spread(count, config.max_epochs_per_round) {
                let a = k * stride;
                for row in &rows {
                    samples.extend(row[a..a + window].iter().step_by(config.decimation).map(|v| v / config.scale_uv));
                }
                labels.push(trial.state.index());
                sources.push(EpochSource { subject_id: rec.subject_id().to_string(), round_index: ri, start_sample: offset + a });
            }
        }
    }
    Ok(EpochDataset::new(first.channels().to_vec(), fs / config.decimation as f64, n_times, samples, labels, sources)?
        .with_input(config.input))
}

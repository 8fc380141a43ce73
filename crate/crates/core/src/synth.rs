//! Synthetic cohorts with planted connectivity and class effects.
//!
//! Every channel is a gain-weighted sum of shared latent sources plus white
//! noise. A source shared by two channels with gains `g1`, `g2` and power
//! `P` gives them an expected Pearson coefficient of
//! `g1 g2 P / sqrt((g1² P + σ²)(g2² P + σ²))`.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::{label_rounds, CognitiveState, LabelError};
use crate::montage::{Montage, PAPER_ELECTRODES};
use crate::recording::{DataError, Gender, Recording, Task, TaskRound};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A latent source: a sum of sinusoids with random phases inside a band,
/// scaled to `rms_uv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSource {
    pub name: String,
    pub low_hz: f64,
    pub high_hz: f64,
    pub tones: usize,
    /// Tone frequencies are snapped to multiples of this spacing. A 0.5 Hz
    /// grid makes every 2 s window hold whole periods, so windowed power is
    /// the same everywhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_hz: Option<f64>,
    pub rms_uv: f64,
    pub channels: Vec<String>,
    /// Per-channel gains, same order as `channels`.
    pub gains: Vec<f64>,
    /// Extra gain per cognitive state (low, transition, high).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_gains: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub task: Task,
    pub difficulty: u8,
    pub duration_s: f64,
}

/// How round scores are drawn before being split into performance and
/// workload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub base: f64,
    /// Score drop per difficulty level above 2.
    pub difficulty_step: f64,
    pub subject_sd: f64,
    pub round_sd: f64,
    /// Performance deviates from the score by at most this much.
    pub performance_jitter: f64,
}

impl Default for ScoreModel {
    fn default() -> Self {
        ScoreModel { base: 0.5, difficulty_step: 0.1, subject_sd: 0.03, round_sd: 0.08, performance_jitter: 0.1 }
    }
}

/// Additive blink bumps on the frontal channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlinkSpec {
    pub rate_per_min: f64,
    pub amplitude_uv: f64,
    pub width_s: f64,
    pub channels: Vec<String>,
    pub gains: Vec<f64>,
}

impl Default for BlinkSpec {
    fn default() -> Self {
        BlinkSpec {
            rate_per_min: 15.0,
            amplitude_uv: 80.0,
            width_s: 0.3,
            channels: ["Fp1", "Fpz", "Fp2", "F7", "F3", "Fz", "F4", "F8"].map(String::from).to_vec(),
            gains: vec![1.0, 1.0, 1.0, 0.35, 0.45, 0.45, 0.45, 0.35],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_subjects: usize,
    pub n_female: usize,
    pub sampling_rate_hz: f64,
    /// Rest before the first round; covers the baseline window.
    pub lead_s: f64,
    pub rounds: Vec<RoundPlan>,
    pub sources: Vec<LatentSource>,
    pub noise_uv: f64,
    /// Subject-level multiplicative jitter on source amplitude, `±` this fraction.
    pub subject_gain_jitter: f64,
    /// Per-channel multiplicative jitter on source gains, `±` this fraction.
    pub channel_gain_jitter: f64,
    /// Subject-level jitter on the noise level, `±` this fraction.
    pub noise_jitter: f64,
    pub scores: ScoreModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blinks: Option<BlinkSpec>,
    pub seed: u64,
}

impl CohortSpec {
    /// Thirty subjects, 21 male and 9 female, three tasks at three levels
    /// with 80 s rounds at 500 Hz. The class effect is a gain change on a
    /// frontal source shared by the eight electrodes in
    /// [`PAPER_ELECTRODES`]; a weaker posterior alpha source is class-free.
    pub fn paper_shaped(seed: u64) -> Self {
        let rounds = Task::ALL
            .iter()
            .flat_map(|&task| (1..=3).map(move |difficulty| RoundPlan { task, difficulty, duration_s: 80.0 }))
            .collect();
        let frontal: Vec<String> = PAPER_ELECTRODES.map(String::from).to_vec();
        let posterior: Vec<String> = ["P3", "Pz", "P4", "P8", "O1", "O2"].map(String::from).to_vec();
        CohortSpec {
            n_subjects: 30,
            n_female: 9,
            sampling_rate_hz: 500.0,
            lead_s: 5.0,
            rounds,
            sources: vec![
                LatentSource {
                    name: "frontal".into(),
                    low_hz: 4.0,
                    high_hz: 13.0,
                    tones: 19,
                    grid_hz: Some(0.5),
                    rms_uv: 6.0,
                    gains: vec![1.0; frontal.len()],
                    channels: frontal,
                    class_gains: Some([0.7, 1.0, 1.3]),
                },
                LatentSource {
                    name: "posterior".into(),
                    low_hz: 8.0,
                    high_hz: 12.0,
                    tones: 24,
                    grid_hz: None,
                    rms_uv: 3.5,
                    gains: vec![1.0; posterior.len()],
                    channels: posterior,
                    class_gains: None,
                },
            ],
            noise_uv: 14.0,
            subject_gain_jitter: 0.05,
            channel_gain_jitter: 0.05,
            noise_jitter: 0.05,
            scores: ScoreModel::default(),
            blinks: None,
            seed,
        }
    }

    /// Same design with fewer subjects and shorter rounds.
    pub fn small(seed: u64, n_subjects: usize, round_s: f64) -> Self {
        let mut spec = CohortSpec::paper_shaped(seed);
        spec.n_subjects = n_subjects;
        spec.n_female = n_subjects * 3 / 10;
        for r in &mut spec.rounds {
            r.duration_s = round_s;
        }
        spec
    }

    pub fn validate(&self, montage: &Montage) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_subjects == 0 || self.n_female > self.n_subjects {
            return bad(format!("{} female of {} subjects", self.n_female, self.n_subjects));
        }
        if !(self.sampling_rate_hz > 0.0 && self.sampling_rate_hz.is_finite()) {
            return bad(format!("sampling rate {}", self.sampling_rate_hz));
        }
        if self.rounds.is_empty() || self.lead_s < 0.0 {
            return bad("need at least one round and a non-negative lead".into());
        }
        if self.n_subjects * self.rounds.len() < 4 {
            return bad("labelling needs at least four rounds in the cohort".into());
        }
        for r in &self.rounds {
            if !(1..=3).contains(&r.difficulty) || !(r.duration_s > 0.0) {
                return bad(format!("round {} level {} lasting {} s", r.task, r.difficulty, r.duration_s));
            }
        }
        if !(self.noise_uv >= 0.0 && self.noise_uv.is_finite()) {
            return bad(format!("noise {}", self.noise_uv));
        }
        for j in [self.subject_gain_jitter, self.channel_gain_jitter, self.noise_jitter] {
            if !(0.0..1.0).contains(&j) {
                return bad(format!("jitter {j} outside [0, 1)"));
            }
        }
        let nyquist = self.sampling_rate_hz / 2.0;
        for s in &self.sources {
            if s.channels.len() != s.gains.len() {
                return bad(format!("source {}: {} channels but {} gains", s.name, s.channels.len(), s.gains.len()));
            }
            if let Some(c) = s.channels.iter().find(|c| montage.index_of(c).is_none()) {
                return bad(format!("source {}: unknown channel {c}", s.name));
            }
            let gains = s.gains.iter().chain(s.class_gains.iter().flatten());
            if gains.into_iter().any(|g| !g.is_finite()) || !(s.rms_uv >= 0.0 && s.rms_uv.is_finite()) {
                return bad(format!("source {}: non-finite gain or amplitude", s.name));
            }
            if !(0.0 < s.low_hz && s.low_hz < s.high_hz && s.high_hz < nyquist) || s.tones == 0 {
                return bad(format!("source {}: band {}-{} Hz with {} tones", s.name, s.low_hz, s.high_hz, s.tones));
            }
            if let Some(g) = s.grid_hz {
                let slots = ((s.high_hz / g).floor() - (s.low_hz / g).ceil() + 1.0).max(0.0) as usize;
                if !(g > 0.0) || slots < s.tones {
                    return bad(format!("source {}: {} tones do not fit a {g} Hz grid", s.name, s.tones));
                }
            }
        }
        if let Some(b) = &self.blinks {
            if b.channels.len() != b.gains.len() || b.channels.iter().any(|c| montage.index_of(c).is_none()) {
                return bad("blink channels and gains do not match the montage".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTruth {
    pub subject_id: String,
    pub round_index: usize,
    pub state: CognitiveState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub schema_version: u32,
    /// Channels carrying a class-dependent source.
    pub informative_channels: Vec<String>,
    /// Channel pairs sharing the class-dependent source.
    pub strong_edges: Vec<(String, String)>,
    pub rounds: Vec<RoundTruth>,
}

impl GroundTruth {
    pub fn write_json(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("truth serialises") + "\n")?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPlan {
    pub subject_id: String,
    pub gender: Gender,
    pub rounds: Vec<TaskRound>,
    pub states: Vec<CognitiveState>,
}

/// Annotations and classes for a whole cohort, drawn before any signal so
/// subjects can be synthesised one at a time.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub subjects: Vec<SubjectPlan>,
    pub truth: GroundTruth,
    montage: Montage,
}

pub fn subject_id(index: usize) -> String {
    format!("S{:02}", index + 1)
}

impl Cohort {
    pub fn plan(spec: CohortSpec) -> Result<Self, SynthError> {
        let montage = Montage::standard();
        spec.validate(&montage)?;
        let mut genders: Vec<Gender> =
            (0..spec.n_subjects).map(|i| if i < spec.n_female { Gender::Female } else { Gender::Male }).collect();
        genders.shuffle(&mut crate::rng::stream(spec.seed, "synth/genders"));

        let m = &spec.scores;
        let mut subjects = Vec::with_capacity(spec.n_subjects);
        for (i, gender) in genders.into_iter().enumerate() {
            let mut rng = crate::rng::stream(spec.seed, &format!("synth/scores/{i}"));
            let offset = m.subject_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            let mut t = spec.lead_s;
            let rounds = spec
                .rounds
                .iter()
                .map(|r| {
                    let noise = m.round_sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                    let score = (m.base - m.difficulty_step * (r.difficulty as f64 - 2.0) + offset + noise).clamp(0.15, 0.85);
                    let jitter = m.performance_jitter.min(0.15);
                    let performance = (score + rng.random_range(-jitter..=jitter)).clamp(0.0, 1.0);
                    // Solve (performance + 1 - tlx) / 2 = score for tlx.
                    let nasa_tlx = (1.0 + performance - 2.0 * score).clamp(0.0, 1.0);
                    let round = TaskRound { task: r.task, difficulty: r.difficulty, start_s: t, end_s: t + r.duration_s, performance, nasa_tlx };
                    t += r.duration_s;
                    round
                })
                .collect();
            subjects.push(SubjectPlan { subject_id: subject_id(i), gender, rounds, states: Vec::new() });
        }

        let trials = label_rounds(subjects.iter().flat_map(|s| s.rounds.iter().map(move |r| (s.subject_id.as_str(), r))), true)?;
        let mut states = trials.iter().map(|t| t.state);
        let mut rounds = Vec::new();
        for s in &mut subjects {
            s.states = states.by_ref().take(s.rounds.len()).collect();
            rounds.extend(s.states.iter().enumerate().map(|(k, &state)| RoundTruth {
                subject_id: s.subject_id.clone(),
                round_index: k,
                state,
            }));
        }

        let informative: BTreeSet<&String> =
            spec.sources.iter().filter(|s| s.class_gains.is_some()).flat_map(|s| &s.channels).collect();
        let informative: Vec<String> = montage.names().into_iter().filter(|n| informative.contains(n)).collect();
        let mut strong_edges = Vec::new();
        for (i, a) in informative.iter().enumerate() {
            for b in &informative[i + 1..] {
                strong_edges.push((a.clone(), b.clone()));
            }
        }
        let truth = GroundTruth { schema_version: SCHEMA_VERSION, informative_channels: informative, strong_edges, rounds };
        Ok(Cohort { spec, subjects, truth, montage })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Synthesises subject `index`. Depends only on the spec and the index.
    pub fn subject(&self, index: usize) -> Result<Recording, SynthError> {
        let spec = &self.spec;
        let plan = &self.subjects[index];
        let fs = spec.sampling_rate_hz;
        let end = plan.rounds.last().map_or(spec.lead_s, |r| r.end_s);
        let n = (end * fs).round() as usize;
        let names = self.montage.names();
        let mut data = Array2::<f64>::zeros((names.len(), n));

        let tag = |what: &str| format!("synth/{what}/{index}");
        let mut subject_rng = crate::rng::stream(spec.seed, &tag("subject"));
        let jitter = |rng: &mut rand_chacha::ChaCha8Rng, j: f64| if j > 0.0 { 1.0 + rng.random_range(-j..=j) } else { 1.0 };
        let amp_scale = jitter(&mut subject_rng, spec.subject_gain_jitter);
        let noise_sd = spec.noise_uv * jitter(&mut subject_rng, spec.noise_jitter);

        // Per-sample gain from the state of the round covering it; the lead
        // uses the neutral gain.
        let mut state_at = vec![None; n];
        for (r, &st) in plan.rounds.iter().zip(&plan.states) {
            let (a, b) = r.sample_range(fs);
            state_at[a.min(n)..b.min(n)].iter_mut().for_each(|s| *s = Some(st));
        }

        for (si, source) in spec.sources.iter().enumerate() {
            let mut rng = crate::rng::stream(spec.seed, &format!("synth/source/{index}/{si}"));
            let wave = multisine(source, n, fs, &mut rng);
            for (c, &g) in source.channels.iter().zip(&source.gains) {
                let row = self.montage.index_of(c).expect("validated");
                let g = g * amp_scale * jitter(&mut rng, spec.channel_gain_jitter);
                let mut out = data.row_mut(row);
                for t in 0..n {
                    let class = match (source.class_gains, state_at[t]) {
                        (Some(cg), Some(st)) => cg[st.index()],
                        (Some(cg), None) => cg[1],
                        (None, _) => 1.0,
                    };
                    out[t] += g * class * wave[t];
                }
            }
        }

        if noise_sd > 0.0 {
            let normal = Normal::new(0.0, noise_sd).expect("finite sd");
            for (c, mut row) in data.rows_mut().into_iter().enumerate() {
                let mut rng = crate::rng::stream(spec.seed, &format!("synth/noise/{index}/{c}"));
                row.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }

        if let Some(blinks) = &spec.blinks {
            let mut rng = crate::rng::stream(spec.seed, &tag("blinks"));
            let wave = blink_train(blinks, n, fs, &mut rng);
            for (c, &g) in blinks.channels.iter().zip(&blinks.gains) {
                let row = self.montage.index_of(c).expect("validated");
                data.row_mut(row).iter_mut().zip(&wave).for_each(|(v, b)| *v += g * b);
            }
        }

        Ok(Recording::new(plan.subject_id.clone(), plan.gender, fs, names, data, plan.rounds.clone())?.with_stage("raw"))
    }

    /// Every subject, generated in parallel.
    pub fn generate(&self) -> Result<Vec<Recording>, SynthError> {
        (0..self.len()).into_par_iter().map(|i| self.subject(i)).collect()
    }
}

/// Generates the whole cohort in memory.
pub fn generate_cohort(spec: CohortSpec) -> Result<(Vec<Recording>, GroundTruth), SynthError> {
    let cohort = Cohort::plan(spec)?;
    Ok((cohort.generate()?, cohort.truth))
}

/// The full-size cohort without its signals; see [`CohortSpec::paper_shaped`].
pub fn default_paper_shaped_cohort(seed: u64) -> Result<Cohort, SynthError> {
    Cohort::plan(CohortSpec::paper_shaped(seed))
}

/// Tones at random phases with uniform random amplitudes,
/// rescaled to `rms_uv`.
fn multisine(source: &LatentSource, n: usize, fs: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let freqs: Vec<f64> = match source.grid_hz {
        Some(g) => {
            let lo = (source.low_hz / g).ceil() as i64;
            let hi = (source.high_hz / g).floor() as i64;
            let mut slots: Vec<i64> = (lo..=hi).collect();
            slots.shuffle(rng);
            let mut chosen: Vec<f64> = slots[..source.tones].iter().map(|&k| k as f64 * g).collect();
            chosen.sort_by(f64::total_cmp);
            chosen
        }
        None => {
            // One tone per equal sub-band, kept to the middle half of it so
            // no two tones beat slower than half a sub-band width.
            let bin = (source.high_hz - source.low_hz) / source.tones as f64;
            (0..source.tones).map(|k| source.low_hz + bin * (k as f64 + rng.random_range(0.25..0.75))).collect()
        }
    };
    let amps: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.5..1.0)).collect();
    let phases: Vec<f64> = freqs.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let power: f64 = amps.iter().map(|a| a * a / 2.0).sum();
    let scale = source.rms_uv / power.sqrt();
    let mut out = vec![0.0; n];
    for ((f, a), p) in freqs.iter().zip(&amps).zip(&phases) {
        let w = 2.0 * PI * f / fs;
        for (t, v) in out.iter_mut().enumerate() {
            *v += a * scale * (w * t as f64 + p).sin();
        }
    }
    out
}

/// Raised-cosine bumps at Poisson times with a refractory gap of two widths.
pub fn blink_train(spec: &BlinkSpec, n: usize, fs: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    if spec.rate_per_min <= 0.0 {
        return out;
    }
    let width = (spec.width_s * fs).round().max(2.0) as usize;
    let rate = spec.rate_per_min / 60.0;
    let mut t = 0.0;
    loop {
        t += -(1.0 - rng.random::<f64>()).ln() / rate + 2.0 * spec.width_s;
        let start = (t * fs) as usize;
        if start + width >= n {
            break;
        }
        let amp = spec.amplitude_uv * rng.random_range(0.8..1.2);
        for k in 0..width {
            out[start + k] += amp * 0.5 * (1.0 - (2.0 * PI * k as f64 / width as f64).cos());
        }
    }
    out
}

/// Writes `<out>/<subject>.csv` with sidecars and `<out>/truth.json`.
pub fn write_cohort(cohort: &Cohort, out: &Path) -> Result<Vec<std::path::PathBuf>, SynthError> {
    std::fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for i in 0..cohort.len() {
        let rec = cohort.subject(i)?;
        let path = out.join(format!("{}.csv", rec.subject_id()));
        crate::io::save_recording(&rec, &path)?;
        paths.push(path);
    }
    cohort.truth.write_json(&out.join("truth.json"))?;
    Ok(paths)
}

//! End-to-end configuration and the stages that chain the modules together.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::connectivity::{
    aggregate, mean_performance_by_level, rank_channels, round_matrices, split_by_sign, top_k_edges, weighted_task_aggregate,
    AggregateMatrix, AggregationMode, ChannelScore, ConnectivityError, ConnectivityMatrix, EdgeSet,
};
use crate::dataset::{build_dataset, DatasetConfig, DatasetError, EpochDataset};
use crate::eval::{grouped_folds, stratified_folds, ElectrodeSet, EvalError, FoldPlan, SplitMode};
use crate::labeling::{label_rounds, LabelError, LabeledTrial};
use crate::montage::{Montage, CHANNEL_NAMES, PAPER_ELECTRODES};
use crate::neural::{ModelKind, NeuralError, TrainConfig};
use crate::preprocess::{preprocess_recording, PreprocessConfig, PreprocessError, PreprocessOutput};
use crate::recording::{DataError, Recording, Task};
use crate::synth::{Cohort, SynthError};

/// Error classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("missing {artifact}; run `eegcog {producer}` first")]
    Missing { artifact: String, producer: &'static str },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) | PipelineError::Missing { .. } => 3,
            PipelineError::Numerical(_) => 4,
        }
    }
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::EpochParams(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<PreprocessError> for PipelineError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::CutoffAboveNyquist { .. } | PreprocessError::FilterSpec(_) | PreprocessError::Parameter(_) => {
                PipelineError::Config(e.to_string())
            }
            PreprocessError::RankDeficient { .. } | PreprocessError::AllComponentsRejected => PipelineError::Numerical(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ConnectivityError> for PipelineError {
    fn from(e: ConnectivityError) -> Self {
        match e {
            ConnectivityError::KOutOfRange { .. } => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<LabelError> for PipelineError {
    fn from(e: LabelError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<DatasetError> for PipelineError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Config(_) => PipelineError::Config(e.to_string()),
            DatasetError::Filter(p) => p.into(),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<NeuralError> for PipelineError {
    fn from(e: NeuralError) -> Self {
        match e {
            NeuralError::Diverged { .. } => PipelineError::Numerical(e.to_string()),
            NeuralError::Parameters(_) => PipelineError::Data(e.to_string()),
            _ => PipelineError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        let text = e.to_string();
        let mut inner = &e;
        while let EvalError::Fold { source, .. } = inner {
            inner = source;
        }
        match inner {
            EvalError::Neural(NeuralError::Diverged { .. }) => PipelineError::Numerical(text),
            EvalError::Io(_) | EvalError::PlanMismatch { .. } | EvalError::GroupLength => PipelineError::Data(text),
            _ => PipelineError::Config(text),
        }
    }
}

impl From<SynthError> for PipelineError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Spec(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

/// Channel subset fed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ElectrodeChoice {
    All20,
    #[default]
    Paper8,
    /// The `n` best channels of the connectivity ranking.
    TopK(usize),
}

impl fmt::Display for ElectrodeChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElectrodeChoice::All20 => f.write_str("all20"),
            ElectrodeChoice::Paper8 => f.write_str("paper8"),
            ElectrodeChoice::TopK(n) => write!(f, "topk:{n}"),
        }
    }
}

impl FromStr for ElectrodeChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all20" => Ok(ElectrodeChoice::All20),
            "paper8" => Ok(ElectrodeChoice::Paper8),
            _ => match s.strip_prefix("topk:").map(str::parse::<usize>) {
                Some(Ok(n)) if (1..=CHANNEL_NAMES.len()).contains(&n) => Ok(ElectrodeChoice::TopK(n)),
                _ => Err(format!("unknown electrode set {s:?} (expected all20, paper8 or topk:<1..=20>)")),
            },
        }
    }
}

impl Serialize for ElectrodeChoice {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ElectrodeChoice {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl ElectrodeChoice {
    /// Channel names in montage order. `TopK` needs a ranking.
    pub fn resolve(&self, ranking: Option<&[ChannelScore]>) -> Result<ElectrodeSet, PipelineError> {
        let names: Vec<String> = match self {
            ElectrodeChoice::All20 => CHANNEL_NAMES.map(String::from).to_vec(),
            ElectrodeChoice::Paper8 => PAPER_ELECTRODES.map(String::from).to_vec(),
            ElectrodeChoice::TopK(n) => {
                let ranking = ranking.ok_or(PipelineError::Missing { artifact: "select/ranking.json".into(), producer: "select" })?;
                let chosen: Vec<&str> = ranking.iter().take(*n).map(|c| c.channel.as_str()).collect();
                CHANNEL_NAMES.iter().filter(|c| chosen.contains(c)).map(|c| c.to_string()).collect()
            }
        };
        Ok(ElectrodeSet { id: self.to_string(), channels: names })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationKind {
    /// Difficulty-weighted within each task, then summed over tasks.
    #[default]
    Weighted,
    OverallSum,
    OverallMean,
}

impl FromStr for AggregationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weighted" => Ok(AggregationKind::Weighted),
            "overall-sum" => Ok(AggregationKind::OverallSum),
            "overall-mean" => Ok(AggregationKind::OverallMean),
            other => Err(format!("unknown aggregation {other:?} (expected weighted, overall-sum or overall-mean)")),
        }
    }
}

/// Every setting that affects results. Paths live on the command line and
/// are not part of the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    /// Workload enters the labelling score as `1 - nasa_tlx`.
    pub invert_tlx: bool,
    pub aggregation: AggregationKind,
    /// Edges kept from the aggregate before ranking channels.
    pub top_edges: usize,
    /// Channels reported by the selection step.
    pub select_k: usize,
    pub dataset: DatasetConfig,
    pub electrodes: ElectrodeChoice,
    pub model: ModelKind,
    pub folds: usize,
    pub split: SplitMode,
    pub train: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            preprocess: PreprocessConfig::default(),
            invert_tlx: true,
            aggregation: AggregationKind::Weighted,
            top_edges: 50,
            select_k: 8,
            dataset: DatasetConfig::default(),
            electrodes: ElectrodeChoice::Paper8,
            model: ModelKind::MhaEegnet,
            folds: 10,
            split: SplitMode::Subject,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let p = &self.preprocess;
        if !(p.amp_limit_uv > 0.0) || !(p.flat_window_s > 0.0) {
            return bad("amplitude limit and flat window must be positive".into());
        }
        if !(p.baseline_ms[0] >= 0.0 && p.baseline_ms[0] < p.baseline_ms[1]) {
            return bad(format!("baseline window {:?} ms is not an increasing range", p.baseline_ms));
        }
        if !(p.ica_corr_threshold > 0.0 && p.ica_corr_threshold <= 1.0) || p.ica_max_iter == 0 || !(p.ica_tol > 0.0) {
            return bad("ICA threshold must lie in (0, 1] with positive iterations and tolerance".into());
        }
        let pairs = CHANNEL_NAMES.len() * (CHANNEL_NAMES.len() - 1) / 2;
        if !(1..=pairs).contains(&self.top_edges) {
            return bad(format!("top_edges {} outside 1..={pairs}", self.top_edges));
        }
        if !(1..=CHANNEL_NAMES.len()).contains(&self.select_k) {
            return bad(format!("select_k {} outside 1..=20", self.select_k));
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
            return bad("training needs a positive batch size and epoch count and a finite learning rate".into());
        }
        let d = &self.dataset;
        if d.decimation == 0 || !(d.scale_uv > 0.0) || d.max_epochs_per_round == Some(0) || !(0.0..1.0).contains(&d.overlap) {
            return bad("dataset decimation, scale, epoch cap or overlap out of range".into());
        }
        Ok(())
    }

    /// Training settings with the seed derived from the global one.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: crate::rng::derive_seed(self.seed, &format!("train/{}", self.train.seed)), ..self.train }
    }

    /// Fold assignment for `data` under the configured split.
    pub fn fold_plan(&self, data: &EpochDataset) -> Result<FoldPlan, PipelineError> {
        let seed = crate::rng::derive_seed(self.seed, "folds");
        let labels = data.labels();
        Ok(match self.split {
            SplitMode::Subject => grouped_folds(&labels, &data.subjects(), self.folds, seed)?,
            SplitMode::Epoch => stratified_folds(&labels, self.folds, seed)?,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn preprocess(rec: &Recording, config: &PipelineConfig) -> Result<PreprocessOutput, PipelineError> {
    let seed = crate::rng::derive_seed(config.seed, "preprocess");
    Ok(preprocess_recording(rec, &Montage::standard(), &config.preprocess, seed)?)
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub aggregate: AggregateMatrix,
    pub per_task: BTreeMap<Task, AggregateMatrix>,
    pub edges: EdgeSet,
    pub positive: EdgeSet,
    pub negative: EdgeSet,
    pub ranking: Vec<ChannelScore>,
    pub chosen: Vec<String>,
}

/// Aggregates round matrices, keeps the strongest edges and ranks channels
/// by weighted degree.
pub fn select<'a>(
    matrices: &[ConnectivityMatrix],
    rounds: impl IntoIterator<Item = &'a crate::recording::TaskRound>,
    config: &PipelineConfig,
) -> Result<Selection, PipelineError> {
    let (aggregate_matrix, per_task) = match config.aggregation {
        AggregationKind::Weighted => weighted_task_aggregate(matrices, &mean_performance_by_level(rounds))?,
        AggregationKind::OverallSum => (aggregate(matrices, AggregationMode::OverallSum)?, BTreeMap::new()),
        AggregationKind::OverallMean => (aggregate(matrices, AggregationMode::OverallMean)?, BTreeMap::new()),
    };
    let edges = top_k_edges(&aggregate_matrix, config.top_edges)?;
    let (positive, negative) = split_by_sign(&aggregate_matrix);
    let ranking = rank_channels(&edges, &aggregate_matrix.channels);
    let chosen = ranking.iter().take(config.select_k).map(|c| c.channel.clone()).collect();
    Ok(Selection { aggregate: aggregate_matrix, per_task, edges, positive, negative, ranking, chosen })
}

pub fn label(subjects: &[(String, Vec<crate::recording::TaskRound>)], config: &PipelineConfig) -> Result<Vec<LabeledTrial>, PipelineError> {
    Ok(label_rounds(subjects.iter().flat_map(|(id, rounds)| rounds.iter().map(move |r| (id.as_str(), r))), config.invert_tlx)?)
}

/// Everything the evaluation needs from a cohort, computed one subject at a
/// time so raw recordings never pile up in memory.
#[derive(Debug, Clone)]
pub struct CohortAnalysis {
    pub matrices: Vec<ConnectivityMatrix>,
    pub trials: Vec<LabeledTrial>,
    pub selection: Selection,
    pub dataset: EpochDataset,
    pub rejected_components: usize,
}

pub fn analyse_cohort(cohort: &Cohort, config: &PipelineConfig) -> Result<CohortAnalysis, PipelineError> {
    config.validate()?;
    let plans: Vec<(String, Vec<crate::recording::TaskRound>)> =
        cohort.subjects.iter().map(|s| (s.subject_id.clone(), s.rounds.clone())).collect();
    let trials = label(&plans, config)?;
    let mut matrices = Vec::new();
    let mut parts = Vec::new();
    let mut rejected = 0;
    for i in 0..cohort.len() {
        let raw = cohort.subject(i)?;
        let out = preprocess(&raw, config)?;
        drop(raw);
        rejected += out.ica.as_ref().map_or(0, |s| s.rejected.len());
        matrices.extend(round_matrices(&out.recording)?);
        parts.push(build_dataset(std::slice::from_ref(&out.recording), &trials, &config.dataset)?);
    }
    let selection = select(&matrices, plans.iter().flat_map(|(_, r)| r), config)?;
    let dataset = EpochDataset::concat(&parts)?;
    Ok(CohortAnalysis { matrices, trials, selection, dataset, rejected_components: rejected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn electrode_choices_parse_and_print() {
        for s in ["all20", "paper8", "topk:5"] {
            assert_eq!(s.parse::<ElectrodeChoice>().unwrap().to_string(), s);
        }
        assert!("topk:0".parse::<ElectrodeChoice>().is_err());
        assert!("topk:21".parse::<ElectrodeChoice>().is_err());
        assert!("some".parse::<ElectrodeChoice>().is_err());
        let set = ElectrodeChoice::Paper8.resolve(None).unwrap();
        assert_eq!(set.channels, PAPER_ELECTRODES.map(String::from).to_vec());
        assert!(matches!(ElectrodeChoice::TopK(3).resolve(None), Err(PipelineError::Missing { producer: "select", .. })));
    }

    #[test]
    fn topk_keeps_montage_order() {
        let ranking: Vec<ChannelScore> =
            ["O2", "Fp1", "Cz"].iter().enumerate().map(|(i, c)| ChannelScore { channel: c.to_string(), score: 3.0 - i as f64 }).collect();
        let set = ElectrodeChoice::TopK(2).resolve(Some(&ranking)).unwrap();
        assert_eq!(set.channels, vec!["Fp1", "O2"]);
    }

    #[test]
    fn hash_tracks_meaningful_fields() {
        let a = PipelineConfig::default();
        assert_eq!(a.hash(), PipelineConfig::default().hash());
        assert_eq!(a.hash().len(), 64);
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.train.learning_rate = 2e-3;
        assert_ne!(a.hash(), c.hash());
        let mut d = a.clone();
        d.electrodes = ElectrodeChoice::All20;
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "electrodes": "topk:4"}"#).unwrap();
        assert_eq!((partial.seed, partial.electrodes), (9, ElectrodeChoice::TopK(4)));
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 9}"#).is_err());

        let mut bad = cfg.clone();
        bad.folds = 1;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let mut bad = cfg;
        bad.top_edges = 191;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn global_seed_reaches_training() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.seed = 5;
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_eq!(a.train_config().epochs, a.train.epochs);
    }

    #[test]
    fn divergence_maps_to_numerical_exit_code() {
        let e = EvalError::Fold { fold: 3, source: Box::new(EvalError::Neural(NeuralError::Diverged { epoch: 1, batch: 2, loss: f64::NAN })) };
        let p = PipelineError::from(e);
        assert_eq!(p.exit_code(), 4);
        assert!(p.to_string().contains("fold 3"));
    }
}

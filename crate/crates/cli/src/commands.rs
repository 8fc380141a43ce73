//! Stage implementations. Every stage reads its inputs from the run
//! directory, writes into its own subdirectory and optionally drops a
//! `stamp.json` recording the configuration that produced it.

use std::path::{Path, PathBuf};

use eegcog::connectivity::{
    aggregate, build_embedding, rank_channels, round_matrices, top_k_edges, write_matrix_csv, AggregateMatrix,
    AggregationMode, ChannelScore, EdgeSetExport, MatrixExport, SignedEdge,
};
use eegcog::dataset::{build_dataset, EpochDataset};
use eegcog::eval::{compare_electrode_sets, evaluate_cv, ComparisonTable, ElectrodeSet};
use eegcog::io::{load_recording, read_sidecar, save_recording, sidecar_path};
use eegcog::labeling::{read_labels_csv, write_labels_csv, LabeledTrial};
use eegcog::montage::Montage;
use eegcog::neural::{self, EpochRecord, Model};
use eegcog::pipeline::{self, ElectrodeChoice, PipelineConfig, PipelineError};
use eegcog::preprocess::{CorruptionReport, IcaSummary};
use eegcog::recording::{Gender, Recording, TaskRound};
use eegcog::rng::derive_seed;
use eegcog::spectral::{recording_psd, WelchParams};
use eegcog::synth::{write_cohort, BlinkSpec, Cohort, CohortSpec};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Run {
    cfg: PipelineConfig,
    root: PathBuf,
    stamp: bool,
}

#[derive(Serialize)]
struct Stamp<'a> {
    schema_version: u32,
    command: &'a str,
    config_hash: String,
    version: &'a str,
    seed: u64,
    config: &'a PipelineConfig,
}

#[derive(Serialize)]
struct SubjectCleanup {
    subject_id: String,
    corruption: CorruptionReport,
    ica: Option<IcaSummary>,
}

#[derive(Serialize)]
struct CleanupLog {
    schema_version: u32,
    subjects: Vec<SubjectCleanup>,
}

#[derive(Serialize, Deserialize)]
struct Ranking {
    schema_version: u32,
    top_edges: usize,
    k: usize,
    ranking: Vec<ChannelScore>,
    chosen: Vec<String>,
    edges: Vec<SignedEdge>,
}

#[derive(Serialize)]
struct Curves<'a> {
    schema_version: u32,
    model: String,
    electrode_set: String,
    channels: &'a [String],
    validation_fold: usize,
    epochs: Vec<EpochRecord>,
}

#[derive(Serialize)]
struct Versioned<T: Serialize> {
    schema_version: u32,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct IndexEntry {
    path: String,
    producer: String,
}

#[derive(Serialize)]
struct ReportIndex {
    schema_version: u32,
    artifacts: Vec<IndexEntry>,
    /// Stages with no artifacts yet.
    missing: Vec<String>,
}

fn data_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::Data(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Data(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(data_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &'static str) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|_| missing(path, producer))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Data(format!("{}: {e}", path.display())))
}

fn missing(path: &Path, producer: &'static str) -> PipelineError {
    PipelineError::Missing { artifact: path.display().to_string(), producer }
}

/// Recording CSVs in `dir`, sorted by name.
fn recordings_in(dir: &Path, producer: &'static str) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths: Vec<PathBuf> = match std::fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    if paths.is_empty() {
        return Err(missing(&dir.join("*.csv"), producer));
    }
    paths.sort();
    Ok(paths)
}

fn gender_name(g: Gender) -> String {
    g.to_string().to_lowercase()
}

impl Run {
    pub fn new(cfg: PipelineConfig, root: PathBuf, stamp: bool) -> Self {
        Run { cfg, root, stamp }
    }

    fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Creates a stage directory and stamps it.
    fn open_stage(&self, name: &str) -> Result<PathBuf, PipelineError> {
        let dir = self.stage(name);
        std::fs::create_dir_all(&dir).map_err(data_err(&dir))?;
        let stamp_path = dir.join("stamp.json");
        if self.stamp {
            let stamp = Stamp {
                schema_version: SCHEMA_VERSION,
                command: name,
                config_hash: self.cfg.hash(),
                version: env!("CARGO_PKG_VERSION"),
                seed: self.cfg.seed,
                config: &self.cfg,
            };
            write_json(&stamp_path, &stamp)?;
        } else if stamp_path.exists() {
            std::fs::remove_file(&stamp_path).map_err(data_err(&stamp_path))?;
        }
        Ok(dir)
    }

    fn load(&self, path: &Path) -> Result<Recording, PipelineError> {
        Ok(load_recording(path, &Montage::standard())?)
    }

    pub fn synth(&self, subjects: Option<usize>, round_s: Option<f64>, blinks: bool) -> Result<(), PipelineError> {
        let mut spec = CohortSpec::paper_shaped(derive_seed(self.cfg.seed, "synth"));
        if let Some(n) = subjects {
            spec.n_subjects = n;
            spec.n_female = n * 3 / 10;
        }
        if let Some(s) = round_s {
            for r in &mut spec.rounds {
                r.duration_s = s;
            }
        }
        if blinks {
            spec.blinks = Some(BlinkSpec::default());
        }
        let cohort = Cohort::plan(spec)?;
        let dir = self.open_stage("raw")?;
        write_cohort(&cohort, &dir)?;
        write_json(&dir.join("cohort.json"), &Versioned { schema_version: SCHEMA_VERSION, body: &cohort.spec })
    }

    pub fn preprocess(&self) -> Result<(), PipelineError> {
        let inputs = recordings_in(&self.stage("raw"), "synth")?;
        let dir = self.open_stage("preprocessed")?;
        let psd_dir = dir.join("psd");
        std::fs::create_dir_all(&psd_dir).map_err(data_err(&psd_dir))?;
        let mut log = CleanupLog { schema_version: SCHEMA_VERSION, subjects: Vec::new() };
        for path in inputs {
            let raw = self.load(&path)?;
            let out = pipeline::preprocess(&raw, &self.cfg)?;
            drop(raw);
            let id = out.recording.subject_id().to_string();
            save_recording(&out.recording, &dir.join(format!("{id}.csv")))?;
            let psd = recording_psd(&out.recording, &WelchParams::default()).map_err(|e| PipelineError::Data(e.to_string()))?;
            write_json(&psd_dir.join(format!("{id}.json")), &psd.exports())?;
            log.subjects.push(SubjectCleanup { subject_id: id, corruption: out.corruption, ica: out.ica });
        }
        write_json(&dir.join("corruption.json"), &log)
    }

    pub fn connect(&self) -> Result<(), PipelineError> {
        let inputs = recordings_in(&self.stage("preprocessed"), "preprocess")?;
        let mut matrices = Vec::new();
        let mut rounds: Vec<TaskRound> = Vec::new();
        for path in inputs {
            let rec = self.load(&path)?;
            matrices.extend(round_matrices(&rec)?);
            rounds.extend(rec.annotations().iter().cloned());
        }
        let sel = pipeline::select(&matrices, &rounds, &self.cfg)?;
        let dir = self.open_stage("connect")?;

        let exports: Vec<MatrixExport> = matrices.iter().map(MatrixExport::from).collect();
        write_json(&dir.join("matrices.json"), &exports)?;
        write_json(&dir.join("embedding.json"), &Versioned { schema_version: SCHEMA_VERSION, body: build_embedding(&matrices)? })?;
        write_json(&dir.join("aggregate.json"), &MatrixExport::from(&sel.aggregate))?;
        let csv = dir.join("aggregate.csv");
        write_matrix_csv(&sel.aggregate.channels, sel.aggregate.values.view(), &csv).map_err(data_err(&csv))?;
        for (task, agg) in &sel.per_task {
            write_json(&dir.join(format!("aggregate_{task}.json")), &MatrixExport::from(agg))?;
        }
        for gender in [Gender::Female, Gender::Male] {
            if matrices.iter().any(|m| m.provenance.gender == Some(gender)) {
                let agg = aggregate(&matrices, AggregationMode::Cohort { gender })?;
                write_json(&dir.join(format!("aggregate_{}.json", gender_name(gender))), &MatrixExport::from(&agg))?;
            }
        }
        let channels = &sel.aggregate.channels;
        for (kind, set) in [("top", &sel.edges), ("positive", &sel.positive), ("negative", &sel.negative)] {
            write_json(&dir.join(format!("edges_{kind}.json")), &EdgeSetExport::new(kind, channels, set))?;
        }
        Ok(())
    }

    pub fn select(&self) -> Result<(), PipelineError> {
        let export: MatrixExport = read_json(&self.stage("connect").join("aggregate.json"), "connect")?;
        let c = export.channels.len();
        if export.values.len() != c || export.values.iter().any(|r| r.len() != c) {
            return Err(PipelineError::Data("connect/aggregate.json is not a square matrix".into()));
        }
        let agg = AggregateMatrix {
            channels: export.channels.clone(),
            values: ndarray::Array2::from_shape_fn((c, c), |(i, j)| export.values[i][j]),
            mode: AggregationMode::OverallSum,
            count: 1,
            label: None,
        };
        let edges = top_k_edges(&agg, self.cfg.top_edges)?;
        let ranking = rank_channels(&edges, &agg.channels);
        let chosen = ranking.iter().take(self.cfg.select_k).map(|s| s.channel.clone()).collect();
        let dir = self.open_stage("select")?;
        let out = Ranking {
            schema_version: SCHEMA_VERSION,
            top_edges: self.cfg.top_edges,
            k: self.cfg.select_k,
            ranking,
            chosen,
            edges: edges.edges,
        };
        write_json(&dir.join("ranking.json"), &out)
    }

    pub fn label(&self) -> Result<(), PipelineError> {
        let inputs = recordings_in(&self.stage("raw"), "synth")?;
        let mut subjects = Vec::new();
        for path in inputs {
            let meta = read_sidecar(&sidecar_path(&path))?;
            subjects.push((meta.subject_id, meta.rounds));
        }
        let trials = pipeline::label(&subjects, &self.cfg)?;
        let dir = self.open_stage("labels")?;
        let path = dir.join("labels.csv");
        write_labels_csv(&trials, &path).map_err(data_err(&path))
    }

    fn ranking(&self) -> Result<Option<Vec<ChannelScore>>, PipelineError> {
        let path = self.stage("select").join("ranking.json");
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(read_json::<Ranking>(&path, "select")?.ranking))
    }

    /// Labelled epochs of every pre-processed recording, before channel
    /// selection.
    fn dataset(&self) -> Result<EpochDataset, PipelineError> {
        let labels = self.stage("labels").join("labels.csv");
        if !labels.exists() {
            return Err(missing(&labels, "label"));
        }
        let trials: Vec<LabeledTrial> = read_labels_csv(&labels).map_err(|e| PipelineError::Data(format!("{}: {e}", labels.display())))?;
        let mut parts = Vec::new();
        for path in recordings_in(&self.stage("preprocessed"), "preprocess")? {
            let rec = self.load(&path)?;
            parts.push(build_dataset(std::slice::from_ref(&rec), &trials, &self.cfg.dataset)?);
        }
        Ok(EpochDataset::concat(&parts)?)
    }

    fn electrode_set(&self, choice: ElectrodeChoice) -> Result<ElectrodeSet, PipelineError> {
        let ranking = match choice {
            ElectrodeChoice::TopK(_) => match self.ranking()? {
                Some(r) => Some(r),
                None => return Err(missing(&self.stage("select").join("ranking.json"), "select")),
            },
            _ => None,
        };
        choice.resolve(ranking.as_deref())
    }

    fn sliced(&self, data: &EpochDataset, set: &ElectrodeSet) -> Result<EpochDataset, PipelineError> {
        data.select_channels(&set.channels).map_err(|c| PipelineError::Data(format!("recordings lack channel {c}")))
    }

    pub fn train(&self) -> Result<(), PipelineError> {
        let set = self.electrode_set(self.cfg.electrodes)?;
        let data = self.sliced(&self.dataset()?, &set)?;
        let plan = self.cfg.fold_plan(&data)?;
        let fold = &plan.folds[0];
        let config = self.cfg.train_config();
        let (h, w) = data.model_dims();
        let spec = neural::preset(self.cfg.model, h, w, data.sampling_rate(), derive_seed(config.seed, "init"));
        let mut model = Model::build(&spec)?;
        let train_set = data.subset(&fold.train).to_neural()?;
        let val_set = data.subset(&fold.test).to_neural()?;
        let epochs = neural::train(&mut model, &train_set, Some(&val_set), &config)?;

        let dir = self.open_stage("train")?;
        model.parameter_set().save(&dir, "params").map_err(data_err(&dir))?;
        write_json(&dir.join("model.json"), &Versioned { schema_version: SCHEMA_VERSION, body: &spec })?;
        let curves = Curves {
            schema_version: SCHEMA_VERSION,
            model: self.cfg.model.to_string(),
            electrode_set: set.id.clone(),
            channels: data.channels(),
            validation_fold: 0,
            epochs,
        };
        write_json(&dir.join("curves.json"), &curves)
    }

    pub fn evaluate(&self, compare: bool) -> Result<(), PipelineError> {
        let set = self.electrode_set(self.cfg.electrodes)?;
        let all = self.dataset()?;
        let plan = self.cfg.fold_plan(&all)?;
        let config = self.cfg.train_config();
        let data = self.sliced(&all, &set)?;
        let report = evaluate_cv(self.cfg.model, &data, &plan, &config, &set.id)?;

        let comparison = if compare {
            let mut sets = vec![self.electrode_set(ElectrodeChoice::All20)?, self.electrode_set(ElectrodeChoice::Paper8)?];
            if let Some(r) = self.ranking()? {
                sets.push(ElectrodeChoice::TopK(self.cfg.select_k).resolve(Some(&r))?);
            }
            Some(compare_electrode_sets(&all, &sets, &[self.cfg.model], &plan, &config)?)
        } else {
            None
        };

        let dir = self.open_stage("evaluate")?;
        write_json(&dir.join("report.json"), &report)?;
        let table = ComparisonTable { schema_version: report.schema_version, reports: vec![report] };
        let csv = dir.join("report.csv");
        std::fs::write(&csv, table.to_csv()).map_err(data_err(&csv))?;
        if let Some(t) = comparison {
            write_json(&dir.join("comparison.json"), &t)?;
            let csv = dir.join("comparison.csv");
            std::fs::write(&csv, t.to_csv()).map_err(data_err(&csv))?;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<(), PipelineError> {
        const STAGES: [(&str, &str); 7] = [
            ("raw", "synth"),
            ("preprocessed", "preprocess"),
            ("connect", "connect"),
            ("select", "select"),
            ("labels", "label"),
            ("train", "train"),
            ("evaluate", "evaluate"),
        ];
        let mut found = Vec::new();
        let mut absent = Vec::new();
        for (stage, producer) in STAGES {
            let files = json_files(&self.stage(stage));
            if files.is_empty() {
                absent.push(producer.to_string());
            }
            found.extend(files.into_iter().map(|f| (stage, producer, f)));
        }
        if found.is_empty() {
            return Err(missing(&self.root, "synth"));
        }
        let dir = self.open_stage("report")?;
        let mut artifacts = Vec::new();
        for (stage, producer, rel) in found {
            let target = dir.join(stage).join(&rel);
            if let Some(parent) = target.parent() {
                std::fs::create_dir_all(parent).map_err(data_err(parent))?;
            }
            let source = self.stage(stage).join(&rel);
            std::fs::copy(&source, &target).map_err(data_err(&source))?;
            artifacts.push(IndexEntry { path: format!("{stage}/{}", rel.display()), producer: producer.to_string() });
        }
        write_json(&dir.join("index.json"), &ReportIndex { schema_version: SCHEMA_VERSION, artifacts, missing: absent })
    }
}

/// JSON files below `dir` relative to it, sorted, excluding stamps and
/// recording sidecars.
fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut pending = vec![PathBuf::new()];
    while let Some(rel) = pending.pop() {
        let Ok(entries) = std::fs::read_dir(dir.join(&rel)) else { continue };
        for e in entries.flatten() {
            let name = rel.join(e.file_name());
            let path = e.path();
            if path.is_dir() {
                pending.push(name);
            } else {
                let file = e.file_name().to_string_lossy().into_owned();
                if file.ends_with(".json") && file != "stamp.json" && !file.ends_with(".meta.json") {
                    out.push(name);
                }
            }
        }
    }
    out.sort();
    out
}

//! Recording files: a CSV of samples plus a `<name>.meta.json` sidecar.
//!
//! The CSV header is `t,Fp1,...,O2`; `t` is in seconds at exact `1/fs`
//! spacing and sample values are decimal microvolts. Values are written with
//! the shortest representation that parses back to the same `f64`, so a
//! save/load cycle is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::montage::Montage;
use crate::recording::{DataError, Gender, Recording, TaskRound};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject_id: String,
    pub gender: Gender,
    pub sampling_rate_hz: f64,
    pub rounds: Vec<TaskRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline_stage: Option<String>,
}

/// Sidecar path belonging to a recording CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    let stem = csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv_path.with_file_name(format!("{stem}.meta.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text)
        .map_err(|e| DataError::Sidecar { path: path.display().to_string(), message: e.to_string() })
}

/// Loads a recording and reorders its columns into montage order.
pub fn load_recording(path: &Path, montage: &Montage) -> Result<Recording, DataError> {
    let meta = read_sidecar(&sidecar_path(path))?;
    if !(meta.sampling_rate_hz > 0.0 && meta.sampling_rate_hz.is_finite()) {
        return Err(DataError::SamplingRate(meta.sampling_rate_hz));
    }
    let fs = meta.sampling_rate_hz;

    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(std::io::BufReader::new(file));
    let header: Vec<String> =
        reader.headers().map_err(|e| DataError::Csv(e.to_string()))?.iter().map(str::to_string).collect();
    let t_col = header.iter().position(|h| h == "t").ok_or_else(|| DataError::MissingChannel("t".into()))?;
    let columns: Vec<usize> = montage
        .channels()
        .iter()
        .map(|c| header.iter().position(|h| *h == c.name).ok_or_else(|| DataError::MissingChannel(c.name.clone())))
        .collect::<Result<_, _>>()?;

    let n_ch = columns.len();
    let mut per_channel: Vec<Vec<f64>> = vec![Vec::new(); n_ch];
    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    let mut last_t = f64::NEG_INFINITY;
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(DataError::Csv(e.to_string())),
        }
        row += 1;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow { row, expected: header.len(), found: record.len() });
        }
        let parse = |col: usize| -> Result<f64, DataError> {
            let raw = record.get(col).unwrap_or("").trim();
            raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::NonNumeric {
                row,
                field: header[col].clone(),
                value: raw.to_string(),
            })
        };
        let t = parse(t_col)?;
        let expected = (row - 1) as f64 / fs;
        if t <= last_t || (t - expected).abs() > 1e-6 + 1e-9 * expected.abs() {
            return Err(DataError::TimeColumn { row, value: t });
        }
        last_t = t;
        for (k, &col) in columns.iter().enumerate() {
            per_channel[k].push(parse(col)?);
        }
    }
    if row == 0 {
        return Err(DataError::Empty);
    }
    let mut samples = Array2::zeros((n_ch, row));
    for (k, values) in per_channel.into_iter().enumerate() {
        samples.row_mut(k).assign(&ndarray::Array1::from(values));
    }
    let rec = Recording::new(meta.subject_id, meta.gender, fs, montage.names(), samples, meta.rounds)?;
    Ok(match meta.pipeline_stage {
        Some(stage) => rec.with_stage(stage),
        None => rec,
    })
}

/// Writes `rec` to `path` and its sidecar next to it.
pub fn save_recording(rec: &Recording, path: &Path) -> Result<(), DataError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
    }
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    let mut line = String::with_capacity(32 * (rec.n_channels() + 1));
    line.push('t');
    for c in rec.channels() {
        line.push(',');
        line.push_str(c);
    }
    line.push('\n');
    out.write_all(line.as_bytes()).map_err(io_err(path))?;
    let samples = rec.samples();
    let fs = rec.sampling_rate();
    use std::fmt::Write as _;
    for i in 0..rec.n_samples() {
        line.clear();
        let _ = write!(line, "{}", i as f64 / fs);
        for c in 0..rec.n_channels() {
            let _ = write!(line, ",{}", samples[[c, i]]);
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))?;

    let meta = Sidecar {
        subject_id: rec.subject_id().to_string(),
        gender: rec.gender(),
        sampling_rate_hz: fs,
        rounds: rec.annotations().to_vec(),
        pipeline_stage: rec.stage().map(str::to_string),
    };
    let meta_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&meta).expect("sidecar serializes");
    std::fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))
}

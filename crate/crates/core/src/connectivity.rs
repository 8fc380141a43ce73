//! Pearson functional connectivity, cross-subject aggregation and electrode
//! ranking.
//!
//! Ties are always broken lexicographically on `(channel_a, channel_b)` so
//! every ordering is reproducible.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recording::{Gender, Recording, Task, TaskRound};

#[derive(Debug, Error, PartialEq)]
pub enum ConnectivityError {
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples, got {0}")]
    TooShort(usize),
    #[error("correlation undefined: constant input")]
    ConstantInput,
    #[error("channel {0} is constant; correlation undefined")]
    ConstantChannel(String),
    #[error("matrices disagree on the channel set")]
    InconsistentChannels,
    #[error("no matrices to aggregate")]
    Empty,
    #[error("weight/group mismatch: {0}")]
    WeightMismatch(String),
    #[error("performance values must be positive, got {0}")]
    NonPositivePerformance(f64),
    #[error("k = {k} outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },
}

/// Pearson correlation coefficient of two equal-length series.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64, ConnectivityError> {
    if x.len() != y.len() {
        return Err(ConnectivityError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(ConnectivityError::TooShort(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(ConnectivityError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Where a matrix came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<Task>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<u8>,
    /// Frequency band name, or `None` for broadband.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<String>,
}

/// Symmetric PCC matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub channels: Vec<String>,
    values: Array2<f64>,
    pub provenance: Provenance,
}

impl ConnectivityMatrix {
    /// Wraps `values` after checking symmetry, unit diagonal and range.
    pub fn from_values(channels: Vec<String>, values: Array2<f64>, provenance: Provenance) -> Result<Self, String> {
        let c = channels.len();
        if values.dim() != (c, c) {
            return Err(format!("matrix is {:?}, expected {c}x{c}", values.dim()));
        }
        for i in 0..c {
            if values[[i, i]] != 1.0 {
                return Err(format!("diagonal entry {i} is {}", values[[i, i]]));
            }
            for j in 0..c {
                let v = values[[i, j]];
                if v != values[[j, i]] || !(-1.0..=1.0).contains(&v) {
                    return Err(format!("entry ({i},{j}) = {v} breaks symmetry or range"));
                }
            }
        }
        Ok(ConnectivityMatrix { channels, values, provenance })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn size(&self) -> usize {
        self.channels.len()
    }
}

/// PCC between every pair of rows of a channel-major block.
pub fn connectivity_matrix(
    data: ArrayView2<'_, f64>,
    channels: &[String],
    provenance: Provenance,
) -> Result<ConnectivityMatrix, ConnectivityError> {
    let (c, n) = data.dim();
    if n < 2 {
        return Err(ConnectivityError::TooShort(n));
    }
    if channels.len() != c {
        return Err(ConnectivityError::InconsistentChannels);
    }
    // Centre and scale every row to unit norm; correlations are then dot products.
    let mut unit = Array2::<f64>::zeros((c, n));
    for (k, row) in data.rows().into_iter().enumerate() {
        let mean = row.sum() / n as f64;
        let mut dst = unit.row_mut(k);
        dst.assign(&row);
        dst -= mean;
        let norm = dst.dot(&dst).sqrt();
        if norm == 0.0 {
            return Err(ConnectivityError::ConstantChannel(channels[k].clone()));
        }
        dst /= norm;
    }
    let mut values = Array2::<f64>::eye(c);
    for i in 0..c {
        for j in i + 1..c {
            let r = unit.row(i).dot(&unit.row(j)).clamp(-1.0, 1.0);
            values[[i, j]] = r;
            values[[j, i]] = r;
        }
    }
    Ok(ConnectivityMatrix { channels: channels.to_vec(), values, provenance })
}

/// One matrix per annotated round of `rec`, computed on the full round.
pub fn round_matrices(rec: &Recording) -> Result<Vec<ConnectivityMatrix>, ConnectivityError> {
    rec.annotations()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            connectivity_matrix(
                rec.round_samples(i),
                rec.channels(),
                Provenance {
                    subject_id: Some(rec.subject_id().to_string()),
                    gender: Some(rec.gender()),
                    task: Some(r.task),
                    difficulty: Some(r.difficulty),
                    band: None,
                },
            )
        })
        .collect()
}

/// An unordered channel pair with a weight; `a` precedes `b` in channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub weight: f64,
}

fn pair_order(x: &Edge, y: &Edge) -> Ordering {
    (x.a.as_str(), x.b.as_str()).cmp(&(y.a.as_str(), y.b.as_str()))
}

/// Descending by weight, ties lexicographic.
fn by_weight_desc(x: &Edge, y: &Edge) -> Ordering {
    y.weight.total_cmp(&x.weight).then_with(|| pair_order(x, y))
}

fn upper_triangle(channels: &[String], values: ArrayView2<'_, f64>) -> Vec<Edge> {
    let c = channels.len();
    let mut out = Vec::with_capacity(c * (c.saturating_sub(1)) / 2);
    for i in 0..c {
        for j in i + 1..c {
            out.push(Edge { a: channels[i].clone(), b: channels[j].clone(), weight: values[[i, j]] });
        }
    }
    out
}

/// Sorted edge list of one (subject, task, difficulty) matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingEntry {
    pub provenance: Provenance,
    pub edges: Vec<Edge>,
}

/// Every input matrix's upper triangle sorted by correlation, descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEmbedding {
    pub channels: Vec<String>,
    pub entries: Vec<EmbeddingEntry>,
}

pub fn build_embedding(matrices: &[ConnectivityMatrix]) -> Result<CorrelationEmbedding, ConnectivityError> {
    let first = matrices.first().ok_or(ConnectivityError::Empty)?;
    if matrices.iter().any(|m| m.channels != first.channels) {
        return Err(ConnectivityError::InconsistentChannels);
    }
    let entries = matrices
        .iter()
        .map(|m| {
            let mut edges = upper_triangle(&m.channels, m.values());
            edges.sort_by(by_weight_desc);
            EmbeddingEntry { provenance: m.provenance.clone(), edges }
        })
        .collect();
    Ok(CorrelationEmbedding { channels: first.channels.clone(), entries })
}

/// Per-level weights proportional to mean performance, summing to one.
pub fn difficulty_weights(mean_performance: &[f64]) -> Result<Vec<f64>, ConnectivityError> {
    if mean_performance.is_empty() {
        return Err(ConnectivityError::Empty);
    }
    if let Some(&bad) = mean_performance.iter().find(|&&p| !(p > 0.0)) {
        return Err(ConnectivityError::NonPositivePerformance(bad));
    }
    let total: f64 = mean_performance.iter().sum();
    Ok(mean_performance.iter().map(|p| p / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AggregationMode {
    /// Entrywise sum of every matrix.
    OverallSum,
    /// Entrywise mean; for comparing cohorts of different size.
    OverallMean,
    /// Sum with each matrix scaled by the weight of its difficulty level
    /// (`weights[d - 1]`).
    Weighted { weights: Vec<f64> },
    /// Sum over the matrices of one gender.
    Cohort { gender: Gender },
}

/// Matrix-shaped aggregate; entries may leave [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMatrix {
    pub channels: Vec<String>,
    pub values: Array2<f64>,
    pub mode: AggregationMode,
    /// Number of matrices that contributed.
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl AggregateMatrix {
    pub fn from_matrix(m: &ConnectivityMatrix) -> Self {
        AggregateMatrix {
            channels: m.channels.clone(),
            values: m.values.clone(),
            mode: AggregationMode::OverallSum,
            count: 1,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }
}

/// Pairwise (tree) sum, fixing the floating-point summation order.
fn tree_sum(mut terms: Vec<Array2<f64>>) -> Array2<f64> {
    while terms.len() > 1 {
        let mut next = Vec::with_capacity(terms.len().div_ceil(2));
        let mut it = terms.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a + &b),
                None => next.push(a),
            }
        }
        terms = next;
    }
    terms.pop().expect("at least one term")
}

pub fn aggregate(matrices: &[ConnectivityMatrix], mode: AggregationMode) -> Result<AggregateMatrix, ConnectivityError> {
    let first = matrices.first().ok_or(ConnectivityError::Empty)?;
    if matrices.iter().any(|m| m.channels != first.channels) {
        return Err(ConnectivityError::InconsistentChannels);
    }
    let (terms, count): (Vec<Array2<f64>>, usize) = match &mode {
        AggregationMode::OverallSum | AggregationMode::OverallMean => {
            (matrices.iter().map(|m| m.values.clone()).collect(), matrices.len())
        }
        AggregationMode::Weighted { weights } => {
            let levels: BTreeSet<u8> = matrices
                .iter()
                .map(|m| m.provenance.difficulty.ok_or_else(|| ConnectivityError::WeightMismatch("matrix without difficulty".into())))
                .collect::<Result<_, _>>()?;
            if levels.len() != weights.len() || levels.iter().any(|&d| d == 0 || d as usize > weights.len()) {
                return Err(ConnectivityError::WeightMismatch(format!(
                    "{} weights for difficulty levels {:?}",
                    weights.len(),
                    levels
                )));
            }
            let terms = matrices
                .iter()
                .map(|m| &m.values * weights[m.provenance.difficulty.unwrap() as usize - 1])
                .collect();
            (terms, matrices.len())
        }
        AggregationMode::Cohort { gender } => {
            let selected: Vec<Array2<f64>> = matrices
                .iter()
                .filter(|m| m.provenance.gender == Some(*gender))
                .map(|m| m.values.clone())
                .collect();
            if selected.is_empty() {
                return Err(ConnectivityError::Empty);
            }
            let n = selected.len();
            (selected, n)
        }
    };
    let mut values = tree_sum(terms);
    if matches!(mode, AggregationMode::OverallMean) {
        values /= count as f64;
    }
    Ok(AggregateMatrix { channels: first.channels.clone(), values, mode, count, label: None })
}

/// Entrywise pairwise sum of several aggregates over the same channels.
pub fn sum_aggregates(parts: &[AggregateMatrix], mode: AggregationMode) -> Result<AggregateMatrix, ConnectivityError> {
    let first = parts.first().ok_or(ConnectivityError::Empty)?;
    if parts.iter().any(|p| p.channels != first.channels) {
        return Err(ConnectivityError::InconsistentChannels);
    }
    Ok(AggregateMatrix {
        channels: first.channels.clone(),
        values: tree_sum(parts.iter().map(|p| p.values.clone()).collect()),
        mode,
        count: parts.iter().map(|p| p.count).sum(),
        label: None,
    })
}

/// Mean performance per difficulty level (1-based, ascending) for each task.
pub fn mean_performance_by_level<'a>(rounds: impl IntoIterator<Item = &'a TaskRound>) -> BTreeMap<Task, Vec<f64>> {
    let mut acc: BTreeMap<(Task, u8), (f64, usize)> = BTreeMap::new();
    for r in rounds {
        let e = acc.entry((r.task, r.difficulty)).or_insert((0.0, 0));
        e.0 += r.performance;
        e.1 += 1;
    }
    let mut out: BTreeMap<Task, Vec<f64>> = BTreeMap::new();
    for ((task, _), (sum, n)) in acc {
        out.entry(task).or_default().push(sum / n as f64);
    }
    out
}

/// Difficulty-weighted sum per task, then summed over tasks.
pub fn weighted_task_aggregate(
    matrices: &[ConnectivityMatrix],
    performance: &BTreeMap<Task, Vec<f64>>,
) -> Result<(AggregateMatrix, BTreeMap<Task, AggregateMatrix>), ConnectivityError> {
    let mut per_task = BTreeMap::new();
    for (&task, perf) in performance {
        let group: Vec<ConnectivityMatrix> =
            matrices.iter().filter(|m| m.provenance.task == Some(task)).cloned().collect();
        if group.is_empty() {
            continue;
        }
        let weights = difficulty_weights(perf)?;
        per_task.insert(task, aggregate(&group, AggregationMode::Weighted { weights })?.with_label(task.to_string()));
    }
    let parts: Vec<AggregateMatrix> = per_task.values().cloned().collect();
    let total = sum_aggregates(&parts, AggregationMode::OverallSum)?.with_label("difficulty-weighted");
    Ok((total, per_task))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedEdge {
    pub a: String,
    pub b: String,
    pub weight: f64,
    pub sign: Sign,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeSet {
    pub edges: Vec<SignedEdge>,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    fn from_edges(edges: Vec<Edge>) -> Self {
        EdgeSet {
            edges: edges
                .into_iter()
                .map(|e| SignedEdge {
                    sign: if e.weight < 0.0 { Sign::Negative } else { Sign::Positive },
                    a: e.a,
                    b: e.b,
                    weight: e.weight,
                })
                .collect(),
        }
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        self.edges.iter().map(|e| (e.a.clone(), e.b.clone())).collect()
    }
}

/// Positive and negative edges, each sorted by |weight| descending. Exact
/// zeros belong to neither set.
pub fn split_by_sign(agg: &AggregateMatrix) -> (EdgeSet, EdgeSet) {
    let edges = upper_triangle(&agg.channels, agg.values.view());
    let by_magnitude = |x: &Edge, y: &Edge| y.weight.abs().total_cmp(&x.weight.abs()).then_with(|| pair_order(x, y));
    let mut pos: Vec<Edge> = edges.iter().filter(|e| e.weight > 0.0).cloned().collect();
    let mut neg: Vec<Edge> = edges.into_iter().filter(|e| e.weight < 0.0).collect();
    pos.sort_by(by_magnitude);
    neg.sort_by(by_magnitude);
    (EdgeSet::from_edges(pos), EdgeSet::from_edges(neg))
}

/// The `k` largest-valued edges.
pub fn top_k_edges(agg: &AggregateMatrix, k: usize) -> Result<EdgeSet, ConnectivityError> {
    let c = agg.channels.len();
    let max = c * c.saturating_sub(1) / 2;
    if k == 0 || k > max {
        return Err(ConnectivityError::KOutOfRange { k, max });
    }
    let mut edges = upper_triangle(&agg.channels, agg.values.view());
    edges.sort_by(by_weight_desc);
    edges.truncate(k);
    Ok(EdgeSet::from_edges(edges))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: String,
    pub score: f64,
}

/// Weighted degree: sum of |weight| over incident edges. Channels from
/// `all_channels` without an incident edge follow with score 0.
pub fn rank_channels(edges: &EdgeSet, all_channels: &[String]) -> Vec<ChannelScore> {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for e in &edges.edges {
        *scores.entry(e.a.clone()).or_insert(0.0) += e.weight.abs();
        *scores.entry(e.b.clone()).or_insert(0.0) += e.weight.abs();
    }
    let mut ranked: Vec<ChannelScore> =
        scores.into_iter().map(|(channel, score)| ChannelScore { channel, score }).collect();
    ranked.sort_by(|x, y| y.score.total_cmp(&x.score).then_with(|| x.channel.cmp(&y.channel)));
    let mut rest: Vec<&String> = all_channels.iter().filter(|c| !ranked.iter().any(|r| &r.channel == *c)).collect();
    rest.sort();
    ranked.extend(rest.into_iter().map(|c| ChannelScore { channel: c.clone(), score: 0.0 }));
    ranked
}

pub const SCHEMA_VERSION: u32 = 1;

/// JSON form shared by matrices and aggregates for the plotting side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixExport {
    pub schema_version: u32,
    pub channels: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub provenance: serde_json::Value,
}

impl From<&ConnectivityMatrix> for MatrixExport {
    fn from(m: &ConnectivityMatrix) -> Self {
        MatrixExport {
            schema_version: SCHEMA_VERSION,
            channels: m.channels.clone(),
            values: m.values.rows().into_iter().map(|r| r.to_vec()).collect(),
            provenance: serde_json::to_value(&m.provenance).expect("provenance serializes"),
        }
    }
}

impl From<&AggregateMatrix> for MatrixExport {
    fn from(m: &AggregateMatrix) -> Self {
        MatrixExport {
            schema_version: SCHEMA_VERSION,
            channels: m.channels.clone(),
            values: m.values.rows().into_iter().map(|r| r.to_vec()).collect(),
            provenance: serde_json::json!({ "aggregation": m.mode, "count": m.count, "label": m.label }),
        }
    }
}

impl TryFrom<&MatrixExport> for ConnectivityMatrix {
    type Error = String;
    fn try_from(e: &MatrixExport) -> Result<Self, String> {
        let c = e.channels.len();
        if e.values.len() != c || e.values.iter().any(|r| r.len() != c) {
            return Err(format!("matrix rows do not form a {c}x{c} square"));
        }
        let values = Array2::from_shape_fn((c, c), |(i, j)| e.values[i][j]);
        let provenance = serde_json::from_value(e.provenance.clone()).map_err(|err| err.to_string())?;
        ConnectivityMatrix::from_values(e.channels.clone(), values, provenance)
    }
}

/// JSON form of an edge set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSetExport {
    pub schema_version: u32,
    /// `top`, `positive` or `negative`.
    pub kind: String,
    pub channels: Vec<String>,
    pub edges: Vec<SignedEdge>,
}

impl EdgeSetExport {
    pub fn new(kind: &str, channels: &[String], set: &EdgeSet) -> Self {
        EdgeSetExport { schema_version: SCHEMA_VERSION, kind: kind.to_string(), channels: channels.to_vec(), edges: set.edges.clone() }
    }

    pub fn edge_set(&self) -> EdgeSet {
        EdgeSet { edges: self.edges.clone() }
    }
}

/// CSV with a header row and a leading channel-name column.
pub fn write_matrix_csv(channels: &[String], values: ArrayView2<'_, f64>, path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "channel")?;
    for c in channels {
        write!(out, ",{c}")?;
    }
    writeln!(out)?;
    for (i, c) in channels.iter().enumerate() {
        write!(out, "{c}")?;
        for j in 0..channels.len() {
            write!(out, ",{}", values[[i, j]])?;
        }
        writeln!(out)?;
    }
    out.flush()
}

//! Cross-validation, confusion-matrix metrics and electrode-set comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::EpochDataset;
use crate::neural::{self, Model, ModelKind, NeuralError, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {class} has {count} members, fewer than {k} folds")]
    ClassTooSmall { class: usize, count: usize, k: usize },
    #[error("need at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("{groups} subjects cannot fill {k} folds")]
    TooFewGroups { groups: usize, k: usize },
    #[error("fold plan covers {plan} samples but the dataset has {data}")]
    PlanMismatch { plan: usize, data: usize },
    #[error("labels and groups differ in length")]
    GroupLength,
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("prediction {0} outside the class range")]
    Prediction(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Every epoch of a subject stays in one fold.
    #[default]
    Subject,
    Epoch,
}

impl std::str::FromStr for SplitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "subject" => Ok(SplitMode::Subject),
            "epoch" => Ok(SplitMode::Epoch),
            other => Err(format!("unknown split {other:?} (expected subject or epoch)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub mode: SplitMode,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn n_samples(&self) -> usize {
        self.folds.iter().map(|f| f.test.len()).sum()
    }

    fn from_assignment(k: usize, seed: u64, mode: SplitMode, fold_of: &[usize]) -> Self {
        let folds = (0..k)
            .map(|f| {
                let (test, train): (Vec<usize>, Vec<usize>) = (0..fold_of.len()).partition(|&i| fold_of[i] == f);
                Fold { train, test }
            })
            .collect();
        FoldPlan { k, seed, mode, folds }
    }
}

fn class_members(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    by_class
}

/// Shuffles each class with its own seeded stream and deals members to folds
/// round-robin. Each class starts where the previous one stopped, so fold
/// sizes differ by at most one.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for (class, mut members) in class_members(labels) {
        if members.len() < k {
            return Err(EvalError::ClassTooSmall { class, count: members.len(), k });
        }
        members.shuffle(&mut crate::rng::stream(seed, &format!("folds/class/{class}")));
        for i in members {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan::from_assignment(k, seed, SplitMode::Epoch, &fold_of))
}

/// Stratification at subject granularity. Subjects are shuffled, then placed
/// largest first into the fold whose class counts stay closest to the
/// per-fold target.
pub fn grouped_folds<G: AsRef<str>>(labels: &[usize], groups: &[G], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    if labels.len() != groups.len() {
        return Err(EvalError::GroupLength);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g.as_ref()).or_default().push(i);
    }
    if members.len() < k {
        return Err(EvalError::TooFewGroups { groups: members.len(), k });
    }
    let mut order: Vec<(&str, Vec<usize>)> = members.into_iter().collect();
    order.shuffle(&mut crate::rng::stream(seed, "folds/groups"));
    order.sort_by_key(|(_, m)| std::cmp::Reverse(m.len()));

    let mut totals = vec![0.0; n_classes];
    for &c in labels {
        totals[c] += 1.0;
    }
    let target: Vec<f64> = totals.iter().map(|t| t / k as f64).collect();
    let mut counts = vec![vec![0.0; n_classes]; k];
    let mut sizes = vec![0usize; k];
    let mut fold_of = vec![0; labels.len()];
    for (_, idx) in &order {
        let mut add = vec![0.0; n_classes];
        for &i in idx {
            add[labels[i]] += 1.0;
        }
        let cost = |f: usize| -> f64 {
            (0..n_classes).map(|c| (counts[f][c] + add[c] - target[c]).powi(2)).sum()
        };
        // Empty folds first so every fold receives a subject.
        let empty = (0..k).filter(|&f| sizes[f] == 0).count();
        let best = (0..k)
            .filter(|&f| empty == 0 || sizes[f] == 0)
            .min_by(|&a, &b| cost(a).total_cmp(&cost(b)).then(a.cmp(&b)))
            .expect("k >= 2");
        for c in 0..n_classes {
            counts[best][c] += add[c];
        }
        sizes[best] += idx.len();
        for &i in idx {
            fold_of[i] = best;
        }
    }
    Ok(FoldPlan::from_assignment(k, seed, SplitMode::Subject, &fold_of))
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { counts: vec![vec![0; n_classes]; n_classes] }
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Self, EvalError> {
        let mut cm = ConfusionMatrix::new(n_classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            if p >= n_classes || t >= n_classes {
                return Err(EvalError::Prediction(p.max(t)));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn one_vs_rest(&self, positive: usize) -> BinaryCounts {
        let n = self.n_classes();
        let tp = self.counts[positive][positive];
        let fn_ = (0..n).map(|p| self.counts[positive][p]).sum::<u64>() - tp;
        let fp = (0..n).map(|t| self.counts[t][positive]).sum::<u64>() - tp;
        BinaryCounts { tp, fp, fn_, tn: self.total() - tp - fn_ - fp }
    }

    /// Fraction of samples on the diagonal.
    pub fn accuracy_top1(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.n_classes()).map(|c| self.counts[c][c]).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub npv: f64,
    pub f1: f64,
}

impl MetricSet {
    pub const NAMES: [&'static str; 6] = ["accuracy", "precision", "recall", "specificity", "npv", "f1"];

    pub fn values(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.specificity, self.npv, self.f1]
    }

    fn mean<'a>(sets: impl IntoIterator<Item = &'a MetricSet>) -> MetricSet {
        let mut sum = [0.0; 6];
        let mut n = 0.0;
        for s in sets {
            for (a, v) in sum.iter_mut().zip(s.values()) {
                *a += v;
            }
            n += 1.0;
        }
        let m = sum.map(|v| if n > 0.0 { v / n } else { 0.0 });
        MetricSet { accuracy: m[0], precision: m[1], recall: m[2], specificity: m[3], npv: m[4], f1: m[5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub counts: BinaryCounts,
    pub metrics: MetricSet,
    /// Names of metrics whose denominator was zero; those read 0.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub degenerate: Vec<String>,
}

pub fn metrics_from_counts(counts: BinaryCounts) -> BinaryMetrics {
    let BinaryCounts { tp, fp, fn_, tn } = counts;
    let mut degenerate = Vec::new();
    let mut ratio = |name: &str, num: u64, den: u64| {
        if den == 0 {
            degenerate.push(name.to_string());
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let accuracy = ratio("accuracy", tp + tn, tp + tn + fp + fn_);
    let precision = ratio("precision", tp, tp + fp);
    let recall = ratio("recall", tp, tp + fn_);
    let specificity = ratio("specificity", tn, tn + fp);
    let npv = ratio("npv", tn, tn + fn_);
    // Equal to 2PR / (P + R) but rounded once, and defined whenever any
    // positive was predicted or present.
    let f1 = ratio("f1", 2 * tp, 2 * tp + fp + fn_);
    BinaryMetrics { counts, metrics: MetricSet { accuracy, precision, recall, specificity, npv, f1 }, degenerate }
}

pub fn binary_metrics(cm: &ConfusionMatrix, positive: usize) -> BinaryMetrics {
    metrics_from_counts(cm.one_vs_rest(positive))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<BinaryMetrics>,
    /// One-vs-rest metrics averaged over classes.
    #[serde(rename = "macro")]
    pub macro_avg: MetricSet,
    pub accuracy_top1: f64,
}

impl FoldResult {
    pub fn new(fold: usize, confusion: ConfusionMatrix) -> Self {
        let per_class: Vec<BinaryMetrics> = (0..confusion.n_classes()).map(|c| binary_metrics(&confusion, c)).collect();
        let macro_avg = MetricSet::mean(per_class.iter().map(|m| &m.metrics));
        let accuracy_top1 = confusion.accuracy_top1();
        FoldResult { fold, confusion, per_class, macro_avg, accuracy_top1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub model: String,
    pub electrode_set: String,
    pub channels: Vec<String>,
    pub split: SplitMode,
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    /// Macro metrics averaged over folds.
    pub aggregate: MetricSet,
    pub accuracy_top1: f64,
}

impl EvaluationReport {
    pub fn from_folds(model: &str, electrode_set: &str, channels: Vec<String>, plan: &FoldPlan, folds: Vec<FoldResult>) -> Self {
        let aggregate = MetricSet::mean(folds.iter().map(|f| &f.macro_avg));
        let accuracy_top1 = folds.iter().map(|f| f.accuracy_top1).sum::<f64>() / folds.len().max(1) as f64;
        EvaluationReport {
            schema_version: SCHEMA_VERSION,
            model: model.to_string(),
            electrode_set: electrode_set.to_string(),
            channels,
            split: plan.mode,
            k: plan.k,
            seed: plan.seed,
            folds,
            aggregate,
            accuracy_top1,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("report serialises") + "\n")?;
        Ok(())
    }
}

/// Runs `fit_predict(fold, train, test)` on every fold in parallel and scores
/// the predictions for the test indices.
pub fn cross_validate<F>(plan: &FoldPlan, labels: &[usize], n_classes: usize, fit_predict: F) -> Result<Vec<FoldResult>, EvalError>
where
    F: Fn(usize, &[usize], &[usize]) -> Result<Vec<usize>, EvalError> + Sync,
{
    if plan.n_samples() != labels.len() {
        return Err(EvalError::PlanMismatch { plan: plan.n_samples(), data: labels.len() });
    }
    plan.folds
        .par_iter()
        .enumerate()
        .map(|(i, fold)| {
            let wrap = |e: EvalError| EvalError::Fold { fold: i, source: Box::new(e) };
            let predicted = fit_predict(i, &fold.train, &fold.test).map_err(wrap)?;
            let truth: Vec<usize> = fold.test.iter().map(|&t| labels[t]).collect();
            Ok(FoldResult::new(i, ConfusionMatrix::from_predictions(&truth, &predicted, n_classes).map_err(wrap)?))
        })
        .collect()
}

/// Trains a fresh preset network per fold and scores it.
pub fn evaluate_cv(
    kind: ModelKind,
    data: &EpochDataset,
    plan: &FoldPlan,
    config: &TrainConfig,
    electrode_set: &str,
) -> Result<EvaluationReport, EvalError> {
    let labels = data.labels();
    let folds = cross_validate(plan, &labels, data.n_classes(), |fold, train, test| {
        let seed = crate::rng::derive_seed(config.seed, &format!("fold/{fold}"));
        let (h, w) = data.model_dims();
        let spec = neural::preset(kind, h, w, data.sampling_rate(), seed);
        let mut model = Model::build(&spec)?;
        let train_set = data.subset(train).to_neural()?;
        neural::train(&mut model, &train_set, None, &TrainConfig { seed, ..config.clone() })?;
        let test_set = data.subset(test).to_neural()?;
        let probs = model.predict_proba(&test_set.x, 256)?;
        Ok(neural::predictions(&probs))
    })?;
    Ok(EvaluationReport::from_folds(&kind.to_string(), electrode_set, data.channels().to_vec(), plan, folds))
}

/// A named channel subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeSet {
    pub id: String,
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub reports: Vec<EvaluationReport>,
}

impl ComparisonTable {
    pub fn get(&self, model: &str, set: &str) -> Option<&EvaluationReport> {
        self.reports.iter().find(|r| r.model == model && r.electrode_set == set)
    }

    /// One row per model and electrode set.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,electrode_set,");
        out.push_str(&MetricSet::NAMES.join(","));
        out.push_str(",accuracy_top1\n");
        for r in &self.reports {
            out.push_str(&format!("{},{}", r.model, r.electrode_set));
            for v in r.aggregate.values() {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6}\n", r.accuracy_top1));
        }
        out
    }
}

/// Evaluates every model on every electrode set with one shared fold plan.
pub fn compare_electrode_sets(
    data: &EpochDataset,
    sets: &[ElectrodeSet],
    models: &[ModelKind],
    plan: &FoldPlan,
    config: &TrainConfig,
) -> Result<ComparisonTable, EvalError> {
    let mut reports = Vec::new();
    for set in sets {
        let sliced = data.select_channels(&set.channels).map_err(EvalError::UnknownChannel)?;
        for &kind in models {
            reports.push(evaluate_cv(kind, &sliced, plan, config, &set.id)?);
        }
    }
    Ok(ComparisonTable { schema_version: SCHEMA_VERSION, reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn hand_computed_binary_case() {
        let m = metrics_from_counts(BinaryCounts { tp: 3, fp: 1, fn_: 2, tn: 4 }).metrics;
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert_eq!(m.specificity, 0.8);
        assert_eq!(m.npv, 4.0 / 6.0);
        assert_eq!(m.f1, 2.0 / 3.0);
        assert_eq!(m.accuracy, 0.7);
        // The same counts as a 2x2 matrix with class 0 positive.
        let cm = ConfusionMatrix { counts: vec![vec![3, 2], vec![1, 4]] };
        assert_eq!(cm.one_vs_rest(0), BinaryCounts { tp: 3, fp: 1, fn_: 2, tn: 4 });
    }

    #[test]
    fn perfect_classifier_scores_one() {
        let cm = ConfusionMatrix { counts: vec![vec![5, 0, 0], vec![0, 5, 0], vec![0, 0, 5]] };
        for c in 0..3 {
            let b = binary_metrics(&cm, c);
            assert!(b.degenerate.is_empty());
            assert_eq!(b.metrics.values(), [1.0; 6]);
        }
        assert_eq!(FoldResult::new(0, cm).accuracy_top1, 1.0);
    }

    #[test]
    fn empty_class_is_flagged() {
        let cm = ConfusionMatrix { counts: vec![vec![4, 1, 0], vec![2, 3, 0], vec![0, 0, 0]] };
        let b = binary_metrics(&cm, 2);
        assert!(b.degenerate.contains(&"precision".to_string()));
        assert!(b.degenerate.contains(&"recall".to_string()));
        assert_eq!(b.metrics.precision, 0.0);
        assert_eq!(b.metrics.specificity, 1.0);
        assert!(b.degenerate.contains(&"f1".to_string()));

        // All wrong is a well-defined zero, not a degenerate cell.
        let wrong = metrics_from_counts(BinaryCounts { tp: 0, fp: 2, fn_: 3, tn: 5 });
        assert_eq!(wrong.metrics.f1, 0.0);
        assert!(!wrong.degenerate.contains(&"f1".to_string()));
    }

    #[test]
    fn macro_accuracy_differs_from_top1() {
        let cm = ConfusionMatrix { counts: vec![vec![2, 1, 0], vec![0, 3, 0], vec![1, 0, 2]] };
        let f = FoldResult::new(0, cm);
        assert!(close(f.accuracy_top1, 7.0 / 9.0, 1e-15));
        // One-vs-rest accuracy per class: (9-2)/9 for classes 0 and 1, (9-1)/9 for class 2.
        assert!(close(f.macro_avg.accuracy, (7.0 + 8.0 + 8.0) / 27.0, 1e-15));
    }

    #[test]
    fn ten_per_class_gives_one_of_each_per_fold() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let plan = stratified_folds(&labels, 10, 7).unwrap();
        for f in &plan.folds {
            let mut c: Vec<usize> = f.test.iter().map(|&i| labels[i]).collect();
            c.sort();
            assert_eq!(c, vec![0, 1, 2]);
        }
        assert!(matches!(stratified_folds(&labels, 1, 0), Err(EvalError::TooFewFolds(1))));
        assert!(matches!(stratified_folds(&labels, 11, 0), Err(EvalError::ClassTooSmall { .. })));
    }

    fn assert_partition(plan: &FoldPlan, n: usize) {
        let mut seen = vec![0; n];
        for f in &plan.folds {
            assert_eq!(f.train.len() + f.test.len(), n);
            for &i in &f.test {
                seen[i] += 1;
            }
            assert!(f.train.iter().all(|i| !f.test.contains(i)));
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    proptest! {
        #[test]
        fn stratified_counts_within_one(labels in proptest::collection::vec(0usize..3, 30..200), k in 2usize..8, seed in any::<u64>()) {
            let members = class_members(&labels);
            prop_assume!(members.len() == 3 && members.values().all(|m| m.len() >= k));
            let plan = stratified_folds(&labels, k, seed).unwrap();
            assert_partition(&plan, labels.len());
            for f in &plan.folds {
                for (c, m) in &members {
                    let got = f.test.iter().filter(|&&i| labels[i] == *c).count() as f64;
                    prop_assert!((got - m.len() as f64 / k as f64).abs() < 1.0 + 1e-9);
                }
            }
        }

        #[test]
        fn grouped_folds_keep_subjects_together(n_groups in 10usize..25, per in 3usize..8, seed in any::<u64>()) {
            let groups: Vec<String> = (0..n_groups * per).map(|i| format!("s{}", i / per)).collect();
            let labels: Vec<usize> = (0..n_groups * per).map(|i| (i * 7 + i / per) % 3).collect();
            let plan = grouped_folds(&labels, &groups, 10, seed).unwrap();
            assert_partition(&plan, labels.len());
            for f in &plan.folds {
                prop_assert!(!f.test.is_empty());
                for &i in &f.train {
                    prop_assert!(f.test.iter().all(|&t| groups[t] != groups[i]));
                }
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(counts in proptest::collection::vec(0u64..20, 9)) {
            let cm = ConfusionMatrix { counts: counts.chunks(3).map(|r| r.to_vec()).collect() };
            prop_assume!(cm.total() > 0);
            for c in 0..3 {
                for v in binary_metrics(&cm, c).metrics.values() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn relabelling_classes_permutes_metrics(counts in proptest::collection::vec(0u64..20, 9), perm in Just([2usize, 0, 1])) {
            let cm = ConfusionMatrix { counts: counts.chunks(3).map(|r| r.to_vec()).collect() };
            prop_assume!(cm.total() > 0);
            let mut moved = ConfusionMatrix::new(3);
            for t in 0..3 {
                for p in 0..3 {
                    moved.counts[perm[t]][perm[p]] = cm.counts[t][p];
                }
            }
            for c in 0..3 {
                prop_assert_eq!(binary_metrics(&cm, c), binary_metrics(&moved, perm[c]));
            }
        }
    }

    #[test]
    fn oracle_and_constant_models() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let plan = stratified_folds(&labels, 10, 3).unwrap();
        let oracle = cross_validate(&plan, &labels, 3, |_, _, test| Ok(test.iter().map(|&i| labels[i]).collect())).unwrap();
        let report = EvaluationReport::from_folds("oracle", "all", vec![], &plan, oracle);
        assert_eq!(report.aggregate.values(), [1.0; 6]);
        assert_eq!(report.accuracy_top1, 1.0);

        let constant = cross_validate(&plan, &labels, 3, |_, _, test| Ok(vec![0; test.len()])).unwrap();
        let report = EvaluationReport::from_folds("constant", "all", vec![], &plan, constant);
        assert!(close(report.accuracy_top1, 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn fold_errors_carry_the_fold_index() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let plan = stratified_folds(&labels, 3, 0).unwrap();
        let err = cross_validate(&plan, &labels, 3, |f, _, test| if f == 2 { Ok(vec![9; test.len()]) } else { Ok(vec![0; test.len()]) })
            .unwrap_err();
        assert!(matches!(err, EvalError::Fold { fold: 2, .. }));
    }
}

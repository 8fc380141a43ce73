//! Automated corruption screening and repair.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::montage::Montage;
use crate::recording::Recording;

/// Corrupted stretches of one channel as half-open sample intervals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelCorruption {
    pub channel: String,
    pub intervals: Vec<(usize, usize)>,
    pub whole_channel: bool,
}

impl ChannelCorruption {
    pub fn corrupted_samples(&self) -> usize {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionReport {
    pub subject_id: String,
    pub n_samples: usize,
    pub channels: Vec<ChannelCorruption>,
}

impl CorruptionReport {
    pub fn is_clean(&self) -> bool {
        self.channels.iter().all(|c| c.intervals.is_empty() && !c.whole_channel)
    }

    /// Builds a report from a per-sample mask (`mask[c][i]` true when corrupt).
    pub fn from_mask(subject_id: &str, channels: &[String], mask: &[Vec<bool>]) -> Self {
        let n_samples = mask.first().map_or(0, Vec::len);
        let channels = channels
            .iter()
            .zip(mask)
            .map(|(name, m)| {
                let intervals = mask_to_intervals(m);
                let bad: usize = intervals.iter().map(|(a, b)| b - a).sum();
                ChannelCorruption {
                    channel: name.clone(),
                    intervals,
                    whole_channel: 2 * bad > m.len(),
                }
            })
            .collect();
        CorruptionReport { subject_id: subject_id.to_string(), n_samples, channels }
    }
}

fn mask_to_intervals(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &bad) in mask.iter().enumerate() {
        match (bad, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len()));
    }
    out
}

/// Flags samples beyond `amp_limit` microvolts and flat-line runs of at least
/// `flat_window_s` seconds. A channel with more than half its samples flagged
/// is marked as wholly corrupt.
pub fn detect_corruption(
    rec: &Recording,
    amp_limit: f64,
    flat_window_s: f64,
) -> Result<CorruptionReport, PreprocessError> {
    if !(amp_limit > 0.0) {
        return Err(PreprocessError::Parameter(format!("amp_limit must be positive, got {amp_limit}")));
    }
    let flat_len = ((flat_window_s * rec.sampling_rate()).round() as usize).max(2);
    let data = rec.samples();
    let mask: Vec<Vec<bool>> = data
        .rows()
        .into_iter()
        .map(|row| {
            let x = row.as_slice().map(<[f64]>::to_vec).unwrap_or_else(|| row.to_vec());
            let mut m: Vec<bool> = x.iter().map(|v| v.abs() > amp_limit).collect();
            let mut i = 0;
            while i < x.len() {
                let mut j = i + 1;
                while j < x.len() && x[j] == x[i] {
                    j += 1;
                }
                if j - i >= flat_len {
                    m[i..j].iter_mut().for_each(|b| *b = true);
                }
                i = j;
            }
            m
        })
        .collect();
    Ok(CorruptionReport::from_mask(rec.subject_id(), rec.channels(), &mask))
}

/// Repairs corrupted samples.
///
/// Segment corruption is replaced by the straight line between the nearest
/// clean samples on either side (held flat at the edges). A wholly corrupt
/// channel becomes the sample-wise mean of its montage neighbours that are
/// not themselves wholly corrupt.
pub fn interpolate(
    rec: &Recording,
    report: &CorruptionReport,
    montage: &Montage,
) -> Result<Recording, PreprocessError> {
    if report.channels.len() != rec.n_channels() || report.n_samples != rec.n_samples() {
        return Err(PreprocessError::Parameter("corruption report does not match recording".into()));
    }
    let mut out: Array2<f64> = rec.samples().to_owned();
    let n = rec.n_samples();
    for (c, info) in report.channels.iter().enumerate() {
        if info.whole_channel {
            continue;
        }
        let mut row = out.row_mut(c);
        for &(a, b) in &info.intervals {
            let left = a.checked_sub(1).map(|i| row[i]);
            let right = (b < n).then(|| row[b]);
            match (left, right) {
                (Some(l), Some(r)) => {
                    let span = (b - a + 1) as f64;
                    for i in a..b {
                        let t = (i - a + 1) as f64 / span;
                        row[i] = l + (r - l) * t;
                    }
                }
                (Some(v), None) | (None, Some(v)) => row.slice_mut(ndarray::s![a..b]).fill(v),
                (None, None) => {}
            }
        }
    }
    for (c, info) in report.channels.iter().enumerate() {
        if !info.whole_channel {
            continue;
        }
        let mi = montage.index_of(&info.channel).ok_or_else(|| PreprocessError::UnknownChannel(info.channel.clone()))?;
        let donors: Vec<usize> = montage
            .neighbors(mi)
            .iter()
            .filter_map(|&nb| rec.channel_index(&montage.channels()[nb].name))
            .filter(|&ri| !report.channels[ri].whole_channel)
            .collect();
        if donors.is_empty() {
            return Err(PreprocessError::UnrecoverableChannel(info.channel.clone()));
        }
        let mut mean = ndarray::Array1::<f64>::zeros(n);
        for &d in &donors {
            mean += &out.row(d);
        }
        mean /= donors.len() as f64;
        out.row_mut(c).assign(&mean);
    }
    Ok(rec.with_samples(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recording::Gender;
    use rand::Rng;

    fn recording(samples: Array2<f64>) -> Recording {
        Recording::new("s", Gender::Male, 100.0, Montage::standard().names(), samples, vec![]).unwrap()
    }

    fn sine_matrix(n: usize) -> Array2<f64> {
        Array2::from_shape_fn((20, n), |(c, i)| 20.0 * (2.0 * std::f64::consts::PI * 10.0 * i as f64 / 100.0 + c as f64).sin())
    }

    #[test]
    fn flat_channel_is_wholly_corrupt() {
        let mut x = sine_matrix(500);
        x.row_mut(10).fill(0.0);
        let report = detect_corruption(&recording(x), 100.0, 1.0).unwrap();
        assert!(report.channels[10].whole_channel);
        assert_eq!(report.channels[10].intervals, vec![(0, 500)]);
        assert!(report.channels.iter().enumerate().all(|(i, c)| i == 10 || c.intervals.is_empty()));
    }

    #[test]
    fn clean_sine_gives_empty_report() {
        let report = detect_corruption(&recording(sine_matrix(500)), 100.0, 1.0).unwrap();
        assert!(report.is_clean());
    }

    #[test]
    fn injected_spike_is_flagged() {
        let mut x = sine_matrix(500);
        x[[3, 217]] = 200.0;
        let report = detect_corruption(&recording(x), 100.0, 1.0).unwrap();
        assert_eq!(report.channels[3].intervals, vec![(217, 218)]);
        assert!(!report.channels[3].whole_channel);
    }

    #[test]
    fn midpoint_interpolation() {
        let mut x = Array2::zeros((20, 3));
        x[[0, 0]] = 1.0;
        x[[0, 1]] = 999.0;
        x[[0, 2]] = 3.0;
        let rec = recording(x);
        let mut mask = vec![vec![false; 3]; 20];
        mask[0][1] = true;
        let report = CorruptionReport::from_mask("s", rec.channels(), &mask);
        let fixed = interpolate(&rec, &report, &Montage::standard()).unwrap();
        assert_eq!(fixed.samples().row(0).to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn whole_channel_becomes_neighbor_mean() {
        let m = Montage::standard();
        let x = sine_matrix(200);
        let rec = recording(x.clone());
        let cz = m.index_of("Cz").unwrap();
        let mut mask = vec![vec![false; 200]; 20];
        mask[cz] = vec![true; 200];
        let report = CorruptionReport::from_mask("s", rec.channels(), &mask);
        let fixed = interpolate(&rec, &report, &m).unwrap();
        let nb = m.neighbors(cz);
        for i in 0..200 {
            let mean: f64 = nb.iter().map(|&j| x[[j, i]]).sum::<f64>() / nb.len() as f64;
            assert!((fixed.samples()[[cz, i]] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn all_neighbors_corrupt_is_unrecoverable() {
        let m = Montage::standard();
        let rec = recording(sine_matrix(50));
        let cz = m.index_of("Cz").unwrap();
        let mut mask = vec![vec![false; 50]; 20];
        mask[cz] = vec![true; 50];
        for &j in m.neighbors(cz) {
            mask[j] = vec![true; 50];
        }
        let report = CorruptionReport::from_mask("s", rec.channels(), &mask);
        assert!(matches!(interpolate(&rec, &report, &m), Err(PreprocessError::UnrecoverableChannel(c)) if c == "Cz"));
    }

    /// Direct restatement of the two repair rules, sample by sample.
    fn reference_repair(x: &Array2<f64>, mask: &[Vec<bool>], m: &Montage) -> Array2<f64> {
        let n = x.ncols();
        let whole: Vec<bool> = mask.iter().map(|r| 2 * r.iter().filter(|&&b| b).count() > n).collect();
        let mut out = x.clone();
        for c in 0..20 {
            if whole[c] {
                continue;
            }
            for i in 0..n {
                if !mask[c][i] {
                    continue;
                }
                let left = (0..i).rev().find(|&j| !mask[c][j]);
                let right = (i + 1..n).find(|&j| !mask[c][j]);
                out[[c, i]] = match (left, right) {
                    (Some(l), Some(r)) => x[[c, l]] + (x[[c, r]] - x[[c, l]]) * (i - l) as f64 / (r - l) as f64,
                    (Some(l), None) => x[[c, l]],
                    (None, Some(r)) => x[[c, r]],
                    (None, None) => x[[c, i]],
                };
            }
        }
        let repaired = out.clone();
        for c in 0..20 {
            if !whole[c] {
                continue;
            }
            let donors: Vec<usize> = m.neighbors(c).iter().copied().filter(|&j| !whole[j]).collect();
            for i in 0..n {
                out[[c, i]] = donors.iter().map(|&j| repaired[[j, i]]).sum::<f64>() / donors.len() as f64;
            }
        }
        out
    }

    #[test]
    fn random_masks_match_reference() {
        let m = Montage::standard();
        for seed in 0..10 {
            let mut rng = crate::rng::stream(seed, "mask");
            let x = Array2::from_shape_fn((20, 120), |_| rng.random::<f64>() * 50.0 - 25.0);
            let mut mask: Vec<Vec<bool>> = (0..20).map(|_| (0..120).map(|_| rng.random::<f64>() < 0.15).collect()).collect();
            mask[rng.random_range(0..20)] = vec![true; 120];
            let rec = recording(x.clone());
            let report = CorruptionReport::from_mask("s", rec.channels(), &mask);
            let fixed = interpolate(&rec, &report, &m).unwrap();
            let expected = reference_repair(&x, &mask, &m);
            for (a, b) in fixed.samples().iter().zip(expected.iter()) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

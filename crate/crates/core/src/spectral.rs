//! Five-band decomposition and Welch power spectral density.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{filter_recording, FilterSpec, PreprocessError};
use crate::recording::Recording;

/// Version of the JSON layouts written for the plotting side.
pub const SCHEMA_VERSION: u32 = 1;

/// Order of each band edge. The 0.1 Hz edge of delta only trims drift and
/// uses `DRIFT_EDGE_ORDER`, which keeps its ringing short.
pub const BAND_EDGE_ORDER: usize = 8;
pub const DRIFT_EDGE_ORDER: usize = 2;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("segment of {0} samples is shorter than 8")]
    SegmentTooShort(usize),
    #[error("overlap {0} outside [0, 1)")]
    Overlap(f64),
    #[error("signal of {len} samples is shorter than one segment ({segment})")]
    SignalTooShort { len: usize, segment: usize },
    #[error("band [{low}, {high}] Hz outside the frequency grid")]
    BandOutsideGrid { low: f64, high: f64 },
    #[error(transparent)]
    Filter(#[from] PreprocessError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandName {
    Delta,
    Theta,
    Alpha,
    Beta,
    Gamma,
}

impl fmt::Display for BandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BandName::Delta => "delta",
            BandName::Theta => "theta",
            BandName::Alpha => "alpha",
            BandName::Beta => "beta",
            BandName::Gamma => "gamma",
        })
    }
}

/// A frequency band `[low_hz, high_hz)`; gamma alone is closed at 50 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDefinition {
    pub name: BandName,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl BandDefinition {
    pub fn contains(&self, f: f64) -> bool {
        f >= self.low_hz && (f < self.high_hz || (self.name == BandName::Gamma && f == self.high_hz))
    }

    /// High-pass then low-pass at the band edges.
    pub fn filter_specs(&self) -> [FilterSpec; 2] {
        let hp_order = if self.low_hz < 1.0 { DRIFT_EDGE_ORDER } else { BAND_EDGE_ORDER };
        [FilterSpec::highpass(self.low_hz, hp_order), FilterSpec::lowpass(self.high_hz, BAND_EDGE_ORDER)]
    }
}

/// δ, θ, α, β and γ in ascending order.
pub fn standard_bands() -> [BandDefinition; 5] {
    let b = |name, low_hz, high_hz| BandDefinition { name, low_hz, high_hz };
    [
        b(BandName::Delta, 0.1, 4.0),
        b(BandName::Theta, 4.0, 8.0),
        b(BandName::Alpha, 8.0, 13.0),
        b(BandName::Beta, 13.0, 30.0),
        b(BandName::Gamma, 30.0, 50.0),
    ]
}

/// Zero-phase band-pass of `rec` at each band's edges.
pub fn band_decompose(
    rec: &Recording,
    bands: &[BandDefinition],
) -> Result<BTreeMap<BandName, Recording>, SpectralError> {
    bands
        .iter()
        .map(|b| {
            let out = filter_recording(rec, &b.filter_specs())?.with_stage(format!("band:{}", b.name));
            Ok((b.name, out))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchParams {
    pub segment_s: f64,
    pub overlap: f64,
}

impl Default for WelchParams {
    fn default() -> Self {
        WelchParams { segment_s: 2.0, overlap: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdParams {
    pub segment_length: usize,
    pub overlap: f64,
    pub window: String,
    pub sampling_rate_hz: f64,
    pub n_segments: usize,
}

/// One-sided PSD in µV²/Hz for one or more channels on a shared grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    pub channels: Vec<String>,
    pub freqs_hz: Vec<f64>,
    pub power: Vec<Vec<f64>>,
    pub params: PsdParams,
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

struct WelchPlan {
    seg: usize,
    step: usize,
    window: Vec<f64>,
    scale: f64,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl WelchPlan {
    fn new(fs: f64, params: &WelchParams) -> Result<Self, SpectralError> {
        let seg = (params.segment_s * fs).round() as usize;
        if seg < 8 {
            return Err(SpectralError::SegmentTooShort(seg));
        }
        if !(0.0..1.0).contains(&params.overlap) {
            return Err(SpectralError::Overlap(params.overlap));
        }
        let step = (seg - (seg as f64 * params.overlap).round() as usize).max(1);
        let window = hann(seg);
        let scale = 1.0 / (fs * window.iter().map(|w| w * w).sum::<f64>());
        let fft = FftPlanner::new().plan_fft_forward(seg);
        Ok(WelchPlan { seg, step, window, scale, fft })
    }

    fn n_segments(&self, len: usize) -> Result<usize, SpectralError> {
        if len < self.seg {
            return Err(SpectralError::SignalTooShort { len, segment: self.seg });
        }
        Ok(1 + (len - self.seg) / self.step)
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<f64>, SpectralError> {
        let count = self.n_segments(x.len())?;
        let nf = self.seg / 2 + 1;
        let mut acc = vec![0.0; nf];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.seg];
        for s in 0..count {
            let start = s * self.step;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(x[start + k] * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b.norm_sqr();
            }
        }
        let even = self.seg % 2 == 0;
        for (k, a) in acc.iter_mut().enumerate() {
            let one_sided = if k == 0 || (even && k == nf - 1) { 1.0 } else { 2.0 };
            *a *= one_sided * self.scale / count as f64;
        }
        Ok(acc)
    }

    fn freqs(&self, fs: f64) -> Vec<f64> {
        (0..self.seg / 2 + 1).map(|k| k as f64 * fs / self.seg as f64).collect()
    }

    fn params(&self, fs: f64, overlap: f64, len: usize) -> PsdParams {
        PsdParams {
            segment_length: self.seg,
            overlap,
            window: "hann".into(),
            sampling_rate_hz: fs,
            n_segments: self.n_segments(len).unwrap_or(0),
        }
    }
}

/// Hann-windowed averaged periodogram of a single series. Trailing samples
/// that do not fill a segment are ignored.
pub fn welch_psd(signal: &[f64], fs: f64, segment_s: f64, overlap: f64) -> Result<PsdEstimate, SpectralError> {
    let params = WelchParams { segment_s, overlap };
    let plan = WelchPlan::new(fs, &params)?;
    let power = plan.estimate(signal)?;
    Ok(PsdEstimate {
        channels: vec!["signal".into()],
        freqs_hz: plan.freqs(fs),
        power: vec![power],
        params: plan.params(fs, overlap, signal.len()),
    })
}

/// Per-channel Welch PSD of a recording.
pub fn recording_psd(rec: &Recording, params: &WelchParams) -> Result<PsdEstimate, SpectralError> {
    let fs = rec.sampling_rate();
    let plan = WelchPlan::new(fs, params)?;
    let rows: Vec<Vec<f64>> = rec.samples().rows().into_iter().map(|r| r.to_vec()).collect();
    let power = rows.par_iter().map(|r| plan.estimate(r)).collect::<Result<Vec<_>, _>>()?;
    Ok(PsdEstimate {
        channels: rec.channels().to_vec(),
        freqs_hz: plan.freqs(fs),
        power,
        params: plan.params(fs, params.overlap, rec.n_samples()),
    })
}

fn interp(freqs: &[f64], psd: &[f64], f: f64) -> f64 {
    let df = freqs[1] - freqs[0];
    let k = (((f - freqs[0]) / df).floor() as usize).min(freqs.len() - 2);
    let t = (f - freqs[k]) / df;
    psd[k] + (psd[k + 1] - psd[k]) * t
}

/// Trapezoid integral of `psd` over `[low, high]`, with the end points
/// linearly interpolated between grid bins.
pub fn integrate(freqs: &[f64], psd: &[f64], low: f64, high: f64) -> f64 {
    let mut pts = vec![(low, interp(freqs, psd, low))];
    pts.extend(freqs.iter().zip(psd).filter(|(&f, _)| f > low && f < high).map(|(&f, &p)| (f, p)));
    pts.push((high, interp(freqs, psd, high)));
    pts.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)).sum()
}

/// Integrated power of each channel over `band`.
pub fn band_power(psd: &PsdEstimate, band: &BandDefinition) -> Result<Vec<f64>, SpectralError> {
    let (first, last) = (psd.freqs_hz[0], *psd.freqs_hz.last().expect("non-empty grid"));
    if band.low_hz < first || band.high_hz > last || band.low_hz >= band.high_hz {
        return Err(SpectralError::BandOutsideGrid { low: band.low_hz, high: band.high_hz });
    }
    Ok(psd.power.iter().map(|p| integrate(&psd.freqs_hz, p, band.low_hz, band.high_hz)).collect())
}

/// Integrated power of each channel over the whole grid.
pub fn total_power(psd: &PsdEstimate) -> Vec<f64> {
    let (first, last) = (psd.freqs_hz[0], *psd.freqs_hz.last().expect("non-empty grid"));
    psd.power.iter().map(|p| integrate(&psd.freqs_hz, p, first, last)).collect()
}

/// Per-channel PSD in the layout read by the plotting side.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsdExport {
    pub schema_version: u32,
    pub channel: String,
    pub freqs_hz: Vec<f64>,
    pub psd: Vec<f64>,
    pub params: PsdParams,
}

impl PsdEstimate {
    pub fn exports(&self) -> Vec<PsdExport> {
        self.channels
            .iter()
            .zip(&self.power)
            .map(|(c, p)| PsdExport {
                schema_version: SCHEMA_VERSION,
                channel: c.clone(),
                freqs_hz: self.freqs_hz.clone(),
                psd: p.clone(),
                params: self.params.clone(),
            })
            .collect()
    }
}

/// Band power of every channel, rows in channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandPowerTable {
    pub schema_version: u32,
    pub channels: Vec<String>,
    pub bands: Vec<BandName>,
    pub power: Vec<Vec<f64>>,
}

pub fn band_power_table(psd: &PsdEstimate, bands: &[BandDefinition]) -> Result<BandPowerTable, SpectralError> {
    let per_band: Vec<Vec<f64>> = bands.iter().map(|b| band_power(psd, b)).collect::<Result<_, _>>()?;
    let power = (0..psd.channels.len()).map(|c| per_band.iter().map(|b| b[c]).collect()).collect();
    Ok(BandPowerTable {
        schema_version: SCHEMA_VERSION,
        channels: psd.channels.clone(),
        bands: bands.iter().map(|b| b.name).collect(),
        power,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::Montage;
    use crate::recording::Gender;
    use ndarray::Array2;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    const FS: f64 = 500.0;

    fn sine(freq: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / FS).sin()).collect()
    }

    fn noise(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = crate::rng::stream(seed, "noise");
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn rec(rows: Vec<Vec<f64>>) -> Recording {
        let n = rows[0].len();
        let samples = Array2::from_shape_fn((20, n), |(c, i)| rows[c % rows.len()][i]);
        Recording::new("s", Gender::Male, FS, Montage::standard().names(), samples, vec![]).unwrap()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn bands_partition_the_range() {
        let b = standard_bands();
        for w in b.windows(2) {
            assert_eq!(w[0].high_hz, w[1].low_hz);
        }
        assert!(b[2].contains(8.0) && !b[1].contains(8.0));
        assert!(b[4].contains(50.0));
        assert_eq!((b[0].low_hz, b[4].high_hz), (0.1, 50.0));
    }

    #[test]
    fn ten_hz_lands_in_alpha_only() {
        let x = sine(10.0, 10_000);
        let out = band_decompose(&rec(vec![x.clone()]), &standard_bands()).unwrap();
        let mid = 2000..8000;
        let input = rms(&x[mid.clone()]);
        for (name, r) in &out {
            let y = r.samples().row(0).to_vec();
            let ratio = rms(&y[mid.clone()]) / input;
            if *name == BandName::Alpha {
                assert!((ratio - 1.0).abs() < 0.05, "alpha ratio {ratio}");
            } else {
                assert!(ratio < 0.05, "{name} ratio {ratio}");
            }
        }
    }

    #[test]
    fn two_hz_is_delta_dominant() {
        let x = sine(2.0, 10_000);
        let out = band_decompose(&rec(vec![x]), &standard_bands()).unwrap();
        let power: BTreeMap<BandName, f64> =
            out.iter().map(|(k, r)| (*k, rms(&r.samples().row(0).to_vec()[2000..8000]))).collect();
        let delta = power[&BandName::Delta] / rms(&sine(2.0, 10_000));
        assert!(delta > 0.9, "{delta}");
        let d = power[&BandName::Delta];
        assert!(power.iter().all(|(k, v)| *k == BandName::Delta || *v < 0.1 * d));
    }

    /// Forward-backward filtering applies |H|² twice, so white noise of unit
    /// variance keeps ∫|H(f)|⁴ df / (fs/2) of its power in each band; band
    /// powers therefore fall short of the nominal band share near the edges.
    #[test]
    fn white_noise_band_powers_match_filter_response() {
        let x = noise(4, 60_000);
        let out = band_decompose(&rec(vec![x]), &standard_bands()).unwrap();
        let mut total = (0.0, 0.0);
        for b in standard_bands() {
            let f = crate::preprocess::design_chain(&b.filter_specs(), FS).unwrap();
            let df = 0.01;
            let expected: f64 = (0..(FS / 2.0 / df) as usize)
                .map(|k| f.response((k as f64 + 0.5) * df, FS).norm().powi(4) * df)
                .sum::<f64>()
                / (FS / 2.0);
            let got = rms(&out[&b.name].samples().row(0).to_vec()).powi(2);
            assert!((got / expected - 1.0).abs() < 0.15, "{:?}: {got} vs {expected}", b.name);
            total.0 += got;
            total.1 += expected;
        }
        assert!((total.0 / total.1 - 1.0).abs() < 0.05, "{total:?}");
    }

    #[test]
    fn decomposition_is_linear() {
        let (x, y) = (noise(1, 4000), sine(7.0, 4000));
        let (a, b) = (2.5, -0.75);
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let bands = standard_bands();
        let dx = band_decompose(&rec(vec![x]), &bands).unwrap();
        let dy = band_decompose(&rec(vec![y]), &bands).unwrap();
        let dz = band_decompose(&rec(vec![z]), &bands).unwrap();
        for name in dz.keys() {
            let expected = &dx[name].samples() * a + &dy[name].samples() * b;
            let err = (&dz[name].samples() - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-8, "{name}: {err}");
        }
    }

    #[test]
    fn sine_peak_and_power() {
        let psd = welch_psd(&sine(10.0, 30_000), FS, 2.0, 0.5).unwrap();
        let p = &psd.power[0];
        let peak = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(psd.freqs_hz[peak], 10.0);
        let total = total_power(&psd)[0];
        assert!((total - 0.5).abs() < 0.025, "{total}");
        let alpha = band_power(&psd, &standard_bands()[2]).unwrap()[0];
        assert!((alpha / total - 1.0).abs() < 0.01);
    }

    #[test]
    fn white_noise_integrates_to_variance() {
        let totals: Vec<f64> = (0..20).map(|s| total_power(&welch_psd(&noise(s, 20_000), FS, 2.0, 0.5).unwrap())[0]).collect();
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        assert!((0.9..=1.1).contains(&mean), "{mean}");
        assert!(totals.iter().all(|t| (0.9..=1.1).contains(t)));
    }

    #[test]
    fn dc_power_stays_at_zero_frequency() {
        // A Hann window leaks DC into the first bin as well; nothing beyond it.
        let psd = welch_psd(&[3.0; 5000], FS, 2.0, 0.5).unwrap();
        let p = &psd.power[0];
        let peak = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(peak, 0);
        assert!(p[2..].iter().all(|&v| v < 1e-20 * p[0]));
    }

    #[test]
    fn grid_spacing_and_sign_scaling() {
        let x = noise(9, 8000);
        let psd = welch_psd(&x, FS, 2.0, 0.5).unwrap();
        assert_eq!(psd.freqs_hz[1] - psd.freqs_hz[0], FS / 1000.0);
        assert!(psd.power[0].iter().all(|&v| v >= 0.0));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(welch_psd(&neg, FS, 2.0, 0.5).unwrap().power, psd.power);
        let dbl: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for (a, b) in welch_psd(&dbl, FS, 2.0, 0.5).unwrap().power[0].iter().zip(&psd.power[0]) {
            assert!((a - 4.0 * b).abs() <= 1e-6 * (4.0 * b).max(1e-300));
        }
    }

    #[test]
    fn welch_errors() {
        assert!(matches!(welch_psd(&[0.0; 100], FS, 2.0, 0.5), Err(SpectralError::SignalTooShort { .. })));
        assert!(matches!(welch_psd(&[0.0; 100], FS, 0.01, 0.5), Err(SpectralError::SegmentTooShort(5))));
        assert!(matches!(welch_psd(&[0.0; 2000], FS, 2.0, 1.0), Err(SpectralError::Overlap(_))));
    }

    #[test]
    fn band_power_trivial_cases() {
        let freqs: Vec<f64> = (0..101).map(|k| k as f64 * 0.5).collect();
        let mut psd = PsdEstimate {
            channels: vec!["a".into()],
            freqs_hz: freqs.clone(),
            power: vec![vec![1.0; 101]],
            params: PsdParams { segment_length: 1000, overlap: 0.5, window: "hann".into(), sampling_rate_hz: 500.0, n_segments: 1 },
        };
        let theta = standard_bands()[1];
        assert!((band_power(&psd, &theta).unwrap()[0] - 4.0).abs() < 1e-12);
        let odd = BandDefinition { name: BandName::Delta, low_hz: 0.1, high_hz: 4.0 };
        assert!((band_power(&psd, &odd).unwrap()[0] - 3.9).abs() < 1e-12);
        psd.power[0].fill(0.0);
        assert_eq!(band_power(&psd, &theta).unwrap()[0], 0.0);
        let beyond = BandDefinition { name: BandName::Gamma, low_hz: 30.0, high_hz: 80.0 };
        assert!(band_power(&psd, &beyond).is_err());
    }

    #[test]
    fn five_bands_cover_band_limited_power() {
        let x = noise(2, 40_000);
        let bp = crate::preprocess::design_chain(&crate::preprocess::FilterPreset::Default.specs()[..2], FS).unwrap();
        let y = bp.filtfilt(&x);
        let psd = welch_psd(&y, FS, 2.0, 0.5).unwrap();
        let sum: f64 = standard_bands().iter().map(|b| band_power(&psd, b).unwrap()[0]).sum();
        let var = rms(&y).powi(2);
        assert!((sum / var - 1.0).abs() < 0.10, "{sum} vs {var}");
    }
}

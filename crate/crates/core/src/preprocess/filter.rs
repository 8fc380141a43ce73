//! Butterworth IIR design and zero-phase (forward–backward) application.
//!
//! Filters are realised as cascades of second-order sections in transposed
//! direct form II. Band filters follow the usual convention that `order`
//! is the order of the analog lowpass prototype, so a band-pass or
//! band-stop of order `n` has `2n` poles.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::PreprocessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Bandpass,
    Bandstop,
    Lowpass,
    Highpass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Lower edge; for `Highpass` the cutoff, unused by `Lowpass`.
    pub low_hz: f64,
    /// Upper edge; for `Lowpass` the cutoff, unused by `Highpass`.
    pub high_hz: f64,
    pub order: usize,
    pub zero_phase: bool,
}

impl FilterSpec {
    pub fn bandpass(low_hz: f64, high_hz: f64, order: usize) -> Self {
        FilterSpec { kind: FilterKind::Bandpass, low_hz, high_hz, order, zero_phase: true }
    }

    pub fn bandstop(low_hz: f64, high_hz: f64, order: usize) -> Self {
        FilterSpec { kind: FilterKind::Bandstop, low_hz, high_hz, order, zero_phase: true }
    }

    pub fn lowpass(cutoff_hz: f64, order: usize) -> Self {
        FilterSpec { kind: FilterKind::Lowpass, low_hz: 0.0, high_hz: cutoff_hz, order, zero_phase: true }
    }

    pub fn highpass(cutoff_hz: f64, order: usize) -> Self {
        FilterSpec { kind: FilterKind::Highpass, low_hz: cutoff_hz, high_hz: 0.0, order, zero_phase: true }
    }

    pub fn validate(&self, fs: f64) -> Result<(), PreprocessError> {
        let nyquist = fs / 2.0;
        let top = if self.kind == FilterKind::Highpass { self.low_hz } else { self.high_hz };
        if top >= nyquist {
            return Err(PreprocessError::CutoffAboveNyquist { cutoff: top, nyquist });
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(PreprocessError::FilterSpec(format!("order {} must be even and positive", self.order)));
        }
        let low_ok = match self.kind {
            FilterKind::Lowpass => self.high_hz > 0.0,
            FilterKind::Highpass => self.low_hz > 0.0,
            _ => self.low_hz > 0.0 && self.low_hz < self.high_hz,
        };
        if !low_ok {
            return Err(PreprocessError::FilterSpec(format!(
                "edges {}..{} Hz are not 0 < low < high",
                self.low_hz, self.high_hz
            )));
        }
        Ok(())
    }
}

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let zi2 = zi * zi;
        (self.b[0] + zi * self.b[1] + zi2 * self.b[2]) / (Complex64::new(1.0, 0.0) + zi * self.a[0] + zi2 * self.a[1])
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Largest pole magnitude.
    fn pole_radius(&self) -> f64 {
        let [a1, a2] = self.a;
        let disc = a1 * a1 - 4.0 * a2;
        if disc < 0.0 {
            a2.sqrt()
        } else {
            let r = disc.sqrt();
            ((-a1 + r) / 2.0).abs().max(((-a1 - r) / 2.0).abs())
        }
    }

    /// Steady-state internal state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        let z2 = self.b[2] - self.a[1] * g;
        let z1 = self.b[1] - self.a[0] * g + z2;
        [z1, z2]
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SosFilter {
    pub sections: Vec<Biquad>,
    /// Digital filter order (number of poles).
    pub order: usize,
}

impl SosFilter {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, fs: f64) -> Complex64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * freq_hz / fs);
        self.sections.iter().fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z))
    }

    /// Causal filtering from zero initial state.
    pub fn filter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            run_section(s, &mut y, [0.0, 0.0]);
        }
        y
    }

    /// Causal filtering with each section started at the steady state of a
    /// constant input equal to the mean of the first `window` samples.
    fn filter_steady(&self, y: &mut [f64], window: usize) {
        let w = window.clamp(1, y.len().max(1));
        if y.is_empty() {
            return;
        }
        let mut level = y[..w].iter().sum::<f64>() / w as f64;
        for s in &self.sections {
            let st = s.step_state();
            run_section(s, y, [st[0] * level, st[1] * level]);
            level *= s.dc_gain();
        }
    }

    /// Samples needed for the slowest pole to decay by 60 dB.
    pub fn settling_samples(&self) -> usize {
        let r = self
            .sections
            .iter()
            .map(Biquad::pole_radius)
            .fold(0.0f64, f64::max);
        if r <= 0.0 || r >= 1.0 {
            return 0;
        }
        ((1e-3f64).ln() / r.ln()).ceil() as usize
    }

    /// Forward–backward filtering with mirror padding at each end, long
    /// enough for the start-up transient to settle (capped at the signal
    /// length). Each pass starts at the steady state of the pad's mean.
    ///
    /// Odd reflection about the edge sample would shift the pad by twice
    /// that sample's deviation from the local level; a 0.1 Hz high-pass
    /// rings on such a step for longer than most recordings.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * self.order).max(self.settling_samples()).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(x[i]);
        }
        ext.extend_from_slice(x);
        for i in 1..=pad {
            ext.push(x[n - 1 - i]);
        }
        self.filter_steady(&mut ext, pad);
        ext.reverse();
        self.filter_steady(&mut ext, pad);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    /// Cascade of `self` followed by `next`.
    pub fn then(mut self, next: SosFilter) -> SosFilter {
        self.sections.extend(next.sections);
        self.order += next.order;
        self
    }

    /// Applies the filter according to `zero_phase`.
    pub fn apply(&self, x: &[f64], zero_phase: bool) -> Vec<f64> {
        if zero_phase {
            self.filtfilt(x)
        } else {
            self.filter(x)
        }
    }
}

fn run_section(s: &Biquad, y: &mut [f64], state: [f64; 2]) {
    let [b0, b1, b2] = s.b;
    let [a1, a2] = s.a;
    let (mut z1, mut z2) = (state[0], state[1]);
    for v in y.iter_mut() {
        let x = *v;
        let out = b0 * x + z1;
        z1 = b1 * x - a1 * out + z2;
        z2 = b2 * x - a2 * out;
        *v = out;
    }
}

/// Designs a Butterworth filter for sampling rate `fs`.
pub fn design_filter(spec: &FilterSpec, fs: f64) -> Result<SosFilter, PreprocessError> {
    spec.validate(fs)?;
    let n = spec.order;
    // Analog prototype poles on the left half of the unit circle.
    let proto: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, PI * (2 * k + n + 1) as f64 / (2 * n) as f64))
        .collect();
    // Pre-warped edges for the bilinear map s = (z - 1) / (z + 1).
    let warp = |f: f64| (PI * f / fs).tan();
    let one = Complex64::new(1.0, 0.0);
    let bilinear = |s: Complex64| (one + s) / (one - s);

    let (poles, zero_pair, reference): (Vec<Complex64>, [f64; 3], Complex64) = match spec.kind {
        FilterKind::Lowpass => {
            let wc = warp(spec.high_hz);
            let poles = proto.iter().map(|&p| bilinear(p * wc)).collect();
            // Double zero at z = -1; normalise at DC.
            (poles, [1.0, 2.0, 1.0], one)
        }
        FilterKind::Highpass => {
            let wc = warp(spec.low_hz);
            let poles = proto.iter().map(|&p| bilinear(wc / p)).collect();
            // Double zero at z = 1; normalise at Nyquist.
            (poles, [1.0, -2.0, 1.0], -one)
        }
        FilterKind::Bandpass => {
            let (wl, wh) = (warp(spec.low_hz), warp(spec.high_hz));
            let bw = wh - wl;
            let w0sq = wl * wh;
            let poles = band_transform(&proto, |p| p * bw, w0sq).into_iter().map(bilinear).collect();
            // Zeros at z = 1 and z = -1 per section; normalise at the centre.
            let centre = 2.0 * w0sq.sqrt().atan();
            (poles, [1.0, 0.0, -1.0], Complex64::from_polar(1.0, centre))
        }
        FilterKind::Bandstop => {
            let (wl, wh) = (warp(spec.low_hz), warp(spec.high_hz));
            let bw = wh - wl;
            let w0sq = wl * wh;
            let poles = band_transform(&proto, |p| bw / p, w0sq).into_iter().map(bilinear).collect();
            let notch = 2.0 * w0sq.sqrt().atan();
            (poles, [1.0, -2.0 * notch.cos(), 1.0], one)
        }
    };

    let sections = pair_poles(poles)
        .into_iter()
        .map(|(p1, p2)| {
            let sum = p1 + p2;
            let prod = p1 * p2;
            let mut s = Biquad { b: zero_pair, a: [-sum.re, prod.re] };
            let g = s.response(reference).norm();
            for b in s.b.iter_mut() {
                *b /= g;
            }
            s
        })
        .collect::<Vec<_>>();
    let order = match spec.kind {
        FilterKind::Lowpass | FilterKind::Highpass => n,
        _ => 2 * n,
    };
    Ok(SosFilter { sections, order })
}

/// Designs each spec and cascades them in order.
pub fn design_chain(specs: &[FilterSpec], fs: f64) -> Result<SosFilter, PreprocessError> {
    let mut out = SosFilter { sections: Vec::new(), order: 0 };
    for spec in specs {
        out = out.then(design_filter(spec, fs)?);
    }
    Ok(out)
}

/// Lowpass-to-band transform: each prototype pole `p` yields the two roots of
/// `s^2 - f(p) s + w0^2`.
fn band_transform(proto: &[Complex64], f: impl Fn(Complex64) -> Complex64, w0sq: f64) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(2 * proto.len());
    for &p in proto {
        let a = f(p);
        let disc = (a * a - 4.0 * w0sq).sqrt();
        out.push((a + disc) / 2.0);
        out.push((a - disc) / 2.0);
    }
    out
}

/// Groups poles into conjugate pairs, ordered from farthest to nearest to the
/// unit circle.
fn pair_poles(poles: Vec<Complex64>) -> Vec<(Complex64, Complex64)> {
    let tol = 1e-12;
    let mut complex: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > tol).collect();
    let mut real: Vec<f64> = poles.iter().filter(|p| p.im.abs() <= tol).map(|p| p.re).collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    real.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut pairs: Vec<(Complex64, Complex64)> = complex.into_iter().map(|p| (p, p.conj())).collect();
    for chunk in real.chunks(2) {
        let a = Complex64::new(chunk[0], 0.0);
        let b = Complex64::new(*chunk.get(1).unwrap_or(&0.0), 0.0);
        pairs.push((a, b));
    }
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: f64 = 500.0;

    fn sine(freq: f64, secs: f64) -> Vec<f64> {
        let n = (secs * FS) as usize;
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / FS).sin()).collect()
    }

    /// Peak amplitude of the middle half of a signal.
    fn mid_amplitude(x: &[f64]) -> f64 {
        let n = x.len();
        x[n / 4..3 * n / 4].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn butterworth_magnitude_matches_closed_form() {
        // |H|^2 = 1 / (1 + (w / wc)^(2n)) in the warped frequency domain.
        let f = design_filter(&FilterSpec::lowpass(40.0, 4), FS).unwrap();
        for freq in [5.0, 20.0, 40.0, 60.0, 120.0] {
            let ratio = (PI * freq / FS).tan() / (PI * 40.0 / FS).tan();
            let expected = (1.0 / (1.0 + ratio.powi(8))).sqrt();
            assert!((f.response(freq, FS).norm() - expected).abs() < 1e-9, "{freq}");
        }
        let bp = design_filter(&FilterSpec::bandpass(8.0, 13.0, 4), FS).unwrap();
        let (wl, wh) = ((PI * 8.0 / FS).tan(), (PI * 13.0 / FS).tan());
        for freq in [2.0, 8.0, 10.0, 13.0, 30.0] {
            let w = (PI * freq / FS).tan();
            let mapped = (w * w - wl * wh) / (w * (wh - wl));
            let expected = (1.0 / (1.0 + mapped.powi(8))).sqrt();
            assert!((bp.response(freq, FS).norm() - expected).abs() < 1e-9, "{freq}");
        }
    }

    /// Amplitude of the `freq` component over the middle half, by projection
    /// onto a quadrature pair; ringing at other frequencies is ignored.
    fn lock_in(x: &[f64], freq: f64) -> f64 {
        let n = x.len();
        let (mut c, mut s) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate().take(3 * n / 4).skip(n / 4) {
            let ph = 2.0 * PI * freq * i as f64 / FS;
            c += v * ph.cos();
            s += v * ph.sin();
        }
        2.0 * (c * c + s * s).sqrt() / (n / 2) as f64
    }

    #[test]
    fn default_bandpass_passes_alpha_and_rejects_80hz() {
        let f = design_chain(&crate::preprocess::FilterPreset::Default.specs()[..2], FS).unwrap();
        let pass = lock_in(&f.filtfilt(&sine(10.0, 20.0)), 10.0);
        assert!((pass - 1.0).abs() < 0.05, "{pass}");
        let stop = lock_in(&f.filtfilt(&sine(80.0, 20.0)), 80.0);
        assert!(20.0 * stop.log10() <= -40.0, "{stop}");
    }

    /// A 0.1 Hz high-pass rings for tens of seconds on any step the edge
    /// padding introduces; away from the ends the output must be the
    /// steady-state response.
    #[test]
    fn filtfilt_leaves_no_slow_edge_transient() {
        let f = design_chain(&crate::preprocess::FilterPreset::Default.specs()[..2], FS).unwrap();
        let steady = f.response(80.0, FS).norm().powi(2) / 2f64.sqrt();
        let y = f.filtfilt(&sine(80.0, 40.0));
        for seg in y.chunks(2000).skip(1).take(8) {
            let rms = (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt();
            assert!((rms / steady - 1.0).abs() < 0.05, "{rms} vs {steady}");
        }
        let offset: Vec<f64> = sine(10.0, 20.0).iter().map(|v| v + 100.0).collect();
        let y = f.filtfilt(&offset);
        let mid = &y[2500..7500];
        assert!((mid.iter().sum::<f64>() / mid.len() as f64).abs() < 1e-3);
    }

    #[test]
    fn highpass_magnitude_matches_closed_form() {
        let f = design_filter(&FilterSpec::highpass(2.0, 4), FS).unwrap();
        for freq in [0.5, 2.0, 8.0, 100.0] {
            let ratio = (PI * 2.0 / FS).tan() / (PI * freq / FS).tan();
            let expected = (1.0 / (1.0 + ratio.powi(8))).sqrt();
            assert!((f.response(freq, FS).norm() - expected).abs() < 1e-9, "{freq}");
        }
    }

    #[test]
    fn bandstop_notches_mains() {
        let f = design_filter(&FilterSpec::bandstop(49.0, 51.0, 4), FS).unwrap();
        let notch = mid_amplitude(&f.filtfilt(&sine(50.0, 10.0)));
        assert!(20.0 * notch.log10() <= -30.0, "{notch}");
        let pass = mid_amplitude(&f.filtfilt(&sine(40.0, 10.0)));
        assert!((pass - 1.0).abs() < 0.05, "{pass}");
    }

    #[test]
    fn forward_backward_has_no_lag() {
        let f = design_filter(&FilterSpec::bandpass(0.1, 50.0, 6), FS).unwrap();
        let clean = sine(7.0, 8.0);
        let out = f.filtfilt(&clean);
        let n = clean.len();
        let (a, b) = (n / 4, 3 * n / 4);
        let xcorr = |lag: i64| -> f64 {
            (a..b).map(|i| clean[i] * out[(i as i64 + lag) as usize]).sum()
        };
        let best = (-20..=20).max_by(|&p, &q| xcorr(p).total_cmp(&xcorr(q))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn steady_state_start_removes_offset_transient() {
        let f = design_filter(&FilterSpec::lowpass(30.0, 4), FS).unwrap();
        let x = vec![3.5; 400];
        let y = f.filtfilt(&x);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-9));
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(matches!(
            design_filter(&FilterSpec::bandpass(0.1, 260.0, 4), FS),
            Err(PreprocessError::CutoffAboveNyquist { .. })
        ));
        assert!(design_filter(&FilterSpec::bandpass(10.0, 5.0, 4), FS).is_err());
        assert!(design_filter(&FilterSpec::bandpass(1.0, 5.0, 3), FS).is_err());
    }
}

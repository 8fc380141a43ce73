//! Symmetric FastICA with the `tanh` contrast, and frontal-correlation
//! based rejection of ocular components.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PreprocessError;
use crate::connectivity::pcc;
use crate::recording::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcaParams {
    pub n_components: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RejectReason {
    /// |PCC| with the named frontal channel exceeded the threshold.
    FrontalCorrelation { channel: String, correlation: f64 },
}

#[derive(Debug, Clone)]
pub struct IcaDecomposition {
    /// Channel means removed before whitening.
    pub mean: Array1<f64>,
    /// `n_components × C`.
    pub whitening: Array2<f64>,
    /// `n_components × n_components`, orthogonal with unit-norm rows.
    pub unmixing: Array2<f64>,
    /// `C × n_components`; maps component activity back to channels.
    pub mixing: Array2<f64>,
    /// Component time courses of the data the decomposition was fitted on.
    pub components: Array2<f64>,
    pub rejected: Vec<Option<RejectReason>>,
    pub converged: bool,
    pub iterations: usize,
}

impl IcaDecomposition {
    pub fn n_components(&self) -> usize {
        self.unmixing.nrows()
    }

    /// Full separating matrix `unmixing · whitening`.
    pub fn separating(&self) -> Array2<f64> {
        self.unmixing.dot(&self.whitening)
    }

    /// Component activity for arbitrary data with the fitted channel layout.
    pub fn sources(&self, data: ArrayView2<'_, f64>) -> Array2<f64> {
        let centred = &data - &self.mean.view().insert_axis(Axis(1));
        self.separating().dot(&centred)
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_nalgebra(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// `W <- (W Wᵀ)^{-1/2} W`
fn symmetric_decorrelation(w: &Array2<f64>) -> Array2<f64> {
    let eig = SymmetricEigen::new(to_nalgebra(&w.dot(&w.t())));
    let vecs = from_nalgebra(&eig.eigenvectors);
    let inv_sqrt = eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt());
    let scaled = Array2::from_shape_fn(vecs.dim(), |(i, j)| vecs[[i, j]] * inv_sqrt[j]);
    scaled.dot(&vecs.t()).dot(w)
}

/// Fits a symmetric FastICA decomposition of channel-major `data`.
///
/// Convergence is declared once `max |1 - |<w_new, w_old>||` drops below
/// `tol`; otherwise iteration stops at `max_iter` with `converged = false`.
pub fn fast_ica(data: ArrayView2<'_, f64>, params: &IcaParams) -> Result<IcaDecomposition, PreprocessError> {
    let (c, t) = data.dim();
    let n = params.n_components;
    if n == 0 || n > c {
        return Err(PreprocessError::Parameter(format!("n_components {n} must be in 1..={c}")));
    }
    if t <= c {
        return Err(PreprocessError::Parameter(format!("{t} samples do not exceed {c} channels")));
    }
    let mean = data.mean_axis(Axis(1)).expect("non-empty data");
    let centred = &data - &mean.view().insert_axis(Axis(1));
    let cov = centred.dot(&centred.t()) / t as f64;

    let eig = SymmetricEigen::new(to_nalgebra(&cov));
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let largest = eig.eigenvalues[order[0]];
    let smallest = eig.eigenvalues[order[c - 1]];
    if !(largest > 0.0) || smallest <= largest * 1e-12 {
        return Err(PreprocessError::RankDeficient { smallest, largest });
    }
    let vecs = &eig.eigenvectors;
    let whitening = Array2::from_shape_fn((n, c), |(i, j)| {
        let k = order[i];
        vecs[(j, k)] / eig.eigenvalues[k].sqrt()
    });
    let dewhitening = Array2::from_shape_fn((c, n), |(j, i)| {
        let k = order[i];
        vecs[(j, k)] * eig.eigenvalues[k].sqrt()
    });
    let z = whitening.dot(&centred);

    let mut rng = crate::rng::stream(params.seed, "fast-ica-init");
    let init = Array2::from_shape_fn((n, n), |_| rng.random::<f64>() - 0.5);
    let mut w = symmetric_decorrelation(&init);
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..params.max_iter {
        iterations += 1;
        let mut g = w.dot(&z);
        let mut g_prime_mean = Array1::<f64>::zeros(n);
        for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                let th = v.tanh();
                *v = th;
                acc += 1.0 - th * th;
            }
            g_prime_mean[i] = acc / t as f64;
        }
        let mut next = g.dot(&z.t()) / t as f64;
        for i in 0..n {
            for j in 0..n {
                next[[i, j]] -= g_prime_mean[i] * w[[i, j]];
            }
        }
        let next = symmetric_decorrelation(&next);
        let lim = next
            .outer_iter()
            .zip(w.outer_iter())
            .map(|(a, b)| (1.0 - a.dot(&b).abs()).abs())
            .fold(0.0f64, f64::max);
        w = next;
        if lim < params.tol {
            converged = true;
            break;
        }
    }
    let components = w.dot(&z);
    let mixing = dewhitening.dot(&w.t());
    Ok(IcaDecomposition {
        mean,
        whitening,
        unmixing: w,
        mixing,
        components,
        rejected: vec![None; n],
        converged,
        iterations,
    })
}

/// Zeroes every component whose |PCC| with Fp1 or Fp2 exceeds `corr_threshold`
/// and rebuilds the channels. Only the rejected components' contribution is
/// subtracted, so a decomposition with nothing rejected returns the input.
pub fn reject_artifacts(
    dec: &mut IcaDecomposition,
    rec: &Recording,
    corr_threshold: f64,
) -> Result<Recording, PreprocessError> {
    let data = rec.samples();
    if data.nrows() != dec.mixing.nrows() {
        return Err(PreprocessError::Parameter("decomposition does not match recording".into()));
    }
    let frontal: Vec<(String, usize)> = ["Fp1", "Fp2"]
        .iter()
        .filter_map(|&name| rec.channel_index(name).map(|i| (name.to_string(), i)))
        .collect();
    if frontal.is_empty() {
        return Err(PreprocessError::UnknownChannel("Fp1/Fp2".into()));
    }
    let sources = dec.sources(data);
    for k in 0..dec.n_components() {
        let s = sources.row(k);
        let s = s.as_slice().expect("row-major sources");
        let mut worst: Option<(String, f64)> = None;
        for (name, idx) in &frontal {
            let ch = data.row(*idx).to_vec();
            let r = pcc(s, &ch).unwrap_or(0.0);
            if r.abs() > corr_threshold && worst.as_ref().map_or(true, |(_, w)| r.abs() > w.abs()) {
                worst = Some((name.clone(), r));
            }
        }
        dec.rejected[k] = worst.map(|(channel, correlation)| RejectReason::FrontalCorrelation { channel, correlation });
    }
    let rejected: Vec<usize> = (0..dec.n_components()).filter(|&k| dec.rejected[k].is_some()).collect();
    if rejected.len() == dec.n_components() {
        return Err(PreprocessError::AllComponentsRejected);
    }
    let mut out = data.to_owned();
    for &k in &rejected {
        let a = dec.mixing.column(k);
        let s = sources.row(k);
        for (ci, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let gain = a[ci];
            row.zip_mut_with(&s, |x, &v| *x -= gain * v);
        }
    }
    Ok(rec.with_samples(out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montage::Montage;
    use crate::recording::Gender;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn planted_pair(seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = crate::rng::stream(seed, "ica-test");
        let t = 5000;
        let sources = Array2::from_shape_fn((2, t), |(k, i)| {
            if k == 0 {
                rng.random::<f64>() * 2.0 - 1.0
            } else {
                (2.0 * PI * 7.0 * i as f64 / 500.0).sin()
            }
        });
        let mix = loop {
            let m = Array2::from_shape_fn((2, 2), |_| rng.random::<f64>() * 2.0 - 1.0);
            if (m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]]).abs() > 0.2 {
                break m;
            }
        };
        (mix.dot(&sources), sources)
    }

    fn best_match(rec: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        let r = |a: usize, b: usize| pcc(&rec.row(a).to_vec(), &truth.row(b).to_vec()).unwrap().abs();
        let direct = r(0, 0).min(r(1, 1));
        let swapped = r(0, 1).min(r(1, 0));
        direct.max(swapped)
    }

    #[test]
    fn recovers_planted_sources() {
        let (x, s) = planted_pair(3);
        let dec = fast_ica(x.view(), &IcaParams { n_components: 2, max_iter: 500, tol: 1e-6, seed: 1 }).unwrap();
        assert!(dec.converged);
        assert!(best_match(&dec.components, &s) >= 0.95);
        for row in dec.unmixing.outer_iter() {
            assert!((row.dot(&row) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn independent_whitened_inputs_give_signed_permutation() {
        let mut rng = crate::rng::stream(5, "perm");
        let t = 20000;
        let mut x = Array2::from_shape_fn((3, t), |(k, _)| match k {
            0 => rng.random::<f64>() * 2.0 - 1.0,
            1 => (rng.random::<f64>() * 2.0 - 1.0).powi(3),
            _ => if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 },
        });
        for mut row in x.outer_iter_mut() {
            let m = row.mean().unwrap();
            row -= m;
            let sd = (row.dot(&row) / t as f64).sqrt();
            row /= sd;
        }
        let dec = fast_ica(x.view(), &IcaParams { n_components: 3, max_iter: 1000, tol: 1e-8, seed: 2 }).unwrap();
        let sep = dec.separating();
        for row in sep.outer_iter() {
            let big = row.iter().filter(|v| v.abs() > 0.97).count();
            assert_eq!(big, 1, "{sep:?}");
        }
    }

    #[test]
    fn constant_channel_blocks_whitening() {
        let mut x = Array2::from_shape_fn((3, 100), |(c, i)| ((c + 1) as f64 * i as f64 * 0.37).sin());
        x.row_mut(1).fill(4.0);
        let err = fast_ica(x.view(), &IcaParams { n_components: 3, max_iter: 10, tol: 1e-4, seed: 0 }).unwrap_err();
        assert!(matches!(err, PreprocessError::RankDeficient { .. }));
    }

    #[test]
    fn outputs_are_uncorrelated() {
        let (x, _) = planted_pair(9);
        let dec = fast_ica(x.view(), &IcaParams { n_components: 2, max_iter: 500, tol: 1e-8, seed: 4 }).unwrap();
        let s = dec.sources(x.view());
        let r = pcc(&s.row(0).to_vec(), &s.row(1).to_vec()).unwrap();
        assert!(r.abs() < 1e-6, "{r}");
    }

    fn noisy_recording(seed: u64, n: usize) -> Recording {
        let mut rng = crate::rng::stream(seed, "eeg");
        let x = Array2::from_shape_fn((20, n), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            10.0 * v
        });
        Recording::new("s", Gender::Male, 250.0, Montage::standard().names(), x, vec![]).unwrap()
    }

    #[test]
    fn nothing_rejected_is_lossless() {
        let rec = noisy_recording(1, 3000);
        let mut dec = fast_ica(rec.samples(), &IcaParams { n_components: 20, max_iter: 50, tol: 1e-4, seed: 0 }).unwrap();
        let out = reject_artifacts(&mut dec, &rec, 0.99).unwrap();
        assert!(dec.rejected.iter().all(Option::is_none));
        for (a, b) in out.samples().iter().zip(rec.samples().iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_threshold_rejects_everything() {
        let rec = noisy_recording(2, 2000);
        let mut dec = fast_ica(rec.samples(), &IcaParams { n_components: 20, max_iter: 20, tol: 1e-4, seed: 0 }).unwrap();
        assert!(matches!(reject_artifacts(&mut dec, &rec, 0.0), Err(PreprocessError::AllComponentsRejected)));
    }
}

//! Multi-head scaled dot-product self-attention over a sequence.

use rand_chacha::ChaCha8Rng;

use super::layers::{glorot, ForwardCtx, Layer, Param};
use super::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};
use super::NeuralError;

/// Self-attention on `[B, L, d_model]` with `heads` heads of width
/// `d_model / heads`. No residual connection.
pub struct MultiHeadAttention {
    length: usize,
    d_model: usize,
    heads: usize,
    /// `wq, wk, wv, wo` then `bq, bk, bv, bo`.
    params: Vec<Param>,
    cache: Option<AttnCache>,
}

struct AttnCache {
    x: Tensor,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[B, heads, L, L]` attention weights.
    a: Vec<f64>,
    o: Vec<f64>,
}

const WQ: usize = 0;
const WK: usize = 1;
const WV: usize = 2;
const WO: usize = 3;

impl MultiHeadAttention {
    pub fn new(in_shape: [usize; 2], heads: usize, rng: &mut ChaCha8Rng) -> Result<Self, NeuralError> {
        let [length, d_model] = in_shape;
        if heads == 0 || d_model % heads != 0 {
            return Err(NeuralError::Shape(format!("d_model {d_model} not divisible by {heads} heads")));
        }
        let mut params: Vec<Param> = ["wq", "wk", "wv", "wo"]
            .iter()
            .map(|n| Param::new(n, glorot(rng, &[d_model, d_model], d_model, d_model), true))
            .collect();
        params.extend(["bq", "bk", "bv", "bo"].iter().map(|n| Param::new(n, Tensor::zeros(&[d_model]), true)));
        Ok(MultiHeadAttention { length, d_model, heads, params, cache: None })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Mutable projection weights in the order `wq, wk, wv, wo`.
    pub fn weight_mut(&mut self, which: usize) -> &mut Tensor {
        &mut self.params[which].value
    }

    /// Attention weights of the last forward pass, `[B, heads, L, L]`.
    pub fn last_weights(&self) -> Option<&[f64]> {
        self.cache.as_ref().map(|c| c.a.as_slice())
    }

    fn project(&self, x: &[f64], w: usize, rows: usize) -> Vec<f64> {
        let d = self.d_model;
        let bias = self.params[w + 4].value.data();
        let mut out: Vec<f64> = (0..rows * d).map(|i| bias[i % d]).collect();
        matmul_acc(x, self.params[w].value.data(), &mut out, rows, d, d);
        out
    }
}

impl Layer for MultiHeadAttention {
    fn kind(&self) -> &'static str {
        "multi_head_attention"
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.length, self.d_model]
    }

    fn forward(&mut self, x: &Tensor, _ctx: &mut ForwardCtx<'_>) -> Result<Tensor, NeuralError> {
        if x.shape()[1..] != [self.length, self.d_model] {
            return Err(NeuralError::Shape(format!(
                "attention expects [{}, {}], got {:?}",
                self.length,
                self.d_model,
                &x.shape()[1..]
            )));
        }
        let (b, l, d, h, dk) = (x.batch(), self.length, self.d_model, self.heads, self.d_k());
        let rows = b * l;
        let q = self.project(x.data(), WQ, rows);
        let k = self.project(x.data(), WK, rows);
        let v = self.project(x.data(), WV, rows);
        let scale = 1.0 / (dk as f64).sqrt();
        let mut a = vec![0.0; b * h * l * l];
        let mut o = vec![0.0; rows * d];
        for bi in 0..b {
            for hi in 0..h {
                let att = &mut a[(bi * h + hi) * l * l..][..l * l];
                for i in 0..l {
                    let qi = &q[(bi * l + i) * d + hi * dk..][..dk];
                    let row = &mut att[i * l..(i + 1) * l];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &k[(bi * l + j) * d + hi * dk..][..dk];
                        *s = qi.iter().zip(kj).map(|(p, q)| p * q).sum::<f64>() * scale;
                    }
                    softmax_in_place(row);
                    let oi = &mut o[(bi * l + i) * d + hi * dk..][..dk];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &v[(bi * l + j) * d + hi * dk..][..dk];
                        oi.iter_mut().zip(vj).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
        }
        let y = self.project(&o, WO, rows);
        self.cache = Some(AttnCache { x: x.clone(), q, k, v, a, o });
        Tensor::new(vec![b, l, d], y)
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>, NeuralError> {
        let c = self.cache.take().ok_or_else(|| NeuralError::NoForward(self.kind().into()))?;
        let (b, l, d, h, dk) = (c.x.batch(), self.length, self.d_model, self.heads, self.d_k());
        let rows = b * l;
        let scale = 1.0 / (dk as f64).sqrt();
        let g = grad.data();

        matmul_at_b_acc(&c.o, g, self.params[WO].grad.data_mut(), d, rows, d);
        accumulate_bias(&mut self.params[WO + 4], g, d);
        let mut d_o = vec![0.0; rows * d];
        matmul_a_bt_acc(g, self.params[WO].value.data(), &mut d_o, rows, d, d);

        let (mut dq, mut dkk, mut dv) = (vec![0.0; rows * d], vec![0.0; rows * d], vec![0.0; rows * d]);
        let mut ds = vec![0.0; l];
        for bi in 0..b {
            for hi in 0..h {
                let att = &c.a[(bi * h + hi) * l * l..][..l * l];
                let off = |t: usize| (bi * l + t) * d + hi * dk;
                for i in 0..l {
                    let doi = &d_o[off(i)..][..dk];
                    let ai = &att[i * l..(i + 1) * l];
                    for j in 0..l {
                        let vj = &c.v[off(j)..][..dk];
                        ds[j] = doi.iter().zip(vj).map(|(p, q)| p * q).sum();
                        let dvj = &mut dv[off(j)..][..dk];
                        dvj.iter_mut().zip(doi).for_each(|(dv, go)| *dv += ai[j] * go);
                    }
                    let dot: f64 = ds.iter().zip(ai).map(|(p, q)| p * q).sum();
                    for j in 0..l {
                        let s = ai[j] * (ds[j] - dot) * scale;
                        if s == 0.0 {
                            continue;
                        }
                        let (qi_off, kj_off) = (off(i), off(j));
                        for t in 0..dk {
                            dq[qi_off + t] += s * c.k[kj_off + t];
                            dkk[kj_off + t] += s * c.q[qi_off + t];
                        }
                    }
                }
            }
        }

        let x = c.x.data();
        let mut dx = need_input_grad.then(|| vec![0.0; rows * d]);
        for (w, gp) in [(WQ, &dq), (WK, &dkk), (WV, &dv)] {
            matmul_at_b_acc(x, gp, self.params[w].grad.data_mut(), d, rows, d);
            accumulate_bias(&mut self.params[w + 4], gp, d);
            if let Some(dx) = dx.as_mut() {
                matmul_a_bt_acc(gp, self.params[w].value.data(), dx, rows, d, d);
            }
        }
        dx.map(|v| Tensor::new(vec![b, l, d], v)).transpose()
    }

    fn params(&self) -> Vec<&Param> {
        self.params.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.params.iter_mut().collect()
    }
}

fn accumulate_bias(p: &mut Param, g: &[f64], d: usize) {
    for row in g.chunks(d) {
        p.grad.data_mut().iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ctx(rng: &mut ChaCha8Rng) -> ForwardCtx<'_> {
        ForwardCtx { training: true, rng }
    }

    fn identity(d: usize) -> Tensor {
        Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 })
    }

    #[test]
    fn single_position_with_identity_projections_is_identity() {
        let mut rng = crate::rng::stream(1, "mha");
        let mut m = MultiHeadAttention::new([1, 4], 2, &mut rng).unwrap();
        for w in 0..4 {
            *m.weight_mut(w) = identity(4);
        }
        let x = Tensor::new(vec![2, 1, 4], vec![0.3, -1.0, 2.0, 0.5, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = m.forward(&x, &mut ctx(&mut rng)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let mut rng = crate::rng::stream(2, "mha");
        let mut m = MultiHeadAttention::new([5, 4], 2, &mut rng).unwrap();
        // Every position has the same input row, hence the same keys.
        let x = Tensor::from_fn(&[1, 5, 4], |i| [0.1, -0.4, 0.7, 1.2][i % 4]);
        m.forward(&x, &mut ctx(&mut rng)).unwrap();
        for w in m.last_weights().unwrap() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    /// Plain loops straight from the definition.
    fn reference(x: &[f64], w: [&[f64]; 4], l: usize, d: usize, h: usize) -> Vec<f64> {
        let dk = d / h;
        let proj = |m: &[f64], src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; l * d];
            for i in 0..l {
                for j in 0..d {
                    for t in 0..d {
                        out[i * d + j] += src[i * d + t] * m[t * d + j];
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(w[0], x), proj(w[1], x), proj(w[2], x));
        let mut o = vec![0.0; l * d];
        for head in 0..h {
            for i in 0..l {
                let mut s: Vec<f64> = (0..l)
                    .map(|j| (0..dk).map(|t| q[i * d + head * dk + t] * k[j * d + head * dk + t]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                s.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
                for t in 0..dk {
                    o[i * d + head * dk + t] = (0..l).map(|j| s[j] * v[j * d + head * dk + t]).sum();
                }
            }
        }
        proj(w[3], &o)
    }

    #[test]
    fn matches_loop_reference() {
        for seed in 0..5 {
            let mut rng = crate::rng::stream(seed, "mha-ref");
            let mut m = MultiHeadAttention::new([3, 4], 2, &mut rng).unwrap();
            let x = Tensor::from_fn(&[1, 3, 4], |_| rng.random::<f64>() * 2.0 - 1.0);
            let ws: Vec<Vec<f64>> = m.params[..4].iter().map(|p| p.value.data().to_vec()).collect();
            let y = m.forward(&x, &mut ctx(&mut rng)).unwrap();
            let r = reference(x.data(), [&ws[0], &ws[1], &ws[2], &ws[3]], 3, 4, 2);
            for (a, b) in y.data().iter().zip(&r) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = crate::rng::stream(5, "mha-rows");
        let mut m = MultiHeadAttention::new([6, 8], 4, &mut rng).unwrap();
        let x = Tensor::from_fn(&[3, 6, 8], |_| rng.random::<f64>() * 4.0 - 2.0);
        m.forward(&x, &mut ctx(&mut rng)).unwrap();
        for row in m.last_weights().unwrap().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn indivisible_width_is_rejected() {
        let mut rng = crate::rng::stream(0, "x");
        assert!(MultiHeadAttention::new([3, 6], 4, &mut rng).is_err());
    }
}

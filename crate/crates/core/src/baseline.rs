//! Single-hidden-layer MLP classifier used as a baseline.
//!
//! Tokens are embedded, concatenated, passed through an affine layer with a
//! ReLU, then an affine layer and a sigmoid.

use crate::error::{Error, Result};
use crate::motzkin::Chain;
use crate::tensor::{Rng, Tensor};

/// Probabilities are kept inside `[P_CLAMP, 1 - P_CLAMP]` for the loss.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    n: usize,
    v: usize,
    d_e: usize,
    d_h: usize,
    /// `[embedding (v, d_e), w1 (n*d_e, d_h), b1 (d_h), w2 (d_h, 1), b2 (1)]`
    params: Vec<Tensor>,
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(n: usize, v: usize, d_e: usize, d_h: usize, rng: &mut Rng) -> Result<Self> {
        if n == 0 || v == 0 || d_e == 0 || d_h == 0 {
            return Err(Error::arg("mlp dimensions must be positive"));
        }
        let glorot = |rng: &mut Rng, fan_in: usize, fan_out: usize, shape: &[usize]| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.uniform(shape, -a, a)
        };
        let params = vec![
            glorot(rng, v, d_e, &[v, d_e]),
            glorot(rng, n * d_e, d_h, &[n * d_e, d_h]),
            Tensor::zeros(&[d_h]),
            glorot(rng, d_h, 1, &[d_h, 1]),
            Tensor::zeros(&[1]),
        ];
        Ok(MlpModel { n, v, d_e, d_h, params })
    }

    pub fn from_params(n: usize, v: usize, d_e: usize, d_h: usize, params: Vec<Tensor>) -> Result<Self> {
        let want = Self::block_shapes(n, v, d_e, d_h);
        if params.len() != want.len() || params.iter().zip(&want).any(|(p, w)| p.shape() != w.as_slice()) {
            return Err(Error::shape("mlp parameter blocks do not match the dimensions"));
        }
        Ok(MlpModel { n, v, d_e, d_h, params })
    }

    pub fn block_shapes(n: usize, v: usize, d_e: usize, d_h: usize) -> Vec<Vec<usize>> {
        vec![vec![v, d_e], vec![n * d_e, d_h], vec![d_h], vec![d_h, 1], vec![1]]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn d_e(&self) -> usize {
        self.d_e
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn codes(&self, chain: &Chain) -> Result<Vec<usize>> {
        if chain.len() != self.n {
            return Err(Error::arg(format!(
                "chain length {} != model length {}",
                chain.len(),
                self.n
            )));
        }
        Ok(chain.codes().collect())
    }

    /// `proj[(i * v + t) * d_h + j]`: contribution of token `t` at position
    /// `i` to hidden unit `j`.
    pub fn projections(&self) -> Vec<f64> {
        let (v, de, dh) = (self.v, self.d_e, self.d_h);
        let emb = self.params[0].data();
        let w1 = self.params[1].data();
        let mut proj = vec![0.0; self.n * v * dh];
        for i in 0..self.n {
            for t in 0..v {
                let out = &mut proj[(i * v + t) * dh..(i * v + t + 1) * dh];
                for e in 0..de {
                    let x = emb[t * de + e];
                    let row = &w1[(i * de + e) * dh..(i * de + e + 1) * dh];
                    for (o, w) in out.iter_mut().zip(row) {
                        *o += x * w;
                    }
                }
            }
        }
        proj
    }

    /// Hidden pre-activations and the output logit.
    fn hidden(&self, codes: &[usize], proj: &[f64]) -> (Vec<f64>, f64) {
        let (v, dh) = (self.v, self.d_h);
        let mut z = self.params[2].data().to_vec();
        for (i, &t) in codes.iter().enumerate() {
            for (zj, p) in z.iter_mut().zip(&proj[(i * v + t) * dh..(i * v + t + 1) * dh]) {
                *zj += p;
            }
        }
        let w2 = self.params[3].data();
        let logit = self.params[4].data()[0]
            + z.iter().zip(w2).map(|(zj, w)| zj.max(0.0) * w).sum::<f64>();
        (z, logit)
    }

    /// Sigmoid output in `(0, 1)`.
    pub fn forward(&self, chain: &Chain) -> Result<f64> {
        self.forward_with(chain, &self.projections())
    }

    /// [`forward`](Self::forward) reusing precomputed [`projections`](Self::projections).
    pub fn forward_with(&self, chain: &Chain, proj: &[f64]) -> Result<f64> {
        let codes = self.codes(chain)?;
        Ok(sigmoid(self.hidden(&codes, proj).1))
    }

    /// Mean binary cross-entropy over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &[(&Chain, u8)]) -> Result<(f64, Vec<Tensor>)> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let (v, de, dh) = (self.v, self.d_e, self.d_h);
        let proj = self.projections();
        let mut grads: Vec<Tensor> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        // gradient with respect to each projection slot
        let mut gproj = vec![0.0; proj.len()];
        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut dz = vec![0.0; dh];
        let w2 = self.params[3].data();
        for (chain, label) in batch {
            let codes = self.codes(chain)?;
            let (z, logit) = self.hidden(&codes, &proj);
            let p = sigmoid(logit).clamp(P_CLAMP, 1.0 - P_CLAMP);
            let y = f64::from(*label);
            loss -= inv_b * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            let dlogit = (p - y) * inv_b;

            grads[4].data_mut()[0] += dlogit;
            for j in 0..dh {
                grads[3].data_mut()[j] += dlogit * z[j].max(0.0);
                dz[j] = if z[j] > 0.0 { dlogit * w2[j] } else { 0.0 };
            }
            for (g, d) in grads[2].data_mut().iter_mut().zip(&dz) {
                *g += d;
            }
            for (i, &t) in codes.iter().enumerate() {
                for (g, d) in gproj[(i * v + t) * dh..(i * v + t + 1) * dh].iter_mut().zip(&dz) {
                    *g += d;
                }
            }
        }
        let emb = self.params[0].data();
        let w1 = self.params[1].data();
        for i in 0..self.n {
            for t in 0..v {
                let gp = &gproj[(i * v + t) * dh..(i * v + t + 1) * dh];
                if gp.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for e in 0..de {
                    let r = i * de + e;
                    let x = emb[t * de + e];
                    let mut demb = 0.0;
                    for ((g, d), w) in grads[1].data_mut()[r * dh..(r + 1) * dh]
                        .iter_mut()
                        .zip(gp)
                        .zip(&w1[r * dh..(r + 1) * dh])
                    {
                        *g += x * d;
                        demb += w * d;
                    }
                    grads[0].data_mut()[t * de + e] += demb;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss = {loss}")));
        }
        Ok((loss, grads))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_model(n: usize) -> MlpModel {
        let mut m = MlpModel::init(n, 3, 4, 5, &mut Rng::new(0)).unwrap();
        for p in m.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        m
    }

    /// Straightforward forward pass over an explicit concatenated input.
    fn oracle_forward(m: &MlpModel, chain: &Chain) -> f64 {
        let p = m.params();
        let x: Vec<f64> = chain
            .codes()
            .flat_map(|t| (0..m.d_e()).map(move |e| (t, e)))
            .map(|(t, e)| p[0].get(&[t, e]))
            .collect();
        let mut out = p[4].get(&[0]);
        for j in 0..m.d_h() {
            let mut h = p[2].get(&[j]);
            for (r, xr) in x.iter().enumerate() {
                h += xr * p[1].get(&[r, j]);
            }
            out += h.max(0.0) * p[3].get(&[j, 0]);
        }
        1.0 / (1.0 + (-out).exp())
    }

    #[test]
    fn default_param_count() {
        let m = MlpModel::init(16, 3, 16, 256, &mut Rng::new(0)).unwrap();
        assert_eq!(m.param_count(), 66097);
    }

    #[test]
    fn glorot_bounds_and_zero_biases() {
        let m = MlpModel::init(4, 3, 16, 32, &mut Rng::new(1)).unwrap();
        let a = (6.0 / (64.0 + 32.0f64)).sqrt();
        assert!(m.params()[1].data().iter().all(|x| x.abs() <= a));
        assert!(m.params()[2].data().iter().all(|&x| x == 0.0));
        assert_eq!(m.params()[4].data(), &[0.0]);
        assert_eq!(m, MlpModel::init(4, 3, 16, 32, &mut Rng::new(1)).unwrap());
    }

    #[test]
    fn zero_model_outputs_half() {
        let m = zero_model(4);
        for i in 0..81 {
            assert_eq!(m.forward(&Chain::from_index(i, 4)).unwrap(), 0.5);
        }
        let c = Chain::from_index(0, 4);
        let (loss, _) = m.loss_and_grad(&[(&c, 1)]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_oracle() {
        let m = MlpModel::init(4, 3, 4, 6, &mut Rng::new(7)).unwrap();
        for i in 0..81 {
            let c = Chain::from_index(i, 4);
            assert!((m.forward(&c).unwrap() - oracle_forward(&m, &c)).abs() < 1e-12);
        }
    }

    #[test]
    fn output_monotone_in_final_bias() {
        let mut m = MlpModel::init(4, 3, 4, 6, &mut Rng::new(2)).unwrap();
        let c = Chain::from_index(17, 4);
        let mut last = 0.0;
        for b in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            m.params_mut()[4].data_mut()[0] = b;
            let p = m.forward(&c).unwrap();
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn confident_prediction_has_tiny_loss() {
        let mut m = zero_model(4);
        m.params_mut()[4].data_mut()[0] = 30.0;
        let c = Chain::from_index(0, 4);
        assert!(m.loss_and_grad(&[(&c, 1)]).unwrap().0 < 1e-6);
    }

    #[test]
    fn rejects_wrong_length() {
        let m = zero_model(4);
        assert!(m.forward(&Chain::from_index(0, 5)).is_err());
    }

    #[test]
    fn sgd_decreases_loss_on_tiny_set() {
        let mut m = MlpModel::init(4, 3, 4, 8, &mut Rng::new(3)).unwrap();
        let chains: Vec<Chain> = (0..81).map(|i| Chain::from_index(i, 4)).collect();
        let batch: Vec<(&Chain, u8)> = chains.iter().map(|c| (c, u8::from(c.is_valid()))).collect();
        let first = m.loss_and_grad(&batch).unwrap().0;
        for _ in 0..100 {
            let (_, g) = m.loss_and_grad(&batch).unwrap();
            for (p, g) in m.params_mut().iter_mut().zip(&g) {
                for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *x -= 0.5 * d;
                }
            }
        }
        assert!(m.loss_and_grad(&batch).unwrap().0 < first);
    }
}

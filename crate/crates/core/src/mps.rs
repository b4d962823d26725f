//! Dense-core matrix product state with Born-rule probabilities.
//!
//! Core layout: the physical index is always the first axis, bond indices
//! follow left to right. Core 0 has shape `(v, chi)` and acts as a row
//! vector, inner cores are `(v, chi, chi)`, the last core is `(v, chi)` and
//! acts as a column vector.
//!
//! All contractions run in the log domain: every intermediate vector or cap
//! is rescaled to unit max-norm and the log of the scale is carried along,
//! so long chains neither underflow nor overflow.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motzkin::Chain;
use crate::tensor::{gemm_acc, Rng, Tensor};

/// Upper bound on `lp` so that `ln(1 - e^lp)` stays finite.
pub const LP_CLAMP: f64 = -1e-12;
/// Largest length accepted by the brute-force oracles.
pub const MAX_BRUTE_LEN: usize = 10;

/// How `<psi|psi>` enters the log-probability used by the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Full cap contraction.
    #[default]
    Exact,
    /// Treat the norm as 1.0.
    ConstantOne,
    /// Sum of squared parameters.
    L2Params,
}

impl NormMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormMode::Exact => "exact",
            NormMode::ConstantOne => "constant_one",
            NormMode::L2Params => "l2_params",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(NormMode::Exact),
            "constant_one" => Some(NormMode::ConstantOne),
            "l2_params" => Some(NormMode::L2Params),
            _ => None,
        }
    }
}

/// Log-normalizer used inside `lp`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Normalizer {
    Exact,
    External(f64),
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub external_norm_coef: f64,
}

/// Signed amplitude stored as `sign * exp(log_abs)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogAmplitude {
    pub log_abs: f64,
    pub sign: i8,
}

impl LogAmplitude {
    pub const ZERO: LogAmplitude = LogAmplitude {
        log_abs: f64::NEG_INFINITY,
        sign: 0,
    };

    pub fn value(self) -> f64 {
        if self.sign == 0 {
            0.0
        } else {
            f64::from(self.sign) * self.log_abs.exp()
        }
    }
}

/// Everything produced by one pass of the cap contraction.
#[derive(Debug, Clone)]
pub struct NormContraction {
    pub log_norm_sq: f64,
    /// `caps[i]` is the rescaled contraction of sites `0..=i`, for
    /// `i` in `0..n-1`.
    pub caps: Vec<Tensor>,
    /// Accumulated log scale of each entry in `caps`.
    pub cap_log_scales: Vec<f64>,
    /// Multiply-adds spent in total.
    pub mult_adds: u64,
    /// Multiply-adds of the cap creation from core 0.
    pub cap_creation_mult_adds: u64,
    /// Multiply-adds per inner site, `[contract cap in, create next cap]`.
    pub loop_mult_adds: Vec<[u64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMps {
    n: usize,
    v: usize,
    chi: usize,
    cores: Vec<Tensor>,
}

/// Rescale `xs` to unit max-norm; returns the log of the removed scale, or
/// `None` when every entry is zero.
fn rescale(xs: &mut [f64]) -> Option<f64> {
    let m = xs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if m == 0.0 || !m.is_finite() {
        return None;
    }
    let inv = 1.0 / m;
    for x in xs.iter_mut() {
        *x *= inv;
    }
    Some(m.ln())
}

impl DenseMps {
    pub fn new(cores: Vec<Tensor>) -> Result<Self> {
        let n = cores.len();
        if n < 2 {
            return Err(Error::arg(format!("need at least 2 cores, got {n}")));
        }
        let first = cores[0].shape();
        if first.len() != 2 {
            return Err(Error::shape(format!("core 0 must be (v, chi), got {first:?}")));
        }
        let (v, chi) = (first[0], first[1]);
        for (i, c) in cores.iter().enumerate() {
            let want: Vec<usize> = if i == 0 || i == n - 1 {
                vec![v, chi]
            } else {
                vec![v, chi, chi]
            };
            if c.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "core {i} has shape {:?}, expected {want:?}",
                    c.shape()
                )));
            }
        }
        Ok(DenseMps { n, v, chi, cores })
    }

    /// Identity-plus-noise inner cores and `1/sqrt(chi)` ones-plus-noise outer
    /// cores. Without noise every chain has amplitude exactly one.
    pub fn init(
        n: usize,
        v: usize,
        chi: usize,
        sigma_inner: f64,
        sigma_outer: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if n < 2 || chi < 1 || v < 1 {
            return Err(Error::arg(format!(
                "init_dense needs n >= 2, v >= 1, chi >= 1 (got n={n}, v={v}, chi={chi})"
            )));
        }
        let outer_value = 1.0 / (chi as f64).sqrt();
        let mut cores = Vec::with_capacity(n);
        for i in 0..n {
            if i == 0 || i == n - 1 {
                let noise = rng.normal(&[v, chi], 0.0, sigma_outer);
                cores.push(noise.map(|x| x + outer_value));
            } else {
                let mut core = rng.normal(&[v, chi, chi], 0.0, sigma_inner);
                for t in 0..v {
                    for a in 0..chi {
                        core.data_mut()[(t * chi + a) * chi + a] += 1.0;
                    }
                }
                cores.push(core);
            }
        }
        Self::new(cores)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn chi(&self) -> usize {
        self.chi
    }

    pub fn cores(&self) -> &[Tensor] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [Tensor] {
        &mut self.cores
    }

    pub fn into_cores(self) -> Vec<Tensor> {
        self.cores
    }

    /// `[outer core, inner core, total]` parameter counts.
    pub fn core_sizes(&self) -> [usize; 3] {
        let outer = self.v * self.chi;
        let inner = self.v * self.chi * self.chi;
        [outer, inner, self.param_count()]
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(Tensor::len).sum()
    }

    fn check_codes(&self, codes: &[usize]) -> Result<()> {
        if codes.len() != self.n {
            return Err(Error::arg(format!(
                "chain length {} != model length {}",
                codes.len(),
                self.n
            )));
        }
        if let Some(&c) = codes.iter().find(|&&c| c >= self.v) {
            return Err(Error::arg(format!("token code {c} >= v = {}", self.v)));
        }
        Ok(())
    }

    fn slice(&self, site: usize, token: usize) -> &[f64] {
        let width = if site == 0 || site == self.n - 1 {
            self.chi
        } else {
            self.chi * self.chi
        };
        &self.cores[site].data()[token * width..(token + 1) * width]
    }

    pub fn amplitude(&self, chain: &Chain) -> Result<LogAmplitude> {
        let codes: Vec<usize> = chain.codes().collect();
        self.amplitude_codes(&codes)
    }

    /// Left-to-right contraction of the token-selected slices.
    pub fn amplitude_codes(&self, codes: &[usize]) -> Result<LogAmplitude> {
        self.check_codes(codes)?;
        let chi = self.chi;
        let mut row = self.slice(0, codes[0]).to_vec();
        let mut next = vec![0.0; chi];
        let Some(mut log_abs) = rescale(&mut row) else {
            return Ok(LogAmplitude::ZERO);
        };
        for (site, &t) in codes.iter().enumerate().take(self.n - 1).skip(1) {
            next.iter_mut().for_each(|x| *x = 0.0);
            gemm_acc(&row, self.slice(site, t), &mut next, 1, chi, chi);
            std::mem::swap(&mut row, &mut next);
            match rescale(&mut row) {
                Some(l) => log_abs += l,
                None => return Ok(LogAmplitude::ZERO),
            }
        }
        let last = self.slice(self.n - 1, codes[self.n - 1]);
        let value: f64 = row.iter().zip(last).map(|(a, b)| a * b).sum();
        if value == 0.0 {
            return Ok(LogAmplitude::ZERO);
        }
        Ok(LogAmplitude {
            log_abs: log_abs + value.abs().ln(),
            sign: if value > 0.0 { 1 } else { -1 },
        })
    }

    /// Unscaled product of slices. Only sensible for small models.
    pub fn direct_amplitude(&self, codes: &[usize]) -> Result<f64> {
        self.check_codes(codes)?;
        let chi = self.chi;
        let mut row = self.slice(0, codes[0]).to_vec();
        for (site, &t) in codes.iter().enumerate().take(self.n - 1).skip(1) {
            let mut next = vec![0.0; chi];
            gemm_acc(&row, self.slice(site, t), &mut next, 1, chi, chi);
            row = next;
        }
        let last = self.slice(self.n - 1, codes[self.n - 1]);
        Ok(row.iter().zip(last).map(|(a, b)| a * b).sum())
    }

    /// Cap algorithm for `<psi|psi>`.
    ///
    /// The cap from core 0 is `A0^T A0` over the physical index. Each inner
    /// site then (1) contracts the cap into the top copy with a batched
    /// product `C . A[t]`, relying on the symmetry of `C` instead of a
    /// transpose, and (2) merges `(v, chi)` on both the result and the bottom
    /// copy and multiplies `A_r^T X_r`, which yields the next symmetric cap.
    /// The last core is absorbed as `B . C` followed by a flat inner product.
    pub fn norm_contraction(&self) -> Result<NormContraction> {
        let (v, chi) = (self.v, self.chi);
        let mut mult_adds = 0u64;
        let mut caps = Vec::with_capacity(self.n - 1);
        let mut scales = Vec::with_capacity(self.n - 1);
        let mut loop_costs = Vec::with_capacity(self.n.saturating_sub(2));

        let a0 = &self.cores[0];
        let mut cap = a0.t()?.matmul(a0)?;
        let creation = (v * chi * chi) as u64;
        mult_adds += creation;
        let mut log_scale = rescale(cap.data_mut())
            .ok_or_else(|| Error::NonFinite("zero cap at site 0".into()))?;
        caps.push(cap.clone());
        scales.push(log_scale);

        for site in 1..self.n - 1 {
            let core = &self.cores[site];
            // step 1: batched C . A[t], cap broadcast over the physical axis
            let x = cap.batched_matmul(core)?;
            let step1 = (v * chi * chi * chi) as u64;
            // step 2: merge (v, chi) and multiply by the transposed bottom copy
            let x_r = x.into_shape(&[v * chi, chi])?;
            let a_r = core.reshape(&[v * chi, chi])?;
            cap = a_r.t()?.matmul(&x_r)?;
            let step2 = (chi * v * chi * chi) as u64;
            mult_adds += step1 + step2;
            loop_costs.push([step1, step2]);
            if !cap.all_finite() {
                return Err(Error::NonFinite(format!("cap at site {site}")));
            }
            log_scale += rescale(cap.data_mut())
                .ok_or_else(|| Error::NonFinite(format!("zero cap at site {site}")))?;
            caps.push(cap.clone());
            scales.push(log_scale);
        }

        let last = &self.cores[self.n - 1];
        let x = last.matmul(&cap)?;
        let value = x.dot(last)?;
        mult_adds += (v * chi * chi + v * chi) as u64;
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::NonFinite(format!("norm contraction gave {value}")));
        }
        Ok(NormContraction {
            log_norm_sq: log_scale + value.ln(),
            caps,
            cap_log_scales: scales,
            mult_adds,
            cap_creation_mult_adds: creation,
            loop_mult_adds: loop_costs,
        })
    }

    pub fn log_norm_sq(&self) -> Result<f64> {
        Ok(self.norm_contraction()?.log_norm_sq)
    }

    /// `2 ln|<x|psi>| - ln <psi|psi>`, clamped to at most [`LP_CLAMP`].
    /// A zero amplitude gives `-inf`.
    pub fn log_prob(&self, chain: &Chain) -> Result<f64> {
        let log_norm = self.log_norm_sq()?;
        self.log_prob_with_norm(chain, log_norm)
    }

    pub fn log_prob_with_norm(&self, chain: &Chain, log_norm_sq: f64) -> Result<f64> {
        let amp = self.amplitude(chain)?;
        Ok(log_prob_from(amp, log_norm_sq))
    }

    /// Total probability assigned to `chains` (assumed distinct).
    pub fn sigma_mass(&self, chains: &[Chain]) -> Result<f64> {
        if chains.is_empty() {
            return Ok(0.0);
        }
        let log_norm = self.log_norm_sq()?;
        let probs = chains
            .par_iter()
            .map(|c| self.log_prob_with_norm(c, log_norm).map(f64::exp))
            .collect::<Result<Vec<f64>>>()?;
        Ok(probs.iter().sum())
    }

    /// Rescaled right caps: `right[i]` contracts sites `i+1..n` and is
    /// defined for `i` in `0..n-1`.
    fn right_caps(&self) -> Result<(Vec<Tensor>, Vec<f64>)> {
        let (v, chi, n) = (self.v, self.chi, self.n);
        let mut caps = vec![Tensor::zeros(&[1]); n - 1];
        let mut scales = vec![0.0; n - 1];
        let last = &self.cores[n - 1];
        let mut cap = last.t()?.matmul(last)?;
        let mut log_scale = rescale(cap.data_mut())
            .ok_or_else(|| Error::NonFinite("zero right cap".into()))?;
        caps[n - 2] = cap.clone();
        scales[n - 2] = log_scale;
        for site in (1..n - 1).rev() {
            let core = &self.cores[site];
            // Y[t] = A[t] R, then R' = sum_t Y[t] A[t]^T
            let y = core.batched_matmul(&cap)?;
            let mut next = vec![0.0; chi * chi];
            for t in 0..v {
                let yt = &y.data()[t * chi * chi..(t + 1) * chi * chi];
                let at = &core.data()[t * chi * chi..(t + 1) * chi * chi];
                for a in 0..chi {
                    let yrow = &yt[a * chi..(a + 1) * chi];
                    for b in 0..chi {
                        let arow = &at[b * chi..(b + 1) * chi];
                        next[a * chi + b] += yrow.iter().zip(arow).map(|(x, z)| x * z).sum::<f64>();
                    }
                }
            }
            cap = Tensor::new(vec![chi, chi], next)?;
            log_scale += rescale(cap.data_mut())
                .ok_or_else(|| Error::NonFinite(format!("zero right cap at {site}")))?;
            caps[site - 1] = cap.clone();
            scales[site - 1] = log_scale;
        }
        Ok((caps, scales))
    }

    /// Gradient of `ln <psi|psi>` with respect to every core, plus the value.
    pub fn log_norm_sq_grad(&self) -> Result<(f64, Vec<Tensor>)> {
        let (v, chi, n) = (self.v, self.chi, self.n);
        let left = self.norm_contraction()?;
        let log_z = left.log_norm_sq;
        let (right, right_scales) = self.right_caps()?;
        let mut grads = Vec::with_capacity(n);
        for site in 0..n {
            let core = &self.cores[site];
            let g = if site == 0 {
                // 2 A0 R0
                let factor = 2.0 * (right_scales[0] - log_z).exp();
                core.matmul(&right[0])?.scale(factor)
            } else if site == n - 1 {
                let factor = 2.0 * (left.cap_log_scales[n - 2] - log_z).exp();
                core.matmul(&left.caps[n - 2])?.scale(factor)
            } else {
                // 2 L A[t] R
                let factor =
                    2.0 * (left.cap_log_scales[site - 1] + right_scales[site] - log_z).exp();
                let la = left.caps[site - 1].batched_matmul(core)?;
                la.batched_matmul(&right[site])?
                    .into_shape(&[v, chi, chi])?
                    .scale(factor)
            };
            grads.push(g);
        }
        Ok((log_z, grads))
    }

    /// Accumulate `coef * d ln|psi(x)| / d core` into `grads`.
    fn accumulate_amplitude_grad(
        &self,
        codes: &[usize],
        amp: LogAmplitude,
        coef: f64,
        grads: &mut [Tensor],
    ) {
        let (n, chi) = (self.n, self.chi);
        // left[i]: product of sites 0..i (rescaled), i in 1..n
        let mut left = vec![vec![0.0; chi]; n];
        let mut left_log = vec![0.0; n];
        left[1] = self.slice(0, codes[0]).to_vec();
        left_log[1] = rescale(&mut left[1]).unwrap_or(f64::NEG_INFINITY);
        for site in 1..n - 1 {
            let mut next = vec![0.0; chi];
            gemm_acc(&left[site], self.slice(site, codes[site]), &mut next, 1, chi, chi);
            left_log[site + 1] = left_log[site] + rescale(&mut next).unwrap_or(f64::NEG_INFINITY);
            left[site + 1] = next;
        }
        // right[i]: product of sites i+1..n (rescaled), i in 0..n-1
        let mut right = vec![vec![0.0; chi]; n];
        let mut right_log = vec![0.0; n];
        right[n - 2] = self.slice(n - 1, codes[n - 1]).to_vec();
        right_log[n - 2] = rescale(&mut right[n - 2]).unwrap_or(f64::NEG_INFINITY);
        for site in (1..n - 1).rev() {
            let m = self.slice(site, codes[site]);
            let r = &right[site];
            let mut next: Vec<f64> = (0..chi)
                .map(|a| m[a * chi..(a + 1) * chi].iter().zip(r).map(|(x, y)| x * y).sum())
                .collect();
            right_log[site - 1] = right_log[site] + rescale(&mut next).unwrap_or(f64::NEG_INFINITY);
            right[site - 1] = next;
        }

        let sign = f64::from(amp.sign);
        for site in 0..n {
            let t = codes[site];
            if site == 0 {
                let f = coef * sign * (right_log[0] - amp.log_abs).exp();
                let g = &mut grads[0].data_mut()[t * chi..(t + 1) * chi];
                for (gx, r) in g.iter_mut().zip(&right[0]) {
                    *gx += f * r;
                }
            } else if site == n - 1 {
                let f = coef * sign * (left_log[n - 1] - amp.log_abs).exp();
                let g = &mut grads[n - 1].data_mut()[t * chi..(t + 1) * chi];
                for (gx, l) in g.iter_mut().zip(&left[n - 1]) {
                    *gx += f * l;
                }
            } else {
                let f = coef * sign * (left_log[site] + right_log[site] - amp.log_abs).exp();
                if f == 0.0 || !f.is_finite() {
                    continue;
                }
                let g = &mut grads[site].data_mut()[t * chi * chi..(t + 1) * chi * chi];
                for (a, &l) in left[site].iter().enumerate() {
                    let fl = f * l;
                    for (gx, r) in g[a * chi..(a + 1) * chi].iter_mut().zip(&right[site]) {
                        *gx += fl * r;
                    }
                }
            }
        }
    }

    pub fn sum_sq_params(&self) -> f64 {
        self.cores
            .iter()
            .flat_map(|c| c.data())
            .map(|x| x * x)
            .sum()
    }

    /// Binary cross-entropy on Born log-probabilities plus `alpha * ln <psi|psi>`.
    ///
    /// The normalizer inside `lp` follows `norm_mode`; the `alpha` term always
    /// uses the exact norm. Gradients are analytic: amplitude gradients come
    /// from left/right partial products of each chain and the norm gradient
    /// from left/right caps.
    pub fn loss_and_grad(
        &self,
        batch: &[(&Chain, u8)],
        alpha: f64,
        norm_mode: NormMode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let normalizer = match norm_mode {
            NormMode::Exact => Normalizer::Exact,
            NormMode::ConstantOne => Normalizer::External(0.0),
            NormMode::L2Params => Normalizer::External(self.sum_sq_params().ln()),
        };
        let mut out = self.loss_terms(batch, alpha, normalizer)?;
        if norm_mode == NormMode::L2Params && out.external_norm_coef != 0.0 {
            let scale = out.external_norm_coef * 2.0 / self.sum_sq_params();
            add_scaled(&mut out.grads, &self.cores, scale);
        }
        Ok((out.loss, out.grads))
    }

    /// Loss and gradient where the normalizer may be supplied by the caller.
    /// For [`Normalizer::External`] the returned `external_norm_coef` is the
    /// derivative of the loss with respect to that log-normalizer; the caller
    /// owns the chain rule through it.
    pub fn loss_terms(
        &self,
        batch: &[(&Chain, u8)],
        alpha: f64,
        normalizer: Normalizer,
    ) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let mut grads: Vec<Tensor> = self.cores.iter().map(|c| Tensor::zeros(c.shape())).collect();

        let exact = if normalizer == Normalizer::Exact || alpha != 0.0 {
            Some(self.log_norm_sq_grad()?)
        } else {
            None
        };
        let log_norm = match normalizer {
            Normalizer::Exact => exact.as_ref().map(|e| e.0).expect("computed above"),
            Normalizer::External(l) => l,
        };

        let inv_b = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut dnorm_coef = 0.0;
        for (chain, label) in batch {
            let codes: Vec<usize> = chain.codes().collect();
            let amp = self.amplitude_codes(&codes)?;
            let (item_loss, dlp) = bce_on_lp(amp, log_norm, *label)?;
            loss += item_loss * inv_b;
            if dlp == 0.0 {
                continue;
            }
            // lp = 2 ln|psi| - ln N
            self.accumulate_amplitude_grad(&codes, amp, 2.0 * dlp * inv_b, &mut grads);
            dnorm_coef -= dlp * inv_b;
        }

        let mut external_norm_coef = 0.0;
        match normalizer {
            Normalizer::Exact => {
                let (_, ng) = exact.as_ref().expect("computed above");
                add_scaled(&mut grads, ng, dnorm_coef);
            }
            Normalizer::External(_) => external_norm_coef = dnorm_coef,
        }
        if alpha != 0.0 {
            let (lz, ng) = exact.as_ref().expect("computed above");
            loss += alpha * lz;
            add_scaled(&mut grads, ng, alpha);
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss = {loss}")));
        }
        Ok(LossTerms {
            loss,
            grads,
            external_norm_coef,
        })
    }

    pub fn brute_force_norm_sq(&self) -> Result<f64> {
        Ok(self.brute_force_amplitudes()?.iter().map(|a| a * a).sum())
    }

    /// `p(s)` for every one of the `v^n` chains, indexed in base-`v` order.
    pub fn brute_force_distribution(&self) -> Result<Vec<f64>> {
        let amps = self.brute_force_amplitudes()?;
        let z: f64 = amps.iter().map(|a| a * a).sum();
        Ok(amps.iter().map(|a| a * a / z).collect())
    }

    fn brute_force_amplitudes(&self) -> Result<Vec<f64>> {
        if self.n > MAX_BRUTE_LEN {
            return Err(Error::GuardExceeded {
                n: self.n,
                max: MAX_BRUTE_LEN,
            });
        }
        let total = self.v.pow(self.n as u32);
        (0..total)
            .map(|i| self.direct_amplitude(&index_to_codes(i, self.n, self.v)))
            .collect()
    }
}

/// Base-`v` digits of `index`, most significant first.
pub fn index_to_codes(mut index: usize, n: usize, v: usize) -> Vec<usize> {
    let mut codes = vec![0; n];
    for slot in codes.iter_mut().rev() {
        *slot = index % v;
        index /= v;
    }
    codes
}

pub(crate) fn log_prob_from(amp: LogAmplitude, log_norm_sq: f64) -> f64 {
    if amp.sign == 0 {
        return f64::NEG_INFINITY;
    }
    (2.0 * amp.log_abs - log_norm_sq).min(LP_CLAMP)
}

/// Loss of one item and `d loss / d lp`. The derivative is zero where the
/// clamp is active.
pub(crate) fn bce_on_lp(amp: LogAmplitude, log_norm: f64, label: u8) -> Result<(f64, f64)> {
    if amp.sign == 0 {
        return if label == 1 {
            Err(Error::NonFinite("zero amplitude on a positive example".into()))
        } else {
            Ok((0.0, 0.0))
        };
    }
    let raw = 2.0 * amp.log_abs - log_norm;
    if raw.is_nan() {
        return Err(Error::NumericalDomain("lp is NaN".into()));
    }
    let clamped = raw > LP_CLAMP;
    let lp = raw.min(LP_CLAMP);
    if label == 1 {
        Ok((-lp, if clamped { 0.0 } else { -1.0 }))
    } else {
        // -ln(1 - e^lp), derivative 1 / (e^-lp - 1)
        let loss = -(-lp.exp_m1()).ln();
        let d = if clamped { 0.0 } else { 1.0 / (-lp).exp_m1() };
        if !loss.is_finite() {
            return Err(Error::NumericalDomain(format!("lp = {lp} on a negative example")));
        }
        Ok((loss, d))
    }
}

pub(crate) fn add_scaled(acc: &mut [Tensor], other: &[Tensor], scale: f64) {
    for (a, o) in acc.iter_mut().zip(other) {
        for (x, y) in a.data_mut().iter_mut().zip(o.data()) {
            *x += scale * y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motzkin::{enumerate_valid, Token};

    fn random_mps(n: usize, chi: usize, seed: u64) -> DenseMps {
        let mut rng = Rng::new(seed);
        let cores = (0..n)
            .map(|i| {
                if i == 0 || i == n - 1 {
                    rng.normal(&[3, chi], 0.0, 1.0)
                } else {
                    rng.normal(&[3, chi, chi], 0.0, 1.0)
                }
            })
            .collect();
        DenseMps::new(cores).unwrap()
    }

    fn all_chains(n: usize) -> Vec<Chain> {
        (0..3u64.pow(n as u32)).map(|i| Chain::from_index(i, n)).collect()
    }

    #[test]
    fn shapes_and_param_counts() {
        let m = DenseMps::init(16, 3, 8, 0.01, 0.01, &mut Rng::new(0)).unwrap();
        assert_eq!(m.core_sizes(), [24, 192, 2736]);
        assert!(DenseMps::init(1, 3, 2, 0.0, 0.0, &mut Rng::new(0)).is_err());
        let bad = vec![Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2, 3]), Tensor::zeros(&[3, 2])];
        assert!(DenseMps::new(bad).is_err());
    }

    #[test]
    fn zero_noise_amplitude_is_one() {
        let m = DenseMps::init(16, 3, 8, 0.0, 0.0, &mut Rng::new(0)).unwrap();
        for c in enumerate_valid(16).unwrap().take(50) {
            let a = m.amplitude(&c).unwrap();
            assert_eq!(a.sign, 1);
            assert!(a.log_abs.abs() < 1e-12);
        }
        let lp = m.log_prob(&Chain::new(vec![Token::Down; 16])).unwrap();
        assert!((lp + 16.0 * 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn zero_noise_n4_uniform() {
        let m = DenseMps::init(4, 3, 5, 0.0, 0.0, &mut Rng::new(0)).unwrap();
        assert!((m.log_norm_sq().unwrap() - 81f64.ln()).abs() < 1e-12);
        assert!((m.brute_force_norm_sq().unwrap() - 81.0).abs() < 1e-10);
        for c in all_chains(4) {
            assert!((m.log_prob(&c).unwrap() - (1.0 / 81f64).ln()).abs() < 1e-12);
        }
        let valid: Vec<Chain> = enumerate_valid(4).unwrap().collect();
        assert!((m.sigma_mass(&valid).unwrap() - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(m.sigma_mass(&[]).unwrap(), 0.0);
    }

    #[test]
    fn scalar_chain() {
        // chi = 1, n = 2: amplitude is a product of scalars
        let a = Tensor::new(vec![3, 1], vec![2.0, -1.0, 0.5]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![3.0, 4.0, -2.0]).unwrap();
        let m = DenseMps::new(vec![a, b]).unwrap();
        let amp = m.amplitude_codes(&[1, 2]).unwrap();
        assert!((amp.value() - 2.0).abs() < 1e-14);
        let ones = DenseMps::new(vec![Tensor::full(&[3, 1], 1.0), Tensor::full(&[3, 1], 1.0)]).unwrap();
        assert!((ones.log_norm_sq().unwrap() - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn amplitude_matches_direct_product() {
        let m = random_mps(6, 4, 1);
        for c in all_chains(6).iter().step_by(7) {
            let codes: Vec<usize> = c.codes().collect();
            let direct = m.direct_amplitude(&codes).unwrap();
            let scaled = m.amplitude(c).unwrap().value();
            assert!((direct - scaled).abs() <= 1e-10 * direct.abs().max(1e-300));
        }
    }

    #[test]
    fn norm_matches_brute_force() {
        let m = random_mps(6, 4, 2);
        let bf = m.brute_force_norm_sq().unwrap();
        let cap = m.log_norm_sq().unwrap().exp();
        assert!((bf - cap).abs() <= 1e-9 * bf);
    }

    #[test]
    fn caps_are_symmetric() {
        let m = random_mps(7, 5, 3);
        for cap in m.norm_contraction().unwrap().caps {
            let asym = cap.sub(&cap.t().unwrap()).unwrap().frobenius_norm();
            assert!(asym <= 1e-10 * cap.frobenius_norm());
        }
    }

    #[test]
    fn born_normalization_n6() {
        let m = random_mps(6, 3, 4);
        let z = m.log_norm_sq().unwrap();
        let total: f64 = all_chains(6)
            .iter()
            .map(|c| m.log_prob_with_norm(c, z).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn norm_grad_matches_right_and_left() {
        // d ln Z / d core contracted with the core itself equals 2 for every
        // site, since Z is quadratic in each core.
        let m = random_mps(5, 3, 8);
        let (_, grads) = m.log_norm_sq_grad().unwrap();
        for (g, c) in grads.iter().zip(m.cores()) {
            assert!((g.dot(c).unwrap() - 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_examples() {
        let half = LogAmplitude { log_abs: 0.5f64.ln() / 2.0, sign: 1 };
        let (l1, _) = bce_on_lp(half, 0.0, 1).unwrap();
        let (l0, _) = bce_on_lp(half, 0.0, 0).unwrap();
        assert!((l1 - std::f64::consts::LN_2).abs() < 1e-14);
        assert!((l0 - std::f64::consts::LN_2).abs() < 1e-14);
        assert!(bce_on_lp(LogAmplitude::ZERO, 0.0, 1).is_err());
        assert_eq!(bce_on_lp(LogAmplitude::ZERO, 0.0, 0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn log_prob_is_clamped() {
        let ones = DenseMps::new(vec![Tensor::full(&[1, 1], 1.0), Tensor::full(&[1, 1], 1.0)]).unwrap();
        assert_eq!(ones.log_prob_with_norm(&Chain::from_codes(&[0, 0]).unwrap(), 0.0).unwrap(), LP_CLAMP);
    }

    #[test]
    fn scale_invariance_of_log_prob() {
        let m = random_mps(6, 3, 5);
        let mut scaled = m.clone();
        scaled.cores_mut()[2] = scaled.cores()[2].scale(3.7);
        for c in all_chains(6).iter().step_by(11) {
            let a = m.log_prob(c).unwrap();
            let b = scaled.log_prob(c).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn norm_loop_cost_is_cubic_in_chi() {
        for chi in [2usize, 4, 8] {
            let m = DenseMps::init(10, 3, chi, 0.1, 0.1, &mut Rng::new(1)).unwrap();
            let nc = m.norm_contraction().unwrap();
            assert_eq!(nc.cap_creation_mult_adds, (3 * chi * chi) as u64);
            assert_eq!(nc.loop_mult_adds.len(), 8);
            for [a, b] in &nc.loop_mult_adds {
                assert_eq!(*a, (3 * chi.pow(3)) as u64);
                assert_eq!(*b, (3 * chi.pow(3)) as u64);
            }
        }
    }

    #[test]
    fn brute_force_guard() {
        let m = DenseMps::init(11, 3, 2, 0.0, 0.0, &mut Rng::new(0)).unwrap();
        assert!(m.brute_force_norm_sq().is_err());
    }

    #[test]
    fn rejects_bad_chains() {
        let m = random_mps(4, 2, 0);
        assert!(m.amplitude_codes(&[0, 1, 2]).is_err());
        assert!(m.amplitude_codes(&[0, 1, 2, 3]).is_err());
    }
}

//! Factored-core MPS: every site core is a vertical stack of `h` subcores.
//!
//! Subcore axes are always ordered `[phys][down][left][right][up]`, listing
//! only the axes the subcore structurally has:
//!
//! * `phys` (extent `v`) on the bottom subcore, and on every subcore when
//!   skip connections are enabled;
//! * `down`/`up` (extent `chi_v`) on vertical bonds below/above;
//! * `left`/`right` (extent `chi_h`) except on the open side of the two
//!   outer cores.
//!
//! Vertical contraction runs bottom-up and merges the `h` horizontal bonds on
//! each side into one index of extent `chi_h^h`, bottom layer most
//! significant, giving a dense core in the layout of [`crate::mps`]. With skip
//! connections every subcore's physical index is pinned to the same token
//! (copy-tensor semantics), which is evaluated one physical slice at a time.

use crate::error::{Error, Result};
use crate::motzkin::Chain;
use crate::mps::{add_scaled, log_prob_from, DenseMps, LogAmplitude, NormMode, Normalizer};
use crate::tensor::{gemm_acc, svd, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    OuterLeft,
    Inner,
    OuterRight,
}

impl PositionKind {
    pub fn of_site(site: usize, n: usize) -> Self {
        if site == 0 {
            PositionKind::OuterLeft
        } else if site == n - 1 {
            PositionKind::OuterRight
        } else {
            PositionKind::Inner
        }
    }
}

/// Canonical five-axis extents of one subcore; absent axes have extent 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubcoreDims {
    pub phys: usize,
    pub down: usize,
    pub left: usize,
    pub right: usize,
    pub up: usize,
    has: [bool; 5],
}

impl SubcoreDims {
    pub fn new(kind: PositionKind, layer: usize, height: usize, skip: bool, v: usize, chi_h: usize, chi_v: usize) -> Self {
        let has = [
            layer == 0 || skip,
            layer > 0,
            kind != PositionKind::OuterLeft,
            kind != PositionKind::OuterRight,
            layer + 1 < height,
        ];
        let pick = |present: bool, ext: usize| if present { ext } else { 1 };
        SubcoreDims {
            phys: pick(has[0], v),
            down: pick(has[1], chi_v),
            left: pick(has[2], chi_h),
            right: pick(has[3], chi_h),
            up: pick(has[4], chi_v),
            has,
        }
    }

    /// Stored tensor shape (present axes only).
    pub fn shape(&self) -> Vec<usize> {
        [self.phys, self.down, self.left, self.right, self.up]
            .iter()
            .zip(self.has)
            .filter(|(_, h)| *h)
            .map(|(&e, _)| e)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.phys * self.down * self.left * self.right * self.up
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredCore {
    pub kind: PositionKind,
    pub height: usize,
    pub skip: bool,
    pub v: usize,
    pub chi_h: usize,
    pub chi_v: usize,
    pub subcores: Vec<Tensor>,
}

/// Forward record of a vertical contraction, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct VerticalTrace {
    tokens: Vec<usize>,
    /// `stages[k]` has shape `(tokens, L_k, R_k, up_k)` after layer `k`.
    stages: Vec<Tensor>,
    /// Multiply-adds of each pairwise merge (one per layer above the bottom).
    pub merge_mult_adds: Vec<u64>,
}

impl FactoredCore {
    pub fn new(
        kind: PositionKind,
        skip: bool,
        v: usize,
        chi_h: usize,
        chi_v: usize,
        subcores: Vec<Tensor>,
    ) -> Result<Self> {
        let height = subcores.len();
        if height == 0 {
            return Err(Error::arg("factored core needs at least one subcore"));
        }
        let core = FactoredCore {
            kind,
            height,
            skip,
            v,
            chi_h,
            chi_v,
            subcores,
        };
        for (k, s) in core.subcores.iter().enumerate() {
            let want = core.dims(k).shape();
            if s.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "subcore {k} has shape {:?}, expected {want:?}",
                    s.shape()
                )));
            }
        }
        Ok(core)
    }

    pub fn dims(&self, layer: usize) -> SubcoreDims {
        SubcoreDims::new(self.kind, layer, self.height, self.skip, self.v, self.chi_h, self.chi_v)
    }

    pub fn param_count(&self) -> usize {
        self.subcores.iter().map(Tensor::len).sum()
    }

    /// Bond extent of the effective dense core on a horizontal side.
    pub fn effective_bond(&self) -> usize {
        self.chi_h.pow(self.height as u32)
    }

    fn effective_shape(&self) -> Vec<usize> {
        let b = self.effective_bond();
        match self.kind {
            PositionKind::Inner => vec![self.v, b, b],
            _ => vec![self.v, b],
        }
    }

    /// Contract the stack for the physical values in `tokens`.
    pub fn vertical_forward(&self, tokens: &[usize]) -> Result<VerticalTrace> {
        let nb = tokens.len();
        let d0 = self.dims(0);
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.v) {
            return Err(Error::arg(format!("token {t} >= v = {}", self.v)));
        }
        let width0 = d0.left * d0.right * d0.up;
        let mut first = Vec::with_capacity(nb * width0);
        for &t in tokens {
            first.extend_from_slice(&self.subcores[0].data()[t * width0..(t + 1) * width0]);
        }
        let mut stages = vec![Tensor::new(vec![nb, d0.left, d0.right, d0.up], first)?];
        let mut costs = Vec::with_capacity(self.height.saturating_sub(1));

        for k in 1..self.height {
            let prev = &stages[k - 1];
            let (big_l, big_r, d) = (prev.shape()[1], prev.shape()[2], prev.shape()[3]);
            let dk = self.dims(k);
            debug_assert_eq!(dk.down, d);
            let (l, r, u) = (dk.left, dk.right, dk.up);
            let sw = d * l * r * u;
            let mut out = vec![0.0; nb * big_l * l * big_r * r * u];
            let mut prod = vec![0.0; big_l * big_r * l * r * u];
            for (b, &t) in tokens.iter().enumerate() {
                let ts = if dk.phys == 1 { 0 } else { t };
                let s = &self.subcores[k].data()[ts * sw..(ts + 1) * sw];
                let e = &prev.data()[b * big_l * big_r * d..(b + 1) * big_l * big_r * d];
                prod.iter_mut().for_each(|x| *x = 0.0);
                gemm_acc(e, s, &mut prod, big_l * big_r, d, l * r * u);
                // (L, R, l, r, u) -> (L, l, R, r, u)
                let ob = &mut out[b * big_l * l * big_r * r * u..(b + 1) * big_l * l * big_r * r * u];
                for bl in 0..big_l {
                    for br in 0..big_r {
                        for sl in 0..l {
                            for sr in 0..r {
                                let src = (((bl * big_r + br) * l + sl) * r + sr) * u;
                                let dst = (((bl * l + sl) * big_r + br) * r + sr) * u;
                                ob[dst..dst + u].copy_from_slice(&prod[src..src + u]);
                            }
                        }
                    }
                }
            }
            costs.push((nb * big_l * big_r * d * l * r * u) as u64);
            stages.push(Tensor::new(vec![nb, big_l * l, big_r * r, u], out)?);
        }
        Ok(VerticalTrace {
            tokens: tokens.to_vec(),
            stages,
            merge_mult_adds: costs,
        })
    }

    /// Back-propagate `d_out` (shape of the final stage) into subcore
    /// gradients, accumulating into `grads`.
    pub fn vertical_backward(&self, trace: &VerticalTrace, d_out: &[f64], grads: &mut [Tensor]) {
        let nb = trace.tokens.len();
        let mut d_cur = d_out.to_vec();
        for k in (1..self.height).rev() {
            let prev = &trace.stages[k - 1];
            let (big_l, big_r, d) = (prev.shape()[1], prev.shape()[2], prev.shape()[3]);
            let dk = self.dims(k);
            let (l, r, u) = (dk.left, dk.right, dk.up);
            let sw = d * l * r * u;
            let mut d_prev = vec![0.0; nb * big_l * big_r * d];
            let mut m = vec![0.0; big_l * big_r * l * r * u];
            for (b, &t) in trace.tokens.iter().enumerate() {
                let ts = if dk.phys == 1 { 0 } else { t };
                let db = &d_cur[b * big_l * l * big_r * r * u..(b + 1) * big_l * l * big_r * r * u];
                // (L, l, R, r, u) -> (L, R, l, r, u)
                for bl in 0..big_l {
                    for br in 0..big_r {
                        for sl in 0..l {
                            for sr in 0..r {
                                let dst = (((bl * big_r + br) * l + sl) * r + sr) * u;
                                let src = (((bl * l + sl) * big_r + br) * r + sr) * u;
                                m[dst..dst + u].copy_from_slice(&db[src..src + u]);
                            }
                        }
                    }
                }
                let s = &self.subcores[k].data()[ts * sw..(ts + 1) * sw];
                let e = &prev.data()[b * big_l * big_r * d..(b + 1) * big_l * big_r * d];
                let dp = &mut d_prev[b * big_l * big_r * d..(b + 1) * big_l * big_r * d];
                let cols = l * r * u;
                // dE = M S^T ; dS += E^T M
                for row in 0..big_l * big_r {
                    let mrow = &m[row * cols..(row + 1) * cols];
                    for dd in 0..d {
                        let srow = &s[dd * cols..(dd + 1) * cols];
                        dp[row * d + dd] += mrow.iter().zip(srow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                let gs = &mut grads[k].data_mut()[ts * sw..(ts + 1) * sw];
                for row in 0..big_l * big_r {
                    let mrow = &m[row * cols..(row + 1) * cols];
                    for dd in 0..d {
                        let ev = e[row * d + dd];
                        if ev == 0.0 {
                            continue;
                        }
                        for (g, x) in gs[dd * cols..(dd + 1) * cols].iter_mut().zip(mrow) {
                            *g += ev * x;
                        }
                    }
                }
            }
            d_cur = d_prev;
        }
        let d0 = self.dims(0);
        let width0 = d0.left * d0.right * d0.up;
        for (b, &t) in trace.tokens.iter().enumerate() {
            for (g, x) in grads[0].data_mut()[t * width0..(t + 1) * width0]
                .iter_mut()
                .zip(&d_cur[b * width0..(b + 1) * width0])
            {
                *g += x;
            }
        }
    }

    /// Effective dense core, shape `(v, chi_h^h[, chi_h^h])`.
    pub fn contract_vertical(&self) -> Result<Tensor> {
        let tokens: Vec<usize> = (0..self.v).collect();
        let trace = self.vertical_forward(&tokens)?;
        let last = trace.stages.last().expect("at least one stage").clone();
        last.into_shape(&self.effective_shape())
    }
}

/// Spectrum bookkeeping for one SVD split during factorization.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitReport {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub singular_values: Vec<f64>,
    pub kept: usize,
    pub appended: Vec<f64>,
    pub truncation_error: f64,
}

#[derive(Debug, Clone)]
pub struct Factorization {
    pub subcores: Vec<Tensor>,
    pub splits: Vec<SplitReport>,
}

/// Split a dense core into `height` subcores by iterated SVD.
///
/// At each split the remaining tensor `(p, L, R)` is regrouped as
/// `(p * l0 * r0) x (L' * R')`, decomposed, and trimmed or extended to
/// `chi_v` singular values. Dropped values are the lowest ones. Extra values
/// are drawn uniformly from `[fill_lo, fill_hi)`; their directions are random
/// unit vectors orthogonal to the existing ones on whichever side still has
/// room, and zero on the side whose space is already spanned, so the product
/// of the factors is unchanged. The diagonal is absorbed into the upper
/// factor, which is split again until `height` subcores exist.
#[allow(clippy::too_many_arguments)]
pub fn factorize_core(
    dense_core: &Tensor,
    kind: PositionKind,
    chi_h: usize,
    height: usize,
    chi_v: usize,
    fill_lo: f64,
    fill_hi: f64,
    rng: &mut Rng,
) -> Result<Factorization> {
    if height == 0 || chi_h == 0 || chi_v == 0 {
        return Err(Error::arg("height, chi_h and chi_v must be positive"));
    }
    if fill_lo > fill_hi {
        return Err(Error::arg(format!("fill range [{fill_lo}, {fill_hi}) is empty")));
    }
    let le = if kind == PositionKind::OuterLeft { 1 } else { chi_h };
    let re = if kind == PositionKind::OuterRight { 1 } else { chi_h };
    let full_l = le.pow(height as u32);
    let full_r = re.pow(height as u32);
    let v = dense_core.shape()[0];
    if dense_core.len() != v * full_l * full_r {
        return Err(Error::shape(format!(
            "dense core {:?} does not have bond chi_h^h = {}",
            dense_core.shape(),
            chi_h.pow(height as u32)
        )));
    }

    let mut current = dense_core.reshape(&[v, full_l, full_r])?;
    let mut subcores = Vec::with_capacity(height);
    let mut splits = Vec::with_capacity(height.saturating_sub(1));
    for layer in 0..height - 1 {
        let p = current.shape()[0];
        let remaining = height - layer;
        let l_rest = le.pow(remaining as u32 - 1);
        let r_rest = re.pow(remaining as u32 - 1);
        let grouped = current
            .into_shape(&[p, le, l_rest, re, r_rest])?
            .transpose(&[0, 1, 3, 2, 4])?
            .into_shape(&[p * le * re, l_rest * r_rest])?;
        let (rows, cols) = (grouped.shape()[0], grouped.shape()[1]);
        let dec = svd(&grouped)?;
        let k = dec.s.len();

        let keep = chi_v.min(k);
        let discarded = &dec.s[keep..];
        let truncation_error = discarded.iter().map(|x| x * x).sum::<f64>().sqrt();

        let mut ucols: Vec<Vec<f64>> = (0..keep)
            .map(|j| (0..rows).map(|i| dec.u.data()[i * k + j]).collect())
            .collect();
        let mut vrows: Vec<Vec<f64>> = (0..keep)
            .map(|j| dec.vt.data()[j * cols..(j + 1) * cols].to_vec())
            .collect();
        let mut values: Vec<f64> = dec.s[..keep].to_vec();
        let mut appended = Vec::new();
        // the side whose space the thin SVD already spans gets zeros
        let u_side_full = rows <= k;
        for _ in keep..chi_v {
            let s = rng.uniform_scalar(fill_lo, fill_hi);
            appended.push(s);
            values.push(s);
            if u_side_full {
                ucols.push(vec![0.0; rows]);
                let hint: Vec<f64> = (0..cols).map(|_| rng.standard_normal()).collect();
                vrows.push(random_direction(&vrows, &hint));
            } else {
                let hint: Vec<f64> = (0..rows).map(|_| rng.standard_normal()).collect();
                ucols.push(random_direction(&ucols, &hint));
                vrows.push(vec![0.0; cols]);
            }
        }

        let mut bottom = vec![0.0; rows * chi_v];
        for (j, col) in ucols.iter().enumerate() {
            for i in 0..rows {
                bottom[i * chi_v + j] = col[i];
            }
        }
        let mut top = vec![0.0; chi_v * cols];
        for (j, row) in vrows.iter().enumerate() {
            for (x, y) in top[j * cols..(j + 1) * cols].iter_mut().zip(row) {
                *x = values[j] * y;
            }
        }
        let dims = SubcoreDims::new(kind, layer, height, false, v, chi_h, chi_v);
        subcores.push(Tensor::new(dims.shape(), bottom)?);
        current = Tensor::new(vec![chi_v, l_rest, r_rest], top)?;
        splits.push(SplitReport {
            layer,
            rows,
            cols,
            singular_values: dec.s.clone(),
            kept: keep,
            appended,
            truncation_error,
        });
    }
    let dims = SubcoreDims::new(kind, height - 1, height, false, v, chi_h, chi_v);
    subcores.push(current.into_shape(&dims.shape())?);
    Ok(Factorization { subcores, splits })
}

/// Random unit vector orthogonal to `basis` when room remains, otherwise
/// just the normalized hint.
fn random_direction(basis: &[Vec<f64>], hint: &[f64]) -> Vec<f64> {
    let dim = hint.len();
    if basis.len() < dim {
        let v = crate::tensor::svd_orthogonal_completion(basis, dim, hint);
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
    let norm = hint.iter().map(|x| x * x).sum::<f64>().sqrt();
    hint.iter().map(|x| x / norm).collect()
}

/// Best rank-`k` approximation and its Frobenius error
/// `sqrt(sum of discarded s^2)`.
pub fn truncate_rank(m: &Tensor, k: usize) -> Result<(Tensor, f64)> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("truncate_rank needs rank 2, got {:?}", m.shape())));
    }
    let full = m.shape()[0].min(m.shape()[1]);
    if k == 0 || k > full {
        return Err(Error::arg(format!("rank {k} not in 1..={full}")));
    }
    let dec = svd(m)?;
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(&[rows, cols]);
    for j in 0..k {
        let s = dec.s[j];
        for i in 0..rows {
            let us = dec.u.data()[i * full + j] * s;
            if us == 0.0 {
                continue;
            }
            let row = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (x, vv) in row.iter_mut().zip(&dec.vt.data()[j * cols..(j + 1) * cols]) {
                *x += us * vv;
            }
        }
    }
    let err = dec.s[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok((out, err))
}

/// How subcores are initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactoredInit {
    /// Factorize an identity-initialized dense model.
    Factorize { fill_lo: f64, fill_hi: f64 },
    /// Independent uniform draws for every subcore entry.
    Uniform { lo: f64, hi: f64 },
}

impl Default for FactoredInit {
    fn default() -> Self {
        FactoredInit::Factorize {
            fill_lo: 0.001,
            fill_hi: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactoredConfig {
    pub n: usize,
    pub v: usize,
    pub chi_h: usize,
    pub height: usize,
    pub chi_v: usize,
    pub skip: bool,
    pub sigma_inner: f64,
    pub sigma_outer: f64,
    pub init: FactoredInit,
}

impl FactoredConfig {
    /// Non-skip defaults: `h = 2`, `chi_h = 3`, `chi_v = 8`.
    pub fn factored(n: usize) -> Self {
        FactoredConfig {
            n,
            v: 3,
            chi_h: 3,
            height: 2,
            chi_v: 8,
            skip: false,
            sigma_inner: 0.01,
            sigma_outer: 0.01,
            init: FactoredInit::default(),
        }
    }

    /// Skip defaults: `h = 3`, `chi_h = 2`, `chi_v = 4`.
    pub fn skip(n: usize) -> Self {
        FactoredConfig {
            chi_h: 2,
            height: 3,
            chi_v: 4,
            skip: true,
            ..Self::factored(n)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactoredMps {
    n: usize,
    v: usize,
    chi_h: usize,
    chi_v: usize,
    height: usize,
    skip: bool,
    cores: Vec<FactoredCore>,
}

impl FactoredMps {
    pub fn new(cores: Vec<FactoredCore>) -> Result<Self> {
        let n = cores.len();
        if n < 2 {
            return Err(Error::arg(format!("need at least 2 cores, got {n}")));
        }
        let c0 = &cores[0];
        for (i, c) in cores.iter().enumerate() {
            let kind = PositionKind::of_site(i, n);
            if c.kind != kind
                || c.height != c0.height
                || c.skip != c0.skip
                || c.v != c0.v
                || c.chi_h != c0.chi_h
                || c.chi_v != c0.chi_v
            {
                return Err(Error::shape(format!("core {i} inconsistent with the model")));
            }
        }
        Ok(FactoredMps {
            n,
            v: c0.v,
            chi_h: c0.chi_h,
            chi_v: c0.chi_v,
            height: c0.height,
            skip: c0.skip,
            cores,
        })
    }

    /// Build subcores from `cfg`.
    ///
    /// With factorized initialization a dense model of bond `chi_h^h` is
    /// initialized as usual and every core is factorized. Skip cores reuse
    /// that factorization: the bottom subcore already carries the physical
    /// index, and each higher subcore is copied to every physical slice with
    /// independent noise of the core's sigma.
    pub fn init(cfg: &FactoredConfig, rng: &mut Rng) -> Result<Self> {
        let FactoredConfig {
            n,
            v,
            chi_h,
            height,
            chi_v,
            skip,
            sigma_inner,
            sigma_outer,
            init,
        } = *cfg;
        if n < 2 || height == 0 || chi_h == 0 || chi_v == 0 {
            return Err(Error::arg("invalid factored dimensions"));
        }
        let mut cores = Vec::with_capacity(n);
        match init {
            FactoredInit::Uniform { lo, hi } => {
                for site in 0..n {
                    let kind = PositionKind::of_site(site, n);
                    let subs = (0..height)
                        .map(|k| {
                            let d = SubcoreDims::new(kind, k, height, skip, v, chi_h, chi_v);
                            rng.uniform(&d.shape(), lo, hi)
                        })
                        .collect();
                    cores.push(FactoredCore::new(kind, skip, v, chi_h, chi_v, subs)?);
                }
            }
            FactoredInit::Factorize { fill_lo, fill_hi } => {
                let chi = chi_h.pow(height as u32);
                let dense = DenseMps::init(n, v, chi, sigma_inner, sigma_outer, rng)?;
                for (site, dcore) in dense.cores().iter().enumerate() {
                    let kind = PositionKind::of_site(site, n);
                    let f = factorize_core(dcore, kind, chi_h, height, chi_v, fill_lo, fill_hi, rng)?;
                    let subs = if skip {
                        let sigma = if kind == PositionKind::Inner { sigma_inner } else { sigma_outer };
                        f.subcores
                            .into_iter()
                            .enumerate()
                            .map(|(k, s)| if k == 0 { Ok(s) } else { lift_to_skip(&s, v, sigma, rng) })
                            .collect::<Result<Vec<_>>>()?
                    } else {
                        f.subcores
                    };
                    cores.push(FactoredCore::new(kind, skip, v, chi_h, chi_v, subs)?);
                }
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

    pub fn chi_h(&self) -> usize {
        self.chi_h
    }

    pub fn chi_v(&self) -> usize {
        self.chi_v
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn skip(&self) -> bool {
        self.skip
    }

    pub fn cores(&self) -> &[FactoredCore] {
        &self.cores
    }

    pub fn cores_mut(&mut self) -> &mut [FactoredCore] {
        &mut self.cores
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(FactoredCore::param_count).sum()
    }

    /// `[outer core, inner core, total]` parameter counts.
    pub fn core_sizes(&self) -> [usize; 3] {
        let outer = self.cores[0].param_count();
        let inner = if self.n > 2 { self.cores[1].param_count() } else { 0 };
        [outer, inner, self.param_count()]
    }

    pub fn sum_sq_params(&self) -> f64 {
        self.cores
            .iter()
            .flat_map(|c| &c.subcores)
            .flat_map(|t| t.data())
            .map(|x| x * x)
            .sum()
    }

    pub fn to_dense(&self) -> Result<DenseMps> {
        let cores = self
            .cores
            .iter()
            .map(FactoredCore::contract_vertical)
            .collect::<Result<Vec<_>>>()?;
        DenseMps::new(cores)
    }

    /// Amplitude computed slice by slice, contracting only the physical
    /// value each site actually sees.
    pub fn amplitude(&self, chain: &Chain) -> Result<LogAmplitude> {
        let codes: Vec<usize> = chain.codes().collect();
        if codes.len() != self.n {
            return Err(Error::arg(format!(
                "chain length {} != model length {}",
                codes.len(),
                self.n
            )));
        }
        let slices = self
            .cores
            .iter()
            .zip(&codes)
            .map(|(c, &t)| {
                let tr = c.vertical_forward(&[t])?;
                let mut s = tr.stages.last().expect("stage").clone();
                let shape = c.effective_shape();
                s = s.into_shape(&shape[1..])?;
                Ok(s)
            })
            .collect::<Result<Vec<Tensor>>>()?;
        // a one-token dense model made of the selected slices
        let single = DenseMps::new(
            slices
                .into_iter()
                .map(|s| {
                    let mut shape = vec![1];
                    shape.extend_from_slice(s.shape());
                    s.into_shape(&shape)
                })
                .collect::<Result<Vec<_>>>()?,
        )?;
        single.amplitude_codes(&vec![0; self.n])
    }

    pub fn log_prob(&self, chain: &Chain) -> Result<f64> {
        let dense = self.to_dense()?;
        let z = dense.log_norm_sq()?;
        Ok(log_prob_from(self.amplitude(chain)?, z))
    }

    /// Loss and gradients with respect to every subcore.
    ///
    /// The stack is contracted to effective dense cores, the dense loss
    /// machinery produces effective-core gradients, and those are pushed back
    /// through each vertical contraction.
    pub fn loss_and_grad(
        &self,
        batch: &[(&Chain, u8)],
        alpha: f64,
        norm_mode: NormMode,
    ) -> Result<(f64, Vec<Vec<Tensor>>)> {
        let tokens: Vec<usize> = (0..self.v).collect();
        let traces = self
            .cores
            .iter()
            .map(|c| c.vertical_forward(&tokens))
            .collect::<Result<Vec<_>>>()?;
        let dense = DenseMps::new(
            traces
                .iter()
                .zip(&self.cores)
                .map(|(tr, c)| tr.stages.last().expect("stage").clone().into_shape(&c.effective_shape()))
                .collect::<Result<Vec<_>>>()?,
        )?;
        let normalizer = match norm_mode {
            NormMode::Exact => Normalizer::Exact,
            NormMode::ConstantOne => Normalizer::External(0.0),
            NormMode::L2Params => Normalizer::External(self.sum_sq_params().ln()),
        };
        let terms = dense.loss_terms(batch, alpha, normalizer)?;
        let mut grads: Vec<Vec<Tensor>> = self
            .cores
            .iter()
            .map(|c| c.subcores.iter().map(|s| Tensor::zeros(s.shape())).collect())
            .collect();
        for ((core, trace), (g_eff, g_sub)) in self
            .cores
            .iter()
            .zip(&traces)
            .zip(terms.grads.iter().zip(grads.iter_mut()))
        {
            core.vertical_backward(trace, g_eff.data(), g_sub);
        }
        if norm_mode == NormMode::L2Params && terms.external_norm_coef != 0.0 {
            let scale = terms.external_norm_coef * 2.0 / self.sum_sq_params();
            for (g, c) in grads.iter_mut().zip(&self.cores) {
                add_scaled(g, &c.subcores, scale);
            }
        }
        Ok((terms.loss, grads))
    }
}

/// Copy a subcore onto every physical slice, adding independent noise.
fn lift_to_skip(sub: &Tensor, v: usize, sigma: f64, rng: &mut Rng) -> Result<Tensor> {
    let mut shape = vec![v];
    shape.extend_from_slice(sub.shape());
    let noise = rng.normal(&shape, 0.0, sigma);
    let mut data = noise.into_data();
    for slice in data.chunks_mut(sub.len()) {
        for (x, s) in slice.iter_mut().zip(sub.data()) {
            *x += s;
        }
    }
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_dense_core(kind: PositionKind, v: usize, chi: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        match kind {
            PositionKind::Inner => rng.normal(&[v, chi, chi], 0.0, 1.0),
            _ => rng.normal(&[v, chi], 0.0, 1.0),
        }
    }

    #[test]
    fn subcore_shapes() {
        let d = SubcoreDims::new(PositionKind::Inner, 0, 2, false, 3, 3, 8);
        assert_eq!(d.shape(), vec![3, 3, 3, 8]);
        let d = SubcoreDims::new(PositionKind::Inner, 1, 2, false, 3, 3, 8);
        assert_eq!(d.shape(), vec![8, 3, 3]);
        let d = SubcoreDims::new(PositionKind::OuterLeft, 0, 2, false, 3, 3, 8);
        assert_eq!(d.shape(), vec![3, 3, 8]);
        let d = SubcoreDims::new(PositionKind::OuterRight, 1, 3, true, 3, 2, 4);
        assert_eq!(d.shape(), vec![3, 4, 2, 4]);
    }

    #[test]
    fn height_one_is_the_dense_core() {
        let dense = random_dense_core(PositionKind::Inner, 3, 4, 1);
        let f = factorize_core(&dense, PositionKind::Inner, 4, 1, 7, 0.001, 0.01, &mut Rng::new(0)).unwrap();
        assert_eq!(f.subcores.len(), 1);
        let core = FactoredCore::new(PositionKind::Inner, false, 3, 4, 7, f.subcores).unwrap();
        assert_eq!(core.contract_vertical().unwrap(), dense);
    }

    #[test]
    fn effective_shape_h2_chih3() {
        let cfg = FactoredConfig::factored(5);
        let m = FactoredMps::init(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(m.cores()[2].contract_vertical().unwrap().shape(), &[3, 9, 9]);
        assert_eq!(m.cores()[0].contract_vertical().unwrap().shape(), &[3, 9]);
    }

    #[test]
    fn full_rank_round_trip() {
        for kind in [PositionKind::OuterLeft, PositionKind::Inner, PositionKind::OuterRight] {
            let dense = random_dense_core(kind, 3, 4, 2);
            // inner: 12 x 4 matrix, rank 4
            let f = factorize_core(&dense, kind, 2, 2, 12, 0.001, 0.01, &mut Rng::new(3)).unwrap();
            let core = FactoredCore::new(kind, false, 3, 2, 12, f.subcores).unwrap();
            let back = core.contract_vertical().unwrap();
            assert!(back.sub(&dense).unwrap().max_abs() < 1e-8, "{kind:?}");
        }
    }

    #[test]
    fn appended_values_in_fill_range() {
        let dense = random_dense_core(PositionKind::Inner, 3, 4, 4);
        let f = factorize_core(&dense, PositionKind::Inner, 2, 2, 9, 0.001, 0.01, &mut Rng::new(5)).unwrap();
        let split = &f.splits[0];
        assert_eq!(split.kept, 4);
        assert_eq!(split.appended.len(), 5);
        assert!(split.appended.iter().all(|s| (0.001..0.01).contains(s)));
    }

    #[test]
    fn truncation_error_matches_dropped_values() {
        let dense = random_dense_core(PositionKind::Inner, 3, 4, 6);
        let f = factorize_core(&dense, PositionKind::Inner, 2, 2, 1, 0.001, 0.01, &mut Rng::new(0)).unwrap();
        let core = FactoredCore::new(PositionKind::Inner, false, 3, 2, 1, f.subcores).unwrap();
        let err = core.contract_vertical().unwrap().sub(&dense).unwrap().frobenius_norm();
        assert!((err - f.splits[0].truncation_error).abs() < 1e-9);
    }

    #[test]
    fn truncate_rank_examples() {
        let m = Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 3.0]).unwrap();
        let (approx, err) = truncate_rank(&m, 1).unwrap();
        assert!((err - 3.0).abs() < 1e-14);
        assert!((approx.sub(&m).unwrap().frobenius_norm() - 3.0).abs() < 1e-12);
        let (full, err) = truncate_rank(&m, 2).unwrap();
        assert_eq!(err, 0.0);
        assert!(full.sub(&m).unwrap().max_abs() < 1e-14);
        assert!(truncate_rank(&m, 0).is_err());
        assert!(truncate_rank(&m, 3).is_err());

        let r = Rng::new(9).normal(&[6, 4], 0.0, 1.0);
        let (a, e) = truncate_rank(&r, 2).unwrap();
        assert!((a.sub(&r).unwrap().frobenius_norm() - e).abs() < 1e-10);
    }

    #[test]
    fn default_param_counts() {
        let m = FactoredMps::init(&FactoredConfig::factored(16), &mut Rng::new(0)).unwrap();
        assert_eq!(m.core_sizes(), [96, 288, 4224]);
        let s = FactoredMps::init(&FactoredConfig::skip(16), &mut Rng::new(0)).unwrap();
        // 3 layers, each with a physical copy
        assert_eq!(s.core_sizes(), [144, 288, 4320]);
    }

    #[test]
    fn fused_amplitude_matches_dense() {
        for cfg in [FactoredConfig::factored(5), FactoredConfig::skip(5)] {
            let cfg = FactoredConfig { sigma_inner: 0.3, sigma_outer: 0.3, ..cfg };
            let m = FactoredMps::init(&cfg, &mut Rng::new(1)).unwrap();
            let dense = m.to_dense().unwrap();
            for i in (0..243u64).step_by(13) {
                let c = Chain::from_index(i, 5);
                let a = m.amplitude(&c).unwrap();
                let b = dense.amplitude(&c).unwrap();
                assert_eq!(a.sign, b.sign);
                assert!((a.log_abs - b.log_abs).abs() < 1e-10);
                assert!((m.log_prob(&c).unwrap() - dense.log_prob(&c).unwrap()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_noise_full_rank_is_uniform() {
        // chi_h = 2, h = 2: dense chi = 4; chi_v = 12 covers every split
        let cfg = FactoredConfig {
            n: 4,
            v: 3,
            chi_h: 2,
            height: 2,
            chi_v: 12,
            skip: false,
            sigma_inner: 0.0,
            sigma_outer: 0.0,
            init: FactoredInit::default(),
        };
        let m = FactoredMps::init(&cfg, &mut Rng::new(0)).unwrap();
        let p = m.to_dense().unwrap().brute_force_distribution().unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 81.0).abs() < 1e-9));
    }

    #[test]
    fn uniform_negative_control_shapes() {
        let cfg = FactoredConfig {
            init: FactoredInit::Uniform { lo: 0.0, hi: 1.0 },
            ..FactoredConfig::skip(6)
        };
        let m = FactoredMps::init(&cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(m.param_count(), 2 * 144 + 4 * 288);
    }

    #[test]
    fn merge_cost_ceiling_at_height_four() {
        // bottom-up merges stay within v * chi_h^4 * chi_v^3 when chi_v >= chi_h^2
        for (chi_h, chi_v) in [(2usize, 4usize), (2, 8), (3, 9)] {
            let cfg = FactoredConfig {
                n: 3,
                v: 3,
                chi_h,
                height: 4,
                chi_v,
                skip: false,
                sigma_inner: 0.1,
                sigma_outer: 0.1,
                init: FactoredInit::Uniform { lo: -1.0, hi: 1.0 },
            };
            let m = FactoredMps::init(&cfg, &mut Rng::new(0)).unwrap();
            let tr = m.cores()[1].vertical_forward(&[0, 1, 2]).unwrap();
            let worst = *tr.merge_mult_adds.iter().max().unwrap();
            let ceiling = (3 * chi_h.pow(4) * chi_v.pow(3)) as u64;
            assert!(worst <= ceiling, "chi_h={chi_h} chi_v={chi_v}: {worst} > {ceiling}");
        }
    }
}

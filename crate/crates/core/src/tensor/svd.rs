use super::Tensor;
use crate::error::{Error, Result};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// A pair of columns is treated as orthogonal once
/// `|a_p . a_q| <= PAIR_TOL * |a_p| |a_q|`.
const PAIR_TOL: f64 = 1e-15;

/// Thin SVD `m = u * diag(s) * vt` with `k = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Tensor {
        let k = self.s.len();
        let mut us = self.u.clone();
        let cols = us.shape()[1];
        for row in us.data_mut().chunks_mut(cols) {
            for (x, s) in row.iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        debug_assert_eq!(cols, k);
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular values come back non-increasing. Each left singular vector is
/// sign-fixed so its largest-magnitude entry is non-negative, with the
/// matching row of `vt` flipped alongside.
pub fn svd(m: &Tensor) -> Result<SvdResult> {
    if m.rank() != 2 {
        return Err(Error::shape(format!("svd needs rank 2, got {:?}", m.shape())));
    }
    if !m.all_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    let (u, s, vt) = if rows >= cols {
        jacobi_tall(m)?
    } else {
        let (u, s, vt) = jacobi_tall(&m.t()?)?;
        (vt.t()?, s, u.t()?)
    };
    let mut out = SvdResult { u, s, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn jacobi_tall(m: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    // column-major working copies
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.data()[i * cols + j]).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (ap, aq) = (&a[p], &a[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in ap.iter().zip(aq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= PAIR_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let s_max = s.first().copied().unwrap_or(0.0);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for (rank_pos, &j) in order.iter().enumerate() {
        let sj = s[rank_pos];
        let col = if sj > 0.0 && sj > s_max * 1e-12 {
            a[j].iter().map(|x| x / sj).collect()
        } else {
            // numerically null direction: complete the basis
            orthogonal_completion(&ucols, rows, &a[j])
        };
        ucols.push(col);
    }

    let mut u = Tensor::zeros(&[rows, cols]);
    for (j, col) in ucols.iter().enumerate() {
        for i in 0..rows {
            u.data_mut()[i * cols + j] = col[i];
        }
    }
    let mut vt = Tensor::zeros(&[cols, cols]);
    for (r, &j) in order.iter().enumerate() {
        vt.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&v[j]);
    }
    Ok((u, s, vt))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Unit vector orthogonal to every column in `basis`, seeded from `hint`
/// and falling back to standard basis vectors.
pub(crate) fn orthogonal_completion(basis: &[Vec<f64>], dim: usize, hint: &[f64]) -> Vec<f64> {
    let candidates = std::iter::once(hint.to_vec()).chain((0..dim).map(|e| {
        let mut v = vec![0.0; dim];
        v[e] = 1.0;
        v
    }));
    for mut cand in candidates {
        let start = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if start == 0.0 {
            continue;
        }
        // two passes of Gram-Schmidt
        for _ in 0..2 {
            for b in basis {
                let d: f64 = b.iter().zip(&cand).map(|(x, y)| x * y).sum();
                for (c, x) in cand.iter_mut().zip(b) {
                    *c -= d * x;
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 * start {
            return cand.into_iter().map(|x| x / norm).collect();
        }
    }
    vec![0.0; dim]
}

fn fix_signs(r: &mut SvdResult) {
    let (rows, k) = (r.u.shape()[0], r.u.shape()[1]);
    let vcols = r.vt.shape()[1];
    for j in 0..k {
        let mut best = 0.0f64;
        let mut best_val = 0.0;
        for i in 0..rows {
            let x = r.u.data()[i * k + j];
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..rows {
                r.u.data_mut()[i * k + j] *= -1.0;
            }
            for x in &mut r.vt.data_mut()[j * vcols..(j + 1) * vcols] {
                *x *= -1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn gram_defect(q: &Tensor, rows_orthonormal: bool) -> f64 {
        let g = if rows_orthonormal {
            q.matmul(&q.t().unwrap()).unwrap()
        } else {
            q.t().unwrap().matmul(q).unwrap()
        };
        g.sub(&Tensor::eye(g.shape()[0])).unwrap().max_abs()
    }

    fn check_invariants(m: &Tensor, r: &SvdResult) {
        let k = m.shape()[0].min(m.shape()[1]);
        assert_eq!(r.s.len(), k);
        assert_eq!(r.u.shape(), &[m.shape()[0], k]);
        assert_eq!(r.vt.shape(), &[k, m.shape()[1]]);
        assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.s.iter().all(|&x| x >= 0.0));
        assert!(gram_defect(&r.u, false) < 1e-10, "u defect {}", gram_defect(&r.u, false));
        assert!(gram_defect(&r.vt, true) < 1e-10);
        let err = r.reconstruct().sub(m).unwrap().frobenius_norm();
        assert!(err <= 1e-9 * m.frobenius_norm().max(1e-300), "recon err {err}");
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&Tensor::eye(3)).unwrap();
        for s in &r.s {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let u = [0.6, 0.8];
        let v = [1.0 / 2f64.sqrt(), -1.0 / 2f64.sqrt()];
        let m = Tensor::from_fn(&[2, 2], |ix| u[ix[0]] * v[ix[1]]);
        let r = svd(&m).unwrap();
        assert!((r.s[0] - 1.0).abs() < 1e-14);
        assert!(r.s[1].abs() < 1e-14);
        check_invariants(&m, &r);
    }

    #[test]
    fn random_5x3_reconstructs() {
        let m = Rng::new(11).normal(&[5, 3], 0.0, 1.0);
        check_invariants(&m, &svd(&m).unwrap());
        let w = m.t().unwrap();
        check_invariants(&w, &svd(&w).unwrap());
    }

    #[test]
    fn zero_matrix() {
        let m = Tensor::zeros(&[4, 3]);
        let r = svd(&m).unwrap();
        assert!(r.s.iter().all(|&s| s == 0.0));
        assert!(gram_defect(&r.u, false) < 1e-12);
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let m = Rng::new(5).normal(&[6, 4], 0.0, 1.0);
        let a = svd(&m).unwrap();
        let b = svd(&m.scale(1.0)).unwrap();
        assert_eq!(a.u, b.u);
        for j in 0..4 {
            let col: Vec<f64> = (0..6).map(|i| a.u.get(&[i, j])).collect();
            let big = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let m = Tensor::new(vec![1, 2], vec![f64::NAN, 1.0]).unwrap();
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::tensor::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn reconstruction_and_orthonormality(rows in 1usize..=64, cols in 1usize..=64, seed in any::<u64>()) {
                let m = Rng::new(seed).normal(&[rows, cols], 0.0, 1.0);
                let r = svd(&m).unwrap();
                check_invariants(&m, &r);
            }

            #[test]
            fn rank_deficient_inputs(rows in 2usize..=24, cols in 2usize..=24, rank in 1usize..=3, seed in any::<u64>()) {
                let mut rng = Rng::new(seed);
                let rank = rank.min(rows).min(cols);
                let a = rng.normal(&[rows, rank], 0.0, 1.0);
                let b = rng.normal(&[rank, cols], 0.0, 1.0);
                let m = a.matmul(&b).unwrap();
                let r = svd(&m).unwrap();
                check_invariants(&m, &r);
            }
        }
    }
}

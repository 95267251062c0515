//! One-sided (Hestenes) Jacobi SVD.
//!
//! Columns of a working copy of `A` are rotated pairwise until every pair is
//! orthogonal to within `ORTHO_TOL` (relative), or `MAX_SWEEPS` sweeps have
//! run. The column norms are then the singular values, the normalized columns
//! the left singular vectors, and the accumulated rotations the right ones.
//! Wide inputs are transposed first and the factors swapped back.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

use super::dot;

const ORTHO_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 60;
/// Singular values below this fraction of the largest are clamped to zero.
const CLAMP_REL: f64 = 1e-12;

/// `a = u * diag(s) * v^T` with `u: m x r`, `v: n x r`, `r = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl Svd {
    pub fn rank(&self) -> usize {
        self.s.iter().filter(|&&x| x > 0.0).count()
    }

    pub fn reconstruct(&self) -> Tensor {
        let (m, r) = (self.u.dim(0), self.u.dim(1));
        let n = self.v.dim(0);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.get2(i, k) * self.s[k] * self.v.get2(j, k);
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_parts(vec![m, n], out)
    }
}

fn validate(a: &Tensor) -> Result<(usize, usize)> {
    let (m, n) = match a.shape() {
        &[m, n] => (m, n),
        s => return Err(shape_err!("svd expects a 2-D matrix, got shape {s:?}")),
    };
    if m == 0 || n == 0 {
        return Err(shape_err!("svd needs min(m, n) >= 1, got {m}x{n}"));
    }
    if a.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("svd input has non-finite entries".into()));
    }
    Ok((m, n))
}

pub fn svd(a: &Tensor) -> Result<Svd> {
    let (m, n) = validate(a)?;
    if n > m {
        let t = a.transpose()?;
        let Svd { u, s, v } = tall_svd(t.data(), n, m, true);
        return Ok(Svd { u: v, s, v: u });
    }
    Ok(tall_svd(a.data(), m, n, true))
}

/// Singular values only (skips building `u` and `v`).
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (m, n) = validate(a)?;
    if n > m {
        let t = a.transpose()?;
        return Ok(tall_svd(t.data(), n, m, false).s);
    }
    Ok(tall_svd(a.data(), m, n, false).s)
}

/// Sum of singular values.
pub fn nuclear_norm(a: &Tensor) -> Result<f64> {
    Ok(singular_values(a)?.iter().sum())
}

pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.frobenius_norm()
}

/// `data` is row-major `m x n` with `m >= n`.
fn tall_svd(data: &[f64], m: usize, n: usize, vectors: bool) -> Svd {
    // cols[j] is column j of A, contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| data[i * n + j]).collect())
        .collect();
    // vcols[j] is column j of V.
    let mut vcols: Vec<Vec<f64>> = if vectors {
        (0..n)
            .map(|j| {
                let mut c = vec![0.0; n];
                c[j] = 1.0;
                c
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                norms[p] = dot(&cols[p], &cols[p]);
                norms[q] = dot(&cols[q], &cols[q]);
                if vectors {
                    rotate(&mut vcols, p, q, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigma: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let smax = sigma[order[0]];
    for s in sigma.iter_mut() {
        if *s < CLAMP_REL * smax {
            *s = 0.0;
        }
    }
    let s: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();

    if !vectors {
        return Svd {
            u: Tensor::zeros(&[m, 0]),
            s,
            v: Tensor::zeros(&[n, 0]),
        };
    }

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        if s[k] > 0.0 {
            let inv = 1.0 / sigma[j];
            ucols.push(cols[j].iter().map(|x| x * inv).collect());
        } else {
            ucols.push(vec![0.0; m]);
            missing.push(k);
        }
    }
    complete_basis(&mut ucols, &missing, m);

    let mut u = vec![0.0; m * n];
    let mut v = vec![0.0; n * n];
    for (k, &j) in order.iter().enumerate() {
        for i in 0..m {
            u[i * n + k] = ucols[k][i];
        }
        for i in 0..n {
            v[i * n + k] = vcols[j][i];
        }
    }
    Svd {
        u: Tensor::from_parts(vec![m, n], u),
        s,
        v: Tensor::from_parts(vec![n, n], v),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `missing` columns with unit vectors orthogonal to all others
/// (Gram-Schmidt over the canonical basis, applied twice).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &k in missing {
        loop {
            assert!(candidate < m, "basis completion ran out of candidates");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (idx, c) in cols.iter().enumerate() {
                    if idx == k {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                cols[k] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::oracle::sym_eigenvalues;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(m: usize, n: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn gram(a: &Tensor) -> Tensor {
        a.transpose().unwrap().matmul(a).unwrap()
    }

    fn max_ortho_err(q: &Tensor) -> f64 {
        let g = gram(q);
        let r = g.dim(0);
        let mut err: f64 = 0.0;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((g.get2(i, j) - target).abs());
            }
        }
        err
    }

    fn check_factorization(a: &Tensor) {
        let d = svd(a).unwrap();
        let r = a.dim(0).min(a.dim(1));
        assert_eq!(d.s.len(), r);
        assert_eq!(d.u.shape(), &[a.dim(0), r]);
        assert_eq!(d.v.shape(), &[a.dim(1), r]);
        let resid = d.reconstruct().sub(a).unwrap().frobenius_norm();
        assert!(resid <= 1e-8 * a.frobenius_norm().max(1.0), "residual {resid}");
        assert!(max_ortho_err(&d.u) <= 1e-10);
        assert!(max_ortho_err(&d.v) <= 1e-10);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn identity_singular_values() {
        let d = svd(&Tensor::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_matrix() {
        let a = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let d = svd(&a).unwrap();
        assert_eq!(d.s, vec![4.0, 3.0]);
        assert_eq!(nuclear_norm(&a).unwrap(), 7.0);
    }

    #[test]
    fn matches_eigen_oracle_8x5() {
        let a = random(8, 5, &mut Rng::new(2024));
        let s = svd(&a).unwrap().s;
        let mut eig = sym_eigenvalues(&gram(&a));
        eig.sort_by(|x, y| y.total_cmp(x));
        for (si, li) in s.iter().zip(eig) {
            let oracle = li.max(0.0).sqrt();
            assert!((si - oracle).abs() <= 1e-8 * oracle, "{si} vs {oracle}");
        }
    }

    #[test]
    fn zero_and_identity_nuclear_norms() {
        assert_eq!(nuclear_norm(&Tensor::zeros(&[4, 4])).unwrap(), 0.0);
        for n in 1..6 {
            let v = nuclear_norm(&Tensor::identity(n)).unwrap();
            assert!((v - n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = Rng::new(5);
        let u: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let v: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let data: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
        let a = Tensor::new(vec![6, 4], data).unwrap();
        let closed = dot(&u, &u).sqrt() * dot(&v, &v).sqrt();
        let oracle: f64 = sym_eigenvalues(&gram(&a))
            .into_iter()
            .map(|l| l.max(0.0).sqrt())
            .fold(0.0, f64::max);
        let nn = nuclear_norm(&a).unwrap();
        assert!((nn - closed).abs() <= 1e-10 * closed);
        assert!((nn - oracle).abs() <= 1e-8 * closed);
        assert_eq!(svd(&a).unwrap().rank(), 1);
    }

    #[test]
    fn zero_matrix_has_orthonormal_factors() {
        check_factorization(&Tensor::zeros(&[5, 3]));
        check_factorization(&Tensor::zeros(&[2, 7]));
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let mut rng = Rng::new(9);
        let b = random(10, 2, &mut rng);
        let c = random(2, 6, &mut rng);
        check_factorization(&b.matmul(&c).unwrap());
    }

    #[test]
    fn errors() {
        assert!(matches!(svd(&Tensor::zeros(&[2, 2, 2])), Err(Error::Shape(_))));
        assert!(matches!(svd(&Tensor::zeros(&[0, 3])), Err(Error::Shape(_))));
        let bad = Tensor::from_parts(vec![1, 2], vec![1.0, f64::INFINITY]);
        assert!(matches!(svd(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn repeatable_bit_for_bit() {
        let a = random(17, 9, &mut Rng::new(77));
        assert_eq!(svd(&a).unwrap(), svd(&a).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn factorization_properties(m in 1usize..=64, n in 1usize..=64, seed in any::<u64>()) {
            check_factorization(&random(m, n, &mut Rng::new(seed)));
        }

        #[test]
        fn nuclear_norm_is_absolutely_homogeneous(m in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
            let a = random(m, n, &mut Rng::new(seed));
            let base = nuclear_norm(&a).unwrap();
            for c in [0.5, 2.0, 10.0, -2.0] {
                let scaled = nuclear_norm(&a.scale(c).unwrap()).unwrap();
                prop_assert!((scaled - c.abs() * base).abs() <= 1e-10 * c.abs() * base);
            }
        }

        #[test]
        fn nuclear_norm_triangle_and_frobenius_bounds(m in 1usize..20, n in 1usize..20, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = random(m, n, &mut rng);
            let b = random(m, n, &mut rng);
            let na = nuclear_norm(&a).unwrap();
            let nb = nuclear_norm(&b).unwrap();
            let nab = nuclear_norm(&a.add(&b).unwrap()).unwrap();
            prop_assert!(nab <= na + nb + 1e-10);
            prop_assert!(na >= a.frobenius_norm() - 1e-10);
        }
    }
}

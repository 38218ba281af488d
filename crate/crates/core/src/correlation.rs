//! Budget-constrained correlation matrices.
//!
//! A correlation matrix is produced from an unconstrained factor `L` as
//!
//! ```text
//! P = I + p_max * (J - I) ∘ tanh(L Lᵀ)
//! ```
//!
//! which is symmetric with a unit diagonal and off-diagonal entries strictly inside
//! `(-p_max, p_max)`. Zero patterns come from the clique structure of `L`: entry
//! `L[i][k]` is free only when feature `i` belongs to clique `k`, so features that
//! share no clique get `P[i][j] = 0` exactly. Positive semi-definiteness is not
//! guaranteed; see [`psd_check`] and [`star_matrix`].

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationParams {
    /// `m x c` factor. Entries outside `mask` are kept at exactly zero.
    pub factor: DMatrix<f64>,
    pub p_max: f64,
    pub mask: DMatrix<bool>,
}

impl CorrelationParams {
    fn checked(factor: DMatrix<f64>, p_max: f64, mask: DMatrix<bool>) -> Result<Self> {
        if !(0.0..1.0).contains(&p_max) {
            return Err(Error::InvalidCorrelation(format!(
                "budget {p_max} outside [0, 1)"
            )));
        }
        if factor.shape() != mask.shape() {
            return Err(Error::InvalidCorrelation("factor and mask shapes differ".into()));
        }
        let mut factor = factor;
        for (v, &keep) in factor.iter_mut().zip(mask.iter()) {
            if !keep {
                *v = 0.0;
            }
        }
        Ok(CorrelationParams { factor, p_max, mask })
    }

    /// Dense parameterization: lower-triangular `L` with ones on the diagonal and
    /// off-diagonals drawn uniformly from `[-0.01, 0.01]`.
    pub fn dense(m: usize, p_max: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = DMatrix::from_fn(m, m, |r, c| c <= r);
        let factor = DMatrix::from_fn(m, m, |r, c| match r.cmp(&c) {
            std::cmp::Ordering::Equal => 1.0,
            std::cmp::Ordering::Greater => rng.random_range(-0.01..=0.01),
            std::cmp::Ordering::Less => 0.0,
        });
        Self::checked(factor, p_max, mask)
    }

    /// Clique parameterization: one column per clique, `L[i][k]` free iff feature `i`
    /// is in clique `k`. Free entries start at `0.5` plus uniform noise in `[-0.01, 0.01]`.
    pub fn cliques(m: usize, cliques: &[Vec<usize>], p_max: f64, seed: u64) -> Result<Self> {
        let c = cliques.len();
        let mut mask = DMatrix::from_element(m, c, false);
        for (k, clique) in cliques.iter().enumerate() {
            for &i in clique {
                if i >= m {
                    return Err(Error::InvalidCorrelation(format!(
                        "clique member {i} out of range for {m} features"
                    )));
                }
                mask[(i, k)] = true;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factor = DMatrix::from_fn(m, c, |r, k| {
            if mask[(r, k)] {
                0.5 + rng.random_range(-0.01..=0.01)
            } else {
                0.0
            }
        });
        Self::checked(factor, p_max, mask)
    }

    pub fn with_factor(&self, factor: DMatrix<f64>) -> Result<Self> {
        Self::checked(factor, self.p_max, self.mask.clone())
    }

    pub fn with_budget(&self, p_max: f64) -> Result<Self> {
        Self::checked(self.factor.clone(), p_max, self.mask.clone())
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Pairs `(j, k)`, `j < k`, allowed a non-zero correlation.
    pub fn allowed_pairs(&self) -> Vec<(usize, usize)> {
        let m = self.dim();
        let mut out = Vec::new();
        for j in 0..m {
            for k in j + 1..m {
                if (0..self.mask.ncols()).any(|c| self.mask[(j, c)] && self.mask[(k, c)]) {
                    out.push((j, k));
                }
            }
        }
        out
    }

    /// Free entries of the factor in column-major order.
    pub fn free_params(&self) -> Vec<f64> {
        self.factor
            .iter()
            .zip(self.mask.iter())
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn num_free(&self) -> usize {
        self.mask.iter().filter(|&&k| k).count()
    }

    pub fn set_free_params(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for (v, &k) in self.factor.iter_mut().zip(self.mask.iter()) {
            if k {
                *v = *it.next().expect("one value per free entry");
            }
        }
    }

    /// Gather the free entries of a full-shape factor gradient.
    pub fn free_entries(&self, full: &DMatrix<f64>) -> Vec<f64> {
        full.iter()
            .zip(self.mask.iter())
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v)
            .collect()
    }
}

/// `I + p_max (J - I) ∘ tanh(L Lᵀ)`.
pub fn materialize(params: &CorrelationParams) -> DMatrix<f64> {
    let gram = &params.factor * params.factor.transpose();
    let m = gram.nrows();
    DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            1.0
        } else {
            params.p_max * gram[(r, c)].tanh()
        }
    })
}

/// Pulls a gradient with respect to the entries of `P` back to the factor.
///
/// `grad_p[(j, k)]` is the derivative of a scalar with respect to entry `(j, k)` of
/// `P` treated as independent of `(k, j)`. The result has the factor's shape and is
/// zero outside the mask.
pub fn pullback(params: &CorrelationParams, grad_p: &DMatrix<f64>) -> DMatrix<f64> {
    let gram = &params.factor * params.factor.transpose();
    let m = gram.nrows();
    let y = DMatrix::from_fn(m, m, |r, c| {
        if r == c {
            0.0
        } else {
            let t = gram[(r, c)].tanh();
            grad_p[(r, c)] * params.p_max * (1.0 - t * t)
        }
    });
    let mut out = (&y + y.transpose()) * &params.factor;
    for (v, &k) in out.iter_mut().zip(params.mask.iter()) {
        if !k {
            *v = 0.0;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub is_psd: bool,
    pub min_eig: f64,
}

pub const PSD_TOLERANCE: f64 = 1e-10;

pub fn psd_check(p: &DMatrix<f64>) -> Result<PsdReport> {
    if !p.is_square() {
        return Err(Error::NonSymmetricInput(f64::INFINITY));
    }
    let asym = (p - p.transpose()).amax();
    let scale = p.amax().max(1.0);
    if asym > 1e-12 * scale {
        return Err(Error::NonSymmetricInput(asym));
    }
    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(p.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(|a, b| a.total_cmp(b));
    let min_eig = eigenvalues.first().copied().unwrap_or(0.0);
    Ok(PsdReport {
        eigenvalues,
        is_psd: min_eig >= -PSD_TOLERANCE,
        min_eig,
    })
}

/// Unit diagonal, `p` in the first row and column, zeros elsewhere. Its eigenvalues are
/// `1` and `1 ± sqrt(n - 1) p`, so it stops being PSD once `p > 1 / sqrt(n - 1)`.
pub fn star_matrix(n: usize, p: f64) -> DMatrix<f64> {
    assert!(n >= 2, "star matrix needs at least two nodes");
    DMatrix::from_fn(n, n, |r, c| {
        if r == c {
            1.0
        } else if r == 0 || c == 0 {
            p
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_factor_is_identity() {
        let mut params = CorrelationParams::dense(3, 0.7, 1).unwrap();
        params.factor.fill(0.0);
        assert_eq!(materialize(&params), DMatrix::identity(3, 3));
    }

    #[test]
    fn saturation_stays_below_budget() {
        let mut params = CorrelationParams::dense(2, 0.5, 1).unwrap();
        params.factor = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 40.0, 1.0]);
        let p = materialize(&params);
        assert!(p[(0, 1)] <= 0.5 && p[(0, 1)] > 0.5 - 1e-12);
        assert_eq!(p[(0, 1)], p[(1, 0)]);
    }

    #[test]
    fn clique_star_pattern_zeroes_missing_pair() {
        // Pairs (0,1) and (0,2) allowed, (1,2) not.
        let params = CorrelationParams::cliques(3, &[vec![0, 1], vec![0, 2]], 0.9, 4).unwrap();
        let p = materialize(&params);
        assert_eq!(p[(1, 2)], 0.0);
        assert_eq!(p[(2, 1)], 0.0);
        assert!(p[(0, 1)].abs() > 0.0);
        assert_eq!(params.allowed_pairs(), vec![(0, 1), (0, 2)]);
    }

    #[test]
    fn rejects_bad_budget() {
        assert!(CorrelationParams::dense(2, 1.0, 0).is_err());
        assert!(CorrelationParams::dense(2, -0.1, 0).is_err());
        assert!(CorrelationParams::dense(2, 0.0, 0).is_ok());
    }

    #[test]
    fn star_three_nodes() {
        let report = psd_check(&star_matrix(3, 0.8)).unwrap();
        let expected = 1.0 - 2f64.sqrt() * 0.8;
        assert!((report.min_eig - expected).abs() < 1e-12);
        assert!((report.min_eig + 0.131_370_849_898_476_1).abs() < 1e-12);
        assert!(!report.is_psd);
        assert!(psd_check(&star_matrix(3, 0.5)).unwrap().is_psd);
        assert!(!psd_check(&star_matrix(5, 0.6)).unwrap().is_psd);
        assert_eq!(star_matrix(3, 0.0), DMatrix::identity(3, 3));
    }

    #[test]
    fn identity_eigenvalues() {
        let report = psd_check(&DMatrix::identity(4, 4)).unwrap();
        assert!(report.eigenvalues.iter().all(|&e| (e - 1.0).abs() < 1e-14));
    }

    #[test]
    fn non_symmetric_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.3, 1.0]);
        assert!(matches!(psd_check(&m), Err(Error::NonSymmetricInput(_))));
    }

    proptest! {
        #[test]
        fn star_spectrum(n in 2usize..9, p in -0.99f64..0.99) {
            let report = psd_check(&star_matrix(n, p)).unwrap();
            let r = ((n - 1) as f64).sqrt() * p.abs();
            let has = |v: f64| report.eigenvalues.iter().any(|e| (e - v).abs() < 1e-10);
            prop_assert!(has(1.0 - r));
            prop_assert!(has(1.0 + r));
            if n > 2 {
                prop_assert!(has(1.0));
            }
        }

        #[test]
        fn materialize_respects_budget(
            entries in proptest::collection::vec(-3.0f64..3.0, 16),
            p_max in 0.0f64..0.999,
        ) {
            let mut params = CorrelationParams::dense(4, p_max, 0).unwrap();
            let free = params.num_free();
            params.set_free_params(&entries[..free]);
            let p = materialize(&params);
            for r in 0..4 {
                prop_assert_eq!(p[(r, r)], 1.0);
                for c in 0..4 {
                    prop_assert!((p[(r, c)] - p[(c, r)]).abs() <= 1e-14);
                    if r != c {
                        // Equality is only reachable through floating-point saturation of tanh.
                        prop_assert!(p[(r, c)].abs() <= p_max);
                    }
                }
            }
        }

        #[test]
        fn pullback_matches_finite_differences(
            entries in proptest::collection::vec(-1.5f64..1.5, 6),
            weights in proptest::collection::vec(-1.0f64..1.0, 9),
            p_max in 0.05f64..0.95,
        ) {
            let mut params = CorrelationParams::dense(3, p_max, 0).unwrap();
            params.set_free_params(&entries);
            let weight = DMatrix::from_column_slice(3, 3, &weights);
            let objective = |q: &CorrelationParams| materialize(q).component_mul(&weight).sum();
            let grad = params.free_entries(&pullback(&params, &weight));
            let h = 1e-6;
            for (i, g) in grad.iter().enumerate() {
                let mut up = params.clone();
                let mut dn = params.clone();
                let mut v = entries.clone();
                v[i] += h;
                up.set_free_params(&v);
                v[i] -= 2.0 * h;
                dn.set_free_params(&v);
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                let scale = g.abs().max(fd.abs()).max(1e-3);
                prop_assert!((fd - g).abs() / scale < 1e-5, "i={} fd={} g={}", i, fd, g);
            }
        }
    }
}

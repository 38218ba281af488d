//! Polynomial embeddings of parent values and the per-sample block design matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub include_bias: bool,
    pub inputs: usize,
}

/// All monomials of `inputs` variables up to total degree `degree`, in graded
/// lexicographic order (bias first when enabled).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolyBasis {
    spec: BasisSpec,
    exponents: Vec<Vec<u32>>,
}

fn push_exponents(k: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == k {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=total).rev() {
        prefix.push(e);
        push_exponents(k, total - e, prefix, out);
        prefix.pop();
    }
}

/// `C(n, k)` for the small arguments used by basis sizes.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

impl PolyBasis {
    pub fn new(spec: BasisSpec) -> Result<Self> {
        if spec.degree == 0 {
            return Err(Error::InvalidBasis("degree must be at least 1".into()));
        }
        let mut exponents = Vec::new();
        let first = if spec.include_bias { 0 } else { 1 };
        if spec.inputs == 0 {
            if spec.include_bias {
                exponents.push(Vec::new());
            }
        } else {
            for total in first..=spec.degree as u32 {
                push_exponents(spec.inputs, total, &mut Vec::new(), &mut exponents);
            }
        }
        Ok(PolyBasis { spec, exponents })
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.spec.inputs {
            return Err(Error::DimensionMismatch {
                expected: self.spec.inputs,
                got: values.len(),
            });
        }
        Ok(())
    }

    pub fn embed(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.check(values)?;
        let mut out = vec![0.0; self.dim()];
        self.embed_into(values, &mut out);
        Ok(out)
    }

    /// Unchecked variant used on hot paths; `values` must have `inputs` entries.
    pub fn embed_into(&self, values: &[f64], out: &mut [f64]) {
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            *slot = exps
                .iter()
                .zip(values)
                .fold(1.0, |acc, (&e, &v)| acc * v.powi(e as i32));
        }
    }

    /// Embedding together with its Jacobian, stored row-major as `jac[r * inputs + p]`.
    pub fn embed_with_jacobian(&self, values: &[f64], out: &mut [f64], jac: &mut [f64]) {
        let k = self.spec.inputs;
        for (r, exps) in self.exponents.iter().enumerate() {
            let mut value = 1.0;
            for (&e, &v) in exps.iter().zip(values) {
                value *= v.powi(e as i32);
            }
            out[r] = value;
            for p in 0..k {
                let e = exps[p];
                jac[r * k + p] = if e == 0 {
                    0.0
                } else {
                    let mut d = e as f64 * values[p].powi(e as i32 - 1);
                    for (q, (&eq, &vq)) in exps.iter().zip(values).enumerate() {
                        if q != p {
                            d *= vq.powi(eq as i32);
                        }
                    }
                    d
                };
            }
        }
    }
}

/// Embeddings for every structural equation of a graph, with the column layout of the
/// stacked weight vector `w = (w_1, ..., w_m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralBasis {
    bases: Vec<PolyBasis>,
    offsets: Vec<usize>,
    parents: Vec<Vec<usize>>,
}

impl StructuralBasis {
    /// One degree per feature, in graph feature order.
    pub fn new(graph: &CausalGraph, degrees: &[usize], include_bias: bool) -> Result<Self> {
        let m = graph.num_features();
        if degrees.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: degrees.len(),
            });
        }
        let mut bases = Vec::with_capacity(m);
        let mut offsets = Vec::with_capacity(m + 1);
        let mut parents = Vec::with_capacity(m);
        offsets.push(0);
        for (j, &degree) in degrees.iter().enumerate() {
            let pa = graph.feature_parents(j).to_vec();
            let basis = PolyBasis::new(BasisSpec {
                degree,
                include_bias,
                inputs: pa.len(),
            })?;
            offsets.push(offsets[j] + basis.dim());
            bases.push(basis);
            parents.push(pa);
        }
        Ok(StructuralBasis {
            bases,
            offsets,
            parents,
        })
    }

    pub fn uniform(graph: &CausalGraph, degree: usize) -> Result<Self> {
        Self::new(graph, &vec![degree; graph.num_features()], true)
    }

    pub fn num_features(&self) -> usize {
        self.bases.len()
    }

    /// Total number of weights `d`.
    pub fn dim(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn block(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn node_basis(&self, j: usize) -> &PolyBasis {
        &self.bases[j]
    }

    pub fn node_parents(&self, j: usize) -> &[usize] {
        &self.parents[j]
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.bases.iter().map(|b| b.spec().degree).collect()
    }

    /// Values of the parents of feature `j`; node 0 is `a`, node `k` is `x[k - 1]`.
    pub fn parent_values(&self, j: usize, a: f64, x: &[f64]) -> Vec<f64> {
        self.parents[j]
            .iter()
            .map(|&p| if p == 0 { a } else { x[p - 1] })
            .collect()
    }

    /// Embedding `phi_j(a, x_pa(j))`.
    pub fn node_features(&self, j: usize, a: f64, x: &[f64]) -> Vec<f64> {
        let pv = self.parent_values(j, a, x);
        let mut out = vec![0.0; self.bases[j].dim()];
        self.bases[j].embed_into(&pv, &mut out);
        out
    }

    /// Row embeddings for one sample, concatenated in weight order (length `d`).
    /// Row `j` of the design matrix is the slice `block(j)` of this vector.
    pub fn packed_rows(&self, a: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for j in 0..self.num_features() {
            let pv = self.parent_values(j, a, x);
            self.bases[j].embed_into(&pv, &mut out[self.block(j)]);
        }
        out
    }

    /// Dense block-diagonal design matrix `Phi` (m x d) for one sample.
    pub fn assemble(&self, a: f64, x: &[f64]) -> Result<DMatrix<f64>> {
        let m = self.num_features();
        if x.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: x.len(),
            });
        }
        if !a.is_finite() {
            return Err(Error::MissingValue("protected attribute".into()));
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::MissingValue(format!("feature {j}")));
        }
        let packed = self.packed_rows(a, x);
        let mut phi = DMatrix::zeros(m, self.dim());
        for j in 0..m {
            for c in self.block(j) {
                phi[(j, c)] = packed[c];
            }
        }
        Ok(phi)
    }

    /// `Phi w` for one sample, computed block-wise.
    pub fn apply(&self, packed: &[f64], w: &[f64]) -> Vec<f64> {
        (0..self.num_features())
            .map(|j| {
                self.block(j)
                    .map(|c| packed[c] * w[c])
                    .sum::<f64>()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(degree: usize, inputs: usize) -> PolyBasis {
        PolyBasis::new(BasisSpec {
            degree,
            include_bias: true,
            inputs,
        })
        .unwrap()
    }

    #[test]
    fn scalar_monomials() {
        assert_eq!(basis(2, 1).embed(&[2.0]).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn linear_features() {
        assert_eq!(basis(1, 2).embed(&[0.5, -3.0]).unwrap(), vec![1.0, 0.5, -3.0]);
    }

    #[test]
    fn quadratic_two_inputs_matches_enumeration() {
        // Brute force: every (i, j) with i + j <= 2, ordered by total degree, then by
        // descending power of the first input.
        let mut expected: Vec<(u32, u32)> = Vec::new();
        for t in 0..=2u32 {
            for i in (0..=t).rev() {
                expected.push((i, t - i));
            }
        }
        let (x, y) = (1.7f64, -0.3f64);
        let want: Vec<f64> = expected
            .iter()
            .map(|&(i, j)| x.powi(i as i32) * y.powi(j as i32))
            .collect();
        assert_eq!(want, vec![1.0, x, y, x * x, x * y, y * y]);
        assert_eq!(basis(2, 2).embed(&[x, y]).unwrap(), want);
    }

    #[test]
    fn no_bias_drops_constant() {
        let b = PolyBasis::new(BasisSpec {
            degree: 2,
            include_bias: false,
            inputs: 1,
        })
        .unwrap();
        assert_eq!(b.embed(&[3.0]).unwrap(), vec![3.0, 9.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            basis(2, 2).embed(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
        assert!(PolyBasis::new(BasisSpec {
            degree: 0,
            include_bias: true,
            inputs: 1
        })
        .is_err());
    }

    #[test]
    fn law_design_matrix() {
        let g = CausalGraph::law_school();
        let sb = StructuralBasis::uniform(&g, 1).unwrap();
        let phi = sb.assemble(1.0, &[0.4, -1.2]).unwrap();
        let want = DMatrix::from_row_slice(2, 5, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.4]);
        assert_eq!(phi, want);
    }

    #[test]
    fn zero_sample_without_bias_is_zero() {
        let g = CausalGraph::nhs();
        let sb = StructuralBasis::new(&g, &[2, 2, 2], false).unwrap();
        let phi = sb.assemble(0.0, &[0.0, 0.0, 0.0]).unwrap();
        assert!(phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nhs_block_widths() {
        let g = CausalGraph::nhs();
        let sb = StructuralBasis::uniform(&g, 2).unwrap();
        let widths: Vec<usize> = (0..3).map(|j| sb.block(j).len()).collect();
        let from_embed: Vec<usize> = (0..3)
            .map(|j| sb.node_features(j, 1.0, &[0.1, 0.2, 0.3]).len())
            .collect();
        assert_eq!(widths, from_embed);
        assert_eq!(widths, vec![3, 6, 10]);
        assert_eq!(sb.dim(), 19);
        assert!(matches!(
            sb.assemble(1.0, &[0.1, f64::NAN, 0.3]),
            Err(Error::MissingValue(_))
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let b = basis(3, 3);
        let v = [0.3, -1.1, 0.7];
        let mut out = vec![0.0; b.dim()];
        let mut jac = vec![0.0; b.dim() * 3];
        b.embed_with_jacobian(&v, &mut out, &mut jac);
        let h = 1e-6;
        for p in 0..3 {
            let mut up = v;
            let mut dn = v;
            up[p] += h;
            dn[p] -= h;
            let fu = b.embed(&up).unwrap();
            let fd = b.embed(&dn).unwrap();
            for r in 0..b.dim() {
                let fdiff = (fu[r] - fd[r]) / (2.0 * h);
                assert!((fdiff - jac[r * 3 + p]).abs() < 1e-7, "r={r} p={p}");
            }
        }
    }

    proptest! {
        #[test]
        fn embed_length_is_binomial(k in 0usize..5, degree in 1usize..5) {
            let b = basis(degree, k);
            prop_assert_eq!(b.dim(), binomial(k + degree, degree));
        }

        #[test]
        fn rows_depend_only_on_parents(
            a in 0u8..2,
            x in proptest::collection::vec(-2.0f64..2.0, 3),
            bump in -1.0f64..1.0,
            w in proptest::collection::vec(-1.0f64..1.0, 19),
        ) {
            let g = CausalGraph::nhs();
            let sb = StructuralBasis::uniform(&g, 2).unwrap();
            let base = sb.apply(&sb.packed_rows(a as f64, &x), &w);
            // Feature j never depends on features after it in topological order.
            for k in 0..3 {
                let mut y = x.clone();
                y[k] += bump;
                let out = sb.apply(&sb.packed_rows(a as f64, &y), &w);
                for j in 0..=k {
                    prop_assert_eq!(out[j], base[j]);
                }
            }
        }
    }
}

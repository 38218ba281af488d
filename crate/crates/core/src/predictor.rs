//! The counterfactually fair predictor, the two unconstrained baselines and the
//! unfairness measures that compare them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, PolyBasis};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, PathSpecMask};
use crate::io::Dataset;
use crate::linalg;

/// Ridge regression on a polynomial embedding of the predictor input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfPredictor {
    pub theta: Vec<f64>,
    pub basis: BasisSpec,
    pub lambda: f64,
    /// Per feature: `true` feeds the Model A residual, `false` the raw value.
    pub unfair: Vec<bool>,
    pub path_mask: Option<PathSpecMask>,
}

impl CfPredictor {
    fn poly(&self) -> PolyBasis {
        PolyBasis::new(self.basis).expect("basis validated at fit time")
    }

    /// Predictor input: residuals of unfair features, raw values of fair ones.
    pub fn input(&self, residual: &[f64], raw: &[f64]) -> Vec<f64> {
        self.unfair
            .iter()
            .enumerate()
            .map(|(j, &u)| if u { residual[j] } else { raw[j] })
            .collect()
    }

    pub fn predict_input(&self, input: &[f64]) -> f64 {
        let poly = self.poly();
        let mut phi = vec![0.0; poly.dim()];
        poly.embed_into(input, &mut phi);
        phi.iter().zip(&self.theta).map(|(p, t)| p * t).sum()
    }

    /// Prediction and its gradient with respect to the input vector.
    pub fn predict_with_gradient(&self, input: &[f64]) -> (f64, Vec<f64>) {
        let poly = self.poly();
        let k = input.len();
        let mut phi = vec![0.0; poly.dim()];
        let mut jac = vec![0.0; poly.dim() * k];
        poly.embed_with_jacobian(input, &mut phi, &mut jac);
        let value = phi.iter().zip(&self.theta).map(|(p, t)| p * t).sum();
        let grad = (0..k)
            .map(|p| (0..poly.dim()).map(|r| jac[r * k + p] * self.theta[r]).sum())
            .collect();
        (value, grad)
    }

    /// Prediction for a record; the protected attribute is accepted but never read.
    pub fn predict(&self, _a: f64, residual: &[f64], raw: &[f64]) -> f64 {
        self.predict_input(&self.input(residual, raw))
    }
}

/// Squared loss with closed-form ridge; the only loss this crate fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Loss {
    #[default]
    Squared,
}

/// Fits `min_θ Σ_i (y_i - φ(u_i)ᵀθ)² + λ |θ|²` with `u_i` the predictor input.
pub fn fit_cf(
    residuals: &DMatrix<f64>,
    raw: &DMatrix<f64>,
    target: &[f64],
    degree: usize,
    lambda: f64,
    unfair: Vec<bool>,
    path_mask: Option<PathSpecMask>,
) -> Result<CfPredictor> {
    let m = residuals.ncols();
    if unfair.len() != m || raw.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: unfair.len(),
        });
    }
    if residuals.nrows() != target.len() || raw.nrows() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: residuals.nrows(),
            got: target.len(),
        });
    }
    let basis = BasisSpec {
        degree,
        include_bias: true,
        inputs: m,
    };
    let poly = PolyBasis::new(basis)?;
    let design = DMatrix::from_fn(target.len(), poly.dim(), |_, _| 0.0);
    let mut design = design;
    let mut row = vec![0.0; poly.dim()];
    for i in 0..target.len() {
        let input: Vec<f64> = (0..m)
            .map(|j| if unfair[j] { residuals[(i, j)] } else { raw[(i, j)] })
            .collect();
        poly.embed_into(&input, &mut row);
        for (c, v) in row.iter().enumerate() {
            design[(i, c)] = *v;
        }
    }
    let theta = linalg::ridge(&design, &DVector::from_column_slice(target), lambda)?;
    Ok(CfPredictor {
        theta: theta.as_slice().to_vec(),
        basis,
        lambda,
        unfair,
        path_mask,
    })
}

/// Every feature unfair unless a path mask says otherwise.
pub fn resolve_mask(graph: &CausalGraph, mask: Option<&PathSpecMask>) -> Result<Vec<bool>> {
    match mask {
        Some(mask) => mask.resolve(graph),
        None => Ok(vec![true; graph.num_features()]),
    }
}

/// Squared gap between factual and counterfactual predictions for one sample.
pub fn cfu(predictor: &CfPredictor, input: &[f64], input_cf: &[f64]) -> f64 {
    (predictor.predict_input(input) - predictor.predict_input(input_cf)).powi(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Uses `(A, X_1, ..., X_m)`.
    Unconstrained,
    /// Uses `(X_1, ..., X_m)`.
    BlindUnconstrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePredictor {
    pub kind: BaselineKind,
    pub theta: Vec<f64>,
    pub basis: BasisSpec,
    pub lambda: f64,
}

fn baseline_input(kind: BaselineKind, a: f64, x: &[f64]) -> Vec<f64> {
    match kind {
        BaselineKind::Unconstrained => std::iter::once(a).chain(x.iter().copied()).collect(),
        BaselineKind::BlindUnconstrained => x.to_vec(),
    }
}

impl BaselinePredictor {
    pub fn predict(&self, a: f64, x: &[f64]) -> f64 {
        let poly = PolyBasis::new(self.basis).expect("basis validated at fit time");
        let phi = poly
            .embed(&baseline_input(self.kind, a, x))
            .expect("input width fixed by kind");
        phi.iter().zip(&self.theta).map(|(p, t)| p * t).sum()
    }
}

pub fn fit_baseline(
    data: &Dataset,
    kind: BaselineKind,
    degree: usize,
    lambda: f64,
) -> Result<BaselinePredictor> {
    let inputs = match kind {
        BaselineKind::Unconstrained => data.num_features() + 1,
        BaselineKind::BlindUnconstrained => data.num_features(),
    };
    let basis = BasisSpec {
        degree,
        include_bias: true,
        inputs,
    };
    let poly = PolyBasis::new(basis)?;
    let mut design = DMatrix::zeros(data.len(), poly.dim());
    let mut row = vec![0.0; poly.dim()];
    for i in 0..data.len() {
        poly.embed_into(&baseline_input(kind, data.protected[i], &data.features[i]), &mut row);
        for (c, v) in row.iter().enumerate() {
            design[(i, c)] = *v;
        }
    }
    let theta = linalg::ridge(&design, &DVector::from_column_slice(&data.target), lambda)?;
    Ok(BaselinePredictor {
        kind,
        theta: theta.as_slice().to_vec(),
        basis,
        lambda,
    })
}

/// Mean squared difference between two prediction vectors.
pub fn mean_squared_gap(cf_predictions: &[f64], other: &[f64]) -> f64 {
    assert_eq!(cf_predictions.len(), other.len());
    let n = cf_predictions.len().max(1) as f64;
    cf_predictions
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n
}

/// Unfairness of a baseline: `(1/n) Σ_i (f_θ(ε̂_i) - ŷ_i^baseline)²` on the observed data.
pub fn baseline_unfairness(
    cf: &CfPredictor,
    baseline: &BaselinePredictor,
    data: &Dataset,
    residuals: &DMatrix<f64>,
) -> f64 {
    let (fair, base): (Vec<f64>, Vec<f64>) = (0..data.len())
        .map(|i| {
            let r: Vec<f64> = residuals.row(i).iter().copied().collect();
            let x = &data.features[i];
            (
                cf.predict(data.protected[i], &r, x),
                baseline.predict(data.protected[i], x),
            )
        })
        .unzip();
    mean_squared_gap(&fair, &base)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anm::{fit_model_a, Design};
    use crate::basis::StructuralBasis;
    use crate::io::{generate, SyntheticSpec};
    use proptest::prelude::*;

    fn fixture() -> (Dataset, Design, DMatrix<f64>) {
        let data = generate(&SyntheticSpec::law_school(300, 0.4, 17)).unwrap();
        let basis = StructuralBasis::uniform(&CausalGraph::law_school(), 1).unwrap();
        let design = Design::new(&basis, &data).unwrap();
        let fit = fit_model_a(&design, 0.1).unwrap();
        let resid = fit.residuals(&design).0;
        (data, design, resid)
    }

    #[test]
    fn zero_target_gives_zero_theta() {
        let (data, design, resid) = fixture();
        let p = fit_cf(&resid, &design.x, &vec![0.0; data.len()], 2, 1.0, vec![true; 2], None).unwrap();
        assert!(p.theta.iter().all(|t| *t == 0.0));
    }

    #[test]
    fn recovers_known_coefficients() {
        let (data, design, resid) = fixture();
        let theta0 = [0.4, -1.2, 0.7, 0.3, -0.25, 0.9];
        let poly = PolyBasis::new(BasisSpec {
            degree: 2,
            include_bias: true,
            inputs: 2,
        })
        .unwrap();
        let y: Vec<f64> = (0..data.len())
            .map(|i| {
                let phi = poly.embed(&[resid[(i, 0)], resid[(i, 1)]]).unwrap();
                phi.iter().zip(&theta0).map(|(p, t)| p * t).sum()
            })
            .collect();
        let p = fit_cf(&resid, &design.x, &y, 2, 1e-10, vec![true; 2], None).unwrap();
        for (t, t0) in p.theta.iter().zip(&theta0) {
            assert!((t - t0).abs() < 1e-6, "{t} vs {t0}");
        }
    }

    #[test]
    fn all_fair_uses_raw_features_only() {
        let (data, design, resid) = fixture();
        let mask = PathSpecMask {
            unfair_nodes: vec![],
            fair_nodes: vec!["G".into(), "L".into()],
        };
        let unfair = resolve_mask(&CausalGraph::law_school(), Some(&mask)).unwrap();
        let p = fit_cf(&resid, &design.x, &data.target, 1, 0.1, unfair, Some(mask)).unwrap();
        assert_eq!(p.input(&[9.0, 9.0], &[1.0, 2.0]), vec![1.0, 2.0]);
        // Changing residuals changes nothing.
        assert_eq!(p.predict(0.0, &[5.0, -5.0], &[1.0, 2.0]), p.predict(0.0, &[0.0, 0.0], &[1.0, 2.0]));
    }

    #[test]
    fn cfu_edge_cases() {
        let p = CfPredictor {
            theta: vec![0.0, 2.5],
            basis: BasisSpec {
                degree: 1,
                include_bias: true,
                inputs: 1,
            },
            lambda: 0.0,
            unfair: vec![true],
            path_mask: None,
        };
        assert_eq!(cfu(&p, &[0.7], &[0.7]), 0.0);
        let (e, e2) = (0.7, -0.1);
        assert!((cfu(&p, &[e], &[e2]) - (2.5 * (e - e2)).powi(2)).abs() < 1e-15);
        let zero = CfPredictor {
            theta: vec![0.0, 0.0],
            ..p
        };
        assert_eq!(cfu(&zero, &[1.0], &[-3.0]), 0.0);
    }

    #[test]
    fn baseline_unfairness_reference() {
        let (data, design, resid) = fixture();
        let cf = fit_cf(&resid, &design.x, &data.target, 1, 0.1, vec![true; 2], None).unwrap();
        let uc = fit_baseline(&data, BaselineKind::Unconstrained, 1, 0.1).unwrap();
        let value = baseline_unfairness(&cf, &uc, &data, &resid);
        // Reference: recompute both prediction vectors by hand, then the mean gap.
        let fair: Vec<f64> = (0..data.len())
            .map(|i| cf.theta[0] + cf.theta[1] * resid[(i, 0)] + cf.theta[2] * resid[(i, 1)])
            .collect();
        let base: Vec<f64> = (0..data.len())
            .map(|i| {
                uc.theta[0]
                    + uc.theta[1] * data.protected[i]
                    + uc.theta[2] * data.features[i][0]
                    + uc.theta[3] * data.features[i][1]
            })
            .collect();
        let reference = fair.iter().zip(&base).map(|(f, b)| (f - b).powi(2)).sum::<f64>() / data.len() as f64;
        assert!((value - reference).abs() < 1e-12);
        assert!(value > 0.0);
    }

    #[test]
    fn baseline_trivial_cases() {
        let (data, _, resid) = fixture();
        let cf = CfPredictor {
            theta: vec![1.5, 0.0, 0.0],
            basis: BasisSpec {
                degree: 1,
                include_bias: true,
                inputs: 2,
            },
            lambda: 0.0,
            unfair: vec![true; 2],
            path_mask: None,
        };
        let constant = BaselinePredictor {
            kind: BaselineKind::BlindUnconstrained,
            theta: vec![-0.5, 0.0, 0.0],
            basis: BasisSpec {
                degree: 1,
                include_bias: true,
                inputs: 2,
            },
            lambda: 0.0,
        };
        assert!((baseline_unfairness(&cf, &constant, &data, &resid) - 4.0).abs() < 1e-12);
        let same = BaselinePredictor {
            theta: vec![1.5, 0.0, 0.0],
            ..constant
        };
        assert_eq!(baseline_unfairness(&cf, &same, &data, &resid), 0.0);
    }

    proptest! {
        #[test]
        fn ignores_protected_attribute(
            r in proptest::collection::vec(-2.0f64..2.0, 2),
            x in proptest::collection::vec(-2.0f64..2.0, 2),
            theta in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let p = CfPredictor {
                theta,
                basis: BasisSpec { degree: 2, include_bias: true, inputs: 2 },
                lambda: 0.0,
                unfair: vec![true, false],
                path_mask: None,
            };
            prop_assert_eq!(p.predict(0.0, &r, &x), p.predict(1.0, &r, &x));
            prop_assert!(cfu(&p, &r, &x) >= 0.0);
        }

        #[test]
        fn input_gradient_matches_finite_differences(
            u in proptest::collection::vec(-1.5f64..1.5, 3),
            theta in proptest::collection::vec(-1.0f64..1.0, 20),
        ) {
            let p = CfPredictor {
                theta,
                basis: BasisSpec { degree: 3, include_bias: true, inputs: 3 },
                lambda: 0.0,
                unfair: vec![true; 3],
                path_mask: None,
            };
            let (_, g) = p.predict_with_gradient(&u);
            let h = 1e-6;
            for k in 0..3 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[k] += h;
                dn[k] -= h;
                let fd = (p.predict_input(&up) - p.predict_input(&dn)) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() < 1e-6);
            }
        }
    }
}

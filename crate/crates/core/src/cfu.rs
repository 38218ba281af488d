//! Counterfactual unfairness of the fair predictor under an alternative set of
//! structural weights.
//!
//! Given weights `w*` from a confounded fit, each sample is abducted with
//! `δ = x - Φ w*`, pushed through the structural equations with `A <- 1 - a`, and
//! re-residualized with the unconfounded weights `w†`. The predictor sees the
//! resulting `ε̂'` in place of `ε̂`, and the squared change in its output, averaged
//! over samples, is the unfairness.

use nalgebra::{DMatrix, DVector};

use crate::anm::{fit_model_a, Design, FittedAnm};
use crate::basis::StructuralBasis;
use crate::error::Result;
use crate::graph::PathSpecMask;
use crate::io::Dataset;
use crate::predictor::{fit_cf, CfPredictor};

/// Everything fixed by the unconfounded fit: `w†`, `λ†`, `ε̂` and the predictor.
#[derive(Debug, Clone)]
pub struct ModelAArtifacts {
    pub design: Design,
    pub model_a: FittedAnm,
    /// `n x m` residuals `ε̂` under `w†`.
    pub residuals: DMatrix<f64>,
    pub predictor: CfPredictor,
    factual: Vec<f64>,
}

impl ModelAArtifacts {
    pub fn new(design: Design, model_a: FittedAnm, predictor: CfPredictor) -> Self {
        let residuals = design.residuals(&model_a.weights);
        let factual = (0..design.n())
            .map(|i| {
                let r: Vec<f64> = residuals.row(i).iter().copied().collect();
                let x: Vec<f64> = design.x.row(i).iter().copied().collect();
                predictor.predict(design.a[i], &r, &x)
            })
            .collect();
        ModelAArtifacts {
            design,
            model_a,
            residuals,
            predictor,
            factual,
        }
    }

    /// Fits Model A and the fair predictor on `data`.
    pub fn fit(
        basis: &StructuralBasis,
        data: &Dataset,
        lambda: f64,
        predictor_degree: usize,
        predictor_lambda: f64,
        unfair: Vec<bool>,
        path_mask: Option<PathSpecMask>,
    ) -> Result<Self> {
        let design = Design::new(basis, data)?;
        let model_a = fit_model_a(&design, lambda)?;
        let residuals = design.residuals(&model_a.weights);
        let predictor = fit_cf(
            &residuals,
            &design.x,
            &data.target,
            predictor_degree,
            predictor_lambda,
            unfair,
            path_mask,
        )?;
        Ok(Self::new(design, model_a, predictor))
    }

    pub fn n(&self) -> usize {
        self.design.n()
    }

    pub fn lambda(&self) -> f64 {
        self.model_a.lambda
    }

    /// `f(ε̂_i)` for every sample.
    pub fn factual_predictions(&self) -> &[f64] {
        &self.factual
    }

    /// Predictor output on the counterfactual residuals implied by `w_star`.
    pub fn counterfactual_predictions(&self, w_star: &[f64]) -> Vec<f64> {
        (0..self.n())
            .map(|i| self.sample(i, w_star, false).counterfactual)
            .collect()
    }

    /// Counterfactual residuals `ε̂'` implied by `w_star`, one row per sample.
    pub fn counterfactual_residuals(&self, w_star: &[f64]) -> DMatrix<f64> {
        let m = self.design.m();
        let mut out = DMatrix::zeros(self.n(), m);
        for i in 0..self.n() {
            let s = self.sample(i, w_star, false);
            for j in 0..m {
                out[(i, j)] = s.residual_cf[j];
            }
        }
        out
    }

    fn sample(&self, i: usize, w_star: &[f64], tangents: bool) -> SampleTerms {
        let basis = &self.design.basis;
        let w_dagger = &self.model_a.weights;
        let m = basis.num_features();
        let d = basis.dim();
        let a = self.design.a[i];
        let a_cf = 1.0 - a;
        let x: Vec<f64> = self.design.x.row(i).iter().copied().collect();

        let mut x_cf = x.clone();
        let mut eps_cf = vec![0.0; m];
        // Row `j` holds d x'_j / d w* (and d ε'_j / d w*) when tangents are requested.
        let mut dx = if tangents { vec![vec![0.0; d]; m] } else { Vec::new() };
        let mut deps = if tangents { vec![vec![0.0; d]; m] } else { Vec::new() };

        for j in 0..m {
            let node = basis.node_basis(j);
            let k = node.spec().inputs;
            let block = basis.block(j);
            let phi = basis.node_features(j, a, &x);
            let pv_cf = basis.parent_values(j, a_cf, &x_cf);
            let mut phi_cf = vec![0.0; node.dim()];
            let mut jac = vec![0.0; node.dim() * k];
            node.embed_with_jacobian(&pv_cf, &mut phi_cf, &mut jac);

            let ws = &w_star[block.clone()];
            let wd = &w_dagger[block.clone()];
            let shift: f64 = phi_cf.iter().zip(&phi).zip(ws).map(|((c, f), w)| (c - f) * w).sum();
            x_cf[j] = x[j] + shift;
            let fit_cf: f64 = phi_cf.iter().zip(wd).map(|(c, w)| c * w).sum();
            eps_cf[j] = x_cf[j] - fit_cf;

            if tangents {
                let mut row = vec![0.0; d];
                for (r, c) in block.clone().enumerate() {
                    row[c] = phi_cf[r] - phi[r];
                }
                let mut row_eps = row.clone();
                for (p, &parent) in basis.node_parents(j).iter().enumerate() {
                    if parent == 0 {
                        continue;
                    }
                    let q = parent - 1;
                    let (mut ds, mut dd) = (0.0, 0.0);
                    for r in 0..node.dim() {
                        ds += jac[r * k + p] * ws[r];
                        dd += jac[r * k + p] * wd[r];
                    }
                    for c in 0..d {
                        row[c] += ds * dx[q][c];
                        row_eps[c] += (ds - dd) * dx[q][c];
                    }
                }
                dx[j] = row;
                deps[j] = row_eps;
            }
        }

        let input_cf = self.predictor.input(&eps_cf, &x);
        let factual = self.factual[i];
        let (counterfactual, grad_u) = if tangents {
            self.predictor.predict_with_gradient(&input_cf)
        } else {
            (self.predictor.predict_input(&input_cf), Vec::new())
        };
        let gap = factual - counterfactual;
        let gradient = tangents.then(|| {
            let mut g = vec![0.0; d];
            for j in (0..m).filter(|&j| self.predictor.unfair[j]) {
                let scale = -2.0 * gap * grad_u[j];
                for c in 0..d {
                    g[c] += scale * deps[j][c];
                }
            }
            g
        });
        SampleTerms {
            cfu: gap * gap,
            counterfactual,
            residual_cf: eps_cf,
            gradient,
        }
    }
}

struct SampleTerms {
    cfu: f64,
    counterfactual: f64,
    residual_cf: Vec<f64>,
    gradient: Option<Vec<f64>>,
}

/// Mean CFU over the samples in `idx` under structural weights `w_star`.
pub fn counterfactual_unfairness(art: &ModelAArtifacts, idx: &[usize], w_star: &[f64]) -> f64 {
    let total: f64 = idx.iter().map(|&i| art.sample(i, w_star, false).cfu).sum();
    total / idx.len().max(1) as f64
}

/// Mean CFU over `idx` and its gradient with respect to `w_star`.
pub fn counterfactual_unfairness_with_gradient(
    art: &ModelAArtifacts,
    idx: &[usize],
    w_star: &[f64],
) -> (f64, DVector<f64>) {
    let d = art.design.d();
    let mut total = 0.0;
    let mut grad = DVector::zeros(d);
    for &i in idx {
        let s = art.sample(i, w_star, true);
        total += s.cfu;
        for (g, v) in grad.iter_mut().zip(s.gradient.expect("requested")) {
            *g += v;
        }
    }
    let scale = 1.0 / idx.len().max(1) as f64;
    (total * scale, grad * scale)
}

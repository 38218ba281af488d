//! Gradient ascent on counterfactual unfairness over budget-constrained correlation
//! matrices.
//!
//! Each iteration draws a minibatch, refits the confounded model on it with the
//! correlation matrix built from the current factor `L`, measures CFU, and moves `L`
//! along the gradient. The gradient passes through the refit by implicit
//! differentiation at the inner optimum: with `z = (w, log σ)` and inner Hessian `H`,
//!
//! ```text
//! dCFU/dP = -2 Q E W E Q,   W = C + diag(v_s) S,   v = H⁻¹ (∂CFU/∂w, 0)
//! ```
//!
//! where `Q = P⁻¹`, `E = diag(1/σ)`, `S` is the residual scatter and
//! `C_kl = Σ_{c in block k} v_c Σ_i φ_ic r_il`. The factor gradient follows from
//! [`pullback`].

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anm::{solve_inner, weight_stationarity, CorrelationFactor, FitControls, InnerPoint, WarmStart};
use crate::cfu::{counterfactual_unfairness, counterfactual_unfairness_with_gradient, ModelAArtifacts};
use crate::correlation::{materialize, psd_check, pullback, CorrelationParams, PsdReport};
use crate::error::{Error, Result};

/// Trace value recorded when the correlation matrix cannot be factorised.
pub const INFEASIBLE_PENALTY: f64 = -1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub p_max: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Defaults to `min(n, 256)`.
    pub batch_size: Option<usize>,
    pub inner: FitControls,
    pub seed: u64,
    /// Use `α_t = α / (1 + t / T)`.
    pub step_decay: bool,
    pub step_rule: StepRule,
    /// Cliques of feature indices; a dense factor is used when absent.
    pub cliques: Option<Vec<Vec<usize>>>,
    #[serde(skip)]
    pub warm_start_factor: Option<DMatrix<f64>>,
    /// Samples in the finite-difference check run on the final factor; 0 disables it.
    pub gradient_check_samples: usize,
}

/// How the gradient becomes a step on `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `L <- L + α ∇`.
    #[default]
    Plain,
    /// `L <- L + α ∇ / |∇|`, which does not depend on the scale of CFU.
    Normalized,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            p_max: 0.5,
            learning_rate: 0.05,
            iterations: 300,
            batch_size: None,
            inner: FitControls::default(),
            seed: 0,
            step_decay: false,
            step_rule: StepRule::Plain,
            cliques: None,
            warm_start_factor: None,
            gradient_check_samples: 32,
        }
    }
}

impl OptimizerConfig {
    fn batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(256).min(n)
    }

    fn validate(&self, n: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if let Some(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::InvalidConfig(format!("batch size {b} outside [1, {n}]")));
            }
        }
        Ok(())
    }

    /// Initial factor: the warm start when given, otherwise a seeded dense or clique factor.
    pub fn initial_params(&self, m: usize) -> Result<CorrelationParams> {
        let base = match &self.cliques {
            Some(c) => CorrelationParams::cliques(m, c, self.p_max, self.seed)?,
            None => CorrelationParams::dense(m, self.p_max, self.seed)?,
        };
        match &self.warm_start_factor {
            Some(l) if l.shape() == base.factor.shape() => base.with_factor(l.clone()),
            Some(l) => Err(Error::DimensionMismatch {
                expected: base.factor.ncols(),
                got: l.ncols(),
            }),
            None => Ok(base),
        }
    }
}

/// Result of one CFU evaluation at a fixed factor.
#[derive(Debug, Clone)]
pub struct CfuForward {
    pub cfu: f64,
    pub correlation: DMatrix<f64>,
    /// Confounded weights `w*` fitted on the batch.
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub jitter: f64,
    pub inner_hit_limit: bool,
    /// Ridge strength used on the batch, `λ† B / n`.
    pub lambda: f64,
}

fn batch_lambda(art: &ModelAArtifacts, batch: usize) -> f64 {
    art.lambda() * batch as f64 / art.n() as f64
}

fn forward_parts(
    art: &ModelAArtifacts,
    params: &CorrelationParams,
    idx: &[usize],
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<(CfuForward, CorrelationFactor)> {
    let p = materialize(params);
    let factor = CorrelationFactor::new(&p)?;
    let design = art.design.rows(idx);
    let lambda = batch_lambda(art, idx.len());
    let inner = solve_inner(&design, lambda, &factor, controls, warm)?;
    let cfu = counterfactual_unfairness(art, idx, &inner.weights);
    Ok((
        CfuForward {
            cfu,
            correlation: p,
            weights: inner.weights,
            sigmas: inner.sigmas,
            jitter: factor.jitter,
            inner_hit_limit: inner.hit_limit,
            lambda,
        },
        factor,
    ))
}

/// CFU on the samples `idx` with the confounded model refitted on those samples.
pub fn cfu_forward(
    art: &ModelAArtifacts,
    params: &CorrelationParams,
    idx: &[usize],
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<CfuForward> {
    forward_parts(art, params, idx, controls, warm).map(|(f, _)| f)
}

/// [`cfu_forward`] together with the gradient with respect to the factor `L`.
pub fn cfu_forward_with_gradient(
    art: &ModelAArtifacts,
    params: &CorrelationParams,
    idx: &[usize],
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<(CfuForward, DMatrix<f64>)> {
    let (fwd, factor) = forward_parts(art, params, idx, controls, warm)?;
    let (_, grad_w) = counterfactual_unfairness_with_gradient(art, idx, &fwd.weights);
    let design = art.design.rows(idx);
    let d = design.d();
    let m = design.m();
    let log_sigma: Vec<f64> = fwd.sigmas.iter().map(|s| s.ln()).collect();
    let point = InnerPoint::new(
        &design,
        &factor.inverse,
        DVector::from_column_slice(&fwd.weights),
        log_sigma,
    );
    let hessian = point.hessian(fwd.lambda);
    let mut rhs = DVector::zeros(d + m);
    rhs.rows_mut(0, d).copy_from(&grad_w);
    let v = match Cholesky::new(hessian.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => hessian.lu().solve(&rhs).ok_or(Error::SingularNormalEquations)?,
    };
    let r = point.phi_resid();
    let mut w = DMatrix::zeros(m, m);
    for k in 0..m {
        for l in 0..m {
            let c: f64 = design.basis.block(k).map(|c| v[c] * r[(c, l)]).sum();
            w[(k, l)] = c + v[d + k] * point.scatter[(k, l)];
        }
    }
    let q = &factor.inverse;
    let e = DMatrix::from_diagonal(&DVector::from_iterator(m, fwd.sigmas.iter().map(|s| 1.0 / s)));
    let grad_p = (q * &e * w * &e * q) * -2.0;
    let grad_l = pullback(params, &grad_p);
    Ok((fwd, grad_l))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub cfu: f64,
    pub grad_norm: f64,
    pub min_eig: f64,
}

/// Analytic factor gradient against central differences on a small batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub batch: Vec<usize>,
    pub step: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

/// Relative error of `a` against `b`, with the scale floored at `1e-3` of the largest
/// reference magnitude so that near-zero components compare on an absolute scale.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / b.abs().max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}

/// Compares [`cfu_forward_with_gradient`] against central differences in every free
/// factor entry. Each perturbed evaluation is a cold refit.
pub fn gradient_check(
    art: &ModelAArtifacts,
    params: &CorrelationParams,
    idx: &[usize],
    controls: &FitControls,
    step: f64,
) -> Result<GradientCheck> {
    let (_, grad) = cfu_forward_with_gradient(art, params, idx, controls, None)?;
    let analytic = params.free_entries(&grad);
    let base = params.free_params();
    let mut numeric = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut up = params.clone();
        let mut dn = params.clone();
        let mut v = base.clone();
        v[k] += step;
        up.set_free_params(&v);
        v[k] -= 2.0 * step;
        dn.set_free_params(&v);
        let fu = cfu_forward(art, &up, idx, controls, None)?.cfu;
        let fd = cfu_forward(art, &dn, idx, controls, None)?.cfu;
        numeric.push((fu - fd) / (2.0 * step));
    }
    Ok(GradientCheck {
        batch: idx.to_vec(),
        step,
        max_relative_error: max_relative_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

#[derive(Debug, Clone)]
pub struct MaxCfuResult {
    pub params: CorrelationParams,
    pub correlation: DMatrix<f64>,
    /// CFU on the full dataset at the final factor.
    pub cfu_final: f64,
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub psd: PsdReport,
    pub gradient_check: Option<GradientCheck>,
    /// Largest `|∂F/∂w|` of the final full-data refit.
    pub stationarity: f64,
    /// Iterations whose correlation matrix could not be factorised.
    pub infeasible_steps: usize,
}

impl MaxCfuResult {
    pub fn budget(&self) -> f64 {
        self.params.p_max
    }
}

/// Runs the ascent and reports the full-data CFU at the final factor.
///
/// A factor whose correlation matrix cannot be factorised is recorded with
/// [`INFEASIBLE_PENALTY`], discarded in favour of the last feasible factor, and the
/// step size is halved from then on.
pub fn maximize(art: &ModelAArtifacts, config: &OptimizerConfig) -> Result<MaxCfuResult> {
    let n = art.n();
    config.validate(n)?;
    let m = art.design.m();
    let batch = config.batch(n);
    let mut params = config.initial_params(m)?;
    let mut last_feasible = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut warm = Some(WarmStart::from(&art.model_a));
    let mut trace = Vec::with_capacity(config.iterations);
    let mut step_scale = 1.0;
    let mut infeasible_steps = 0;

    for t in 0..config.iterations {
        let mut idx = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        idx.sort_unstable();
        let min_eig = psd_check(&materialize(&params))?.min_eig;
        match cfu_forward_with_gradient(art, &params, &idx, &config.inner, warm.as_ref()) {
            Ok((fwd, grad)) => {
                if !fwd.cfu.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let mut values: Vec<f64> = trace.iter().map(|r: &TraceRow| r.cfu).collect();
                    values.push(fwd.cfu);
                    return Err(Error::DivergenceDetected {
                        iteration: t,
                        trace: values,
                    });
                }
                trace.push(TraceRow {
                    iter: t,
                    cfu: fwd.cfu,
                    grad_norm: grad.norm(),
                    min_eig,
                });
                warm = Some(WarmStart {
                    weights: fwd.weights,
                    sigmas: fwd.sigmas,
                });
                last_feasible = params.clone();
                let alpha = if config.step_decay {
                    config.learning_rate / (1.0 + t as f64 / config.iterations as f64)
                } else {
                    config.learning_rate
                };
                let scale = match config.step_rule {
                    StepRule::Plain => alpha * step_scale,
                    StepRule::Normalized => {
                        let norm = grad.norm();
                        if norm > 0.0 {
                            alpha * step_scale / norm
                        } else {
                            0.0
                        }
                    }
                };
                params.factor += grad * scale;
            }
            Err(Error::NotPositiveDefinite { .. }) | Err(Error::SingularNormalEquations) => {
                trace.push(TraceRow {
                    iter: t,
                    cfu: INFEASIBLE_PENALTY,
                    grad_norm: 0.0,
                    min_eig,
                });
                infeasible_steps += 1;
                step_scale *= 0.5;
                params = last_feasible.clone();
            }
            Err(e) => return Err(e),
        }
    }

    let all: Vec<usize> = (0..n).collect();
    let (params, fwd) = match cfu_forward(art, &params, &all, &config.inner, warm.as_ref()) {
        Ok(f) => (params, f),
        Err(Error::NotPositiveDefinite { .. }) => {
            let f = cfu_forward(art, &last_feasible, &all, &config.inner, warm.as_ref())?;
            (last_feasible, f)
        }
        Err(e) => return Err(e),
    };
    let psd = psd_check(&fwd.correlation)?;
    let stationarity = weight_stationarity(&art.design, &fwd.weights, &fwd.sigmas, &fwd.correlation, fwd.lambda)?;
    let gradient_check = if config.gradient_check_samples > 0 && params.num_free() > 0 {
        let k = config.gradient_check_samples.min(n);
        let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        gradient_check(art, &params, &idx, &config.inner, 1e-5).ok()
    } else {
        None
    };
    Ok(MaxCfuResult {
        correlation: fwd.correlation,
        params,
        cfu_final: fwd.cfu,
        weights: fwd.weights,
        sigmas: fwd.sigmas,
        trace,
        psd,
        gradient_check,
        stationarity,
        infeasible_steps,
    })
}

/// One budget of a sweep; failures are kept and the sweep continues.
#[derive(Debug, Clone)]
pub struct BudgetRun {
    pub budget: f64,
    pub result: std::result::Result<MaxCfuResult, String>,
    /// CFU fell below the previous budget's by more than `1e-6`.
    pub decreased: bool,
}

/// Ascending budgets, each started from the previous budget's final factor.
pub fn budget_sweep(art: &ModelAArtifacts, budgets: &[f64], config: &OptimizerConfig) -> Result<Vec<BudgetRun>> {
    check_sorted(budgets)?;
    let mut runs: Vec<BudgetRun> = Vec::with_capacity(budgets.len());
    let mut warm = config.warm_start_factor.clone();
    let mut previous: Option<f64> = None;
    for &budget in budgets {
        let cfg = OptimizerConfig {
            p_max: budget,
            warm_start_factor: warm.clone(),
            ..config.clone()
        };
        let result = maximize(art, &cfg).map_err(|e| e.to_string());
        let mut decreased = false;
        if let Ok(r) = &result {
            decreased = previous.is_some_and(|p| r.cfu_final < p - 1e-6);
            previous = Some(r.cfu_final);
            warm = Some(r.params.factor.clone());
        }
        runs.push(BudgetRun {
            budget,
            result,
            decreased,
        });
    }
    Ok(runs)
}

/// Every budget from the same seeded factor, evaluated in parallel.
pub fn budget_sweep_cold(art: &ModelAArtifacts, budgets: &[f64], config: &OptimizerConfig) -> Result<Vec<BudgetRun>> {
    check_sorted(budgets)?;
    let results: Vec<_> = budgets
        .par_iter()
        .map(|&budget| {
            let cfg = OptimizerConfig {
                p_max: budget,
                ..config.clone()
            };
            maximize(art, &cfg).map_err(|e| e.to_string())
        })
        .collect();
    let mut previous: Option<f64> = None;
    Ok(budgets
        .iter()
        .zip(results)
        .map(|(&budget, result)| {
            let mut decreased = false;
            if let Ok(r) = &result {
                decreased = previous.is_some_and(|p| r.cfu_final < p - 1e-6);
                previous = Some(r.cfu_final);
            }
            BudgetRun {
                budget,
                result,
                decreased,
            }
        })
        .collect())
}

fn check_sorted(budgets: &[f64]) -> Result<()> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig("budgets must be sorted ascending".into()));
    }
    Ok(())
}

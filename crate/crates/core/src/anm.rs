//! Additive noise model fitting under a fixed error correlation matrix.
//!
//! Both fitters minimise the penalised negative log-likelihood
//!
//! ```text
//! F(w, σ) = Σ_i (x_i - Φ_i w)ᵀ Σ⁻¹ (x_i - Φ_i w) + λ |w|² + n log det Σ,
//! Σ = diag(σ) P diag(σ)
//! ```
//!
//! with `P = I` for the unconfounded model and a caller-supplied correlation matrix
//! otherwise. For fixed `σ` the weights have the generalized least squares closed form
//! `w = (Σ_i Φ_iᵀ Σ⁻¹ Φ_i + λ I)⁻¹ Σ_i Φ_iᵀ Σ⁻¹ x_i`; the standard deviations are
//! optimised on the log scale.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::StructuralBasis;
use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::linalg;

/// Lower bound applied to fitted standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-sample design rows for a dataset.
#[derive(Debug, Clone)]
pub struct Design {
    pub basis: StructuralBasis,
    /// `n x d` packed rows; row `i` restricted to `basis.block(j)` is `φ_j` of sample `i`.
    pub packed: DMatrix<f64>,
    /// `n x m` features.
    pub x: DMatrix<f64>,
    pub a: Vec<f64>,
}

impl Design {
    pub fn new(basis: &StructuralBasis, data: &Dataset) -> Result<Self> {
        let m = basis.num_features();
        if data.num_features() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: data.num_features(),
            });
        }
        let n = data.len();
        let d = basis.dim();
        let mut packed = DMatrix::zeros(n, d);
        let mut x = DMatrix::zeros(n, m);
        for i in 0..n {
            let row = &data.features[i];
            if !data.protected[i].is_finite() || row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteData);
            }
            let p = basis.packed_rows(data.protected[i], row);
            for c in 0..d {
                packed[(i, c)] = p[c];
            }
            for j in 0..m {
                x[(i, j)] = row[j];
            }
        }
        Ok(Design {
            basis: basis.clone(),
            packed,
            x,
            a: data.protected.clone(),
        })
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    pub fn m(&self) -> usize {
        self.basis.num_features()
    }

    pub fn d(&self) -> usize {
        self.basis.dim()
    }

    pub fn rows(&self, idx: &[usize]) -> Design {
        Design {
            basis: self.basis.clone(),
            packed: self.packed.select_rows(idx),
            x: self.x.select_rows(idx),
            a: idx.iter().map(|&i| self.a[i]).collect(),
        }
    }

    /// `n x m` residuals `x_i - Φ_i w`.
    pub fn residuals(&self, w: &[f64]) -> DMatrix<f64> {
        let mut r = self.x.clone();
        for j in 0..self.m() {
            let block = self.basis.block(j);
            for i in 0..self.n() {
                let fit: f64 = block.clone().map(|c| self.packed[(i, c)] * w[c]).sum();
                r[(i, j)] -= fit;
            }
        }
        r
    }
}

/// Sums that make the weight update independent of `n`.
#[derive(Debug, Clone)]
pub(crate) struct SufficientStats {
    /// `Σ_i p_i p_iᵀ` over packed rows (`d x d`).
    pub gram: DMatrix<f64>,
    /// `Σ_i p_i x_iᵀ` (`d x m`).
    pub px: DMatrix<f64>,
}

impl SufficientStats {
    pub fn new(design: &Design) -> Self {
        SufficientStats {
            gram: design.packed.tr_mul(&design.packed),
            px: design.packed.tr_mul(&design.x),
        }
    }
}

/// Inverse error covariance `Σ⁻¹ = diag(1/σ) Q diag(1/σ)` with `Q = P⁻¹`.
pub(crate) fn precision(q: &DMatrix<f64>, sigmas: &[f64]) -> DMatrix<f64> {
    let m = q.nrows();
    DMatrix::from_fn(m, m, |r, c| q[(r, c)] / (sigmas[r] * sigmas[c]))
}

/// Closed-form GLS weights for a fixed precision matrix.
pub(crate) fn gls_weights(
    basis: &StructuralBasis,
    stats: &SufficientStats,
    prec: &DMatrix<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    let (a, b) = normal_equations(basis, stats, prec, lambda);
    match Cholesky::new(a.clone()) {
        Some(ch) => Ok(ch.solve(&b)),
        None if lambda == 0.0 => a
            .lu()
            .solve(&b)
            .filter(|w| w.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularNormalEquations),
        None => Err(Error::SingularNormalEquations),
    }
}

pub(crate) fn normal_equations(
    basis: &StructuralBasis,
    stats: &SufficientStats,
    prec: &DMatrix<f64>,
    lambda: f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let m = basis.num_features();
    let d = basis.dim();
    let mut a = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for j in 0..m {
        let bj = basis.block(j);
        for k in 0..m {
            let mjk = prec[(j, k)];
            if mjk == 0.0 {
                continue;
            }
            let bk = basis.block(k);
            for r in bj.clone() {
                for c in bk.clone() {
                    a[(r, c)] += mjk * stats.gram[(r, c)];
                }
                b[r] += mjk * stats.px[(r, k)];
            }
        }
    }
    for i in 0..d {
        a[(i, i)] += lambda;
    }
    (a, b)
}

fn scatter(resid: &DMatrix<f64>) -> DMatrix<f64> {
    resid.tr_mul(resid)
}

/// Factorised correlation matrix with any jitter that was needed.
#[derive(Debug, Clone)]
pub(crate) struct CorrelationFactor {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
    pub jitter: f64,
}

impl CorrelationFactor {
    pub fn new(p: &DMatrix<f64>) -> Result<Self> {
        let ch = linalg::cholesky_with_jitter(p)?;
        let inverse = ch.factor.inverse();
        Ok(CorrelationFactor {
            log_det: linalg::log_det(&ch.factor),
            inverse,
            jitter: ch.jitter,
        })
    }
}

/// `F(w, σ)` from a precomputed residual scatter.
fn objective_from_scatter(
    s: &DMatrix<f64>,
    q: &DMatrix<f64>,
    log_det_p: f64,
    sigmas: &[f64],
    w: &[f64],
    lambda: f64,
    n: f64,
) -> f64 {
    let prec = precision(q, sigmas);
    let quad = prec.component_mul(s).sum();
    let penalty = lambda * w.iter().map(|v| v * v).sum::<f64>();
    let log_det = 2.0 * sigmas.iter().map(|v| v.ln()).sum::<f64>() + log_det_p;
    quad + penalty + n * log_det
}

/// Penalised negative log-likelihood, without `2π` constants.
pub fn objective(
    design: &Design,
    w: &[f64],
    sigmas: &[f64],
    p: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    let factor = CorrelationFactor::new(p)?;
    let s = scatter(&design.residuals(w));
    Ok(objective_from_scatter(
        &s,
        &factor.inverse,
        factor.log_det,
        sigmas,
        w,
        lambda,
        design.n() as f64,
    ))
}

/// Largest absolute entry of `∂F/∂w` at `(w, σ)`.
pub fn weight_stationarity(
    design: &Design,
    w: &[f64],
    sigmas: &[f64],
    p: &DMatrix<f64>,
    lambda: f64,
) -> Result<f64> {
    let factor = CorrelationFactor::new(p)?;
    let prec = precision(&factor.inverse, sigmas);
    let stats = SufficientStats::new(design);
    let (a, b) = normal_equations(&design.basis, &stats, &prec, lambda);
    let g = (a * DVector::from_column_slice(w) - b) * 2.0;
    Ok(g.amax())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FitWarnings {
    /// A diagonal jitter had to be added to the correlation matrix.
    pub jittered: bool,
    /// The alternation budget ran out before the objective settled.
    pub max_iterations: bool,
}

impl FitWarnings {
    pub fn any(&self) -> bool {
        self.jittered || self.max_iterations
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedAnm {
    /// Stacked weights `(w_1, ..., w_m)`.
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub correlation: DMatrix<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub degrees: Vec<usize>,
    pub include_bias: bool,
    pub jitter: f64,
    pub warnings: FitWarnings,
    /// Objective after every alternation (and accepted polishing step).
    pub objective_trace: Vec<f64>,
}

impl FittedAnm {
    /// `Σ = diag(σ) P diag(σ)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.sigmas.len();
        DMatrix::from_fn(m, m, |r, c| {
            self.sigmas[r] * self.correlation[(r, c)] * self.sigmas[c]
        })
    }

    pub fn residuals(&self, design: &Design) -> Residuals {
        residuals(&self.weights, design)
    }
}

/// Per-sample residuals `x_i - Φ_i w` (`n x m`).
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals(pub DMatrix<f64>);

impl Residuals {
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }
}

pub fn residuals(w: &[f64], design: &Design) -> Residuals {
    Residuals(design.residuals(w))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("ridge strength {lambda} must be >= 0")))
    }
}

fn empirical_sigmas(resid: &DMatrix<f64>) -> Vec<f64> {
    let n = resid.nrows() as f64;
    (0..resid.ncols())
        .map(|j| {
            let ms = resid.column(j).iter().map(|v| v * v).sum::<f64>() / n;
            ms.sqrt().max(SIGMA_FLOOR)
        })
        .collect()
}

/// Unconfounded fit (`P = I`).
///
/// Starts from unit-variance ridge weights, sets `σ` to the root mean squared
/// residuals, solves the weighted problem, and repeats these two exact block updates
/// until the weights stop moving.
pub fn fit_model_a(design: &Design, lambda: f64) -> Result<FittedAnm> {
    check_lambda(lambda)?;
    let m = design.m();
    let n = design.n() as f64;
    let stats = SufficientStats::new(design);
    let identity = DMatrix::identity(m, m);
    let mut w = gls_weights(&design.basis, &stats, &identity, lambda)?;
    let mut sigmas = empirical_sigmas(&design.residuals(w.as_slice()));
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..1000 {
        let prec = precision(&identity, &sigmas);
        let next = gls_weights(&design.basis, &stats, &prec, lambda)?;
        let step = (&next - &w).amax();
        w = next;
        let resid = design.residuals(w.as_slice());
        sigmas = empirical_sigmas(&resid);
        trace.push(objective_from_scatter(
            &scatter(&resid),
            &identity,
            0.0,
            &sigmas,
            w.as_slice(),
            lambda,
            n,
        ));
        if step <= 1e-14 * w.amax().max(1.0) {
            converged = true;
            break;
        }
    }
    if w.iter().chain(&sigmas).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    Ok(FittedAnm {
        weights: w.as_slice().to_vec(),
        sigmas,
        correlation: identity,
        lambda,
        objective: *trace.last().unwrap(),
        degrees: design.basis.degrees(),
        include_bias: design.basis.node_basis(0).spec().include_bias,
        jitter: 0.0,
        warnings: FitWarnings {
            jittered: false,
            max_iterations: !converged,
        },
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitControls {
    pub max_alternations: usize,
    /// Log-σ descent steps per alternation.
    pub inner_steps: usize,
    /// Stop alternating once the relative objective decrease drops below this.
    pub tol: f64,
    /// Joint Newton steps on `(w, log σ)` after the alternations.
    pub polish_steps: usize,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            max_alternations: 100,
            inner_steps: 10,
            tol: 1e-9,
            polish_steps: 20,
        }
    }
}

/// State of the inner problem at a point, with everything the Hessian needs.
pub(crate) struct InnerPoint<'a> {
    pub design: &'a Design,
    pub w: DVector<f64>,
    pub log_sigma: Vec<f64>,
    pub resid: DMatrix<f64>,
    pub scatter: DMatrix<f64>,
    pub prec: DMatrix<f64>,
}

impl<'a> InnerPoint<'a> {
    pub fn new(design: &'a Design, q: &'a DMatrix<f64>, w: DVector<f64>, log_sigma: Vec<f64>) -> Self {
        let resid = design.residuals(w.as_slice());
        let scatter = scatter(&resid);
        let sigmas: Vec<f64> = log_sigma.iter().map(|v| v.exp()).collect();
        let prec = precision(q, &sigmas);
        InnerPoint {
            design,
            w,
            log_sigma,
            resid,
            scatter,
            prec,
        }
    }

    /// Objective without the constant `n log det P`.
    pub fn value(&self, lambda: f64) -> f64 {
        let n = self.design.n() as f64;
        self.prec.component_mul(&self.scatter).sum()
            + lambda * self.w.norm_squared()
            + 2.0 * n * self.log_sigma.iter().sum::<f64>()
    }

    /// `R[k][j] = Σ_i φ_ik r_ij`, stored as a `d x m` matrix.
    pub fn phi_resid(&self) -> DMatrix<f64> {
        let d = self.design.d();
        let m = self.design.m();
        let mut out = DMatrix::zeros(d, m);
        for k in 0..m {
            for c in self.design.basis.block(k) {
                for j in 0..m {
                    out[(c, j)] = self
                        .design
                        .packed
                        .column(c)
                        .dot(&self.resid.column(j));
                }
            }
        }
        out
    }

    /// Gradient of the objective with respect to `(w, log σ)`.
    pub fn gradient(&self, lambda: f64) -> DVector<f64> {
        let d = self.design.d();
        let m = self.design.m();
        let n = self.design.n() as f64;
        let r = self.phi_resid();
        let mut g = DVector::zeros(d + m);
        for k in 0..m {
            for c in self.design.basis.block(k) {
                let s: f64 = (0..m).map(|j| self.prec[(k, j)] * r[(c, j)]).sum();
                g[c] = -2.0 * s + 2.0 * lambda * self.w[c];
            }
        }
        for j in 0..m {
            let s: f64 = (0..m).map(|k| self.prec[(j, k)] * self.scatter[(j, k)]).sum();
            g[d + j] = -2.0 * s + 2.0 * n;
        }
        g
    }

    /// Hessian with respect to `(w, log σ)`.
    pub fn hessian(&self, lambda: f64) -> DMatrix<f64> {
        let d = self.design.d();
        let m = self.design.m();
        let basis = &self.design.basis;
        let stats = SufficientStats::new(self.design);
        let (a, _) = normal_equations(basis, &stats, &self.prec, lambda);
        let r = self.phi_resid();
        let mut h = DMatrix::zeros(d + m, d + m);
        h.view_mut((0, 0), (d, d)).copy_from(&(a * 2.0));
        for j in 0..m {
            let row_sum: f64 = (0..m).map(|l| self.prec[(j, l)] * self.scatter[(j, l)]).sum();
            for k in 0..m {
                for c in basis.block(k) {
                    let mut v = self.prec[(k, j)] * r[(c, j)];
                    if k == j {
                        v += (0..m).map(|l| self.prec[(j, l)] * r[(c, l)]).sum::<f64>();
                    }
                    h[(c, d + j)] = 2.0 * v;
                    h[(d + j, c)] = 2.0 * v;
                }
            }
            for l in 0..m {
                let mut v = 2.0 * self.prec[(j, l)] * self.scatter[(j, l)];
                if j == l {
                    v += 2.0 * row_sum;
                }
                h[(d + j, d + l)] = v;
            }
        }
        h
    }
}

/// Damped Newton (gradient fallback) on `log σ` for fixed residual scatter.
fn update_log_sigma(
    scatter: &DMatrix<f64>,
    q: &DMatrix<f64>,
    log_sigma: &mut [f64],
    n: f64,
    steps: usize,
) {
    let m = log_sigma.len();
    let value = |s: &[f64]| {
        let mut v = 2.0 * n * s.iter().sum::<f64>();
        for j in 0..m {
            for k in 0..m {
                v += q[(j, k)] * scatter[(j, k)] * (-s[j] - s[k]).exp();
            }
        }
        v
    };
    for _ in 0..steps {
        let u: Vec<f64> = log_sigma.iter().map(|v| (-v).exp()).collect();
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for j in 0..m {
            let row: f64 = (0..m).map(|k| q[(j, k)] * scatter[(j, k)] * u[j] * u[k]).sum();
            g[j] = -2.0 * row + 2.0 * n;
            for l in 0..m {
                h[(j, l)] = 2.0 * q[(j, l)] * scatter[(j, l)] * u[j] * u[l];
            }
            h[(j, j)] += 2.0 * row;
        }
        if g.amax() <= 1e-13 * n.max(1.0) {
            break;
        }
        let dir = match Cholesky::new(h) {
            Some(ch) => -ch.solve(&g),
            None => -&g / (2.0 * n.max(1.0)),
        };
        let f0 = value(log_sigma);
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = log_sigma.iter().zip(dir.iter()).map(|(s, d)| s + t * d).collect();
            let f1 = value(&trial);
            if f1.is_finite() && f1 <= f0 + 1e-4 * t * slope {
                log_sigma.copy_from_slice(&trial);
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    for s in log_sigma.iter_mut() {
        *s = s.max(SIGMA_FLOOR.ln());
    }
}

/// Starting point for [`fit_model_b`].
#[derive(Debug, Clone)]
pub struct WarmStart {
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl From<&FittedAnm> for WarmStart {
    fn from(f: &FittedAnm) -> Self {
        WarmStart {
            weights: f.weights.clone(),
            sigmas: f.sigmas.clone(),
        }
    }
}

/// Confounded fit with the error correlation matrix held fixed at `p`.
///
/// Alternates the closed-form GLS weight update with log-σ descent steps until the
/// relative objective decrease falls below `controls.tol`, then refines with joint
/// Newton steps. The objective never increases from one recorded step to the next.
pub fn fit_model_b(
    design: &Design,
    lambda: f64,
    p: &DMatrix<f64>,
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<FittedAnm> {
    check_lambda(lambda)?;
    let m = design.m();
    if p.nrows() != m || p.ncols() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: p.nrows(),
        });
    }
    if (0..m).any(|j| p[(j, j)] != 1.0) || (p - p.transpose()).amax() > 1e-12 {
        return Err(Error::InvalidCorrelation(
            "correlation matrix must be symmetric with unit diagonal".into(),
        ));
    }
    let factor = CorrelationFactor::new(p)?;
    let state = solve_inner(design, lambda, &factor, controls, warm)?;
    let n = design.n() as f64;
    Ok(FittedAnm {
        weights: state.weights,
        sigmas: state.sigmas,
        correlation: p.clone(),
        lambda,
        objective: state.objective + n * factor.log_det,
        degrees: design.basis.degrees(),
        include_bias: design.basis.node_basis(0).spec().include_bias,
        jitter: factor.jitter,
        warnings: FitWarnings {
            jittered: factor.jitter > 0.0,
            max_iterations: state.hit_limit,
        },
        objective_trace: state
            .trace
            .into_iter()
            .map(|v| v + n * factor.log_det)
            .collect(),
    })
}

pub(crate) struct InnerSolution {
    pub weights: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Objective without `n log det P`.
    pub objective: f64,
    pub trace: Vec<f64>,
    pub hit_limit: bool,
}

pub(crate) fn solve_inner(
    design: &Design,
    lambda: f64,
    factor: &CorrelationFactor,
    controls: &FitControls,
    warm: Option<&WarmStart>,
) -> Result<InnerSolution> {
    let m = design.m();
    let d = design.d();
    let n = design.n() as f64;
    let q = &factor.inverse;
    let stats = SufficientStats::new(design);
    let mut log_sigma: Vec<f64> = match warm {
        Some(ws) if ws.sigmas.len() == m => ws.sigmas.iter().map(|s| s.max(SIGMA_FLOOR).ln()).collect(),
        _ => vec![0.0; m],
    };
    let mut w = match warm {
        Some(ws) if ws.weights.len() == d => DVector::from_column_slice(&ws.weights),
        _ => {
            let sig: Vec<f64> = log_sigma.iter().map(|v| v.exp()).collect();
            gls_weights(&design.basis, &stats, &precision(q, &sig), lambda)?
        }
    };

    let mut trace = Vec::new();
    let mut current = InnerPoint::new(design, q, w.clone(), log_sigma.clone()).value(lambda);
    if !current.is_finite() {
        return Err(Error::NonFiniteData);
    }
    let mut settled = false;
    for _ in 0..controls.max_alternations {
        let sig: Vec<f64> = log_sigma.iter().map(|v| v.exp()).collect();
        let w_next = gls_weights(&design.basis, &stats, &precision(q, &sig), lambda)?;
        let s = scatter(&design.residuals(w_next.as_slice()));
        let mut ls_next = log_sigma.clone();
        update_log_sigma(&s, q, &mut ls_next, n, controls.inner_steps);
        let value = InnerPoint::new(design, q, w_next.clone(), ls_next.clone()).value(lambda);
        if !value.is_finite() {
            return Err(Error::NonFiniteData);
        }
        // Both block updates are exact or descent steps, so a rise is rounding noise.
        if value > current {
            settled = true;
            break;
        }
        let decrease = current - value;
        w = w_next;
        log_sigma = ls_next;
        current = value;
        trace.push(current);
        if decrease <= controls.tol * current.abs().max(1.0) {
            settled = true;
            break;
        }
    }

    let mut polished = false;
    for _ in 0..controls.polish_steps {
        let point = InnerPoint::new(design, q, w.clone(), log_sigma.clone());
        let g = point.gradient(lambda);
        if g.amax() <= 1e-12 * n.max(1.0) {
            polished = true;
            break;
        }
        let Some(ch) = Cholesky::new(point.hessian(lambda)) else {
            break;
        };
        let step = -ch.solve(&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let w_try = &w + step.rows(0, d) * t;
            let ls_try: Vec<f64> = log_sigma
                .iter()
                .enumerate()
                .map(|(j, s)| s + t * step[d + j])
                .collect();
            let trial = InnerPoint::new(design, q, w_try.clone(), ls_try.clone());
            let v = trial.value(lambda);
            // Near the optimum the objective is flat to rounding; a full Newton step
            // that shrinks the gradient is still progress.
            let flat = t == 1.0
                && v <= current + 1e-13 * current.abs().max(1.0)
                && trial.gradient(lambda).amax() < g.amax();
            if v.is_finite() && (v <= current || flat) {
                if v <= current {
                    trace.push(v);
                }
                w = w_try;
                log_sigma = ls_try;
                current = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            polished = true;
            break;
        }
        if step.amax() * t <= 1e-15 * (1.0 + w.amax()) {
            polished = true;
            break;
        }
    }
    if trace.is_empty() {
        trace.push(current);
    }
    Ok(InnerSolution {
        weights: w.as_slice().to_vec(),
        sigmas: log_sigma.iter().map(|v| v.exp()).collect(),
        objective: current,
        trace,
        hit_limit: !(settled || polished),
    })
}

/// Counterfactual features for one sample under `A <- a_cf`, holding the abducted
/// errors `x - Φ w` fixed.
///
/// Features are revisited in topological order and each is recomputed from its
/// counterfactual parents: `x'_j = φ_j(a', x'_pa)ᵀ w_j + δ_j`. The value is formed
/// as `x_j + (φ_j(a', x'_pa) - φ_j(a, x_pa))ᵀ w_j`, which is the same quantity and
/// returns `x` bit for bit when nothing changes.
pub fn counterfactual(basis: &StructuralBasis, w: &[f64], a: f64, x: &[f64], a_cf: f64) -> Vec<f64> {
    let m = basis.num_features();
    let mut out = x.to_vec();
    for j in 0..m {
        let block = basis.block(j);
        let factual = basis.node_features(j, a, x);
        let cf = basis.node_features(j, a_cf, &out);
        let shift: f64 = factual
            .iter()
            .zip(&cf)
            .zip(&w[block])
            .map(|((f, c), w)| (c - f) * w)
            .sum();
        out[j] = x[j] + shift;
    }
    out
}

/// Counterfactual from an explicit residual: `x'_j = φ_j(a', x'_pa)ᵀ w_j + δ_j`.
pub fn counterfactual_from_residual(
    basis: &StructuralBasis,
    w: &[f64],
    residual: &[f64],
    a_cf: f64,
) -> Vec<f64> {
    let m = basis.num_features();
    let mut out = vec![0.0; m];
    for j in 0..m {
        let cf = basis.node_features(j, a_cf, &out);
        out[j] = cf.iter().zip(&w[basis.block(j)]).map(|(c, w)| c * w).sum::<f64>() + residual[j];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CausalGraph;
    use crate::io::{generate, SyntheticSpec};

    fn law_design(n: usize, p: f64, seed: u64) -> Design {
        let data = generate(&SyntheticSpec::law_school(n, p, seed)).unwrap();
        let basis = StructuralBasis::uniform(&CausalGraph::law_school(), 1).unwrap();
        Design::new(&basis, &data).unwrap()
    }

    #[test]
    fn noiseless_recovery() {
        // L is an exact function of its parents; G keeps its noise so that G and A are
        // not collinear. The G equation then has the group-mean solution.
        let mut spec = SyntheticSpec::law_school(300, 0.0, 2);
        spec.sigmas = vec![1.0, 0.0];
        let data = generate(&spec).unwrap();
        let basis = StructuralBasis::uniform(&CausalGraph::law_school(), 1).unwrap();
        let design = Design::new(&basis, &data).unwrap();
        let fit = fit_model_a(&design, 1e-10).unwrap();
        for (w, t) in fit.weights[2..].iter().zip(&spec.weights[2..]) {
            assert!((w - t).abs() < 1e-6, "{w} vs {t}");
        }
        let group_mean = |grp: f64| {
            let vals: Vec<f64> = data
                .protected
                .iter()
                .zip(&data.features)
                .filter(|(a, _)| **a == grp)
                .map(|(_, x)| x[0])
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let (m0, m1) = (group_mean(0.0), group_mean(1.0));
        assert!((fit.weights[0] - m0).abs() < 1e-6);
        assert!((fit.weights[1] - (m1 - m0)).abs() < 1e-6);
    }

    #[test]
    fn bias_only_equation_gives_mean_and_std() {
        let g = crate::graph::validate(&crate::graph::GraphSpec::new("A", &["X"], &[])).unwrap();
        let basis = StructuralBasis::uniform(&g, 1).unwrap();
        let data = Dataset {
            protected_name: "A".into(),
            target_name: "Y".into(),
            feature_names: vec!["X".into()],
            protected: vec![0.0, 1.0, 0.0, 1.0],
            features: vec![vec![1.0], vec![2.0], vec![3.0], vec![6.0]],
            target: vec![0.0; 4],
            feature_stats: None,
            dropped_rows: 0,
        };
        let design = Design::new(&basis, &data).unwrap();
        let fit = fit_model_a(&design, 0.0).unwrap();
        assert!((fit.weights[0] - 3.0).abs() < 1e-12);
        let std = ((4.0 + 1.0 + 0.0 + 9.0) / 4.0f64).sqrt();
        assert!((fit.sigmas[0] - std).abs() < 1e-12);
    }

    #[test]
    fn model_b_identity_matches_model_a() {
        let design = law_design(400, 0.3, 5);
        let a = fit_model_a(&design, 0.5).unwrap();
        let b = fit_model_b(&design, 0.5, &DMatrix::identity(2, 2), &FitControls::default(), None).unwrap();
        for (x, y) in a.weights.iter().zip(&b.weights) {
            assert!((x - y).abs() < 1e-8);
        }
        for (x, y) in a.sigmas.iter().zip(&b.sigmas) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!((a.objective - b.objective).abs() < 1e-8 * a.objective.abs().max(1.0));
    }

    #[test]
    fn model_b_objective_monotone_and_stationary() {
        let design = law_design(300, 0.5, 9);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let fit = fit_model_b(&design, 0.1, &p, &FitControls::default(), None).unwrap();
        for pair in fit.objective_trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        let g = weight_stationarity(&design, &fit.weights, &fit.sigmas, &p, 0.1).unwrap();
        assert!(g <= 1e-6, "stationarity {g}");
        let direct = objective(&design, &fit.weights, &fit.sigmas, &p, 0.1).unwrap();
        assert!((direct - fit.objective).abs() < 1e-9 * direct.abs());
        // Model A parameters evaluated under the confounded covariance can only be worse.
        let a = fit_model_a(&design, 0.1).unwrap();
        let a_under_b = objective(&design, &a.weights, &a.sigmas, &p, 0.1).unwrap();
        assert!(fit.objective <= a_under_b);
    }

    #[test]
    fn nearly_singular_correlation() {
        let design = law_design(200, 0.5, 1);
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.999, 0.999, 1.0]);
        let fit = fit_model_b(&design, 0.1, &p, &FitControls::default(), None).unwrap();
        assert!(fit.objective.is_finite());
        assert_eq!(fit.warnings.jittered, fit.jitter > 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        assert!(matches!(
            fit_model_b(&design, 0.1, &bad, &FitControls::default(), None),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn residual_identities() {
        let design = law_design(50, 0.2, 3);
        let zero = vec![0.0; design.d()];
        assert_eq!(residuals(&zero, &design).0, design.x);
        let fit = fit_model_a(&design, 0.1).unwrap();
        let r = fit.residuals(&design);
        for i in 0..design.n() {
            let packed: Vec<f64> = design.packed.row(i).iter().copied().collect();
            let fitted = design.basis.apply(&packed, &fit.weights);
            for j in 0..2 {
                assert!((fitted[j] + r.0[(i, j)] - design.x[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counterfactual_by_hand() {
        let basis = StructuralBasis::uniform(&CausalGraph::law_school(), 1).unwrap();
        // w_G = (bias, a), w_L = (bias, a, g)
        let w = [0.3, -1.1, 0.2, 0.5, 0.8];
        let (a, g, l) = (1.0, 0.4, -0.7);
        let dg = g - (0.3 - 1.1 * a);
        let dl = l - (0.2 + 0.5 * a + 0.8 * g);
        let a_cf = 0.0;
        let g_cf = 0.3 - 1.1 * a_cf + dg;
        let l_cf = 0.2 + 0.5 * a_cf + 0.8 * g_cf + dl;
        let got = counterfactual(&basis, &w, a, &[g, l], a_cf);
        assert!((got[0] - g_cf).abs() < 1e-14);
        assert!((got[1] - l_cf).abs() < 1e-14);
        let from_resid = counterfactual_from_residual(&basis, &w, &[dg, dl], a_cf);
        assert!((from_resid[0] - g_cf).abs() < 1e-14);
        assert!((from_resid[1] - l_cf).abs() < 1e-14);
    }

    #[test]
    fn counterfactual_identity_and_zero_weights() {
        let basis = StructuralBasis::uniform(&CausalGraph::nhs(), 2).unwrap();
        let w: Vec<f64> = (0..basis.dim()).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = [0.3, -0.2, 1.4];
        assert_eq!(counterfactual(&basis, &w, 1.0, &x, 1.0), x.to_vec());
        assert_eq!(counterfactual(&basis, &vec![0.0; basis.dim()], 1.0, &x, 0.0), x.to_vec());
        let there = counterfactual(&basis, &w, 1.0, &x, 0.0);
        let back = counterfactual(&basis, &w, 0.0, &there, 1.0);
        for (b, o) in back.iter().zip(&x) {
            assert!((b - o).abs() < 1e-12);
        }
    }
}

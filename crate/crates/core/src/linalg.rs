//! Small dense helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Diagonal additions tried, in order, when a plain Cholesky factorization fails.
pub const JITTER_LADDER: [f64; 4] = [1e-12, 1e-10, 1e-8, 1e-6];

/// Cholesky factor of a symmetric matrix plus the jitter that had to be added to the
/// diagonal (zero when none was needed).
pub struct JitteredCholesky {
    pub factor: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<JitteredCholesky> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    if let Some(factor) = Cholesky::new(matrix.clone()) {
        return Ok(JitteredCholesky { factor, jitter: 0.0 });
    }
    let n = matrix.nrows();
    for &jitter in &JITTER_LADDER {
        let shifted = matrix + DMatrix::identity(n, n) * jitter;
        if let Some(factor) = Cholesky::new(shifted) {
            return Ok(JitteredCholesky { factor, jitter });
        }
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Solves the symmetric positive definite system `a x = b`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = Cholesky::new(a.clone()).ok_or(Error::SingularNormalEquations)?;
    let x = chol.solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularNormalEquations);
    }
    Ok(x)
}

/// Ridge regression `min |y - X t|^2 + lambda |t|^2` in closed form.
pub fn ridge(design: &DMatrix<f64>, target: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if design.iter().chain(target.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteData);
    }
    let p = design.ncols();
    let mut gram = design.tr_mul(design);
    for i in 0..p {
        gram[(i, i)] += lambda;
    }
    let rhs = design.tr_mul(target);
    match Cholesky::new(gram.clone()) {
        Some(chol) => Ok(chol.solve(&rhs)),
        None if lambda == 0.0 => {
            // Rank deficiency at zero regularization is only an error when the system
            // genuinely has no unique solution.
            let lu = gram.lu();
            lu.solve(&rhs)
                .filter(|x| x.iter().all(|v| v.is_finite()))
                .ok_or(Error::SingularNormalEquations)
        }
        None => Err(Error::SingularNormalEquations),
    }
}

/// `log det` of a matrix from its Cholesky factor.
pub fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    chol.l_dirty()
        .diagonal()
        .iter()
        .map(|v| 2.0 * v.ln())
        .sum()
}

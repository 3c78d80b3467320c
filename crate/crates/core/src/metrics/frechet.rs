use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default multiplier applied to embeddings before computing the distance.
pub const DEFAULT_FRECHET_SCALE: f64 = 10.0;

/// Relative size under which a distance is reported as exactly zero.
const ZERO_TOLERANCE: f64 = 1e-10;

fn moments(rows: &[Vec<f64>], scale: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = rows.len();
    if m < 2 {
        return Err(Error::Input(format!("Fréchet distance needs at least 2 embeddings, got {m}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Input("embeddings must share one nonzero dimension".into()));
    }
    let x = DMatrix::from_fn(m, d, |i, j| rows[i][j] * scale);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(m, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (m - 1) as f64;
    if !cov.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("covariance is not finite".into()));
    }
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two embedding sets
/// (rows are embeddings, covariances unbiased). `tr sqrt(S1 S2)` is taken
/// as `tr sqrt(sqrt(S1) S2 sqrt(S1))` with negative eigenvalues clamped.
pub fn frechet_distance(real: &[Vec<f64>], generated: &[Vec<f64>], scale: f64) -> Result<f64> {
    let (mu1, s1) = moments(real, scale)?;
    let (mu2, s2) = moments(generated, scale)?;
    if mu1.len() != mu2.len() {
        return Err(Error::shape("frechet_distance", &[mu1.len()], &[mu2.len()]));
    }
    let r1 = sym_sqrt(&s1);
    let mut inner = &r1 * &s2 * &r1;
    // symmetrize away roundoff before the symmetric solver
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let mean_term = (&mu1 - &mu2).norm_squared();
    let traces = s1.trace() + s2.trace();
    let fd = mean_term + traces - 2.0 * cross;
    if !fd.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(if fd <= ZERO_TOLERANCE * (1.0 + traces + mean_term) { 0.0 } else { fd })
}

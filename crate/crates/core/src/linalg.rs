//! Small dense helpers: SPD factorizations, Gaussian and Inverse-Wishart
//! sampling, multivariate log-gamma.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone().cholesky().ok_or_else(|| Error::npd(what.to_string()))
}

pub fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(symmetrize(cholesky(m, what)?.inverse()))
}

pub fn log_det_spd(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let ch = cholesky(m, what)?;
    Ok(ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0)
}

pub fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// `ln Γ_d(a)`
pub fn ln_mvgamma(d: usize, a: f64) -> f64 {
    let df = d as f64;
    df * (df - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (1..=d).map(|k| ln_gamma(a + (1.0 - k as f64) / 2.0)).sum::<f64>()
}

pub fn standard_normals<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draw from `N(mean, L L^T)` given the lower Cholesky factor `l`.
pub fn mvn_from_factor<R: Rng + ?Sized>(mean: &[f64], l: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let z = standard_normals(mean.len(), rng);
    let shift = l * z;
    mean.iter().zip(shift.iter()).map(|(m, s)| m + s).collect()
}

/// Draw from `IW(nu, phi)` (density `∝ |Σ|^{-(nu+d+1)/2} exp(-tr(phi Σ^{-1})/2)`)
/// by inverting a Bartlett-decomposition draw from `Wishart(nu, phi^{-1})`.
pub fn sample_inverse_wishart<R: Rng + ?Sized>(nu: f64, phi: &DMatrix<f64>, rng: &mut R) -> Result<DMatrix<f64>> {
    let d = phi.nrows();
    if nu <= d as f64 - 1.0 {
        return Err(Error::InvalidArgument(format!("Inverse-Wishart degrees of freedom {nu} too small for dimension {d}")));
    }
    let phi_inv = spd_inverse(phi, "Inverse-Wishart scale")?;
    let l = cholesky(&phi_inv, "Inverse-Wishart scale")?.l();
    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        let chi = ChiSquared::new(nu - i as f64).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    let wishart = &la * la.transpose();
    spd_inverse(&wishart, "Wishart draw")
}

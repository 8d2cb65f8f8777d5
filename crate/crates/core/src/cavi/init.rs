use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::engine::Cavi;
use super::state::{Covariance, Scheme, VariationalState};
use crate::design::DesignSet;
use crate::error::Result;
use crate::linalg::{sample_inverse_wishart, symmetrize};
use crate::normal_eq::NormalSystem;
use crate::pgamma::PgParams;
use crate::prior::{InverseWishart, PriorSpec};

/// Ridge penalty on the random effects during the initial IRLS run.
pub const DEFAULT_RIDGE: f64 = 1.0;

/// Number of IRLS iterations used by [`init_em`].
pub const IRLS_ITERATIONS: usize = 25;

/// Deterministic start: penalized IRLS means, then one covariance pass and
/// one Polya-Gamma pass at those means.
pub fn init_em(d: &DesignSet, prior: &PriorSpec, scheme: Scheme) -> Result<VariationalState> {
    init_em_with(d, prior, scheme, DEFAULT_RIDGE)
}

pub fn init_em_with(d: &DesignSet, prior: &PriorSpec, scheme: Scheme, ridge: f64) -> Result<VariationalState> {
    d.check_full_rank()?;
    let (beta, alpha) = penalized_irls(d, ridge, IRLS_ITERATIONS)?;

    let iw = d
        .meta
        .effects
        .iter()
        .zip(&prior.effects)
        .map(|(e, pr)| {
            let mut phi = pr.phi.clone();
            for g in 0..e.n_groups() {
                let m = nalgebra::DVector::from_column_slice(&alpha[e.group_range(g)]);
                phi += &m * m.transpose();
            }
            InverseWishart { nu: pr.nu + e.n_groups() as f64, phi: symmetrize(phi) }
        })
        .collect();
    let mut state = VariationalState {
        scheme,
        mu_beta: beta,
        mu_alpha: alpha,
        cov: Covariance::zeros(scheme, &d.meta),
        cov_is_zero: true,
        pg: PgParams::new(d.n.clone(), vec![0.0; d.n_obs()]),
        iw,
    };
    let mut cavi = Cavi::new(d, prior)?;
    cavi.update_pg(&mut state)?;
    cavi.update_covariances(&mut state)?;
    cavi.update_pg(&mut state)?;
    Ok(state)
}

/// Random start: standard normal means, zero covariances and `Φ̃_j` drawn from
/// `IW(d_j + 1, I)`.
pub fn init_random<R: Rng + ?Sized>(d: &DesignSet, prior: &PriorSpec, scheme: Scheme, rng: &mut R) -> Result<VariationalState> {
    let mu_beta = (0..d.p()).map(|_| StandardNormal.sample(rng)).collect();
    let mu_alpha = (0..d.q()).map(|_| StandardNormal.sample(rng)).collect();
    let mut iw = Vec::with_capacity(d.meta.effects.len());
    for (e, pr) in d.meta.effects.iter().zip(&prior.effects) {
        let dim = e.dim();
        let phi = sample_inverse_wishart(dim as f64 + 1.0, &DMatrix::identity(dim, dim), rng)?;
        iw.push(InverseWishart { nu: pr.nu + e.n_groups() as f64, phi });
    }
    let mut state = VariationalState {
        scheme,
        mu_beta,
        mu_alpha,
        cov: Covariance::zeros(scheme, &d.meta),
        cov_is_zero: true,
        pg: PgParams::new(d.n.clone(), vec![0.0; d.n_obs()]),
        iw,
    };
    Cavi::new(d, prior)?.update_pg(&mut state)?;
    Ok(state)
}

/// Newton iterations for the binomial logit model with penalty
/// `ridge/2 |alpha|^2` and a flat prior on `beta`.
pub fn penalized_irls(d: &DesignSet, ridge: f64, iterations: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = d.p();
    let precisions: Vec<DMatrix<f64>> = d.meta.effects.iter().map(|e| DMatrix::identity(e.dim(), e.dim()) * ridge).collect();
    let mut sys = NormalSystem::new(d, true);
    let mut beta = vec![0.0; p];
    let mut alpha = vec![0.0; d.q()];
    let mut w = vec![0.0; d.n_obs()];
    let mut work = vec![0.0; d.n_obs()];
    for _ in 0..iterations {
        let eta = d.linear_predictor(&beta, &alpha)?;
        for i in 0..d.n_obs() {
            let pr = 1.0 / (1.0 + (-eta[i]).exp());
            w[i] = (d.n[i] * pr * (1.0 - pr)).max(1e-8 * d.n[i]);
            work[i] = w[i] * eta[i] + d.y[i] - d.n[i] * pr;
        }
        sys.refresh(d, &w, &precisions, 0.0)?;
        let mut rhs: Vec<f64> = d.x.tr_mul(&nalgebra::DVector::from_column_slice(&work)).iter().copied().collect();
        rhs.extend(d.z.tr_mul_vec(&work));
        let theta = sys.solve(&rhs);
        beta.copy_from_slice(&theta[..p]);
        alpha.copy_from_slice(&theta[p..]);
    }
    Ok((beta, alpha))
}

//! Polya-Gamma Gibbs sampler for the full model, used as a reference
//! posterior.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cavi::{penalized_irls, DEFAULT_RIDGE, IRLS_ITERATIONS};
use crate::design::DesignSet;
use crate::draws::{PosteriorDraws, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, sample_inverse_wishart, spd_inverse, standard_normals, symmetrize};
use crate::mavb::assemble;
use crate::normal_eq::NormalSystem;
use crate::pgamma::pg_sample;
use crate::prior::PriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptions {
    /// Sweeps after burn-in.
    pub iters: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Marginal-augmentation recentring after every sweep.
    pub augment: bool,
    pub keep_omega: bool,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions { iters: 10_000, burn_in: 2000, thin: 1, augment: true, keep_omega: false }
    }
}

#[derive(Debug, Clone)]
pub struct GibbsChain {
    pub draws: PosteriorDraws,
    /// `stored x N` auxiliary draws, when requested.
    pub omega: Option<DMatrix<f64>>,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl GibbsChain {
    /// Posterior means of `beta` and `alpha` with their batch-means standard
    /// errors.
    pub fn summary(&self) -> ChainSummary {
        let cols: Vec<Vec<f64>> = (0..self.draws.beta.ncols())
            .map(|k| self.draws.beta_column(k))
            .chain((0..self.draws.alpha.ncols()).map(|k| self.draws.alpha_column(k)))
            .collect();
        let (mean, se) = cols.iter().map(|c| (c.iter().sum::<f64>() / c.len() as f64, batch_means_se(c))).unzip();
        ChainSummary { names: self.draws.coefficient_columns().into_iter().map(|(n, _)| n).collect(), mean, se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
}

/// Monte Carlo standard error of a chain mean from `floor(sqrt(n))`
/// non-overlapping batches.
pub fn batch_means_se(x: &[f64]) -> f64 {
    let n = x.len();
    let b = (n as f64).sqrt().floor() as usize;
    if b < 2 {
        return f64::NAN;
    }
    let size = n / b;
    let means: Vec<f64> = x.chunks_exact(size).take(b).map(|c| c.iter().sum::<f64>() / size as f64).collect();
    let grand = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

fn integer_trials(d: &DesignSet) -> Result<Vec<u32>> {
    d.n.iter()
        .enumerate()
        .map(|(i, &n)| {
            if n >= 1.0 && n.fract() == 0.0 && n <= u32::MAX as f64 {
                Ok(n as u32)
            } else {
                Err(Error::data(format!("row {i}: Gibbs sampling needs an integer trial count >= 1, got {n}")))
            }
        })
        .collect()
}

/// Draws `(beta, alpha)` from `N(A^{-1}[X,Z]^T s, A^{-1})` with
/// `A = [X,Z]^T Ω [X,Z] + T`.
pub(crate) fn sample_coefficients(
    sys: &mut NormalSystem,
    d: &DesignSet,
    omega: &[f64],
    precisions: &[DMatrix<f64>],
    rhs: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    sys.refresh(d, omega, precisions, 0.0)?;
    let mean = sys.solve(rhs);
    Ok(sys.sample(&mean, rng))
}

pub fn gibbs_run(d: &DesignSet, prior: &PriorSpec, opts: &GibbsOptions, seed: u64) -> Result<GibbsChain> {
    prior.check(&d.meta)?;
    if opts.thin == 0 {
        return Err(Error::InvalidArgument("thin must be at least 1".into()));
    }
    let trials = integer_trials(d)?;
    let meta = &d.meta;
    let p = d.p();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (mut beta, mut alpha) = penalized_irls(d, DEFAULT_RIDGE, IRLS_ITERATIONS)?;
    let mut sigma: Vec<DMatrix<f64>> = Vec::with_capacity(meta.effects.len());
    for (e, iw) in meta.effects.iter().zip(&prior.effects) {
        let mut phi = iw.phi.clone();
        for g in 0..e.n_groups() {
            let a = DVector::from_column_slice(&alpha[e.group_range(g)]);
            phi += &a * a.transpose();
        }
        sigma.push(phi / (iw.nu + e.n_groups() as f64));
    }

    let mut rhs: Vec<f64> = d.x.tr_mul(&DVector::from_column_slice(&d.s)).iter().copied().collect();
    rhs.extend(d.z.tr_mul_vec(&d.s));
    let mut sys = NormalSystem::new(d, true);
    let mut omega = vec![0.0; d.n_obs()];

    let total = opts.burn_in + opts.iters;
    let mut rows = Vec::with_capacity(opts.iters / opts.thin + 1);
    let mut omega_rows: Vec<Vec<f64>> = Vec::new();
    for sweep in 0..total {
        let psi = d.linear_predictor(&beta, &alpha)?;
        for i in 0..omega.len() {
            omega[i] = pg_sample(trials[i], psi[i], &mut rng);
        }

        let precisions = sigma.iter().map(|s| spd_inverse(s, "covariance draw")).collect::<Result<Vec<_>>>()?;
        let theta = sample_coefficients(&mut sys, d, &omega, &precisions, &rhs, &mut rng)?;
        beta.copy_from_slice(&theta[..p]);
        alpha.copy_from_slice(&theta[p..]);

        for (j, (e, iw)) in meta.effects.iter().zip(&prior.effects).enumerate() {
            let mut phi = iw.phi.clone();
            for g in 0..e.n_groups() {
                let a = DVector::from_column_slice(&alpha[e.group_range(g)]);
                phi += &a * a.transpose();
            }
            sigma[j] = sample_inverse_wishart(iw.nu + e.n_groups() as f64, &symmetrize(phi), &mut rng)?;
        }

        if opts.augment {
            recentre(&mut beta, &mut alpha, d, &sigma, &mut rng)?;
        }

        if sweep >= opts.burn_in && (sweep - opts.burn_in).is_multiple_of(opts.thin) {
            rows.push((beta.clone(), alpha.clone(), sigma.clone()));
            if opts.keep_omega {
                omega_rows.push(omega.clone());
            }
        }
    }

    let omega = opts.keep_omega.then(|| {
        DMatrix::from_fn(omega_rows.len(), d.n_obs(), |m, i| omega_rows[m][i])
    });
    let provenance = Provenance::Gibbs { burn_in: opts.burn_in, thin: opts.thin, augmented: opts.augment };
    Ok(GibbsChain { draws: assemble(meta, rows, provenance, seed), omega, burn_in: opts.burn_in, thin: opts.thin, seed })
}

/// Moves every group of effect `j` by `-μ_j` and the mapped fixed effects by
/// `+μ_j`, with `μ_j ~ N(ᾱ_j, Σ_j / g_j)`. The likelihood is unchanged and the
/// move leaves the posterior invariant.
fn recentre(beta: &mut [f64], alpha: &mut [f64], d: &DesignSet, sigma: &[DMatrix<f64>], rng: &mut ChaCha8Rng) -> Result<()> {
    let meta = &d.meta;
    let mut shifts = Vec::with_capacity(meta.effects.len());
    for (e, s) in meta.effects.iter().zip(sigma) {
        let ng = e.n_groups() as f64;
        let mut mean = DVector::zeros(e.dim());
        for g in 0..e.n_groups() {
            mean += DVector::from_column_slice(&alpha[e.group_range(g)]);
        }
        mean /= ng;
        let l = cholesky(&(s / ng), "covariance draw")?.l();
        let mu = mean + l * standard_normals(e.dim(), rng);
        for g in 0..e.n_groups() {
            for k in 0..e.dim() {
                alpha[e.index(g, k)] -= mu[k];
            }
        }
        shifts.push(mu.iter().copied().collect::<Vec<f64>>());
    }
    meta.add_mapped(beta, &shifts);
    Ok(())
}

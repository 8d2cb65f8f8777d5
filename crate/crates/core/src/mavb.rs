//! Sampling from the fitted approximation and marginally augmented
//! post-processing of those draws.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::cavi::{Covariance, VariationalState};
use crate::design::DesignMeta;
use crate::draws::{draw_rng, PosteriorDraws, Provenance};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_from_factor, sample_inverse_wishart, standard_normals};

/// Default number of posterior draws.
pub const DEFAULT_DRAWS: usize = 4000;

/// Lower Cholesky factor; an all-zero matrix factors to zero so degenerate
/// approximations reproduce their means.
fn factor(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(cholesky(m, what)?.l())
}

enum GaussFactor {
    Factorized { beta: DMatrix<f64>, alpha: Vec<Vec<DMatrix<f64>>> },
    Partial { beta: DMatrix<f64>, alpha: DMatrix<f64> },
    Joint(DMatrix<f64>),
}

/// `draws` independent samples of `(beta, alpha, Σ)` from `q`. The
/// Polya-Gamma factor is not sampled.
pub fn sample_q(state: &VariationalState, meta: &DesignMeta, draws: usize, seed: u64) -> Result<PosteriorDraws> {
    let (p, q) = (meta.p(), meta.q());
    if state.mu_beta.len() != p || state.mu_alpha.len() != q {
        return Err(Error::Dimension { what: "variational state", expected: p + q, found: state.mu_beta.len() + state.mu_alpha.len() });
    }
    let gf = match &state.cov {
        Covariance::Factorized { beta, alpha } => GaussFactor::Factorized {
            beta: factor(beta, "fixed-effect covariance")?,
            alpha: alpha
                .iter()
                .map(|blocks| blocks.iter().map(|b| factor(b, "random-effect covariance")).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?,
        },
        Covariance::Partial { beta, alpha, .. } => GaussFactor::Partial {
            beta: factor(beta, "fixed-effect covariance")?,
            alpha: factor(alpha, "random-effect covariance")?,
        },
        Covariance::Joint { full, .. } => GaussFactor::Joint(factor(full, "joint covariance")?),
    };
    let joint_mean: Vec<f64> = state.mu_beta.iter().chain(&state.mu_alpha).copied().collect();

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<DMatrix<f64>>)> = (0..draws)
        .into_par_iter()
        .map(|m| {
            let mut rng = draw_rng(seed, m);
            let (beta, alpha) = match &gf {
                GaussFactor::Factorized { beta, alpha } => {
                    let b = mvn_from_factor(&state.mu_beta, beta, &mut rng);
                    let mut a = vec![0.0; q];
                    for (e, blocks) in meta.effects.iter().zip(alpha) {
                        for (g, l) in blocks.iter().enumerate() {
                            let r = e.group_range(g);
                            a[r.clone()].copy_from_slice(&mvn_from_factor(&state.mu_alpha[r], l, &mut rng));
                        }
                    }
                    (b, a)
                }
                GaussFactor::Partial { beta, alpha } => {
                    (mvn_from_factor(&state.mu_beta, beta, &mut rng), mvn_from_factor(&state.mu_alpha, alpha, &mut rng))
                }
                GaussFactor::Joint(l) => {
                    let theta = mvn_from_factor(&joint_mean, l, &mut rng);
                    (theta[..p].to_vec(), theta[p..].to_vec())
                }
            };
            let sigma = state
                .iw
                .iter()
                .map(|iw| sample_inverse_wishart(iw.nu, &iw.phi, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok((beta, alpha, sigma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(meta, rows, Provenance::RawQ, seed))
}

pub(crate) fn assemble(
    meta: &DesignMeta,
    rows: Vec<(Vec<f64>, Vec<f64>, Vec<DMatrix<f64>>)>,
    provenance: Provenance,
    seed: u64,
) -> PosteriorDraws {
    let m = rows.len();
    let mut beta = DMatrix::zeros(m, meta.p());
    let mut alpha = DMatrix::zeros(m, meta.q());
    let mut sigma = vec![Vec::with_capacity(m); meta.effects.len()];
    for (i, (b, a, s)) in rows.into_iter().enumerate() {
        beta.row_mut(i).iter_mut().zip(b).for_each(|(t, v)| *t = v);
        alpha.row_mut(i).iter_mut().zip(a).for_each(|(t, v)| *t = v);
        for (j, sj) in s.into_iter().enumerate() {
            sigma[j].push(sj);
        }
    }
    PosteriorDraws { meta: meta.clone(), beta, alpha, sigma, provenance, seed }
}

fn require_raw(draws: &PosteriorDraws) -> Result<()> {
    match draws.provenance {
        Provenance::RawQ => Ok(()),
        other => Err(Error::InvalidArgument(format!("MAVB expects raw variational draws, got {other:?}"))),
    }
}

/// Per-effect average of the group coefficients in one draw.
fn group_average(alpha: &[f64], meta: &DesignMeta, j: usize) -> DVector<f64> {
    let e = &meta.effects[j];
    let mut avg = DVector::zeros(e.dim());
    for g in 0..e.n_groups() {
        for k in 0..e.dim() {
            avg[k] += alpha[e.index(g, k)];
        }
    }
    avg / e.n_groups() as f64
}

/// `alpha_{j,g} -= shift_j` for every group, `beta += Σ_j M_j shift_j`.
fn apply_shift(beta: &mut [f64], alpha: &mut [f64], meta: &DesignMeta, shifts: &[Vec<f64>]) {
    for (e, s) in meta.effects.iter().zip(shifts) {
        for g in 0..e.n_groups() {
            for (k, v) in s.iter().enumerate() {
                alpha[e.index(g, k)] -= v;
            }
        }
    }
    meta.add_mapped(beta, shifts);
}

fn transform<F>(draws: &PosteriorDraws, seed: u64, provenance: Provenance, f: F) -> Result<PosteriorDraws>
where
    F: Fn(&mut rand_chacha::ChaCha8Rng, &mut [f64], &mut [f64], &[DMatrix<f64>]) -> Result<()> + Sync,
{
    let meta = &draws.meta;
    let rows = (0..draws.len())
        .into_par_iter()
        .map(|m| {
            let mut rng = draw_rng(seed, m);
            let mut beta = draws.beta_draw(m);
            let mut alpha = draws.alpha_draw(m);
            let sigma: Vec<DMatrix<f64>> = draws.sigma.iter().map(|s| s[m].clone()).collect();
            f(&mut rng, &mut beta, &mut alpha, &sigma)?;
            Ok((beta, alpha, sigma))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(meta, rows, provenance, seed))
}

/// MAVB under the flat working prior: `μ̃_j ~ N(ᾱ_j, Σ_j / g_j)`, then
/// `alpha_{j,g} - μ̃_j` and `beta + Σ_j M_j μ̃_j`. `Σ` draws are untouched.
pub fn mavb_improper(draws: &PosteriorDraws, seed: u64) -> Result<PosteriorDraws> {
    require_raw(draws)?;
    let meta = &draws.meta;
    transform(draws, seed, Provenance::MavbImproper, |rng, beta, alpha, sigma| {
        let mut shifts = Vec::with_capacity(meta.effects.len());
        for (j, e) in meta.effects.iter().enumerate() {
            let mean = group_average(alpha, meta, j);
            let l = cholesky(&(&sigma[j] / e.n_groups() as f64), "covariance draw")?.l();
            shifts.push((mean + l * standard_normals(e.dim(), rng)).iter().copied().collect());
        }
        apply_shift(beta, alpha, meta, &shifts);
        Ok(())
    })
}

/// MAVB with the proper working prior `μ_j ~ N(0, tau2 I)`.
pub fn mavb_proper(draws: &PosteriorDraws, tau2: f64, seed: u64) -> Result<PosteriorDraws> {
    require_raw(draws)?;
    if !(tau2 > 0.0 && tau2.is_finite()) {
        return Err(Error::InvalidArgument(format!("working prior variance must be positive, got {tau2}")));
    }
    let meta = &draws.meta;
    let sd = tau2.sqrt();
    transform(draws, seed, Provenance::MavbProper { tau2 }, |rng, beta, alpha, sigma| {
        // expand with a draw from the working prior
        let expand: Vec<Vec<f64>> =
            meta.effects.iter().map(|e| standard_normals(e.dim(), rng).iter().map(|z| -z * sd).collect()).collect();
        apply_shift(beta, alpha, meta, &expand);

        let mut shifts = Vec::with_capacity(meta.effects.len());
        for (j, e) in meta.effects.iter().enumerate() {
            let dim = e.dim();
            let ng = e.n_groups() as f64;
            let s_inv = crate::linalg::spd_inverse(&sigma[j], "covariance draw")?;
            let prec = &s_inv * ng + DMatrix::identity(dim, dim) / tau2;
            let ch = cholesky(&prec, "working-prior posterior precision")?;
            let sum = group_average(alpha, meta, j) * ng;
            let mean = ch.solve(&(&s_inv * sum));
            // x = mean + L^{-T} z has covariance prec^{-1}
            let z = standard_normals(dim, rng);
            let noise = ch.l().transpose().solve_upper_triangular(&z).expect("nonsingular factor");
            shifts.push((mean + noise).iter().copied().collect());
        }
        apply_shift(beta, alpha, meta, &shifts);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavi::{fit, init_em, FitOptions, Scheme};
    use crate::design::{design_from_formula, BuildOptions, DesignSet, EffectMeta};
    use crate::prior::PriorSpec;
    use crate::simlab::{simulate_crossed, SimConfig, TrialsDist};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> DesignSet {
        let cfg = SimConfig { n_obs: 120, n_covariates: 2, groups: vec![5, 4], trials: TrialsDist::Uniform { lo: 1, hi: 4 }, ..SimConfig::default() };
        simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap().design().unwrap()
    }

    fn slope_toy() -> DesignSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sim = simulate_crossed(
            &SimConfig { n_obs: 150, n_covariates: 1, groups: vec![6], trials: TrialsDist::Constant(3), ..SimConfig::default() },
            &mut rng,
        )
        .unwrap();
        design_from_formula(&sim.table, "y/n ~ 1 + x1 + (1 + x1 | g1)", &BuildOptions::default()).unwrap()
    }

    fn fitted(d: &DesignSet, scheme: Scheme) -> VariationalState {
        fit(d, &PriorSpec::standard(&d.meta), scheme, &FitOptions::default()).unwrap().state
    }

    #[test]
    fn zero_covariance_reproduces_means() {
        let d = toy(1);
        let mut state = init_em(&d, &PriorSpec::standard(&d.meta), Scheme::II).unwrap();
        state.cov = Covariance::zeros(Scheme::II, &d.meta);
        let draws = sample_q(&state, &d.meta, 20, 4).unwrap();
        for m in 0..20 {
            assert_eq!(draws.beta_draw(m), state.mu_beta);
            assert_eq!(draws.alpha_draw(m), state.mu_alpha);
        }
    }

    #[test]
    fn scheme3_sample_covariance_matches() {
        let d = toy(2);
        let state = fitted(&d, Scheme::III);
        let n = 100_000;
        let draws = sample_q(&state, &d.meta, n, 9).unwrap();
        let full = match &state.cov {
            Covariance::Joint { full, .. } => full.clone(),
            _ => unreachable!(),
        };
        let theta = DMatrix::from_fn(n, d.p() + d.q(), |m, c| if c < d.p() { draws.beta[(m, c)] } else { draws.alpha[(m, c - d.p())] });
        let mean = theta.row_mean();
        let k = theta.ncols();
        for a in 0..k {
            for b in a..k {
                let prods: Vec<f64> = (0..n).map(|m| (theta[(m, a)] - mean[a]) * (theta[(m, b)] - mean[b])).collect();
                let cov = prods.iter().sum::<f64>() / (n - 1) as f64;
                let se = (prods.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / n as f64).sqrt() / (n as f64).sqrt();
                // 3 SE per entry, with a little slack for the number of entries
                assert!((cov - full[(a, b)]).abs() < 4.5 * se, "({a},{b}): {cov} vs {}", full[(a, b)]);
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = toy(3);
        let state = fitted(&d, Scheme::I);
        let a = sample_q(&state, &d.meta, 50, 1).unwrap();
        let b = sample_q(&state, &d.meta, 50, 1).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| sample_q(&state, &d.meta, 50, 1).unwrap());
        assert_eq!(a, c);
        assert_eq!(mavb_improper(&a, 7).unwrap(), mavb_improper(&b, 7).unwrap());
    }

    #[test]
    fn improper_arithmetic() {
        let meta = DesignMeta {
            fixed_names: vec!["(Intercept)".into()],
            effects: vec![EffectMeta { name: "g".into(), covariates: vec!["(Intercept)".into()], levels: vec!["a".into(), "b".into()], offset: 0, mapping: vec![0] }],
        };
        let (mut beta, mut alpha) = (vec![0.5], vec![0.3, -0.1]);
        apply_shift(&mut beta, &mut alpha, &meta, &[vec![0.1]]);
        assert!((alpha[0] - 0.2).abs() < 1e-15 && (alpha[1] + 0.2).abs() < 1e-15);
        assert!((beta[0] - 0.6).abs() < 1e-15);
    }

    fn assert_predictor_preserved(d: &DesignSet, before: &PosteriorDraws, after: &PosteriorDraws) {
        for m in 0..before.len() {
            let a = before.linear_predictor(d, m).unwrap();
            let b = after.linear_predictor(d, m).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert_eq!(before.sigma, after.sigma);
        assert_eq!(before.len(), after.len());
    }

    #[test]
    fn linear_predictor_invariance() {
        for d in [toy(4), slope_toy()] {
            let state = fitted(&d, Scheme::I);
            let raw = sample_q(&state, &d.meta, 300, 2).unwrap();
            assert_predictor_preserved(&d, &raw, &mavb_improper(&raw, 3).unwrap());
            assert_predictor_preserved(&d, &raw, &mavb_proper(&raw, 2.5, 3).unwrap());
        }
    }

    #[test]
    fn improper_shift_is_centred_on_group_average() {
        // E[μ̃_j | draw] = ᾱ_j, so after the shift the group average has mean 0
        // and variance tr(Σ_j)/g_j per draw.
        let d = toy(5);
        let state = fitted(&d, Scheme::I);
        let n = 100_000;
        let raw = sample_q(&state, &d.meta, n, 5).unwrap();
        let out = mavb_improper(&raw, 6).unwrap();
        for (j, e) in d.meta.effects.iter().enumerate() {
            let avgs: Vec<f64> = (0..n).map(|m| group_average(&out.alpha_draw(m), &d.meta, j)[0]).collect();
            let mean = avgs.iter().sum::<f64>() / n as f64;
            let sd = (avgs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            assert!(mean.abs() < 3.0 * sd / (n as f64).sqrt(), "effect {}: {mean}", e.name);
        }
    }

    #[test]
    fn proper_prior_tiny_tau_is_identity() {
        let d = toy(6);
        let state = fitted(&d, Scheme::I);
        let raw = sample_q(&state, &d.meta, 500, 1).unwrap();
        let out = mavb_proper(&raw, 1e-12, 2).unwrap();
        assert!((&out.beta - &raw.beta).abs().max() < 1e-5);
        assert!((&out.alpha - &raw.alpha).abs().max() < 1e-5);
    }

    #[test]
    fn mavb_rejects_bad_inputs() {
        let d = toy(7);
        let state = fitted(&d, Scheme::I);
        let raw = sample_q(&state, &d.meta, 10, 1).unwrap();
        assert!(mavb_proper(&raw, 0.0, 1).is_err());
        assert!(mavb_proper(&raw, -1.0, 1).is_err());
        let done = mavb_improper(&raw, 1).unwrap();
        assert!(mavb_improper(&done, 1).is_err());
    }

    #[test]
    fn induces_intercept_group_correlation() {
        let d = toy(8);
        let state = fitted(&d, Scheme::I);
        let n = 20_000;
        let out = mavb_improper(&sample_q(&state, &d.meta, n, 3).unwrap(), 4).unwrap();
        let b0 = out.beta_column(0);
        let a0 = out.alpha_column(0);
        let mb = b0.iter().sum::<f64>() / n as f64;
        let ma = a0.iter().sum::<f64>() / n as f64;
        let cov = b0.iter().zip(&a0).map(|(x, y)| (x - mb) * (y - ma)).sum::<f64>();
        let vb = b0.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        let va = a0.iter().map(|y| (y - ma).powi(2)).sum::<f64>();
        let r = cov / (vb * va).sqrt();
        // SE of a sample correlation is about 1/sqrt(n)
        assert!(r.abs() > 3.0 / (n as f64).sqrt(), "{r}");
    }
}

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::digamma;

use super::state::{Covariance, Scheme, VariationalState};
use crate::design::{DesignMeta, DesignSet};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, ln_mvgamma, log_det_spd, spd_inverse, symmetrize};
use crate::normal_eq::NormalSystem;
use crate::pgamma::{pg_elbo_terms, pg_mean};
use crate::prior::{InverseWishart, PriorSpec};

/// Closed-form coordinate updates and ELBO evaluation for one design/prior
/// pair. Holds the sparse normal-equation systems so their symbolic analysis
/// is done once per fit.
pub struct Cavi<'a> {
    d: &'a DesignSet,
    prior: &'a PriorSpec,
    full: Option<NormalSystem>,
    alpha_only: Option<NormalSystem>,
}

impl<'a> Cavi<'a> {
    pub fn new(d: &'a DesignSet, prior: &'a PriorSpec) -> Result<Self> {
        prior.check(&d.meta)?;
        Ok(Cavi { d, prior, full: None, alpha_only: None })
    }

    pub fn design(&self) -> &DesignSet {
        self.d
    }

    pub fn prior(&self) -> &PriorSpec {
        self.prior
    }

    fn full_system(&mut self) -> &mut NormalSystem {
        let d = self.d;
        self.full.get_or_insert_with(|| NormalSystem::new(d, true))
    }

    fn alpha_system(&mut self) -> &mut NormalSystem {
        let d = self.d;
        self.alpha_only.get_or_insert_with(|| NormalSystem::new(d, false))
    }

    /// `E[psi_i] = x_i^T mu_beta + z_i^T mu_alpha`
    pub fn mean_predictor(&self, state: &VariationalState) -> Vec<f64> {
        let mut eta = self.d.z.mul_vec(&state.mu_alpha);
        for (i, v) in eta.iter_mut().enumerate() {
            *v += self.d.x_dot(i, &state.mu_beta);
        }
        eta
    }

    /// `Var_q[psi_i]` under the scheme's covariance storage.
    pub fn predictor_variances(&self, state: &VariationalState) -> Vec<f64> {
        let d = self.d;
        let p = d.p();
        let xq = |i: usize, m: &DMatrix<f64>| {
            let mut acc = 0.0;
            for a in 0..p {
                let xa = d.x[(i, a)];
                if xa == 0.0 {
                    continue;
                }
                acc += xa * xa * m[(a, a)];
                for b in a + 1..p {
                    acc += 2.0 * xa * d.x[(i, b)] * m[(a, b)];
                }
            }
            acc
        };
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(p + 8);
        (0..d.n_obs())
            .map(|i| match &state.cov {
                Covariance::Factorized { beta, alpha } => {
                    let mut v = xq(i, beta);
                    for (j, e) in d.meta.effects.iter().enumerate() {
                        let dim = e.dim();
                        let zb = &d.zb[j][i * dim..(i + 1) * dim];
                        let blk = &alpha[j][d.groups[j][i]];
                        for k in 0..dim {
                            for l in 0..dim {
                                v += zb[k] * blk[(k, l)] * zb[l];
                            }
                        }
                    }
                    v
                }
                Covariance::Partial { beta, alpha, .. } => {
                    entries.clear();
                    entries.extend(d.z_row(i));
                    xq(i, beta) + sparse_quad(&entries, alpha)
                }
                Covariance::Joint { full, .. } => {
                    entries.clear();
                    entries.extend((0..p).map(|c| (c, d.x[(i, c)])));
                    entries.extend(d.z_row(i).map(|(a, v)| (p + a, v)));
                    sparse_quad(&entries, full)
                }
            })
            .collect()
    }

    /// `c̃_i = sqrt(E[psi_i]^2 + Var[psi_i])`; `b̃_i = n_i` is never touched.
    pub fn update_pg(&self, state: &mut VariationalState) -> Result<()> {
        let eta = self.mean_predictor(state);
        let var = self.predictor_variances(state);
        for (i, c) in state.pg.c.iter_mut().enumerate() {
            let r = eta[i] * eta[i] + var[i];
            if !(r >= 0.0) {
                return Err(Error::npd(format!("negative predictor second moment at row {i}")));
            }
            *c = r.sqrt();
        }
        Ok(())
    }

    fn omega(&self, state: &VariationalState) -> Vec<f64> {
        state.pg.means()
    }

    /// `q(beta)` for Schemes I and II: `Λ̃_β = (X^T Ω X)^{-1}` and, when
    /// `with_mean`, `μ̃_β = Λ̃_β X^T (s - Ω Z μ̃_α)`.
    pub fn update_beta(&self, state: &mut VariationalState, with_mean: bool) -> Result<()> {
        let d = self.d;
        let omega = self.omega(state);
        let p = d.p();
        let mut gram = DMatrix::zeros(p, p);
        for i in 0..d.n_obs() {
            let w = omega[i];
            for a in 0..p {
                let wa = w * d.x[(i, a)];
                for b in a..p {
                    gram[(a, b)] += wa * d.x[(i, b)];
                }
            }
        }
        gram.fill_lower_triangle_with_upper_triangle();
        let ch = cholesky(&gram, "weighted fixed-effect Gram matrix").map_err(|_| Error::RankDeficient)?;
        if with_mean {
            let za = d.z.mul_vec(&state.mu_alpha);
            let r: Vec<f64> = (0..d.n_obs()).map(|i| d.s[i] - omega[i] * za[i]).collect();
            let rhs = d.x.tr_mul(&DVector::from_vec(r));
            state.mu_beta = ch.solve(&rhs).iter().copied().collect();
        }
        let lambda = symmetrize(ch.inverse());
        match &mut state.cov {
            Covariance::Factorized { beta, .. } | Covariance::Partial { beta, .. } => *beta = lambda,
            Covariance::Joint { .. } => return Err(Error::InvalidArgument("update_beta applies to Schemes I and II".into())),
        }
        Ok(())
    }

    /// `q(alpha)`: Scheme I cycles over effects in formula order, each group
    /// block solved independently; Scheme II solves all of `alpha` at once.
    pub fn update_alpha(&mut self, state: &mut VariationalState, with_mean: bool) -> Result<()> {
        let precisions = state.expected_precisions()?;
        match state.scheme {
            Scheme::I => self.update_alpha_blocks(state, &precisions, with_mean),
            Scheme::II => self.update_alpha_joint(state, &precisions, with_mean),
            Scheme::III => Err(Error::InvalidArgument("update_alpha applies to Schemes I and II".into())),
        }
    }

    fn update_alpha_blocks(&self, state: &mut VariationalState, precisions: &[DMatrix<f64>], with_mean: bool) -> Result<()> {
        let d = self.d;
        let omega = self.omega(state);
        let mut eta = if with_mean { self.mean_predictor(state) } else { Vec::new() };
        for (j, e) in d.meta.effects.iter().enumerate() {
            let dim = e.dim();
            let mut prec = vec![precisions[j].clone(); e.n_groups()];
            let mut rhs = vec![DVector::<f64>::zeros(dim); e.n_groups()];
            for i in 0..d.n_obs() {
                let g = d.groups[j][i];
                let zb = &d.zb[j][i * dim..(i + 1) * dim];
                let w = omega[i];
                let blk = &mut prec[g];
                for k in 0..dim {
                    for l in 0..dim {
                        blk[(k, l)] += w * zb[k] * zb[l];
                    }
                }
                if with_mean {
                    let own = d.effect_contribution(j, i, &state.mu_alpha);
                    let r = d.s[i] - w * (eta[i] - own);
                    for k in 0..dim {
                        rhs[g][k] += zb[k] * r;
                    }
                }
            }
            let before: Vec<f64> = if with_mean { state.mu_alpha[e.offset..e.offset + e.width()].to_vec() } else { Vec::new() };
            let mut covs = Vec::with_capacity(e.n_groups());
            for g in 0..e.n_groups() {
                let ch = cholesky(&prec[g], "random-effect block precision")?;
                if with_mean {
                    let m = ch.solve(&rhs[g]);
                    state.mu_alpha[e.group_range(g)].copy_from_slice(m.as_slice());
                }
                covs.push(symmetrize(ch.inverse()));
            }
            if with_mean {
                for (i, v) in eta.iter_mut().enumerate() {
                    let g = d.groups[j][i];
                    let zb = &d.zb[j][i * dim..(i + 1) * dim];
                    for k in 0..dim {
                        let at = e.index(g, k);
                        *v += zb[k] * (state.mu_alpha[at] - before[at - e.offset]);
                    }
                }
            }
            match &mut state.cov {
                Covariance::Factorized { alpha, .. } => alpha[j] = covs,
                _ => unreachable!("Scheme I storage"),
            }
        }
        state.cov_is_zero = false;
        Ok(())
    }

    fn update_alpha_joint(&mut self, state: &mut VariationalState, precisions: &[DMatrix<f64>], with_mean: bool) -> Result<()> {
        let d = self.d;
        let omega = self.omega(state);
        let sys = self.alpha_system();
        sys.refresh(d, &omega, precisions, 0.0)?;
        if with_mean {
            let r: Vec<f64> = (0..d.n_obs()).map(|i| d.s[i] - omega[i] * d.x_dot(i, &state.mu_beta)).collect();
            let rhs = d.z.tr_mul_vec(&r);
            state.mu_alpha = sys.solve(&rhs);
        }
        let inv = sys.inverse();
        let ld = -sys.log_det();
        match &mut state.cov {
            Covariance::Partial { alpha, alpha_log_det, .. } => {
                *alpha = inv;
                *alpha_log_det = ld;
            }
            _ => unreachable!("Scheme II storage"),
        }
        state.cov_is_zero = false;
        Ok(())
    }

    fn refresh_full(&mut self, state: &VariationalState) -> Result<()> {
        let d = self.d;
        let omega = self.omega(state);
        let precisions = state.expected_precisions()?;
        self.full_system().refresh(d, &omega, &precisions, 0.0)
    }

    fn full_rhs(&self) -> Vec<f64> {
        let d = self.d;
        let mut rhs: Vec<f64> = d.x.tr_mul(&DVector::from_column_slice(&d.s)).iter().copied().collect();
        rhs.extend(d.z.tr_mul_vec(&d.s));
        rhs
    }

    fn set_joint_means(&self, state: &mut VariationalState, theta: Vec<f64>) {
        let p = self.d.p();
        state.mu_beta = theta[..p].to_vec();
        state.mu_alpha = theta[p..].to_vec();
    }

    /// Scheme III: `Λ̃ = ([X,Z]^T Ω [X,Z] + T)^{-1}`, `μ̃ = Λ̃ [X,Z]^T s`.
    pub fn update_joint(&mut self, state: &mut VariationalState) -> Result<()> {
        if state.scheme != Scheme::III {
            return Err(Error::InvalidArgument("update_joint applies to Scheme III".into()));
        }
        self.refresh_full(state)?;
        let rhs = self.full_rhs();
        let sys = self.full.as_ref().expect("refreshed");
        let theta = sys.solve(&rhs);
        let inv = sys.inverse();
        let ld = -sys.log_det();
        self.set_joint_means(state, theta);
        state.cov = Covariance::Joint { full: inv, log_det: ld };
        state.cov_is_zero = false;
        Ok(())
    }

    /// Solves the Scheme III mean system for all means at once, leaving the
    /// covariances as they are.
    pub fn joint_mean_update(&mut self, state: &mut VariationalState) -> Result<()> {
        self.refresh_full(state)?;
        let rhs = self.full_rhs();
        let theta = self.full.as_ref().expect("refreshed").solve(&rhs);
        self.set_joint_means(state, theta);
        Ok(())
    }

    /// Covariance updates only (means untouched).
    pub fn update_covariances(&mut self, state: &mut VariationalState) -> Result<()> {
        match state.scheme {
            Scheme::I | Scheme::II => {
                self.update_beta(state, false)?;
                self.update_alpha(state, false)
            }
            Scheme::III => {
                self.refresh_full(state)?;
                let sys = self.full.as_ref().expect("refreshed");
                state.cov = Covariance::Joint { full: sys.inverse(), log_det: -sys.log_det() };
                state.cov_is_zero = false;
                Ok(())
            }
        }
    }

    /// `Φ̃_j = Φ_j + Σ_g (μ̃ μ̃^T + Λ̃)_{j,g}`, `ν̃_j = ν_j + g_j`.
    pub fn update_sigma(&self, state: &mut VariationalState) {
        let meta = &self.d.meta;
        for (j, e) in meta.effects.iter().enumerate() {
            let prior = &self.prior.effects[j];
            let mut phi = prior.phi.clone();
            for g in 0..e.n_groups() {
                let m = DVector::from_column_slice(&state.mu_alpha[e.group_range(g)]);
                phi += &m * m.transpose();
                phi += state.cov.group_block(meta, j, g);
            }
            state.iw[j] = InverseWishart { nu: prior.nu + e.n_groups() as f64, phi: symmetrize(phi) };
        }
    }

    /// Evidence lower bound at `state`.
    pub fn elbo(&self, state: &VariationalState) -> Result<f64> {
        if state.cov_is_zero {
            return Err(Error::npd("covariances have not been initialized"));
        }
        let d = self.d;
        let meta = &d.meta;
        let eta = self.mean_predictor(state);
        let var = self.predictor_variances(state);
        let mut total = -d.n.iter().sum::<f64>() * LN_2;
        for i in 0..d.n_obs() {
            let w = pg_mean(state.pg.b[i], state.pg.c[i]);
            total += d.s[i] * eta[i] - 0.5 * w * (eta[i] * eta[i] + var[i]);
        }
        total += pg_elbo_terms(&state.pg);

        for (j, e) in meta.effects.iter().enumerate() {
            let dim = e.dim();
            let df = dim as f64;
            let ng = e.n_groups() as f64;
            let q = &state.iw[j];
            let prior = &self.prior.effects[j];
            let w = spd_inverse(&q.phi, "variational Inverse-Wishart scale")? * q.nu;
            let e_ln_det = expected_log_det(q)?;
            let mut quad = 0.0;
            for g in 0..e.n_groups() {
                let m = DVector::from_column_slice(&state.mu_alpha[e.group_range(g)]);
                quad += (m.transpose() * &w * &m)[(0, 0)];
                quad += (&w * state.cov.group_block(meta, j, g)).trace();
            }
            total += -0.5 * df * ng * (2.0 * PI).ln() - 0.5 * ng * e_ln_det - 0.5 * quad;
            total += iw_log_normalizer(prior)? - 0.5 * (prior.nu + df + 1.0) * e_ln_det - 0.5 * (&prior.phi * &w).trace();
            total += -iw_log_normalizer(q)? + 0.5 * (q.nu + df + 1.0) * e_ln_det + 0.5 * (&q.phi * &w).trace();
        }

        total += self.gaussian_entropy(state)?;
        Ok(total)
    }

    /// Entropy of the Gaussian factor(s): `Σ_blocks k/2 ln(2πe) + ½ ln|Λ|`.
    pub fn gaussian_entropy(&self, state: &VariationalState) -> Result<f64> {
        let c = 0.5 * (2.0 * PI * std::f64::consts::E).ln();
        let p = self.d.p();
        let q = self.d.q();
        Ok(match &state.cov {
            Covariance::Factorized { beta, alpha } => {
                let mut h = p as f64 * c + 0.5 * log_det_spd(beta, "fixed-effect covariance")?;
                for blocks in alpha {
                    for b in blocks {
                        h += b.nrows() as f64 * c + 0.5 * log_det_spd(b, "random-effect covariance")?;
                    }
                }
                h
            }
            Covariance::Partial { beta, alpha_log_det, .. } => {
                (p + q) as f64 * c + 0.5 * log_det_spd(beta, "fixed-effect covariance")? + 0.5 * alpha_log_det
            }
            Covariance::Joint { log_det, .. } => (p + q) as f64 * c + 0.5 * log_det,
        })
    }
}

/// `z^T M z` for a sparse vector given as `(index, value)` pairs.
fn sparse_quad(entries: &[(usize, f64)], m: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for (u, &(a, va)) in entries.iter().enumerate() {
        acc += va * va * m[(a, a)];
        for &(b, vb) in &entries[u + 1..] {
            acc += 2.0 * va * vb * m[(a, b)];
        }
    }
    acc
}

/// `E[ln |Σ|]` under `IW(nu, phi)`.
pub fn expected_log_det(iw: &InverseWishart) -> Result<f64> {
    let d = iw.dim();
    let psi: f64 = (1..=d).map(|k| digamma((iw.nu - k as f64 + 1.0) / 2.0)).sum();
    Ok(log_det_spd(&iw.phi, "Inverse-Wishart scale")? - psi - d as f64 * LN_2)
}

/// `ln c(nu, phi)`, the log normalizing constant of `IW(nu, phi)`.
pub fn iw_log_normalizer(iw: &InverseWishart) -> Result<f64> {
    let d = iw.dim() as f64;
    Ok(0.5 * iw.nu * log_det_spd(&iw.phi, "Inverse-Wishart scale")? - 0.5 * iw.nu * d * LN_2 - ln_mvgamma(iw.dim(), iw.nu / 2.0))
}

/// PX-VB recentring: removes the average group mean `μ̂_j` from every group
/// of effect `j` and adds `M_j μ̂_j` to the fixed effects. Returns the shifts.
pub fn pxvb_reduce(state: &mut VariationalState, meta: &DesignMeta) -> Vec<Vec<f64>> {
    let shifts: Vec<Vec<f64>> = meta
        .effects
        .iter()
        .map(|e| {
            let mut avg = vec![0.0; e.dim()];
            for g in 0..e.n_groups() {
                for (k, a) in avg.iter_mut().enumerate() {
                    *a += state.mu_alpha[e.index(g, k)];
                }
            }
            avg.iter_mut().for_each(|a| *a /= e.n_groups() as f64);
            for g in 0..e.n_groups() {
                for (k, a) in avg.iter().enumerate() {
                    state.mu_alpha[e.index(g, k)] -= a;
                }
            }
            avg
        })
        .collect();
    meta.add_mapped(&mut state.mu_beta, &shifts);
    shifts
}

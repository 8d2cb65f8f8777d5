use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignMeta;
use crate::pgamma::PgParams;
use crate::prior::InverseWishart;

/// Factorization of the Gaussian part of `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    /// `q(beta) Π_j q(alpha_j)`
    I,
    /// `q(beta) q(alpha)`
    II,
    /// `q(beta, alpha)`
    III,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::I, Scheme::II, Scheme::III];

    pub fn from_number(k: u8) -> Option<Scheme> {
        match k {
            1 => Some(Scheme::I),
            2 => Some(Scheme::II),
            3 => Some(Scheme::III),
            _ => None,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Scheme::I => 1,
            Scheme::II => 2,
            Scheme::III => 3,
        }
    }
}

/// Covariance storage, shaped by the scheme.
///
/// The cached `*_log_det` fields hold `ln |Λ|` of the stored matrix; they
/// are refreshed together with it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Covariance {
    Factorized {
        beta: DMatrix<f64>,
        /// `alpha[j][g]` is the `d_j x d_j` covariance of `alpha_{j,g}`.
        alpha: Vec<Vec<DMatrix<f64>>>,
    },
    Partial {
        beta: DMatrix<f64>,
        alpha: DMatrix<f64>,
        alpha_log_det: f64,
    },
    Joint {
        /// Ordered `[beta, alpha]`.
        full: DMatrix<f64>,
        log_det: f64,
    },
}

impl Covariance {
    pub fn zeros(scheme: Scheme, meta: &DesignMeta) -> Self {
        let (p, q) = (meta.p(), meta.q());
        match scheme {
            Scheme::I => Covariance::Factorized {
                beta: DMatrix::zeros(p, p),
                alpha: meta
                    .effects
                    .iter()
                    .map(|e| vec![DMatrix::zeros(e.dim(), e.dim()); e.n_groups()])
                    .collect(),
            },
            Scheme::II => Covariance::Partial {
                beta: DMatrix::zeros(p, p),
                alpha: DMatrix::zeros(q, q),
                alpha_log_det: f64::NEG_INFINITY,
            },
            Scheme::III => Covariance::Joint { full: DMatrix::zeros(p + q, p + q), log_det: f64::NEG_INFINITY },
        }
    }

    /// Marginal covariance of `beta`.
    pub fn beta(&self, p: usize) -> DMatrix<f64> {
        match self {
            Covariance::Factorized { beta, .. } | Covariance::Partial { beta, .. } => beta.clone(),
            Covariance::Joint { full, .. } => full.view((0, 0), (p, p)).into_owned(),
        }
    }

    /// Covariance of `alpha_{j,g}`.
    pub fn group_block(&self, meta: &DesignMeta, j: usize, g: usize) -> DMatrix<f64> {
        let e = &meta.effects[j];
        let d = e.dim();
        match self {
            Covariance::Factorized { alpha, .. } => alpha[j][g].clone(),
            Covariance::Partial { alpha, .. } => alpha.view((e.index(g, 0), e.index(g, 0)), (d, d)).into_owned(),
            Covariance::Joint { full, .. } => {
                let at = meta.p() + e.index(g, 0);
                full.view((at, at), (d, d)).into_owned()
            }
        }
    }

    /// Marginal variances of `[beta, alpha]`.
    pub fn marginal_variances(&self, meta: &DesignMeta) -> (Vec<f64>, Vec<f64>) {
        let p = meta.p();
        match self {
            Covariance::Factorized { beta, alpha } => {
                let a = alpha.iter().flat_map(|blocks| blocks.iter().flat_map(|b| b.diagonal().iter().copied().collect::<Vec<_>>())).collect();
                (beta.diagonal().iter().copied().collect(), a)
            }
            Covariance::Partial { beta, alpha, .. } => {
                (beta.diagonal().iter().copied().collect(), alpha.diagonal().iter().copied().collect())
            }
            Covariance::Joint { full, .. } => {
                let diag: Vec<f64> = full.diagonal().iter().copied().collect();
                (diag[..p].to_vec(), diag[p..].to_vec())
            }
        }
    }
}

/// All variational parameters of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub scheme: Scheme,
    pub mu_beta: Vec<f64>,
    pub mu_alpha: Vec<f64>,
    pub cov: Covariance,
    /// Set by random initialization until the first covariance update.
    pub cov_is_zero: bool,
    pub pg: PgParams,
    pub iw: Vec<InverseWishart>,
}

impl VariationalState {
    /// `E[Σ_j^{-1}] = ν̃_j Φ̃_j^{-1}` for every effect.
    pub fn expected_precisions(&self) -> crate::Result<Vec<DMatrix<f64>>> {
        self.iw
            .iter()
            .map(|iw| Ok(crate::linalg::spd_inverse(&iw.phi, "variational Inverse-Wishart scale")? * iw.nu))
            .collect()
    }

    /// Means of `alpha_{j,g}` for every group of effect `j`.
    pub fn group_means(&self, meta: &DesignMeta, j: usize) -> Vec<&[f64]> {
        let e = &meta.effects[j];
        (0..e.n_groups()).map(|g| &self.mu_alpha[e.group_range(g)]).collect()
    }
}

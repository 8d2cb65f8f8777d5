use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::DesignMeta;
use crate::error::{Error, Result};

/// Inverse-Wishart parameters `(nu, Phi)`, used both for priors and for the
/// variational factors `q(Σ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseWishart {
    pub nu: f64,
    pub phi: DMatrix<f64>,
}

impl InverseWishart {
    pub fn dim(&self) -> usize {
        self.phi.nrows()
    }

    /// `IW(d + 1, I_d)`
    pub fn standard(d: usize) -> Self {
        InverseWishart { nu: d as f64 + 1.0, phi: DMatrix::identity(d, d) }
    }
}

/// Priors on the random-effect covariances plus the variance of the proper
/// working prior used by marginal augmentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub effects: Vec<InverseWishart>,
    pub working_tau2: Option<f64>,
}

impl PriorSpec {
    /// `IW(d_j + 1, I_{d_j})` on every effect.
    pub fn standard(meta: &DesignMeta) -> Self {
        PriorSpec { effects: meta.effects.iter().map(|e| InverseWishart::standard(e.dim())).collect(), working_tau2: None }
    }

    pub fn check(&self, meta: &DesignMeta) -> Result<()> {
        if self.effects.len() != meta.effects.len() {
            return Err(Error::Dimension { what: "prior effects", expected: meta.effects.len(), found: self.effects.len() });
        }
        for (iw, e) in self.effects.iter().zip(&meta.effects) {
            if iw.dim() != e.dim() {
                return Err(Error::Dimension { what: "prior scale matrix", expected: e.dim(), found: iw.dim() });
            }
            if iw.nu <= e.dim() as f64 - 1.0 {
                return Err(Error::InvalidArgument(format!("prior degrees of freedom {} too small for `{}`", iw.nu, e.name)));
            }
            if iw.phi.clone().cholesky().is_none() {
                return Err(Error::npd(format!("prior scale of `{}`", e.name)));
            }
        }
        if let Some(t) = self.working_tau2 {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument("working prior variance must be positive".into()));
            }
        }
        Ok(())
    }
}

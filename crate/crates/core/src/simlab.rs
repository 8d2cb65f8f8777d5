//! Synthetic data: crossed random-intercept designs with known truth, and
//! outcome regeneration on an existing design.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{design_from_formula, BuildOptions, DesignMeta, DesignSet};
use crate::error::{Error, Result};
use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialsDist {
    Constant(u32),
    /// Uniform on `lo..=hi`.
    Uniform { lo: u32, hi: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_obs: usize,
    /// Number of fixed covariates (the fitted model adds an intercept).
    pub n_covariates: usize,
    /// Groups per random intercept.
    pub groups: Vec<usize>,
    pub sigma_beta: f64,
    pub sigma_alpha: f64,
    /// Covariate correlation `rho^{|k - k'|}`.
    pub rho: f64,
    pub trials: TrialsDist,
    /// True intercept (zero in the reference design).
    pub intercept: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    /// 1000 Bernoulli rows, ten correlated covariates, two crossed effects of
    /// ten groups each.
    fn default() -> Self {
        SimConfig {
            n_obs: 1000,
            n_covariates: 10,
            groups: vec![10, 10],
            sigma_beta: 0.2,
            sigma_alpha: 1.0,
            rho: 0.5,
            trials: TrialsDist::Constant(1),
            intercept: 0.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_beta > 0.0 && self.sigma_alpha > 0.0) {
            return Err(Error::InvalidArgument("simulation scales must be positive".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument("covariate correlation must lie in (-1, 1)".into()));
        }
        if self.n_obs == 0 || self.groups.contains(&0) {
            return Err(Error::InvalidArgument("need at least one row and one group per effect".into()));
        }
        match self.trials {
            TrialsDist::Constant(0) => Err(Error::InvalidArgument("trials must be positive".into())),
            TrialsDist::Uniform { lo, hi } if lo == 0 || hi < lo => Err(Error::InvalidArgument("bad trials range".into())),
            _ => Ok(()),
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let w = digits(self.n_covariates);
        (1..=self.n_covariates).map(|k| format!("x{k:0w$}")).collect()
    }

    pub fn effect_names(&self) -> Vec<String> {
        (1..=self.groups.len()).map(|j| format!("g{j}")).collect()
    }

    fn level(&self, j: usize, g: usize) -> String {
        format!("g{}_{:0w$}", j + 1, g + 1, w = digits(self.groups[j]))
    }

    /// Model with an intercept, every covariate and one random intercept per
    /// grouping factor.
    pub fn formula(&self) -> String {
        let mut f = String::from("y/n ~ 1");
        for x in self.covariate_names() {
            f.push_str(" + ");
            f.push_str(&x);
        }
        for g in self.effect_names() {
            f.push_str(&format!(" + (1 | {g})"));
        }
        f
    }
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}

/// True parameter values keyed by the names used in fitted designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub beta_names: Vec<String>,
    pub beta: Vec<f64>,
    pub alpha_names: Vec<String>,
    pub alpha: Vec<f64>,
}

impl SimTruth {
    /// Truth aligned with a design's coefficient order. Levels absent from the
    /// truth (none for designs built from the simulated table) map to zero.
    pub fn aligned(&self, meta: &DesignMeta) -> (Vec<f64>, Vec<f64>) {
        let lookup = |names: &[String], vals: &[f64], key: &str| {
            names.iter().position(|n| n == key).map(|k| vals[k]).unwrap_or(0.0)
        };
        let beta = meta.beta_names().iter().map(|n| lookup(&self.beta_names, &self.beta, n)).collect();
        let alpha = meta.alpha_names().iter().map(|n| lookup(&self.alpha_names, &self.alpha, n)).collect();
        (beta, alpha)
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: SimConfig,
    pub table: Table,
    pub truth: SimTruth,
}

impl Simulation {
    pub fn design(&self) -> Result<DesignSet> {
        design_from_formula(&self.table, &self.config.formula(), &BuildOptions::default())
    }
}

/// Draws a dataset from the crossed design described by `cfg`.
pub fn simulate_crossed<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Result<Simulation> {
    cfg.validate()?;
    let p = cfg.n_covariates;
    let beta_dist = Normal::new(0.0, cfg.sigma_beta).expect("positive scale");
    let alpha_dist = Normal::new(0.0, cfg.sigma_alpha).expect("positive scale");
    let beta: Vec<f64> = (0..p).map(|_| beta_dist.sample(rng)).collect();
    let alpha: Vec<Vec<f64>> = cfg.groups.iter().map(|&g| (0..g).map(|_| alpha_dist.sample(rng)).collect()).collect();

    let innov = (1.0 - cfg.rho * cfg.rho).sqrt();
    let mut x_cols = vec![Vec::with_capacity(cfg.n_obs); p];
    let mut g_cols = vec![Vec::with_capacity(cfg.n_obs); cfg.groups.len()];
    let mut y_col = Vec::with_capacity(cfg.n_obs);
    let mut n_col = Vec::with_capacity(cfg.n_obs);
    let mut x = vec![0.0; p];
    for _ in 0..cfg.n_obs {
        let groups: Vec<usize> = cfg.groups.iter().map(|&g| rng.random_range(0..g)).collect();
        for k in 0..p {
            let z: f64 = StandardNormal.sample(rng);
            x[k] = if k == 0 { z } else { cfg.rho * x[k - 1] + innov * z };
        }
        let mut psi = cfg.intercept + x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
        for (j, &g) in groups.iter().enumerate() {
            psi += alpha[j][g];
        }
        let n = match cfg.trials {
            TrialsDist::Constant(n) => n,
            TrialsDist::Uniform { lo, hi } => rng.random_range(lo..=hi),
        };
        let y = Binomial::new(n as u64, logistic(psi)).expect("valid probability").sample(rng);
        for k in 0..p {
            x_cols[k].push(x[k].to_string());
        }
        for (j, &g) in groups.iter().enumerate() {
            g_cols[j].push(cfg.level(j, g));
        }
        y_col.push(y.to_string());
        n_col.push(n.to_string());
    }

    let mut headers = vec!["y".to_string(), "n".to_string()];
    headers.extend(cfg.covariate_names());
    headers.extend(cfg.effect_names());
    let mut columns = vec![y_col, n_col];
    columns.extend(x_cols);
    columns.extend(g_cols);
    let table = Table::new(headers, columns)?;

    let mut beta_names = vec![crate::formula::INTERCEPT.to_string()];
    beta_names.extend(cfg.covariate_names());
    let mut truth_beta = vec![cfg.intercept];
    truth_beta.extend(&beta);
    let mut alpha_names = Vec::new();
    let mut truth_alpha = Vec::new();
    for (j, name) in cfg.effect_names().iter().enumerate() {
        for g in 0..cfg.groups[j] {
            alpha_names.push(format!("{}.{}.{}", name, cfg.level(j, g), crate::formula::INTERCEPT));
            truth_alpha.push(alpha[j][g]);
        }
    }
    Ok(Simulation {
        config: cfg.clone(),
        table,
        truth: SimTruth { beta_names, beta: truth_beta, alpha_names, alpha: truth_alpha },
    })
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fresh successes `y_i ~ Binom(n_i, logistic(psi_i))` on the rows of `d`,
/// with `psi` from the given coefficients.
pub fn simulate_from_fit<R: Rng + ?Sized>(d: &DesignSet, beta: &[f64], alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    let psi = d.linear_predictor(beta, alpha)?;
    psi.iter()
        .zip(&d.n)
        .map(|(&eta, &n)| {
            if n.fract() != 0.0 {
                return Err(Error::data(format!("cannot simulate from non-integer trials {n}")));
            }
            Ok(Binomial::new(n as u64, logistic(eta)).expect("valid probability").sample(rng) as f64)
        })
        .collect()
}

/// The source table with successes replaced by a draw from [`simulate_from_fit`].
/// Rows dropped from the design (zero trials) keep their original values.
pub fn resample_table<R: Rng + ?Sized>(
    table: &Table,
    response: &str,
    d: &DesignSet,
    beta: &[f64],
    alpha: &[f64],
    rng: &mut R,
) -> Result<Table> {
    let y = simulate_from_fit(d, beta, alpha, rng)?;
    let mut col = table.column(response).ok_or_else(|| Error::data(format!("missing column `{response}`")))?.to_vec();
    for (&row, v) in d.row_ids.iter().zip(&y) {
        col[row] = v.to_string();
    }
    let mut out = table.clone();
    out.set_column(response, col)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_design_shape() {
        let sim = simulate_crossed(&SimConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let d = sim.design().unwrap();
        assert_eq!(d.n_obs(), 1000);
        assert_eq!(d.p(), 11);
        assert_eq!(d.q(), 20);
        assert_eq!(sim.truth.beta.len(), 11);
        assert_eq!(sim.truth.beta[0], 0.0);
        let (b, a) = sim.truth.aligned(&d.meta);
        assert_eq!(b, sim.truth.beta);
        assert_eq!(a, sim.truth.alpha);
        assert!(d.y.iter().all(|&y| y == 0.0 || y == 1.0));
    }

    #[test]
    fn truth_reproduces_outcome_rate() {
        // Under the truth, E[y] matches the mean fitted probability.
        let cfg = SimConfig { n_obs: 20_000, ..SimConfig::default() };
        let sim = simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let d = sim.design().unwrap();
        let (b, a) = sim.truth.aligned(&d.meta);
        let psi = d.linear_predictor(&b, &a).unwrap();
        let expect = psi.iter().map(|&v| logistic(v)).sum::<f64>() / d.n_obs() as f64;
        let observed = d.y.iter().sum::<f64>() / d.n_obs() as f64;
        assert!((expect - observed).abs() < 3.0 * (0.25 / d.n_obs() as f64).sqrt());
    }

    #[test]
    fn covariate_correlation() {
        let cfg = SimConfig { n_obs: 20_000, n_covariates: 3, ..SimConfig::default() };
        let sim = simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x1 = sim.table.numeric("x1").unwrap();
        let x3 = sim.table.numeric("x3").unwrap();
        let n = x1.len() as f64;
        let c13 = x1.iter().zip(&x3).map(|(a, b)| a * b).sum::<f64>() / n;
        let v1 = x1.iter().map(|a| a * a).sum::<f64>() / n;
        assert!((v1 - 1.0).abs() < 0.05);
        assert!((c13 - 0.25).abs() < 0.05, "{c13}");
    }

    #[test]
    fn deterministic_and_bounded() {
        let cfg = SimConfig { n_obs: 50, trials: TrialsDist::Uniform { lo: 1, hi: 5 }, ..SimConfig::default() };
        let a = simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.table, b.table);
        let d = a.design().unwrap();
        assert!(d.y.iter().zip(&d.n).all(|(y, n)| *y >= 0.0 && y <= n));
    }

    #[test]
    fn invalid_configs() {
        assert!(SimConfig { rho: 1.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { sigma_alpha: 0.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { trials: TrialsDist::Constant(0), ..SimConfig::default() }.validate().is_err());
    }

    #[test]
    fn from_fit_zero_params_and_determinism() {
        let cfg = SimConfig { n_obs: 4000, trials: TrialsDist::Constant(3), ..SimConfig::default() };
        let sim = simulate_crossed(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let d = sim.design().unwrap();
        let zeros_b = vec![0.0; d.p()];
        let zeros_a = vec![0.0; d.q()];
        let y = simulate_from_fit(&d, &zeros_b, &zeros_a, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let rate = y.iter().sum::<f64>() / d.n.iter().sum::<f64>();
        assert!((rate - 0.5).abs() < 0.015, "{rate}");
        let again = simulate_from_fit(&d, &zeros_b, &zeros_a, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(y, again);
        assert!(simulate_from_fit(&d, &zeros_b[1..], &zeros_a, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn psi_interval_under_defaults() {
        // Pooled over many draws of the design, the 5%-95% range of psi sits
        // near (-2.7, 2.3).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut psi = Vec::new();
        for _ in 0..200 {
            let sim = simulate_crossed(&SimConfig::default(), &mut rng).unwrap();
            let d = sim.design().unwrap();
            let (b, a) = sim.truth.aligned(&d.meta);
            psi.extend(d.linear_predictor(&b, &a).unwrap());
        }
        psi.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |f: f64| psi[(f * (psi.len() - 1) as f64) as usize];
        let (lo, hi) = (q(0.05), q(0.95));
        assert!(lo < -2.0 && lo > -3.2, "{lo}");
        assert!(hi > 2.0 && hi < 3.2, "{hi}");
    }
}

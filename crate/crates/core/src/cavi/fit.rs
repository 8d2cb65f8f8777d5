use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{pxvb_reduce, Cavi};
use super::init::{init_em, init_random};
use super::state::{Scheme, VariationalState};
use crate::design::DesignSet;
use crate::error::Result;
use crate::prior::PriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acceleration {
    /// Plain cyclic updates.
    Off,
    /// Cyclic updates followed by PX-VB recentring.
    Px,
    /// All means solved jointly each iteration.
    Joint,
    Both,
}

impl Acceleration {
    /// Joint means plus PX-VB for Schemes I and II; Scheme III already
    /// updates everything jointly.
    pub fn default_for(scheme: Scheme) -> Self {
        match scheme {
            Scheme::I | Scheme::II => Acceleration::Both,
            Scheme::III => Acceleration::Off,
        }
    }

    pub fn joint_means(self) -> bool {
        matches!(self, Acceleration::Joint | Acceleration::Both)
    }

    pub fn pxvb(self) -> bool {
        matches!(self, Acceleration::Px | Acceleration::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMethod {
    Em,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// `None` picks [`Acceleration::default_for`] the scheme.
    pub accel: Option<Acceleration>,
    pub tol_elbo: f64,
    pub tol_param: f64,
    pub max_iter: usize,
    pub init: InitMethod,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { accel: None, tol_elbo: 1e-8, tol_param: 1e-5, max_iter: 1000, init: InitMethod::Em }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergedBy {
    ElboTol,
    ParamTol,
    MaxIter,
}

/// Wall-clock seconds spent in each stage of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub pg: f64,
    pub means: f64,
    pub covariances: f64,
    pub sigma: f64,
    pub pxvb: f64,
    pub elbo: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub scheme: Scheme,
    pub accel: Acceleration,
    pub options: FitOptions,
    pub state: VariationalState,
    pub elbo_trace: Vec<f64>,
    pub iterations: usize,
    pub converged_by: ConvergedBy,
    pub stage_timings: Vec<StageTimings>,
}

impl FitReport {
    pub fn converged(&self) -> bool {
        self.converged_by != ConvergedBy::MaxIter
    }

    pub fn final_elbo(&self) -> f64 {
        *self.elbo_trace.last().expect("at least one iteration")
    }
}

/// Initializes per `opts.init` and runs CAVI to convergence.
pub fn fit(d: &DesignSet, prior: &PriorSpec, scheme: Scheme, opts: &FitOptions) -> Result<FitReport> {
    let state = match opts.init {
        InitMethod::Em => init_em(d, prior, scheme)?,
        InitMethod::Random { seed } => init_random(d, prior, scheme, &mut ChaCha8Rng::seed_from_u64(seed))?,
    };
    fit_from(d, prior, state, opts)
}

/// Runs CAVI from a given state.
///
/// One iteration: Polya-Gamma update, mean updates (joint or cyclic),
/// covariance updates, `Σ` update, optional PX-VB recentring, ELBO.
pub fn fit_from(d: &DesignSet, prior: &PriorSpec, mut state: VariationalState, opts: &FitOptions) -> Result<FitReport> {
    let scheme = state.scheme;
    let accel = opts.accel.unwrap_or_else(|| Acceleration::default_for(scheme));
    let mut cavi = Cavi::new(d, prior)?;
    let mut trace = Vec::new();
    let mut timings = Vec::new();
    let mut converged_by = ConvergedBy::MaxIter;
    for it in 0..opts.max_iter {
        let before = Snapshot::of(&state);
        timings.push(iterate(&mut cavi, &mut state, accel)?);
        let t = Instant::now();
        let elbo = cavi.elbo(&state)?;
        timings.last_mut().expect("pushed").elbo = t.elapsed().as_secs_f64();

        let change = before.max_change(&state);
        let prev = trace.last().copied();
        trace.push(elbo);
        if let Some(prev) = prev {
            if elbo < prev - 1e-10 * prev.abs() {
                log::warn!("ELBO decreased at iteration {it}: {prev} -> {elbo}");
            }
            if (elbo - prev).abs() < opts.tol_elbo {
                converged_by = ConvergedBy::ElboTol;
                break;
            }
        }
        if change < opts.tol_param {
            converged_by = ConvergedBy::ParamTol;
            break;
        }
    }
    let iterations = trace.len();
    log::debug!("scheme {:?} stopped after {iterations} iterations ({converged_by:?})", scheme);
    Ok(FitReport { scheme, accel, options: opts.clone(), state, elbo_trace: trace, iterations, converged_by, stage_timings: timings })
}

/// One CAVI iteration without the ELBO evaluation.
pub fn iterate(cavi: &mut Cavi<'_>, state: &mut VariationalState, accel: Acceleration) -> Result<StageTimings> {
    let mut tm = StageTimings::default();
    let t = Instant::now();
    cavi.update_pg(state)?;
    tm.pg = t.elapsed().as_secs_f64();

    let t = Instant::now();
    match state.scheme {
        Scheme::III => {
            cavi.update_joint(state)?;
            tm.means = t.elapsed().as_secs_f64();
        }
        Scheme::I | Scheme::II if accel.joint_means() => {
            cavi.joint_mean_update(state)?;
            tm.means = t.elapsed().as_secs_f64();
            let t = Instant::now();
            cavi.update_covariances(state)?;
            tm.covariances = t.elapsed().as_secs_f64();
        }
        Scheme::I | Scheme::II => {
            // Coordinate updates set mean and covariance of each block together.
            cavi.update_beta(state, true)?;
            cavi.update_alpha(state, true)?;
            tm.means = t.elapsed().as_secs_f64();
        }
    }

    let t = Instant::now();
    cavi.update_sigma(state);
    tm.sigma = t.elapsed().as_secs_f64();

    if accel.pxvb() {
        let t = Instant::now();
        pxvb_reduce(state, &cavi.design().meta);
        tm.pxvb = t.elapsed().as_secs_f64();
    }
    Ok(tm)
}

struct Snapshot {
    values: Vec<f64>,
}

impl Snapshot {
    fn flatten(state: &VariationalState) -> impl Iterator<Item = f64> + '_ {
        state
            .mu_beta
            .iter()
            .chain(&state.mu_alpha)
            .chain(state.iw.iter().flat_map(|iw| iw.phi.iter()))
            .chain(&state.pg.c)
            .copied()
    }

    fn of(state: &VariationalState) -> Self {
        Snapshot { values: Self::flatten(state).collect() }
    }

    fn max_change(&self, state: &VariationalState) -> f64 {
        self.values.iter().zip(Self::flatten(state)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

//! Subcommand implementations.

use std::io::Write;

use anyhow::{anyhow, bail, Context, Result};
use pgvi::cavi::{fit as cavi_fit, Acceleration, ConvergedBy, FitOptions, InitMethod, Scheme, StageTimings, VariationalState};
use pgvi::design::{design_from_formula, BuildOptions, DesignMeta, DesignSet};
use pgvi::draws::{read_draw_columns, PosteriorDraws};
use pgvi::evalkit::{column_block, compare_columns, kfold_cv, CvReport, MetricReport};
use pgvi::formula::parse_formula;
use pgvi::gibbs::{gibbs_run, GibbsOptions};
use pgvi::mavb::{mavb_improper, mavb_proper, sample_q};
use pgvi::prior::{InverseWishart, PriorSpec};
use pgvi::simlab::{resample_table, simulate_crossed, SimConfig, SimTruth, TrialsDist};
use pgvi::table::Table;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::manifest::{output, write_json, RunManifest};
use crate::{AccelArg, CompareArgs, CvArgs, DataArgs, DrawArgs, FitArgs, GibbsArgs, InitArg, MavbArg, ModelArgs, SimulateArgs};

pub const EXIT_PARSE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;
pub const EXIT_NOT_CONVERGED: u8 = 5;

#[derive(Debug)]
pub struct NotConverged {
    pub iterations: usize,
}

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "did not converge within {} iterations; partial fit written", self.iterations)
    }
}

impl std::error::Error for NotConverged {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NotConverged>().is_some() {
        return EXIT_NOT_CONVERGED;
    }
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<pgvi::Error>() {
            return match err {
                pgvi::Error::Formula(_) => EXIT_PARSE,
                err if err.is_numerical() => EXIT_NUMERICAL,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    1
}

fn delimiter(c: char) -> Result<u8> {
    u8::try_from(c).map_err(|_| anyhow!(pgvi::Error::InvalidArgument(format!("delimiter `{c}` is not a single byte"))))
}

fn load_table(manifest: &mut RunManifest, path: &str, delim: char) -> Result<Table> {
    let bytes = manifest.read_input(path)?;
    Table::from_reader(bytes.as_slice(), delimiter(delim)?).with_context(|| format!("parsing {path}"))
}

fn load_design(manifest: &mut RunManifest, a: &DataArgs) -> Result<(Table, DesignSet)> {
    let table = load_table(manifest, &a.data, a.delimiter)?;
    let d = manifest.time("design", || design_from_formula(&table, &a.formula, &BuildOptions { round_binomial: a.round_binomial }))?;
    for w in &d.warnings {
        log::warn!("{w}");
    }
    Ok((table, d))
}

fn fit_options(m: &ModelArgs) -> FitOptions {
    FitOptions {
        accel: m.accel.map(|a| match a {
            AccelArg::None => Acceleration::Off,
            AccelArg::Px => Acceleration::Px,
            AccelArg::Joint => Acceleration::Joint,
            AccelArg::Both => Acceleration::Both,
        }),
        tol_elbo: m.tol_elbo,
        tol_param: m.tol_param,
        max_iter: m.max_iter,
        init: match m.init {
            InitArg::Em => InitMethod::Em,
            InitArg::Random => InitMethod::Random { seed: m.seed },
        },
    }
}

fn scheme(m: &ModelArgs) -> Scheme {
    Scheme::from_number(m.scheme).expect("clap restricts the range")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CovarianceFactor {
    pub effect: String,
    pub covariates: Vec<String>,
    pub nu: f64,
    pub phi: Vec<Vec<f64>>,
    /// `E[Σ_j] = Φ̃ / (ν̃ - d - 1)` when finite.
    pub mean: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitDocument {
    pub manifest: RunManifest,
    pub formula: String,
    pub scheme: Scheme,
    pub accel: Acceleration,
    pub converged: bool,
    pub converged_by: ConvergedBy,
    pub iterations: usize,
    pub elbo: f64,
    pub elbo_trace: Vec<f64>,
    pub coefficients: Vec<Coefficient>,
    pub covariances: Vec<CovarianceFactor>,
    /// Seconds per stage summed over iterations.
    pub stage_totals: StageTimings,
    pub meta: DesignMeta,
    pub prior: PriorSpec,
    pub state: VariationalState,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn covariance_factor(e: &pgvi::design::EffectMeta, iw: &InverseWishart) -> CovarianceFactor {
    let d = iw.dim() as f64;
    CovarianceFactor {
        effect: e.name.clone(),
        covariates: e.covariates.clone(),
        nu: iw.nu,
        phi: rows(&iw.phi),
        mean: (iw.nu > d + 1.0).then(|| rows(&(&iw.phi / (iw.nu - d - 1.0)))),
    }
}

pub fn fit(a: &FitArgs) -> Result<()> {
    let mut manifest = RunManifest::new("fit", a, Some(a.model.seed));
    let (_, d) = load_design(&mut manifest, &a.data)?;
    let prior = PriorSpec::standard(&d.meta);
    let report = manifest.time("fit", || cavi_fit(&d, &prior, scheme(&a.model), &fit_options(&a.model)))?;
    let (vb, va) = report.state.cov.marginal_variances(&d.meta);
    let coefficients = d
        .meta
        .beta_names()
        .into_iter()
        .zip(report.state.mu_beta.iter().zip(&vb))
        .chain(d.meta.alpha_names().into_iter().zip(report.state.mu_alpha.iter().zip(&va)))
        .map(|(name, (m, v))| Coefficient { name, mean: *m, sd: v.sqrt() })
        .collect();
    let mut totals = StageTimings::default();
    for t in &report.stage_timings {
        totals.pg += t.pg;
        totals.means += t.means;
        totals.covariances += t.covariances;
        totals.sigma += t.sigma;
        totals.pxvb += t.pxvb;
        totals.elbo += t.elbo;
    }
    let doc = FitDocument {
        covariances: d.meta.effects.iter().zip(&report.state.iw).map(|(e, iw)| covariance_factor(e, iw)).collect(),
        manifest,
        formula: a.data.formula.clone(),
        scheme: report.scheme,
        accel: report.accel,
        converged: report.converged(),
        converged_by: report.converged_by,
        iterations: report.iterations,
        elbo: report.final_elbo(),
        elbo_trace: report.elbo_trace.clone(),
        coefficients,
        stage_totals: totals,
        meta: d.meta.clone(),
        prior,
        state: report.state.clone(),
    };
    write_json(a.out.as_deref(), &doc)?;
    if !doc.converged {
        return Err(NotConverged { iterations: doc.iterations }.into());
    }
    Ok(())
}

fn write_draws(path: Option<&str>, draws: &PosteriorDraws, manifest: &RunManifest) -> Result<()> {
    let mut w = output(path)?;
    draws.write_csv(&mut w, Some(&manifest.comment_line()))?;
    w.flush()?;
    Ok(())
}

pub fn draw(a: &DrawArgs) -> Result<()> {
    let mut manifest = RunManifest::new("draw", a, Some(a.seed));
    let bytes = manifest.read_input(&a.fit)?;
    let doc: FitDocument = serde_json::from_slice(&bytes).with_context(|| format!("parsing fit document {}", a.fit))?;
    if a.samples == 0 {
        bail!(pgvi::Error::InvalidArgument("--samples must be positive".into()));
    }
    if a.tau2.is_some() && a.mavb != MavbArg::Proper {
        log::warn!("--tau2 only applies to --mavb proper");
    }
    let raw = manifest.time("sample", || sample_q(&doc.state, &doc.meta, a.samples, a.seed))?;
    // MAVB draws its own randomness from a stream family separate from q's
    let mavb_seed = a.seed.wrapping_add(1);
    let draws = match a.mavb {
        MavbArg::Off => raw,
        MavbArg::Improper => manifest.time("mavb", || mavb_improper(&raw, mavb_seed))?,
        MavbArg::Proper => {
            let tau2 = a.tau2.or(doc.prior.working_tau2).ok_or_else(|| {
                pgvi::Error::InvalidArgument("--mavb proper needs --tau2".into())
            })?;
            manifest.time("mavb", || mavb_proper(&raw, tau2, mavb_seed))?
        }
    };
    write_draws(a.out.as_deref(), &draws, &manifest)
}

pub fn gibbs(a: &GibbsArgs) -> Result<()> {
    let mut manifest = RunManifest::new("gibbs", a, Some(a.seed));
    let (_, d) = load_design(&mut manifest, &a.data)?;
    let opts = GibbsOptions { iters: a.iters, burn_in: a.burn_in, thin: a.thin, augment: !a.no_augment, keep_omega: false };
    let chain = manifest.time("gibbs", || gibbs_run(&d, &PriorSpec::standard(&d.meta), &opts, a.seed))?;
    write_draws(a.out.as_deref(), &chain.draws, &manifest)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CvDocument {
    pub manifest: RunManifest,
    pub formula: String,
    pub report: CvReport,
}

pub fn cv(a: &CvArgs) -> Result<()> {
    let mut manifest = RunManifest::new("cv", a, Some(a.model.seed));
    let (_, d) = load_design(&mut manifest, &a.data)?;
    let prior = PriorSpec::standard(&d.meta);
    let report =
        manifest.time("cv", || kfold_cv(&d, &prior, scheme(&a.model), a.folds, a.model.seed, &fit_options(&a.model)))?;
    write_json(a.out.as_deref(), &CvDocument { manifest, formula: a.data.formula.clone(), report })
}

fn sim_config(a: &SimulateArgs) -> SimConfig {
    // the only preset is the default design; explicit flags override it
    let mut cfg = SimConfig { seed: a.seed, ..SimConfig::default() };
    if let Some(v) = a.n_obs {
        cfg.n_obs = v;
    }
    if let Some(v) = a.covariates {
        cfg.n_covariates = v;
    }
    if let Some(v) = &a.groups {
        cfg.groups = v.clone();
    }
    if let Some(v) = a.sigma_beta {
        cfg.sigma_beta = v;
    }
    if let Some(v) = a.sigma_alpha {
        cfg.sigma_alpha = v;
    }
    if let Some(v) = a.rho {
        cfg.rho = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = TrialsDist::Constant(v);
    }
    cfg
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("simulate", a, Some(a.seed));
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (table, truth) = match (&a.from_fit, &a.data) {
        (Some(fit_path), Some(data_path)) => {
            let bytes = manifest.read_input(fit_path)?;
            let doc: FitDocument = serde_json::from_slice(&bytes).with_context(|| format!("parsing fit document {fit_path}"))?;
            let table = load_table(&mut manifest, data_path, a.delimiter)?;
            let d = design_from_formula(&table, &doc.formula, &BuildOptions::default())?;
            if d.meta != doc.meta {
                bail!(pgvi::Error::InvalidArgument("data do not match the fitted design".into()));
            }
            let response = parse_formula(&doc.formula).map_err(pgvi::Error::from)?.response;
            let out = manifest.time("simulate", || {
                resample_table(&table, &response, &d, &doc.state.mu_beta, &doc.state.mu_alpha, &mut rng)
            })?;
            let truth = SimTruth {
                beta_names: doc.meta.beta_names(),
                beta: doc.state.mu_beta.clone(),
                alpha_names: doc.meta.alpha_names(),
                alpha: doc.state.mu_alpha.clone(),
            };
            (out, truth)
        }
        _ => {
            let cfg = sim_config(a);
            let sim = manifest.time("simulate", || simulate_crossed(&cfg, &mut rng))?;
            (sim.table, sim.truth)
        }
    };
    if let Some(p) = &a.truth {
        write_json(Some(p), &truth)?;
    }
    let mut w = output(a.out.as_deref())?;
    writeln!(w, "# {}", manifest.comment_line())?;
    table.write(&mut w, delimiter(a.delimiter)?)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompareDocument {
    pub manifest: RunManifest,
    pub report: MetricReport,
}

fn truth_vector(truth: &SimTruth, names: &[String]) -> Vec<f64> {
    let find = |list: &[String], vals: &[f64], key: &str| list.iter().position(|n| n == key).map_or(0.0, |k| vals[k]);
    names
        .iter()
        .map(|n| match n.strip_prefix("beta.") {
            Some(b) => find(&truth.beta_names, &truth.beta, b),
            None => find(&truth.alpha_names, &truth.alpha, n.strip_prefix("alpha.").unwrap_or(n)),
        })
        .collect()
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let mut manifest = RunManifest::new("compare", a, None);
    let reference = read_draw_columns(manifest.read_input(&a.reference)?.as_slice())?;
    let candidate = read_draw_columns(manifest.read_input(&a.candidate)?.as_slice())?;
    let truth = match &a.truth {
        Some(p) => {
            let t: SimTruth = serde_json::from_slice(&manifest.read_input(p)?).with_context(|| format!("parsing {p}"))?;
            let names: Vec<String> =
                candidate.columns.iter().filter(|(n, _)| column_block(n).is_some()).map(|(n, _)| n.clone()).collect();
            Some(truth_vector(&t, &names))
        }
        None => None,
    };
    let report = manifest.time("compare", || {
        compare_columns(&candidate.columns, &reference.columns, truth.as_deref(), (&a.candidate, &a.reference))
    })?;
    write_json(a.out.as_deref(), &CompareDocument { manifest, report })
}

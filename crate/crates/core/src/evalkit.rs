//! Comparison metrics between posterior approximations and predictive
//! checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cavi::{fit, FitOptions, Scheme};
use crate::design::DesignSet;
use crate::draws::PosteriorDraws;
use crate::error::{Error, Result};
use crate::prior::PriorSpec;
use crate::simlab::logistic;

/// Grid size of the density estimates behind [`accuracy`].
pub const KDE_GRID: usize = 512;

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(x: &[f64]) -> f64 {
    let (_, sd) = mean_sd(x);
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile(&s, 0.75) - quantile(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * (x.len() as f64).powf(-0.2)
}

/// Linearly binned Gaussian KDE on an equispaced grid.
fn binned_kde(x: &[f64], lo: f64, step: f64, h: f64) -> Vec<f64> {
    let mut counts = vec![0.0; KDE_GRID];
    for &v in x {
        let pos = ((v - lo) / step).clamp(0.0, (KDE_GRID - 1) as f64);
        let k = (pos.floor() as usize).min(KDE_GRID - 2);
        let frac = pos - k as f64;
        counts[k] += 1.0 - frac;
        counts[k + 1] += frac;
    }
    let norm = 1.0 / (x.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..KDE_GRID).map(|d| (-0.5 * (d as f64 * step / h).powi(2)).exp() * norm).collect();
    (0..KDE_GRID)
        .map(|i| counts.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(k, c)| c * kernel[i.abs_diff(k)]).sum())
        .collect()
}

/// `1 - ½ ∫ |f_a - f_b|` between kernel density estimates of two samples,
/// clamped to `[0, 1]`.
pub fn accuracy(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("accuracy needs two nonempty samples".into()));
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    if sa == 0.0 && sb == 0.0 && ma == mb {
        return Ok(1.0);
    }
    let lo_x = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi_x = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = lo_x.abs().max(hi_x.abs()).max(1.0);
    let floor = 1e-6 * scale;
    let h = (0.5 * (silverman_bandwidth(a) + silverman_bandwidth(b))).max(floor);
    let lo = lo_x - 3.0 * h;
    let hi = hi_x + 3.0 * h;
    let step = (hi - lo) / (KDE_GRID - 1) as f64;
    let fa = binned_kde(a, lo, step, h);
    let fb = binned_kde(b, lo, step, h);
    let diff: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).collect();
    let integral = step * (diff.iter().sum::<f64>() - 0.5 * (diff[0] + diff[KDE_GRID - 1]));
    Ok((1.0 - 0.5 * integral).clamp(0.0, 1.0))
}

/// Fraction of parameters whose truth lies within 1.96 posterior standard
/// deviations of the posterior mean.
pub fn coverage(draws: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    if draws.len() != truth.len() {
        return Err(Error::Dimension { what: "coverage truth", expected: draws.len(), found: truth.len() });
    }
    if draws.iter().any(|d| d.len() < 2) {
        return Err(Error::InvalidArgument("coverage needs at least two draws per parameter".into()));
    }
    let hits = draws
        .iter()
        .zip(truth)
        .filter(|(d, t)| {
            let (m, sd) = mean_sd(d);
            (*t - m).abs() <= 1.96 * sd
        })
        .count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean signed and root mean squared difference.
pub fn bias_rmse(candidate: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    if candidate.len() != reference.len() {
        return Err(Error::Dimension { what: "bias/rmse inputs", expected: reference.len(), found: candidate.len() });
    }
    let n = candidate.len() as f64;
    let (s, s2) = candidate.iter().zip(reference).fold((0.0, 0.0), |(s, s2), (c, r)| (s + (c - r), s2 + (c - r).powi(2)));
    Ok((s / n, (s2 / n).sqrt()))
}

/// Per-row binomial deviance `-2[y ln p + (n - y) ln(1 - p)]`; zero-trial
/// rows give `None`.
pub fn deviance_rows(y: &[f64], n: &[f64], p: &[f64]) -> Vec<Option<f64>> {
    y.iter()
        .zip(n)
        .zip(p)
        .map(|((&y, &n), &p)| {
            if n <= 0.0 {
                return None;
            }
            // 0 ln 0 = 0 so a saturated row at p = 0 or 1 stays finite
            let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * b.ln() };
            Some(-2.0 * (xlogy(y, p) + xlogy(n - y, 1.0 - p)))
        })
        .collect()
}

/// Mean deviance over rows with at least one trial.
pub fn deviance(y: &[f64], n: &[f64], p: &[f64]) -> Result<f64> {
    if y.len() != n.len() || p.len() != n.len() {
        return Err(Error::Dimension { what: "deviance inputs", expected: n.len(), found: y.len().min(p.len()) });
    }
    let rows: Vec<f64> = deviance_rows(y, n, p).into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::data("no rows with positive trials"));
    }
    let total = rows.iter().sum::<f64>() / rows.len() as f64;
    if total.is_infinite() {
        log::warn!("deviance is infinite: a predicted probability is 0 or 1 on a row that contradicts it");
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvPredictor {
    /// Plug-in `logistic(x^T μ_β + z^T μ_α)`.
    #[default]
    VariationalMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub scheme: Scheme,
    pub k: usize,
    pub seed: u64,
    pub predictor: CvPredictor,
    pub mean_deviance: f64,
    pub fold_deviance: Vec<f64>,
    pub fold_sizes: Vec<usize>,
}

/// Uniform random fold label per row.
pub fn fold_assignment(n_obs: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_obs).map(|_| rng.random_range(0..k)).collect()
}

/// K-fold cross-validated deviance. The reported mean is taken over all
/// held-out rows pooled; per-fold means are kept alongside.
pub fn kfold_cv(d: &DesignSet, prior: &PriorSpec, scheme: Scheme, k: usize, seed: u64, opts: &FitOptions) -> Result<CvReport> {
    if k < 2 {
        return Err(Error::InvalidArgument("cross-validation needs K >= 2".into()));
    }
    let folds = fold_assignment(d.n_obs(), k, seed);
    let mut test_rows = vec![Vec::new(); k];
    for (i, &f) in folds.iter().enumerate() {
        test_rows[f].push(i);
    }
    if let Some(f) = test_rows.iter().position(|r| r.is_empty()) {
        return Err(Error::data(format!("fold {f} received no rows; use a smaller K")));
    }
    let per_fold = test_rows
        .par_iter()
        .map(|test| {
            let train: Vec<usize> = (0..d.n_obs()).filter(|i| test.binary_search(i).is_err()).collect();
            if train.is_empty() {
                return Err(Error::data("a training split is empty; use a smaller K"));
            }
            let train_d = d.select_rows(&train)?;
            let test_d = d.select_rows(test)?;
            let report = fit(&train_d, prior, scheme, opts)?;
            let psi = test_d.linear_predictor_with(&train_d.meta, &report.state.mu_beta, &report.state.mu_alpha)?;
            let p: Vec<f64> = psi.into_iter().map(logistic).collect();
            Ok(deviance_rows(&test_d.y, &test_d.n, &p).into_iter().flatten().collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled: Vec<f64> = per_fold.iter().flatten().copied().collect();
    Ok(CvReport {
        scheme,
        k,
        seed,
        predictor: CvPredictor::VariationalMean,
        mean_deviance: pooled.iter().sum::<f64>() / pooled.len() as f64,
        fold_deviance: per_fold.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect(),
        fold_sizes: test_rows.iter().map(Vec::len).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMetric {
    pub name: String,
    /// `"fixed"` or the random-effect name.
    pub block: String,
    pub candidate_mean: f64,
    pub reference_mean: f64,
    pub candidate_sd: f64,
    pub reference_sd: f64,
    pub accuracy: f64,
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetric {
    pub block: String,
    pub n_params: usize,
    pub accuracy: f64,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub candidate: String,
    pub reference: String,
    pub params: Vec<ParamMetric>,
    pub blocks: Vec<BlockMetric>,
}

impl MetricReport {
    pub fn block(&self, name: &str) -> Option<&BlockMetric> {
        self.blocks.iter().find(|b| b.block == name)
    }

    /// Accuracy averaged over every random-effect coefficient.
    pub fn random_accuracy(&self) -> f64 {
        let v: Vec<f64> = self.params.iter().filter(|p| p.block != "fixed").map(|p| p.accuracy).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn fixed_accuracy(&self) -> f64 {
        self.block("fixed").map_or(f64::NAN, |b| b.accuracy)
    }
}

/// Block of a coefficient column: `"fixed"` for `beta.*`, the effect name for
/// `alpha.<effect>.*`, `None` otherwise.
pub fn column_block(name: &str) -> Option<String> {
    if name.starts_with("beta.") {
        return Some("fixed".into());
    }
    let rest = name.strip_prefix("alpha.")?;
    rest.split_once('.').map(|(e, _)| e.to_string())
}

/// Per-coefficient comparison of `candidate` against `reference`, averaged
/// within the fixed block and within each random effect. Bias and RMSE are
/// of candidate means against reference means; coverage of the candidate
/// against `truth` when given (ordered as `[beta, alpha]`).
pub fn compare_draws(
    candidate: &PosteriorDraws,
    reference: &PosteriorDraws,
    truth: Option<&[f64]>,
    labels: (&str, &str),
) -> Result<MetricReport> {
    if candidate.meta != reference.meta {
        return Err(Error::InvalidArgument("draws describe different models".into()));
    }
    compare_columns(&candidate.coefficient_columns(), &reference.coefficient_columns(), truth, labels)
}

/// [`compare_draws`] on named sample columns (`beta.*` and `alpha.*`; other
/// columns are ignored). Both sides must list the same coefficients in the
/// same order; `truth` follows that order.
pub fn compare_columns(
    candidate: &[(String, Vec<f64>)],
    reference: &[(String, Vec<f64>)],
    truth: Option<&[f64]>,
    labels: (&str, &str),
) -> Result<MetricReport> {
    let keep = |cols: &[(String, Vec<f64>)]| -> Vec<(String, String, Vec<f64>)> {
        cols.iter().filter_map(|(n, v)| column_block(n).map(|b| (n.clone(), b, v.clone()))).collect()
    };
    let cand = keep(candidate);
    let refc = keep(reference);
    if cand.len() != refc.len() || cand.iter().zip(&refc).any(|(a, b)| a.0 != b.0) {
        return Err(Error::InvalidArgument("draws describe different coefficients".into()));
    }
    if let Some(t) = truth {
        if t.len() != cand.len() {
            return Err(Error::Dimension { what: "truth", expected: cand.len(), found: t.len() });
        }
    }
    let params = cand
        .par_iter()
        .zip(refc.par_iter())
        .enumerate()
        .map(|(i, ((name, block, c), (_, _, r)))| {
            let (cm, cs) = mean_sd(c);
            let (rm, rs) = mean_sd(r);
            Ok(ParamMetric {
                name: name.clone(),
                block: block.clone(),
                candidate_mean: cm,
                reference_mean: rm,
                candidate_sd: cs,
                reference_sd: rs,
                accuracy: accuracy(c, r)?,
                covered: truth.map(|t| (t[i] - cm).abs() <= 1.96 * cs),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut names: Vec<String> = Vec::new();
    for p in &params {
        if !names.contains(&p.block) {
            names.push(p.block.clone());
        }
    }
    let blocks = names
        .into_iter()
        .map(|block| {
            let ps: Vec<&ParamMetric> = params.iter().filter(|p| p.block == block).collect();
            let n = ps.len() as f64;
            let cm: Vec<f64> = ps.iter().map(|p| p.candidate_mean).collect();
            let rm: Vec<f64> = ps.iter().map(|p| p.reference_mean).collect();
            let (bias, rmse) = bias_rmse(&cm, &rm)?;
            Ok(BlockMetric {
                n_params: ps.len(),
                accuracy: ps.iter().map(|p| p.accuracy).sum::<f64>() / n,
                bias,
                rmse,
                coverage: truth.map(|_| ps.iter().filter(|p| p.covered == Some(true)).count() as f64 / n),
                block,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport { candidate: labels.0.into(), reference: labels.1.into(), params, blocks })
}

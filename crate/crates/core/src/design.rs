//! Numeric design structures: dense fixed-effect matrix `X`, sparse
//! random-effect matrix `Z`, grouping indices and the fixed-to-random mapping.
//!
//! Random-effect coefficients are stacked effect-major, then by group, then by
//! covariate within the group, so column `offset_j + g * d_j + k` of `Z` holds
//! covariate `k` of effect `j` for rows that belong to group `g`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{parse_formula, validate_against_header, CheckedFormula, FixedTerm, Trials};
use crate::sparse::CscMatrix;
use crate::table::Table;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMeta {
    /// Grouping factor column.
    pub name: String,
    /// Covariate names, intercept first when present.
    pub covariates: Vec<String>,
    /// Group labels in column order (lexicographically sorted).
    pub levels: Vec<String>,
    /// First coefficient of this effect in the stacked `alpha`.
    pub offset: usize,
    /// Fixed-effect column carrying each covariate (the nonzero of each
    /// column of the mapping matrix `M_j`).
    pub mapping: Vec<usize>,
}

impl EffectMeta {
    pub fn dim(&self) -> usize {
        self.covariates.len()
    }

    pub fn n_groups(&self) -> usize {
        self.levels.len()
    }

    /// Number of coefficients, `d_j * g_j`.
    pub fn width(&self) -> usize {
        self.dim() * self.n_groups()
    }

    /// Index into the stacked `alpha` of covariate `k` in group `g`.
    #[inline]
    pub fn index(&self, g: usize, k: usize) -> usize {
        self.offset + g * self.dim() + k
    }

    pub fn group_range(&self, g: usize) -> std::ops::Range<usize> {
        let start = self.index(g, 0);
        start..start + self.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMeta {
    pub fixed_names: Vec<String>,
    pub effects: Vec<EffectMeta>,
}

impl DesignMeta {
    pub fn p(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn q(&self) -> usize {
        self.effects.iter().map(EffectMeta::width).sum()
    }

    pub fn beta_names(&self) -> Vec<String> {
        self.fixed_names.clone()
    }

    pub fn alpha_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.q());
        for e in &self.effects {
            for level in &e.levels {
                for cov in &e.covariates {
                    out.push(format!("{}.{}.{}", e.name, level, cov));
                }
            }
        }
        out
    }

    /// The `p x d_j` mapping matrix `M_j` of effect `j`.
    pub fn mapping_matrix(&self, j: usize) -> CscMatrix {
        let e = &self.effects[j];
        let triplets = e.mapping.iter().enumerate().map(|(k, &col)| (col, k, 1.0)).collect();
        CscMatrix::from_triplets(self.p(), e.dim(), triplets)
    }

    /// Adds `Σ_j M_j shift_j` to `beta`, where `shifts[j]` has length `d_j`.
    pub fn add_mapped(&self, beta: &mut [f64], shifts: &[Vec<f64>]) {
        for (e, shift) in self.effects.iter().zip(shifts) {
            for (k, &col) in e.mapping.iter().enumerate() {
                beta[col] += shift[k];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Round non-integer successes and trials to the nearest integer.
    pub round_binomial: bool,
}

/// Immutable numeric design built from a table and a checked formula.
#[derive(Debug, Clone)]
pub struct DesignSet {
    pub meta: DesignMeta,
    pub y: Vec<f64>,
    pub n: Vec<f64>,
    /// `s_i = y_i - n_i / 2`
    pub s: Vec<f64>,
    pub x: DMatrix<f64>,
    pub z: CscMatrix,
    /// Per effect, the group index of every row.
    pub groups: Vec<Vec<usize>>,
    /// Per effect, row-major `N x d_j` base covariates `z^b_{i,j}`.
    pub zb: Vec<Vec<f64>>,
    /// Source table row of every design row.
    pub row_ids: Vec<usize>,
    /// Source rows excluded because they carry zero trials.
    pub dropped_rows: Vec<usize>,
    pub warnings: Vec<String>,
}

struct EffectSpec {
    name: String,
    covariates: Vec<String>,
    mapping: Vec<usize>,
}

/// Parses `formula`, checks it against the table header and builds the design.
pub fn design_from_formula(table: &Table, formula: &str, opts: &BuildOptions) -> Result<DesignSet> {
    let checked = validate_against_header(parse_formula(formula)?, table.headers())?;
    build_design(table, &checked, opts)
}

pub fn build_design(table: &Table, formula: &CheckedFormula, opts: &BuildOptions) -> Result<DesignSet> {
    let mut warnings = Vec::new();
    let rows = table.n_rows();
    let mut y = table.numeric(&formula.response)?;
    let mut n = match &formula.trials {
        Trials::One => vec![1.0; rows],
        Trials::Column(c) => table.numeric(c)?,
    };

    let non_integer = y.iter().chain(&n).filter(|v| v.fract() != 0.0).count();
    if non_integer > 0 {
        let msg = if opts.round_binomial {
            y.iter_mut().chain(n.iter_mut()).for_each(|v| *v = v.round());
            format!("{non_integer} non-integer success/trial values rounded to the nearest integer")
        } else {
            format!("{non_integer} non-integer success/trial values used as weighted counts")
        };
        log::warn!("{msg}");
        warnings.push(msg);
    }
    for i in 0..rows {
        if n[i] < 0.0 || y[i] < 0.0 {
            return Err(Error::data(format!("row {}: negative successes or trials", i + 1)));
        }
        if y[i] > n[i] {
            return Err(Error::data(format!("row {}: successes {} exceed trials {}", i + 1, y[i], n[i])));
        }
    }

    let fixed_names: Vec<String> = formula.fixed.iter().map(|t| t.name().to_string()).collect();
    let mut fixed_cols = Vec::with_capacity(fixed_names.len());
    for term in &formula.fixed {
        fixed_cols.push(match term {
            FixedTerm::Intercept => vec![1.0; rows],
            FixedTerm::Column(c) => table.numeric(c)?,
        });
    }

    let mut specs = Vec::new();
    let mut labels = Vec::new();
    for re in &formula.re_terms {
        let terms = re.terms();
        let mapping = terms
            .iter()
            .map(|t| formula.fixed.iter().position(|f| f == t).expect("formula invariant: re covariate is fixed"))
            .collect();
        specs.push(EffectSpec {
            name: re.group.clone(),
            covariates: terms.iter().map(|t| t.name().to_string()).collect(),
            mapping,
        });
        labels.push(table.labels(&re.group)?);
    }

    let keep: Vec<usize> = (0..rows).filter(|&i| n[i] > 0.0).collect();
    let dropped_rows: Vec<usize> = (0..rows).filter(|&i| n[i] <= 0.0).collect();
    if !dropped_rows.is_empty() {
        let msg = format!("{} rows with zero trials excluded from fitting", dropped_rows.len());
        log::warn!("{msg}");
        warnings.push(msg);
    }
    if keep.is_empty() {
        return Err(Error::data("no rows with positive trials"));
    }

    let x = DMatrix::from_fn(keep.len(), fixed_names.len(), |r, c| fixed_cols[c][keep[r]]);
    let labels: Vec<Vec<&str>> = labels.iter().map(|l| keep.iter().map(|&i| l[i].as_str()).collect()).collect();
    assemble(
        fixed_names,
        specs,
        keep.iter().map(|&i| y[i]).collect(),
        keep.iter().map(|&i| n[i]).collect(),
        x,
        &labels,
        keep,
        dropped_rows,
        warnings,
    )
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    fixed_names: Vec<String>,
    specs: Vec<EffectSpec>,
    y: Vec<f64>,
    n: Vec<f64>,
    x: DMatrix<f64>,
    labels: &[Vec<&str>],
    row_ids: Vec<usize>,
    dropped_rows: Vec<usize>,
    warnings: Vec<String>,
) -> Result<DesignSet> {
    let rows = y.len();
    if let Some((r, c)) = (0..rows).flat_map(|r| (0..x.ncols()).map(move |c| (r, c))).find(|&(r, c)| !x[(r, c)].is_finite()) {
        return Err(Error::data(format!("non-finite covariate `{}` in row {}", fixed_names[c], row_ids[r] + 1)));
    }

    let mut effects = Vec::with_capacity(specs.len());
    let mut groups = Vec::with_capacity(specs.len());
    let mut zb = Vec::with_capacity(specs.len());
    let mut offset = 0;
    for (spec, lab) in specs.into_iter().zip(labels) {
        let levels: Vec<String> = lab.iter().copied().collect::<BTreeSet<_>>().into_iter().map(str::to_string).collect();
        let lookup: HashMap<&str, usize> = levels.iter().enumerate().map(|(g, l)| (l.as_str(), g)).collect();
        groups.push(lab.iter().map(|l| lookup[l]).collect::<Vec<_>>());
        let d = spec.mapping.len();
        let mut base = Vec::with_capacity(rows * d);
        for r in 0..rows {
            base.extend(spec.mapping.iter().map(|&c| x[(r, c)]));
        }
        zb.push(base);
        let meta = EffectMeta { name: spec.name, covariates: spec.covariates, levels, offset, mapping: spec.mapping };
        offset += meta.width();
        effects.push(meta);
    }
    let meta = DesignMeta { fixed_names, effects };

    let mut triplets = Vec::with_capacity(rows * meta.effects.iter().map(EffectMeta::dim).sum::<usize>());
    for (j, e) in meta.effects.iter().enumerate() {
        let d = e.dim();
        for r in 0..rows {
            let g = groups[j][r];
            for k in 0..d {
                triplets.push((r, e.index(g, k), zb[j][r * d + k]));
            }
        }
    }
    let z = CscMatrix::from_triplets(rows, meta.q(), triplets);
    let s = y.iter().zip(&n).map(|(y, n)| y - n / 2.0).collect();

    Ok(DesignSet { meta, y, n, s, x, z, groups, zb, row_ids, dropped_rows, warnings })
}

impl DesignSet {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.meta.p()
    }

    pub fn q(&self) -> usize {
        self.meta.q()
    }

    /// Nonzero entries `(alpha index, value)` of row `i` of `Z`.
    #[inline]
    pub fn z_row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.meta.effects.iter().enumerate().flat_map(move |(j, e)| {
            let d = e.dim();
            let g = self.groups[j][i];
            (0..d).map(move |k| (e.index(g, k), self.zb[j][i * d + k]))
        })
    }

    /// `z_{i,j}^T alpha_j`: the contribution of effect `j` to row `i`.
    #[inline]
    pub fn effect_contribution(&self, j: usize, i: usize, alpha: &[f64]) -> f64 {
        let e = &self.meta.effects[j];
        let d = e.dim();
        let g = self.groups[j][i];
        (0..d).map(|k| self.zb[j][i * d + k] * alpha[e.index(g, k)]).sum()
    }

    pub fn x_dot(&self, i: usize, beta: &[f64]) -> f64 {
        (0..self.p()).map(|c| self.x[(i, c)] * beta[c]).sum()
    }

    pub fn z_dot(&self, i: usize, alpha: &[f64]) -> f64 {
        (0..self.meta.effects.len()).map(|j| self.effect_contribution(j, i, alpha)).sum()
    }

    /// `psi = X beta + Z alpha`
    pub fn linear_predictor(&self, beta: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.p() {
            return Err(Error::Dimension { what: "beta", expected: self.p(), found: beta.len() });
        }
        if alpha.len() != self.q() {
            return Err(Error::Dimension { what: "alpha", expected: self.q(), found: alpha.len() });
        }
        let mut psi = self.z.mul_vec(alpha);
        for (i, v) in psi.iter_mut().enumerate() {
            *v += self.x_dot(i, beta);
        }
        Ok(psi)
    }

    /// Linear predictor for the rows of this design using coefficients fitted
    /// on a design described by `fitted`. Group levels unknown to the fitted
    /// design contribute zero (their prior mean).
    pub fn linear_predictor_with(&self, fitted: &DesignMeta, beta: &[f64], alpha: &[f64]) -> Result<Vec<f64>> {
        if fitted.fixed_names != self.meta.fixed_names || fitted.effects.len() != self.meta.effects.len() {
            return Err(Error::InvalidArgument("fitted design has a different model structure".into()));
        }
        if beta.len() != fitted.p() || alpha.len() != fitted.q() {
            return Err(Error::Dimension { what: "fitted coefficients", expected: fitted.p() + fitted.q(), found: beta.len() + alpha.len() });
        }
        let remap: Vec<Vec<Option<usize>>> = self
            .meta
            .effects
            .iter()
            .zip(&fitted.effects)
            .map(|(mine, theirs)| {
                let lookup: HashMap<&str, usize> =
                    theirs.levels.iter().enumerate().map(|(g, l)| (l.as_str(), g)).collect();
                mine.levels.iter().map(|l| lookup.get(l.as_str()).copied()).collect()
            })
            .collect();
        Ok((0..self.n_obs())
            .map(|i| {
                let mut psi = self.x_dot(i, beta);
                for (j, e) in fitted.effects.iter().enumerate() {
                    if let Some(g) = remap[j][self.groups[j][i]] {
                        let d = e.dim();
                        psi += (0..d).map(|k| self.zb[j][i * d + k] * alpha[e.index(g, k)]).sum::<f64>();
                    }
                }
                psi
            })
            .collect())
    }

    /// Sub-design on the given rows. Levels with no remaining rows are removed.
    pub fn select_rows(&self, rows: &[usize]) -> Result<DesignSet> {
        if rows.is_empty() {
            return Err(Error::data("row selection is empty"));
        }
        let specs = self
            .meta
            .effects
            .iter()
            .map(|e| EffectSpec { name: e.name.clone(), covariates: e.covariates.clone(), mapping: e.mapping.clone() })
            .collect();
        let labels: Vec<Vec<&str>> = self
            .meta
            .effects
            .iter()
            .enumerate()
            .map(|(j, e)| rows.iter().map(|&r| e.levels[self.groups[j][r]].as_str()).collect())
            .collect();
        let x = DMatrix::from_fn(rows.len(), self.p(), |r, c| self.x[(rows[r], c)]);
        assemble(
            self.meta.fixed_names.clone(),
            specs,
            rows.iter().map(|&r| self.y[r]).collect(),
            rows.iter().map(|&r| self.n[r]).collect(),
            x,
            &labels,
            rows.iter().map(|&r| self.row_ids[r]).collect(),
            Vec::new(),
            Vec::new(),
        )
    }

    /// Same design with new success counts.
    pub fn with_successes(&self, y: Vec<f64>) -> Result<DesignSet> {
        if y.len() != self.n_obs() {
            return Err(Error::Dimension { what: "successes", expected: self.n_obs(), found: y.len() });
        }
        if let Some(i) = (0..y.len()).find(|&i| !(0.0..=self.n[i]).contains(&y[i])) {
            return Err(Error::data(format!("successes out of range at design row {i}")));
        }
        let mut out = self.clone();
        out.s = y.iter().zip(&self.n).map(|(y, n)| y - n / 2.0).collect();
        out.y = y;
        Ok(out)
    }

    /// Same design with every trial count multiplied by `factor` (successes too).
    pub fn scaled_trials(&self, factor: f64) -> DesignSet {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|v| *v *= factor);
        out.n.iter_mut().for_each(|v| *v *= factor);
        out.s.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Full column rank check on `X` through the pivots of its Gram matrix.
    pub fn check_full_rank(&self) -> Result<()> {
        let gram = self.x.transpose() * &self.x;
        let scale = gram.diagonal().max().max(1.0);
        match gram.cholesky() {
            Some(ch) => {
                let min_pivot = ch.l().diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
                if min_pivot > 1e-10 * scale {
                    Ok(())
                } else {
                    Err(Error::RankDeficient)
                }
            }
            None => Err(Error::RankDeficient),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{parse_formula, validate_against_header};
    use proptest::prelude::*;

    pub(crate) fn table(cols: &[(&str, Vec<&str>)]) -> Table {
        Table::new(
            cols.iter().map(|(h, _)| h.to_string()).collect(),
            cols.iter().map(|(_, v)| v.iter().map(|s| s.to_string()).collect()).collect(),
        )
        .unwrap()
    }

    fn design(t: &Table, f: &str) -> Result<DesignSet> {
        let f = validate_against_header(parse_formula(f).unwrap(), t.headers()).unwrap();
        build_design(t, &f, &BuildOptions::default())
    }

    #[test]
    fn one_hot_random_intercept() {
        let t = table(&[("y", vec!["1", "0", "2"]), ("n", vec!["2", "1", "2"]), ("g", vec!["A", "B", "A"])]);
        let d = design(&t, "y/n ~ 1 + (1 | g)").unwrap();
        let z = d.z.to_dense();
        assert_eq!(z, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]));
        assert_eq!(d.s, vec![0.0, -0.5, 1.0]);
    }

    #[test]
    fn mapping_matrix_for_slope() {
        let t = table(&[
            ("y", vec!["1", "0"]),
            ("inc", vec!["0.5", "-1"]),
            ("rvote", vec!["0.1", "0.3"]),
            ("state", vec!["NY", "CA"]),
        ]);
        let d = design(&t, "y ~ 1 + inc + rvote + (1 + inc | state)").unwrap();
        let m = d.meta.mapping_matrix(0).to_dense();
        assert_eq!(m, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        assert_eq!(d.meta.effects[0].levels, vec!["CA", "NY"]);
        // NY row: group 1, columns 2,3 carry (1, inc)
        let z = d.z.to_dense();
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0, 0.5]);
        assert_eq!(z.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0, 0.0, 0.0]);
        for c in 0..2 {
            let col: Vec<f64> = m.column(c).iter().copied().collect();
            assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 1);
        }
    }

    #[test]
    fn linear_predictor_examples() {
        let t = table(&[("y", vec!["1", "0"]), ("g", vec!["A", "B"])]);
        let d = design(&t, "y ~ (1 | g)").unwrap();
        assert_eq!(d.linear_predictor(&[0.0], &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(d.linear_predictor(&[2.0], &[1.0, -1.0]).unwrap(), vec![3.0, 1.0]);
        assert!(d.linear_predictor(&[2.0, 1.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn data_errors() {
        let t = table(&[("y", vec!["3"]), ("n", vec!["2"])]);
        assert!(matches!(design(&t, "y/n ~ 1"), Err(Error::Data(_))));
        let t = table(&[("y", vec!["0"]), ("n", vec!["0"])]);
        assert!(matches!(design(&t, "y/n ~ 1"), Err(Error::Data(_))));
        let t = table(&[("y", vec!["1"]), ("x", vec!["inf"])]);
        assert!(matches!(design(&t, "y ~ x"), Err(Error::Data(_))));
    }

    #[test]
    fn zero_trial_rows_dropped_and_rounding() {
        let t = table(&[("y", vec!["1", "0", "1.4"]), ("n", vec!["2", "0", "2.6"]), ("g", vec!["a", "b", "a"])]);
        let f = validate_against_header(parse_formula("y/n ~ (1|g)").unwrap(), t.headers()).unwrap();
        let d = build_design(&t, &f, &BuildOptions { round_binomial: true }).unwrap();
        assert_eq!(d.n_obs(), 2);
        assert_eq!(d.dropped_rows, vec![1]);
        assert_eq!(d.row_ids, vec![0, 2]);
        assert_eq!(d.y, vec![1.0, 1.0]);
        assert_eq!(d.n, vec![2.0, 3.0]);
        assert_eq!(d.meta.effects[0].levels, vec!["a"]);
        assert_eq!(d.warnings.len(), 2);
    }

    #[test]
    fn select_rows_and_prediction_for_unseen_levels() {
        let t = table(&[("y", vec!["1", "0", "1"]), ("g", vec!["a", "b", "c"])]);
        let d = design(&t, "y ~ (1 | g)").unwrap();
        let train = d.select_rows(&[0, 2]).unwrap();
        assert_eq!(train.meta.effects[0].levels, vec!["a", "c"]);
        let psi = d.linear_predictor_with(&train.meta, &[0.5], &[1.0, 2.0]).unwrap();
        assert_eq!(psi, vec![1.5, 0.5, 2.5]);
    }

    #[test]
    fn rank_deficiency_detected() {
        let t = table(&[("y", vec!["1", "0", "1"]), ("a", vec!["1", "2", "3"]), ("b", vec!["2", "4", "6"])]);
        let d = design(&t, "y ~ 0 + a + b").unwrap();
        assert!(matches!(d.check_full_rank(), Err(Error::RankDeficient)));
        let d = design(&t, "y ~ 1 + a").unwrap();
        assert!(d.check_full_rank().is_ok());
    }

    proptest! {
        #[test]
        fn sparse_z_matches_dense(seed in 0u64..500) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let ys: Vec<String> = (0..n).map(|_| rng.random_range(0..2).to_string()).collect();
            let xs: Vec<String> = (0..n).map(|_| format!("{:.3}", rng.random::<f64>() - 0.5)).collect();
            let gs: Vec<String> = (0..n).map(|_| ["a", "b", "c"][rng.random_range(0..3)].to_string()).collect();
            let hs: Vec<String> = (0..n).map(|_| ["u", "v"][rng.random_range(0..2)].to_string()).collect();
            let t = Table::new(
                vec!["y".into(), "x".into(), "g".into(), "h".into()],
                vec![ys, xs, gs, hs],
            ).unwrap();
            let d = design(&t, "y ~ 1 + x + (1 + x | g) + (1 | h)").unwrap();
            let beta: Vec<f64> = (0..d.p()).map(|_| rng.random::<f64>() - 0.5).collect();
            let alpha: Vec<f64> = (0..d.q()).map(|_| rng.random::<f64>() - 0.5).collect();
            let psi = d.linear_predictor(&beta, &alpha).unwrap();
            let dense = &d.x * nalgebra::DVector::from_column_slice(&beta)
                + d.z.to_dense() * nalgebra::DVector::from_column_slice(&alpha);
            for i in 0..n {
                prop_assert!((psi[i] - dense[i]).abs() < 1e-12);
                prop_assert!((d.z_dot(i, &alpha) + d.x_dot(i, &beta) - dense[i]).abs() < 1e-12);
            }
            let per_row: usize = d.meta.effects.iter().map(|e| e.dim()).sum();
            for i in 0..n {
                prop_assert_eq!(d.z_row(i).count(), per_row);
            }
        }
    }
}

//! Polya-Gamma moments, the entropy-side ELBO terms and a truncated-series
//! sampler.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use serde::{Deserialize, Serialize};

/// Number of Gamma terms kept by [`pg_sample`]; the remainder is replaced by
/// its mean.
pub const SERIES_TERMS: usize = 200;

const SMALL_C: f64 = 1e-6;

/// Variational Polya-Gamma parameters, one `(b_i, c_i)` pair per observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgParams {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl PgParams {
    pub fn new(b: Vec<f64>, c: Vec<f64>) -> Self {
        assert_eq!(b.len(), c.len());
        PgParams { b, c }
    }

    pub fn means(&self) -> Vec<f64> {
        self.b.iter().zip(&self.c).map(|(&b, &c)| pg_mean(b, c)).collect()
    }
}

/// `E[omega]` for `omega ~ PG(b, c)`, i.e. `b / (2c) tanh(c / 2)`.
pub fn pg_mean(b: f64, c: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    let c = c.abs();
    if c < SMALL_C {
        b / 4.0 * (1.0 - c * c / 12.0)
    } else {
        b / (2.0 * c) * (c / 2.0).tanh()
    }
}

/// `ln cosh(x)` without overflow.
pub fn ln_cosh(x: f64) -> f64 {
    let x = x.abs();
    x + (-2.0 * x).exp().ln_1p() - std::f64::consts::LN_2
}

/// Net Polya-Gamma contribution to the ELBO once the intractable
/// `E[ln f_PG(omega | b, 0)]` terms have cancelled:
/// `Σ_i b_i c_i / 4 tanh(c_i / 2) - b_i ln cosh(c_i / 2)`.
///
/// The `-(Σ n_i) ln 2` constant is added by the ELBO assembler.
pub fn pg_elbo_terms(p: &PgParams) -> f64 {
    p.b.iter()
        .zip(&p.c)
        .map(|(&b, &c)| {
            let c = c.abs();
            b * c / 4.0 * (c / 2.0).tanh() - b * ln_cosh(c / 2.0)
        })
        .sum()
}

/// One draw from `PG(b, c)` using the first [`SERIES_TERMS`] terms of the
/// weighted Gamma convolution plus the exact mean of the discarded tail.
pub fn pg_sample<R: Rng + ?Sized>(b: u32, c: f64, rng: &mut R) -> f64 {
    if b == 0 {
        return 0.0;
    }
    let c = c.abs();
    let shift = c * c / (4.0 * PI * PI);
    let bf = b as f64;
    let gamma = (b > 1).then(|| Gamma::new(bf, 1.0).expect("shape is positive"));
    let mut acc = 0.0;
    let mut kept_mean = 0.0;
    for k in 1..=SERIES_TERMS {
        let h = k as f64 - 0.5;
        let inv = 1.0 / (h * h + shift);
        let g: f64 = match &gamma {
            None => Exp1.sample(rng),
            Some(dist) => dist.sample(rng),
        };
        acc += g * inv;
        kept_mean += inv;
    }
    let scale = 1.0 / (2.0 * PI * PI);
    let tail = (pg_mean(bf, c) - bf * scale * kept_mean).max(0.0);
    acc * scale + tail
}

//! Distributions with closed-form quantile functions.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::{Exp, Normal as NormalSampler};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, sd: f64 },
    /// `shift + Exp(rate)`.
    ShiftedExponential { shift: f64, rate: f64 },
    PointMass { value: f64 },
    /// Quantile function `sum_k w_k Q_k`, i.e. the comonotone mixture.
    QuantileMixture { components: Vec<Dist>, weights: Vec<f64> },
}

impl Dist {
    pub fn uniform(lo: f64, hi: f64) -> Self {
        Dist::Uniform { lo, hi }
    }

    pub fn normal(mean: f64, sd: f64) -> Self {
        Dist::Normal { mean, sd }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        match self {
            Dist::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
                bad(format!("uniform needs finite lo < hi, got [{lo}, {hi}]"))
            }
            Dist::Normal { mean, sd } if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) => {
                bad(format!("normal needs a finite mean and sd > 0, got ({mean}, {sd})"))
            }
            Dist::ShiftedExponential { shift, rate } if !(shift.is_finite() && rate.is_finite() && *rate > 0.0) => {
                bad(format!("shifted exponential needs rate > 0, got {rate}"))
            }
            Dist::PointMass { value } if !value.is_finite() => bad(format!("point mass at {value}")),
            Dist::QuantileMixture { components, weights } => {
                if components.is_empty() || components.len() != weights.len() {
                    return bad("mixture needs one weight per component".into());
                }
                if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad(format!("mixture weights {weights:?} are not on the simplex"));
                }
                components.iter().try_for_each(Dist::validate)
            }
            _ => Ok(()),
        }
    }

    /// Quantile at `p` in `[0, 1]`; unbounded families give infinities at
    /// the ends.
    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => lo + p * (hi - lo),
            Dist::Normal { mean, sd } => {
                if p <= 0.0 {
                    f64::NEG_INFINITY
                } else if p >= 1.0 {
                    f64::INFINITY
                } else {
                    mean + sd * Normal::standard().inverse_cdf(p)
                }
            }
            Dist::ShiftedExponential { shift, rate } => {
                if p >= 1.0 {
                    f64::INFINITY
                } else {
                    shift - (-p).ln_1p() / rate
                }
            }
            Dist::PointMass { value } => *value,
            Dist::QuantileMixture { components, weights } => {
                components.iter().zip(weights).map(|(c, w)| w * c.quantile(p)).sum()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Dist::Uniform { lo, hi } => lo + rng.random::<f64>() * (hi - lo),
            Dist::Normal { mean, sd } => rng.sample(NormalSampler::new(*mean, *sd).expect("validated")),
            Dist::ShiftedExponential { shift, rate } => shift + rng.sample(Exp::new(*rate).expect("validated")),
            Dist::PointMass { value } => *value,
            Dist::QuantileMixture { .. } => self.quantile(rng.sample(Open01)),
        }
    }

    /// Fills `out` with independent draws.
    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut Vec<f64>, n: usize) {
        out.clear();
        match self {
            Dist::Normal { mean, sd } => {
                let d = NormalSampler::new(*mean, *sd).expect("validated");
                out.extend((0..n).map(|_| rng.sample(d)));
            }
            _ => out.extend((0..n).map(|_| self.sample(rng))),
        }
    }
}

//! Monte Carlo driver: generate, estimate, compare with the oracle.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_with, oracle_dsc_truth, oracle_truth, replication_rng, validate, DgpSpec, Design};
use crate::cic::{estimate, CicCase, CicRequest};
use crate::dsc::{baseline_same_period_weights, build_ts_panel, dsc_counterfactual, fit_weights, DEFAULT_MIN_PERIODS};
use crate::error::{Error, Result};
use crate::panel::within_group_quantiles;
use crate::quantile::QuantileGrid;

fn cic_m() -> usize {
    QuantileGrid::DEFAULT_M
}

fn dsc_m() -> usize {
    crate::dsc::DEFAULT_M
}

/// Estimator run in each replication, with its target quantile pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// Returns the truth; a harness self-check.
    Oracle { tau_u: f64, tau_v: f64 },
    Cic {
        case: CicCase,
        tau_u: f64,
        tau_v: f64,
        #[serde(default = "cic_m")]
        grid_m: usize,
    },
    Dsc {
        tau_u: f64,
        tau_v: f64,
        #[serde(default = "dsc_m")]
        grid_m: usize,
        /// Same-period weights instead of quantile matching.
        #[serde(default)]
        same_period: bool,
    },
}

impl Estimator {
    pub fn taus(&self) -> (f64, f64) {
        match *self {
            Estimator::Oracle { tau_u, tau_v } | Estimator::Cic { tau_u, tau_v, .. } | Estimator::Dsc { tau_u, tau_v, .. } => {
                (tau_u, tau_v)
            }
        }
    }

    fn check(&self, spec: &DgpSpec) -> Result<()> {
        let (tu, tv) = self.taus();
        for tau in [tu, tv] {
            crate::quantile::check_probability(tau)?;
        }
        match (self, &spec.design) {
            (Estimator::Cic { .. }, Design::Dsc(_)) | (Estimator::Dsc { .. }, Design::Cic(_)) => Err(Error::Validation(format!(
                "estimator does not apply to scenario `{}`",
                spec.name
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub index: usize,
    pub estimate: f64,
    pub error: f64,
    /// Estimator by-products: matched levels, gaps, weights.
    pub aux: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub scenario: String,
    pub estimator: Estimator,
    pub seed: u64,
    pub reps: usize,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Standard deviation of the estimates across replications.
    pub sd: f64,
    /// Noise band: standard error of the mean estimate.
    pub se: f64,
    pub rmse: f64,
    pub aux_means: BTreeMap<String, f64>,
    pub replications: Vec<Replication>,
}

impl McResult {
    /// One row per replication: `index, estimate, error`, then aux columns.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let keys: Vec<&String> = self.aux_means.keys().collect();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["index".to_string(), "estimate".into(), "error".into()];
        header.extend(keys.iter().map(|k| k.to_string()));
        w.write_record(&header)?;
        for r in &self.replications {
            let mut row = vec![r.index.to_string(), r.estimate.to_string(), r.error.to_string()];
            row.extend(keys.iter().map(|k| r.aux.get(*k).map_or(String::new(), |v| v.to_string())));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn aux_values(&self, key: &str) -> Vec<f64> {
        self.replications.iter().filter_map(|r| r.aux.get(key).copied()).collect()
    }
}

fn run_one(spec: &DgpSpec, est: &Estimator, truth: f64, index: usize) -> Result<Replication> {
    let mut aux = BTreeMap::new();
    let estimate = match est {
        Estimator::Oracle { .. } => truth,
        Estimator::Cic { case, tau_u, tau_v, grid_m } => {
            let panel = generate_with(spec, &mut replication_rng(spec.seed, index as u64))?;
            let cq = within_group_quantiles(&panel, &QuantileGrid::default())?;
            let grid = QuantileGrid::new(*grid_m, QuantileGrid::DEFAULT_LO, QuantileGrid::DEFAULT_HI)?;
            let e = estimate(&cq, &CicRequest::new(*tau_u, *tau_v, *case).with_grids(grid.clone(), grid))?;
            aux.insert("qtt".into(), e.qtt);
            aux.insert("clamped".into(), e.clamped as f64);
            if let Some(t) = e.matched.tau_u_prime {
                aux.insert("tau_u_prime".into(), t);
            }
            if let Some(d) = e.matched.min_discrepancy {
                aux.insert("min_discrepancy".into(), d);
            }
            if let Some(d) = e.matched.dispersion {
                aux.insert("dispersion".into(), d);
                aux.insert("matched_pairs".into(), e.matched.pairs.len() as f64);
            }
            e.counterfactual
        }
        Estimator::Dsc { tau_u, tau_v, grid_m, same_period } => {
            let panel = generate_with(spec, &mut replication_rng(spec.seed, index as u64))?;
            let cq = within_group_quantiles(&panel, &QuantileGrid::default())?;
            let grid = QuantileGrid::new(*grid_m, QuantileGrid::DEFAULT_LO, QuantileGrid::DEFAULT_HI)?;
            let ts = build_ts_panel(&cq, panel.t0(), &grid, &grid, DEFAULT_MIN_PERIODS)?;
            let fit = if *same_period {
                baseline_same_period_weights(&cq, panel.t0(), &grid)?
            } else {
                fit_weights(&ts)?
            };
            let e = dsc_counterfactual(&ts, &fit, *tau_u, *tau_v)?;
            let (_, lambda) = oracle_dsc_truth(spec, *tau_u, *tau_v)?;
            let lambda_err = fit.weights.lambda.iter().zip(&lambda).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            aux.insert("gap".into(), e.gap);
            aux.insert("fit_residual".into(), e.fit_residual);
            aux.insert("kkt_residual".into(), fit.kkt_residual);
            aux.insert("lambda_error".into(), lambda_err);
            for (k, l) in fit.weights.lambda.iter().enumerate() {
                aux.insert(format!("lambda_{}", k + 1), *l);
            }
            e.counterfactual
        }
    };
    Ok(Replication { index, estimate, error: estimate - truth, aux })
}

/// Runs `reps` replications on streams `0..reps` of the scenario seed.
pub fn run_monte_carlo(spec: &DgpSpec, est: &Estimator, reps: usize) -> Result<McResult> {
    if reps < 2 {
        return Err(Error::Validation(format!("need at least 2 replications, got {reps}")));
    }
    validate(spec)?;
    est.check(spec)?;
    let (tu, tv) = est.taus();
    let truth = oracle_truth(spec, tu, tv)?;
    let replications: Vec<Replication> = (0..reps)
        .into_par_iter()
        .map(|i| run_one(spec, est, truth, i).map_err(|e| Error::Replication { index: i, source: Box::new(e) }))
        .collect::<Result<_>>()?;

    let n = reps as f64;
    let mean = replications.iter().map(|r| r.estimate).sum::<f64>() / n;
    let var = replications.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let rmse = (replications.iter().map(|r| r.error * r.error).sum::<f64>() / n).sqrt();
    let mut aux_means = BTreeMap::new();
    for r in &replications {
        for (k, v) in &r.aux {
            *aux_means.entry(k.clone()).or_insert(0.0) += v / n;
        }
    }
    Ok(McResult {
        scenario: spec.name.clone(),
        estimator: est.clone(),
        seed: spec.seed,
        reps,
        truth,
        mean,
        bias: mean - truth,
        sd: var.sqrt(),
        se: (var / n).sqrt(),
        rmse,
        aux_means,
        replications,
    })
}

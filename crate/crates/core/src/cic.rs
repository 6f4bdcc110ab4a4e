//! Changes-in-changes counterfactual quantiles with group heterogeneity.
//!
//! The target is the untreated potential outcome of the treated arm in the
//! post period at the quantile pair `(tau_u*, tau_v*)`: the `tau_v*`-th
//! quantile, across treated groups, of the within-group `tau_u*`-th quantile.
//! Three identification routes are available, each matching the treated arm
//! to control groups in the pre period and reading the answer off the
//! control arm in the post period:
//!
//! * [`CicCase::I`]: individual unobservables share one distribution across
//!   arms. The treated pre-period value is mapped to a control rank through
//!   the control cross-group CDF, averaged over the `tau_u` grid.
//! * [`CicCase::II`]: group unobservables share one distribution. A single
//!   control level `tau_u'` reproduces the treated cross-group curve.
//! * [`CicCase::III`]: outcomes depend on a time-invariant index of both
//!   unobservables. Every control pair `(tau_u', tau_v')` at the treated
//!   pre-period value is a valid match.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{cross_group_curve, CellQuantiles, Role};
use crate::quantile::{QuantileCurve, QuantileGrid};

/// Identification route.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CicCase {
    #[serde(rename = "1")]
    I,
    #[serde(rename = "2")]
    II,
    #[serde(rename = "3")]
    III,
}

impl CicCase {
    pub const ALL: [CicCase; 3] = [CicCase::I, CicCase::II, CicCase::III];

    pub fn number(self) -> u8 {
        match self {
            CicCase::I => 1,
            CicCase::II => 2,
            CicCase::III => 3,
        }
    }
}

/// What to estimate and on which grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicRequest {
    pub tau_u_star: f64,
    pub tau_v_star: f64,
    pub case: CicCase,
    pub grid_u: QuantileGrid,
    pub grid_v: QuantileGrid,
    /// Case II warning threshold on the matching discrepancy; data-driven
    /// when `None`.
    pub mismatch_tol: Option<f64>,
}

impl CicRequest {
    pub fn new(tau_u_star: f64, tau_v_star: f64, case: CicCase) -> Self {
        CicRequest {
            tau_u_star,
            tau_v_star,
            case,
            grid_u: QuantileGrid::default(),
            grid_v: QuantileGrid::default(),
            mismatch_tol: None,
        }
    }

    pub fn with_grids(mut self, grid_u: QuantileGrid, grid_v: QuantileGrid) -> Self {
        self.grid_u = grid_u;
        self.grid_v = grid_v;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.grid_u.strictly_contains(self.tau_u_star) {
            return Err(Error::Validation(format!(
                "tau_u* = {} must lie strictly inside the tau_u grid ({}, {})",
                self.tau_u_star,
                self.grid_u.lo(),
                self.grid_u.hi()
            )));
        }
        if !self.grid_v.strictly_contains(self.tau_v_star) {
            return Err(Error::Validation(format!(
                "tau_v* = {} must lie strictly inside the tau_v grid ({}, {})",
                self.tau_v_star,
                self.grid_v.lo(),
                self.grid_v.hi()
            )));
        }
        Ok(())
    }
}

/// A control quantile pair matched to the treated target in case III.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub tau_u: f64,
    pub tau_v: f64,
    /// Control post-period value at the pair.
    pub value: f64,
}

/// Matched quantile levels backing an estimate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchedLevels {
    /// Case I: control rank of the treated value at each `tau_u` grid point.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub composed_tau_v: Vec<f64>,
    /// Case II: the matched control level and its discrepancy.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tau_u_prime: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub min_discrepancy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mismatch_tol: Option<f64>,
    /// Case III: all matched pairs and the spread of their post values.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pairs: Vec<MatchedPair>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CicEstimate {
    pub case: CicCase,
    pub tau_u_star: f64,
    pub tau_v_star: f64,
    pub counterfactual: f64,
    pub observed: f64,
    /// `observed - counterfactual`.
    pub qtt: f64,
    pub matched: MatchedLevels,
    /// Number of composed probabilities clamped to the grid ends.
    pub clamped: usize,
    pub warnings: Vec<String>,
}

/// Pre and post period labels of a two-period panel.
pub fn two_periods(cq: &CellQuantiles) -> Result<(i64, i64)> {
    match cq.periods() {
        [pre, post] => Ok((*pre, *post)),
        other => Err(Error::Validation(format!(
            "changes-in-changes needs exactly two periods, found {}",
            other.len()
        ))),
    }
}

/// Treated-arm cross-group quantile in the post period.
pub fn observed_treated_quantile(
    cq: &CellQuantiles,
    tau_u: f64,
    tau_v: f64,
    grid_v: &QuantileGrid,
) -> Result<f64> {
    let (_, post) = two_periods(cq)?;
    Ok(cross_group_curve(cq, Role::Treated, post, tau_u, grid_v)?.eval(tau_v))
}

/// Dispatches on `req.case`.
pub fn estimate(cq: &CellQuantiles, req: &CicRequest) -> Result<CicEstimate> {
    match req.case {
        CicCase::I => estimate_case1(cq, req),
        CicCase::II => estimate_case2(cq, req),
        CicCase::III => estimate_case3(cq, req),
    }
}

fn finish(
    cq: &CellQuantiles,
    req: &CicRequest,
    counterfactual: f64,
    matched: MatchedLevels,
    clamped: usize,
    warnings: Vec<String>,
) -> Result<CicEstimate> {
    let observed = observed_treated_quantile(cq, req.tau_u_star, req.tau_v_star, &req.grid_v)?;
    Ok(CicEstimate {
        case: req.case,
        tau_u_star: req.tau_u_star,
        tau_v_star: req.tau_v_star,
        counterfactual,
        observed,
        qtt: observed - counterfactual,
        matched,
        clamped,
        warnings,
    })
}

/// Case I: average over the `tau_u` grid of
/// `Q_{N1(tau_u*)}(F_{N0(tau_u)}(Q_{I0(tau_u)}(tau_v*)))`.
pub fn estimate_case1(cq: &CellQuantiles, req: &CicRequest) -> Result<CicEstimate> {
    req.validate()?;
    let (pre, post) = two_periods(cq)?;
    let control_post = cross_group_curve(cq, Role::Control, post, req.tau_u_star, &req.grid_v)?;
    let composed: Vec<(f64, bool)> = req
        .grid_u
        .points()
        .par_iter()
        .map(|&tau_u| {
            let treated_pre = cross_group_curve(cq, Role::Treated, pre, tau_u, &req.grid_v)?;
            let control_pre = cross_group_curve(cq, Role::Control, pre, tau_u, &req.grid_v)?;
            let rank = control_pre.invert_clamped(treated_pre.eval(req.tau_v_star));
            Ok((rank.value, rank.clamped))
        })
        .collect::<Result<_>>()?;

    let m = composed.len() as f64;
    let counterfactual = composed
        .iter()
        .map(|&(tau_v, _)| control_post.eval(tau_v))
        .sum::<f64>()
        / m;
    let clamped = composed.iter().filter(|c| c.1).count();
    let mut warnings = Vec::new();
    if 2 * clamped > composed.len() {
        warnings.push(format!(
            "support violation suspected: composed rank clamped at the grid ends at {clamped} of {} tau_u points",
            composed.len()
        ));
    }
    let matched = MatchedLevels {
        composed_tau_v: composed.iter().map(|c| c.0).collect(),
        ..MatchedLevels::default()
    };
    finish(cq, req, counterfactual, matched, clamped, warnings)
}

fn discrepancy(cq: &CellQuantiles, pre: i64, tau: f64, target: &QuantileCurve, grid_v: &QuantileGrid) -> Result<f64> {
    let control = cross_group_curve(cq, Role::Control, pre, tau, grid_v)?;
    let n = target.values().len() as f64;
    Ok(control
        .values()
        .iter()
        .zip(target.values())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// Default case II threshold: four times the median, over the `tau_v` grid,
/// of the squared standard error of a difference between the treated and
/// control cross-group quantile curves. The standard error is estimated from
/// the local slope of the control curve.
pub fn default_mismatch_tol(cq: &CellQuantiles, control_pre: &QuantileCurve) -> f64 {
    let n_treated = cq.groups_in(Role::Treated).count().max(1) as f64;
    let n_control = cq.groups_in(Role::Control).count().max(1) as f64;
    let grid = control_pre.grid();
    let values = control_pre.values();
    let k = grid.len();
    if k < 2 {
        return 0.0;
    }
    let mut se2: Vec<f64> = (0..k)
        .map(|s| {
            let (a, b) = (s.saturating_sub(1), (s + 1).min(k - 1));
            let slope = (values[b] - values[a]) / (grid[b] - grid[a]);
            grid[s] * (1.0 - grid[s]) * (1.0 / n_treated + 1.0 / n_control) * slope * slope
        })
        .collect();
    se2.sort_unstable_by(f64::total_cmp);
    4.0 * median_sorted(&se2)
}

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Case II: find the control level `tau_u'` whose cross-group curve matches
/// the treated curve at `tau_u*`, then read the control post curve there.
pub fn estimate_case2(cq: &CellQuantiles, req: &CicRequest) -> Result<CicEstimate> {
    req.validate()?;
    let (pre, post) = two_periods(cq)?;
    let target = cross_group_curve(cq, Role::Treated, pre, req.tau_u_star, &req.grid_v)?;
    let points = req.grid_u.points();
    let coarse: Vec<f64> = points
        .par_iter()
        .map(|&tau| discrepancy(cq, pre, tau, &target, &req.grid_v))
        .collect::<Result<_>>()?;
    let best = coarse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("grid is nonempty");

    let mut lo = points[best.saturating_sub(1)];
    let mut hi = points[(best + 1).min(points.len() - 1)];
    let d = |tau: f64| discrepancy(cq, pre, tau, &target, &req.grid_v);
    while hi - lo > 1e-6 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if d(m1)? <= d(m2)? {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let refined = 0.5 * (lo + hi);
    let refined_d = d(refined)?;
    let (tau_u_prime, min_d) = if refined_d <= coarse[best] {
        (refined, refined_d)
    } else {
        (points[best], coarse[best])
    };

    let control_pre = cross_group_curve(cq, Role::Control, pre, tau_u_prime, &req.grid_v)?;
    let tol = req
        .mismatch_tol
        .unwrap_or_else(|| default_mismatch_tol(cq, &control_pre));
    let mut warnings = Vec::new();
    if min_d > tol {
        warnings.push(format!(
            "no matching control quantile level: minimum discrepancy {min_d:.4e} exceeds tolerance {tol:.4e}"
        ));
    }
    let counterfactual =
        cross_group_curve(cq, Role::Control, post, tau_u_prime, &req.grid_v)?.eval(req.tau_v_star);
    let matched = MatchedLevels {
        tau_u_prime: Some(tau_u_prime),
        min_discrepancy: Some(min_d),
        mismatch_tol: Some(tol),
        ..MatchedLevels::default()
    };
    finish(cq, req, counterfactual, matched, 0, warnings)
}

/// Case III: average the control post values over every control pair whose
/// pre-period value equals the treated pre-period target.
pub fn estimate_case3(cq: &CellQuantiles, req: &CicRequest) -> Result<CicEstimate> {
    req.validate()?;
    let (pre, post) = two_periods(cq)?;
    let target = cross_group_curve(cq, Role::Treated, pre, req.tau_u_star, &req.grid_v)?
        .eval(req.tau_v_star);
    let pairs: Vec<Option<MatchedPair>> = req
        .grid_u
        .points()
        .par_iter()
        .map(|&tau_u| {
            let control_pre = cross_group_curve(cq, Role::Control, pre, tau_u, &req.grid_v)?;
            let eps = 1e-12 * (1.0 + target.abs());
            if target < control_pre.min_value() - eps || target > control_pre.max_value() + eps {
                return Ok(None);
            }
            let tau_v = control_pre.invert(target);
            let value = cross_group_curve(cq, Role::Control, post, tau_u, &req.grid_v)?.eval(tau_v);
            Ok(Some(MatchedPair { tau_u, tau_v, value }))
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<MatchedPair> = pairs.into_iter().flatten().collect();
    if pairs.is_empty() {
        return Err(Error::Estimation(format!(
            "target level outside control support: treated pre-period value {target:.6} is not reached by any control curve"
        )));
    }
    let n = pairs.len() as f64;
    let counterfactual = pairs.iter().map(|p| p.value).sum::<f64>() / n;
    let dispersion = (pairs
        .iter()
        .map(|p| (p.value - counterfactual).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let matched = MatchedLevels {
        pairs,
        dispersion: Some(dispersion),
        ..MatchedLevels::default()
    };
    finish(cq, req, counterfactual, matched, 0, Vec::new())
}

//! Descriptive checks of which changes-in-changes route the data support.
//!
//! Each identification route implies a testable restriction on the
//! pre-period (and, for case III, post-period) control and treated curves:
//!
//! * case I: `psi(tau_u, tau_v) = F_{N0(tau_u)}(Q_{I0(tau_u)}(tau_v))` does not
//!   move with `tau_u`;
//! * case II: the control level `tau_u'` matching treated level `tau_u` does
//!   not move with `tau_v`;
//! * case III: control cells with equal pre-period values have equal
//!   post-period values.
//!
//! Each statistic measures the largest departure from its restriction. There
//! is no sampling theory for these statistics, so verdicts compare each one
//! with a split-half placebo: the control arm is split into two halves that
//! satisfy the restriction by construction, and the statistic computed on
//! the halves scales the threshold.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cic::{median_sorted, two_periods};
use crate::error::Result;
use crate::panel::{cross_group_curve, CellQuantiles, Role};
use crate::quantile::{QuantileCurve, QuantileGrid};

/// A statistic with the table it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticProfile {
    /// `None` when the restriction could not be checked anywhere.
    pub statistic: Option<f64>,
    pub tau_u: Vec<f64>,
    pub tau_v: Vec<f64>,
    /// Row per `tau_u`, column per `tau_v`; `None` marks excluded cells.
    pub table: Vec<Vec<Option<f64>>>,
    /// Cells excluded because an inversion hit the grid boundary, or cells
    /// without an in-band partner for case III.
    pub excluded: usize,
    /// Case III: band on pre-period values and the number of pairs inside it.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub band: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDiagnostic {
    pub statistic: Option<f64>,
    /// Statistic computed on the split-half placebo.
    pub placebo: Option<f64>,
    pub threshold: Option<f64>,
    pub verdict: Verdict,
    pub profile: DiagnosticProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub case1: CaseDiagnostic,
    pub case2: CaseDiagnostic,
    pub case3: CaseDiagnostic,
    pub threshold_multiplier: f64,
    pub notes: Vec<String>,
}

impl DiagnosticsReport {
    pub fn verdicts(&self) -> [Verdict; 3] {
        [self.case1.verdict, self.case2.verdict, self.case3.verdict]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticOptions {
    pub grid_u: QuantileGrid,
    pub grid_v: QuantileGrid,
    /// Case III band; the median adjacent gap of the pre-period control
    /// surface when `None`.
    pub band: Option<f64>,
    pub threshold_multiplier: f64,
}

impl Default for DiagnosticOptions {
    fn default() -> Self {
        DiagnosticOptions {
            grid_u: QuantileGrid::default(),
            grid_v: QuantileGrid::default(),
            band: None,
            threshold_multiplier: 3.0,
        }
    }
}

/// Cross-group curves of one arm and period, one per `tau_u` grid point.
fn surface(
    cq: &CellQuantiles,
    arm: Role,
    period: i64,
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
) -> Result<Vec<QuantileCurve>> {
    grid_u
        .points()
        .par_iter()
        .map(|&tau_u| cross_group_curve(cq, arm, period, tau_u, grid_v))
        .collect()
}

fn range(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut lo, mut hi, mut any) = (f64::INFINITY, f64::NEG_INFINITY, false);
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        any = true;
    }
    any.then_some(hi - lo)
}

fn max_option(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

fn case1_from_surfaces(
    treated_pre: &[QuantileCurve],
    control_pre: &[QuantileCurve],
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
) -> DiagnosticProfile {
    let table: Vec<Vec<Option<f64>>> = treated_pre
        .iter()
        .zip(control_pre)
        .map(|(t, c)| {
            grid_v
                .points()
                .iter()
                .map(|&tau_v| Some(c.invert(t.eval(tau_v))))
                .collect()
        })
        .collect();
    let statistic = max_option(
        (0..grid_v.len()).map(|s| range(table.iter().filter_map(|row| row[s]))),
    );
    DiagnosticProfile {
        statistic,
        tau_u: grid_u.points().to_vec(),
        tau_v: grid_v.points().to_vec(),
        table,
        excluded: 0,
        band: None,
        pairs: None,
    }
}

fn case2_from_surfaces(
    treated_pre: &[QuantileCurve],
    control_pre: &[QuantileCurve],
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
) -> DiagnosticProfile {
    // for each tau_v, the control value as a function of tau_u
    let columns: Vec<QuantileCurve> = grid_v
        .points()
        .iter()
        .map(|&tau_v| {
            let values = control_pre.iter().map(|c| c.eval(tau_v)).collect();
            QuantileCurve::new(grid_u, values).expect("surface column matches grid")
        })
        .collect();
    let mut excluded = 0;
    let table: Vec<Vec<Option<f64>>> = treated_pre
        .iter()
        .map(|t| {
            grid_v
                .points()
                .iter()
                .zip(&columns)
                .map(|(&tau_v, column)| {
                    let r = column.invert_clamped(t.eval(tau_v));
                    // a level pinned to a grid end is not identified
                    let pinned = r.clamped
                        || (r.value <= grid_u.lo() && t.eval(tau_v) < column.min_value())
                        || r.value >= grid_u.hi();
                    if pinned {
                        excluded += 1;
                        None
                    } else {
                        Some(r.value)
                    }
                })
                .collect()
        })
        .collect();
    let statistic = max_option(table.iter().map(|row| range(row.iter().flatten().copied())));
    DiagnosticProfile {
        statistic,
        tau_u: grid_u.points().to_vec(),
        tau_v: grid_v.points().to_vec(),
        table,
        excluded,
        band: None,
        pairs: None,
    }
}

/// Median absolute gap between adjacent grid values of a surface, in both
/// grid directions.
pub fn default_band(pre: &[QuantileCurve]) -> f64 {
    let mut gaps = Vec::new();
    for (m, curve) in pre.iter().enumerate() {
        for w in curve.values().windows(2) {
            gaps.push((w[1] - w[0]).abs());
        }
        if let Some(next) = pre.get(m + 1) {
            for (a, b) in curve.values().iter().zip(next.values()) {
                gaps.push((b - a).abs());
            }
        }
    }
    gaps.sort_unstable_by(f64::total_cmp);
    median_sorted(&gaps)
}

fn case3_from_surfaces(
    pre: &[QuantileCurve],
    post: &[QuantileCurve],
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
    band: Option<f64>,
) -> DiagnosticProfile {
    let band = band.unwrap_or_else(|| default_band(pre));
    let n_v = grid_v.len();
    let mut cells: Vec<(f64, f64, usize)> = Vec::with_capacity(pre.len() * n_v);
    for (m, (c0, c1)) in pre.iter().zip(post).enumerate() {
        for s in 0..n_v {
            cells.push((c0.values()[s], c1.values()[s], m * n_v + s));
        }
    }
    cells.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let mut worst: Vec<Option<f64>> = vec![None; cells.len()];
    let mut pairs = 0usize;
    for i in 0..cells.len() {
        let (y0, y1, a) = cells[i];
        for &(z0, z1, b) in &cells[i + 1..] {
            if z0 - y0 >= band {
                break;
            }
            pairs += 1;
            let d = (z1 - y1).abs();
            for idx in [a, b] {
                worst[idx] = Some(worst[idx].map_or(d, |w: f64| w.max(d)));
            }
        }
    }
    let excluded = worst.iter().filter(|w| w.is_none()).count();
    let statistic = max_option(worst.iter().copied());
    let table = worst.chunks(n_v).map(|row| row.to_vec()).collect();
    DiagnosticProfile {
        statistic,
        tau_u: grid_u.points().to_vec(),
        tau_v: grid_v.points().to_vec(),
        table,
        excluded,
        band: Some(band),
        pairs: Some(pairs),
    }
}

/// Case I: max over `tau_v` of the range over `tau_u` of `psi`.
pub fn diagnose_case1(cq: &CellQuantiles, grid_u: &QuantileGrid, grid_v: &QuantileGrid) -> Result<DiagnosticProfile> {
    let (pre, _) = two_periods(cq)?;
    let treated = surface(cq, Role::Treated, pre, grid_u, grid_v)?;
    let control = surface(cq, Role::Control, pre, grid_u, grid_v)?;
    Ok(case1_from_surfaces(&treated, &control, grid_u, grid_v))
}

/// Case II: max over `tau_u` of the range over `tau_v` of the matched `tau_u'`.
pub fn diagnose_case2(cq: &CellQuantiles, grid_u: &QuantileGrid, grid_v: &QuantileGrid) -> Result<DiagnosticProfile> {
    let (pre, _) = two_periods(cq)?;
    let treated = surface(cq, Role::Treated, pre, grid_u, grid_v)?;
    let control = surface(cq, Role::Control, pre, grid_u, grid_v)?;
    Ok(case2_from_surfaces(&treated, &control, grid_u, grid_v))
}

/// Case III: the largest post-period gap between control cells whose
/// pre-period values differ by less than `band`.
pub fn diagnose_case3(
    cq: &CellQuantiles,
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
    band: Option<f64>,
) -> Result<DiagnosticProfile> {
    let (pre, post) = two_periods(cq)?;
    let s0 = surface(cq, Role::Control, pre, grid_u, grid_v)?;
    let s1 = surface(cq, Role::Control, post, grid_u, grid_v)?;
    Ok(case3_from_surfaces(&s0, &s1, grid_u, grid_v, band))
}

/// Control groups split into two halves by alternating position.
fn control_halves(cq: &CellQuantiles) -> Option<(CellQuantiles, CellQuantiles)> {
    let controls: Vec<usize> = cq.groups_in(Role::Control).collect();
    if controls.len() < 2 {
        return None;
    }
    let a: Vec<usize> = controls.iter().copied().step_by(2).collect();
    let b: Vec<usize> = controls.iter().copied().skip(1).step_by(2).collect();
    Some((cq.subset(&a), cq.subset(&b)))
}

fn judge(statistic: Option<f64>, threshold: Option<f64>, scale: f64) -> Verdict {
    let eps = 1e-9 * (1.0 + scale);
    match (statistic, threshold) {
        (Some(s), Some(t)) if s <= t + eps => Verdict::Consistent,
        (Some(_), Some(_)) => Verdict::Inconsistent,
        (Some(s), None) if s <= eps => Verdict::Consistent,
        _ => Verdict::Undetermined,
    }
}

fn assemble(profile: DiagnosticProfile, placebo: Option<f64>, multiplier: f64, scale: f64) -> CaseDiagnostic {
    let threshold = placebo.map(|p| multiplier * p);
    CaseDiagnostic {
        statistic: profile.statistic,
        placebo,
        threshold,
        verdict: judge(profile.statistic, threshold, scale),
        profile,
    }
}

/// All three statistics with split-half thresholds and verdicts.
pub fn diagnose(cq: &CellQuantiles, opts: &DiagnosticOptions) -> Result<DiagnosticsReport> {
    let (pre, post) = two_periods(cq)?;
    let (gu, gv) = (&opts.grid_u, &opts.grid_v);
    let treated_pre = surface(cq, Role::Treated, pre, gu, gv)?;
    let control_pre = surface(cq, Role::Control, pre, gu, gv)?;
    let control_post = surface(cq, Role::Control, post, gu, gv)?;

    let p1 = case1_from_surfaces(&treated_pre, &control_pre, gu, gv);
    let p2 = case2_from_surfaces(&treated_pre, &control_pre, gu, gv);
    let p3 = case3_from_surfaces(&control_pre, &control_post, gu, gv, opts.band);

    let mut notes = vec![
        "verdicts are descriptive: thresholds scale with a split-half placebo, not a sampling distribution".to_string(),
        "the case I and case II restrictions characterize their conditions only when the treated supports are compact; this cannot be checked from data".to_string(),
        "case III: without equal supports across arms, a failed restriction cannot be told apart from a support failure".to_string(),
    ];

    let (placebo1, placebo2, placebo3) = match control_halves(cq) {
        Some((a, b)) => {
            // half A plays the treated arm; both halves share the restriction
            let a_pre = surface(&a, Role::Control, pre, gu, gv)?;
            let b_pre = surface(&b, Role::Control, pre, gu, gv)?;
            let a_post = surface(&a, Role::Control, post, gu, gv)?;
            let b_post = surface(&b, Role::Control, post, gu, gv)?;
            (
                case1_from_surfaces(&a_pre, &b_pre, gu, gv).statistic,
                case2_from_surfaces(&a_pre, &b_pre, gu, gv).statistic,
                case3_from_surfaces(&a_post, &b_post, gu, gv, None).statistic,
            )
        }
        None => {
            notes.push("fewer than two control groups: no split-half placebo, verdicts need an exact zero".into());
            (None, None, None)
        }
    };

    let value_scale = control_post
        .iter()
        .chain(&control_pre)
        .flat_map(|c| [c.min_value().abs(), c.max_value().abs()])
        .fold(0.0, f64::max);
    let m = opts.threshold_multiplier;
    Ok(DiagnosticsReport {
        case1: assemble(p1, placebo1, m, 1.0),
        case2: assemble(p2, placebo2, m, 1.0),
        case3: assemble(p3, placebo3, m, value_scale),
        threshold_multiplier: m,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn grid(m: usize) -> QuantileGrid {
        QuantileGrid::new(m, 0.05, 0.95).unwrap()
    }

    fn spread(n: usize, q: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..n).map(|k| q((k as f64 + 0.5) / n as f64)).collect()
    }

    /// Population cells `h(Q_U(tau_u), v, t)` for given group effects.
    fn cells(
        vi: &[f64],
        vn: &[f64],
        qu_i: impl Fn(f64) -> f64,
        qu_n: impl Fn(f64) -> f64,
        h: impl Fn(f64, f64, i64) -> f64,
        g: &QuantileGrid,
    ) -> CellQuantiles {
        let mut groups = Vec::new();
        let mut by_cell = BTreeMap::new();
        for (role, vs) in [(Role::Treated, vi), (Role::Control, vn)] {
            for &v in vs {
                let idx = groups.len();
                groups.push((format!("g{idx:04}"), role));
                for t in 0..2 {
                    let values = g
                        .points()
                        .iter()
                        .map(|&tau| {
                            let u = if role == Role::Treated { qu_i(tau) } else { qu_n(tau) };
                            h(u, v, t)
                        })
                        .collect();
                    by_cell.insert((idx, t), QuantileCurve::new(g, values).unwrap());
                }
            }
        }
        CellQuantiles::from_curves(g.clone(), groups, 0, by_cell).unwrap()
    }

    fn additive(u: f64, v: f64, t: i64) -> f64 {
        u + v + t as f64
    }

    #[test]
    fn identical_arms_give_zero_statistics() {
        let g = grid(21);
        let vs = spread(40, |p| p);
        let cq = cells(&vs, &vs, |u| u, |u| u, additive, &g);
        let report = diagnose(&cq, &DiagnosticOptions { grid_u: g.clone(), grid_v: g.clone(), ..Default::default() }).unwrap();
        assert!(report.case1.statistic.unwrap() < 1e-12);
        assert!(report.case2.statistic.unwrap() < 1e-12);
        assert_eq!(report.verdicts()[..2], [Verdict::Consistent, Verdict::Consistent]);
        let p1 = diagnose_case1(&cq, &g, &g).unwrap();
        for row in &p1.table {
            for (cell, &tau_v) in row.iter().zip(g.points()) {
                assert!((cell.unwrap() - tau_v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn case1_population_restriction_holds_and_fails() {
        let g = grid(31);
        // U common, V differs: psi is tau_u-free
        let cq = cells(&spread(200, |p| p), &spread(200, |p| 2.0 * p), |u| u, |u| u, additive, &g);
        assert!(diagnose_case1(&cq, &g, &g).unwrap().statistic.unwrap() < 1e-9);
        // U differs, V common: psi moves with tau_u
        let vs = spread(200, |p| p);
        let cq = cells(&vs, &vs, |u| 0.5 + 0.5 * u, |u| u, additive, &g);
        assert!(diagnose_case1(&cq, &g, &g).unwrap().statistic.unwrap() > 0.2);
    }

    #[test]
    fn case2_population_restriction_holds_and_fails() {
        let g = grid(31);
        let vs = spread(200, |p| p);
        let cq = cells(&vs, &vs, |u| 0.5 + 0.5 * u, |u| u, additive, &g);
        let p = diagnose_case2(&cq, &g, &g).unwrap();
        assert!(p.statistic.unwrap() < 1e-9, "{:?}", p.statistic);
        assert!(p.excluded > 0);

        let cq = cells(&spread(200, |p| p), &spread(200, |p| 2.0 * p), |u| u, |u| u, additive, &g);
        assert!(diagnose_case2(&cq, &g, &g).unwrap().statistic.unwrap() > 0.2);
    }

    #[test]
    fn case3_population_restriction_holds_and_fails() {
        let g = grid(21);
        let vs = spread(100, |p| p);
        let index = |u: f64, v: f64, t: i64| if t == 0 { u + v } else { (u + v).exp() };
        let cq = cells(&vs, &vs, |u| u, |u| u, index, &g);
        // exp is e^2-Lipschitz on [0, 2], so in-band gaps stay below e^2 * band
        let tight = diagnose_case3(&cq, &g, &g, Some(0.01)).unwrap();
        assert!(tight.statistic.unwrap() < 0.01 * 2f64.exp());
        assert!(tight.pairs.unwrap() > 0);
        let mixed = |u: f64, v: f64, t: i64| if t == 0 { u + v } else { u + 2.0 * v };
        let cq = cells(&vs, &vs, |u| u, |u| u, mixed, &g);
        assert!(diagnose_case3(&cq, &g, &g, Some(0.01)).unwrap().statistic.unwrap() > 0.3);
    }

    #[test]
    fn case3_without_pairs_is_undefined() {
        let g = grid(5);
        let cq = cells(&[0.0], &[0.0, 10.0], |u| 100.0 * u, |u| 100.0 * u, additive, &g);
        let p = diagnose_case3(&cq, &g, &g, Some(1e-6)).unwrap();
        assert_eq!(p.statistic, None);
        assert_eq!(p.pairs, Some(0));
    }

    #[test]
    fn statistics_are_shift_invariant() {
        let g = grid(15);
        let vi = spread(37, |p| p * p);
        let vn = spread(41, |p| 2.0 * p);
        let cq = cells(&vi, &vn, |u| 0.2 + 0.7 * u, |u| u, |u, v, t| u + v + 0.5 * t as f64, &g);
        let shifted = cells(&vi, &vn, |u| 0.2 + 0.7 * u, |u| u, |u, v, t| u + v + 0.5 * t as f64 + 3.0, &g);
        let opts = DiagnosticOptions { grid_u: g.clone(), grid_v: g.clone(), ..Default::default() };
        let a = diagnose(&cq, &opts).unwrap();
        let b = diagnose(&shifted, &opts).unwrap();
        for (x, y) in [(&a.case1, &b.case1), (&a.case2, &b.case2), (&a.case3, &b.case3)] {
            let (x, y) = (x.statistic.unwrap(), y.statistic.unwrap());
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn single_control_group_has_no_placebo() {
        let g = grid(9);
        let cq = cells(&[0.0], &[0.0], |u| u, |u| u, additive, &g);
        let report = diagnose(&cq, &DiagnosticOptions { grid_u: g.clone(), grid_v: g.clone(), ..Default::default() }).unwrap();
        assert_eq!(report.case1.placebo, None);
        assert_eq!(report.case1.verdict, Verdict::Consistent);
        assert!(report.notes.iter().any(|n| n.contains("fewer than two")));
    }
}

//! Distributional synthetic control with time-series quantile matching.
//!
//! With a single treated group observed over many periods, the group-level
//! variation `V_gt` is traced out over time instead of across groups. For a
//! fixed individual level `tau_u`, each group contributes a time series
//! `Y_gt(tau_u)`; its quantile curve over the pre-treatment periods is
//! matched by a simplex-weighted mix of the control groups' curves, and the
//! same weights applied to the post-treatment curves give the counterfactual.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{CellQuantiles, Role};
use crate::quantile::{QuantileCurve, QuantileGrid, Sample};
use crate::simplex::{kkt_residual, solve_simplex_ls, SimplexLsProblem};

/// Default grid size for the pooled weight objective.
pub const DEFAULT_M: usize = 29;
pub const DEFAULT_MIN_PERIODS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Pre,
    Post,
}

impl Regime {
    fn index(self) -> usize {
        match self {
            Regime::Pre => 0,
            Regime::Post => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Regime::Pre => "pre",
            Regime::Post => "post",
        }
    }
}

/// Time-series quantile curves per group and regime.
///
/// Group 0 is the treated group; the rest are controls in panel order. The
/// within-group curves of every period are kept, so curves at any `tau_u`
/// can be formed, and the curves at `grid_u` are tabulated on `grid_v`.
#[derive(Debug, Clone)]
pub struct TsQuantilePanel {
    grid_u: QuantileGrid,
    grid_v: QuantileGrid,
    t0: i64,
    groups: Vec<String>,
    series: Vec<[Vec<QuantileCurve>; 2]>,
    tables: Vec<[Vec<QuantileCurve>; 2]>,
}

impl TsQuantilePanel {
    pub fn grid_u(&self) -> &QuantileGrid {
        &self.grid_u
    }

    pub fn grid_v(&self) -> &QuantileGrid {
        &self.grid_v
    }

    pub fn t0(&self) -> i64 {
        self.t0
    }

    /// Treated group first, then controls.
    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn controls(&self) -> &[String] {
        &self.groups[1..]
    }

    pub fn n_periods(&self, group: usize, regime: Regime) -> usize {
        self.series[group][regime.index()].len()
    }

    /// Tabulated curves at the points of `grid_u`.
    pub fn table(&self, group: usize, regime: Regime) -> &[QuantileCurve] {
        &self.tables[group][regime.index()]
    }

    /// Values of `Y_gt(tau_u)` over the periods of a regime.
    pub fn series_values(&self, group: usize, regime: Regime, tau_u: f64) -> Vec<f64> {
        self.series[group][regime.index()].iter().map(|c| c.eval(tau_u)).collect()
    }

    /// `tau_v -> Q_{Y_{g,regime}(tau_u)}(tau_v)` on `grid_v`.
    pub fn curve(&self, group: usize, regime: Regime, tau_u: f64) -> QuantileCurve {
        ts_curve(&self.series[group][regime.index()], tau_u, &self.grid_v)
    }

    /// `Q_{Y_{g,regime}(tau_u)}(tau_v)` at arbitrary levels.
    pub fn value(&self, group: usize, regime: Regime, tau_u: f64, tau_v: f64) -> f64 {
        let sample = Sample::new(self.series_values(group, regime, tau_u)).expect("regime is non-empty");
        sample.quantile(tau_v)
    }
}

fn ts_curve(series: &[QuantileCurve], tau_u: f64, grid_v: &QuantileGrid) -> QuantileCurve {
    let values = series.iter().map(|c| c.eval(tau_u)).collect();
    QuantileCurve::from_sample(&Sample::new(values).expect("regime is non-empty"), grid_v)
}

fn single_treated(cq: &CellQuantiles) -> Result<usize> {
    let treated: Vec<usize> = cq.groups_in(Role::Treated).collect();
    match treated.as_slice() {
        [g] => Ok(*g),
        [] => Err(Error::Validation("synthetic control needs a treated group".into())),
        _ => Err(Error::Validation(format!(
            "synthetic control needs exactly one treated group, found {}",
            treated.len()
        ))),
    }
}

/// Splits every group's periods at `t0` and tabulates the time-series curves.
pub fn build_ts_panel(
    cq: &CellQuantiles,
    t0: i64,
    grid_u: &QuantileGrid,
    grid_v: &QuantileGrid,
    min_periods: usize,
) -> Result<TsQuantilePanel> {
    let periods = cq.periods();
    let (first, last) = match (periods.first(), periods.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::Validation("panel has no periods".into())),
    };
    if t0 >= last {
        return Err(Error::Validation(format!("no post-treatment regime: t0 = {t0} but the last period is {last}")));
    }
    if t0 < first {
        return Err(Error::Validation(format!("no pre-treatment regime: t0 = {t0} but the first period is {first}")));
    }
    let treated = single_treated(cq)?;
    let order: Vec<usize> = std::iter::once(treated).chain(cq.groups_in(Role::Control)).collect();
    let mut groups = Vec::with_capacity(order.len());
    let mut series = Vec::with_capacity(order.len());
    for &g in &order {
        let mut split: [Vec<QuantileCurve>; 2] = [Vec::new(), Vec::new()];
        for &t in periods {
            if let Some(c) = cq.curve(g, t) {
                split[usize::from(t > t0)].push(c.clone());
            }
        }
        for regime in [Regime::Pre, Regime::Post] {
            let n = split[regime.index()].len();
            if n < min_periods {
                return Err(Error::Validation(format!(
                    "group `{}` has {n} {} periods (minimum {min_periods})",
                    cq.groups()[g],
                    regime.name()
                )));
            }
        }
        groups.push(cq.groups()[g].clone());
        series.push(split);
    }
    let tables = series
        .par_iter()
        .map(|split: &[Vec<QuantileCurve>; 2]| {
            let tab = |s: &Vec<QuantileCurve>| -> Vec<QuantileCurve> {
                grid_u.points().iter().map(|&tau_u| ts_curve(s, tau_u, grid_v)).collect()
            };
            [tab(&split[0]), tab(&split[1])]
        })
        .collect();
    Ok(TsQuantilePanel {
        grid_u: grid_u.clone(),
        grid_v: grid_v.clone(),
        t0,
        groups,
        series,
        tables,
    })
}

/// Nonnegative weights on the control groups summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexWeights {
    pub groups: Vec<String>,
    pub lambda: Vec<f64>,
}

impl SimplexWeights {
    pub fn new(groups: Vec<String>, lambda: Vec<f64>) -> Result<Self> {
        if groups.len() != lambda.len() {
            return Err(Error::Validation("one weight per control group".into()));
        }
        if lambda.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::Validation("weights must be nonnegative".into()));
        }
        let sum: f64 = lambda.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!("weights sum to {sum}, not 1")));
        }
        Ok(SimplexWeights { groups, lambda })
    }

    pub fn get(&self, group: &str) -> Option<f64> {
        self.groups.iter().position(|g| g == group).map(|i| self.lambda[i])
    }
}

/// Fitted weights with the attained objective and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFit {
    pub weights: SimplexWeights,
    pub fit_residual: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub ties: Vec<(usize, usize)>,
    pub notes: Vec<String>,
}

fn solve(groups: Vec<String>, design: DMatrix<f64>, target: DVector<f64>) -> Result<WeightFit> {
    let problem = SimplexLsProblem::new(design, target)?;
    let sol = solve_simplex_ls(&problem)?;
    let kkt = kkt_residual(&problem, &sol.weights);
    Ok(WeightFit {
        weights: SimplexWeights::new(groups, sol.weights)?,
        fit_residual: sol.objective,
        kkt_residual: kkt,
        iterations: sol.iterations,
        ties: sol.ties,
        notes: sol.notes,
    })
}

fn check_controls(panel: &TsQuantilePanel) -> Result<()> {
    if panel.groups.len() < 2 {
        return Err(Error::Validation("synthetic control needs at least one control group".into()));
    }
    Ok(())
}

/// Stacks pre-period curves at the given `grid_u` rows into a target vector
/// and a design with one column per control.
fn pre_system(panel: &TsQuantilePanel, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let n_v = panel.grid_v.len();
    let k = panel.groups.len() - 1;
    let n = rows.len() * n_v;
    let pre = Regime::Pre.index();
    let target = DVector::from_iterator(
        n,
        rows.iter().flat_map(|&m| panel.tables[0][pre][m].values().iter().copied()),
    );
    let design = DMatrix::from_fn(n, k, |r, c| {
        let (m, s) = (rows[r / n_v], r % n_v);
        panel.tables[c + 1][pre][m].values()[s]
    });
    (design, target)
}

/// Weights minimizing the pooled squared distance between the treated
/// group's pre-period curves and the weighted control curves over
/// `grid_u x grid_v`.
pub fn fit_weights(panel: &TsQuantilePanel) -> Result<WeightFit> {
    check_controls(panel)?;
    let rows: Vec<usize> = (0..panel.grid_u.len()).collect();
    let (design, target) = pre_system(panel, &rows);
    solve(panel.controls().to_vec(), design, target)
}

/// Separate fits at each `tau_u` of the grid, for checking that the weights
/// do not depend on the individual level.
pub fn per_tau_u_weights(panel: &TsQuantilePanel) -> Result<Vec<(f64, WeightFit)>> {
    check_controls(panel)?;
    (0..panel.grid_u.len())
        .into_par_iter()
        .map(|m| {
            let (design, target) = pre_system(panel, &[m]);
            Ok((panel.grid_u.points()[m], solve(panel.controls().to_vec(), design, target)?))
        })
        .collect()
}

/// Largest coordinate spread of the per-`tau_u` weights.
pub fn weight_spread(fits: &[(f64, WeightFit)]) -> f64 {
    let k = fits.first().map_or(0, |(_, f)| f.weights.lambda.len());
    (0..k)
        .map(|i| {
            let (lo, hi) = fits.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, f)| {
                let v = f.weights.lambda[i];
                (lo.min(v), hi.max(v))
            });
            hi - lo
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DscEstimate {
    pub tau_u_star: f64,
    pub tau_v_star: f64,
    pub counterfactual: f64,
    pub observed: f64,
    /// `observed - counterfactual`.
    pub gap: f64,
    pub weights: SimplexWeights,
    pub fit_residual: f64,
}

/// Weighted post-period control quantiles at `(tau_u_star, tau_v_star)`.
pub fn dsc_counterfactual(
    panel: &TsQuantilePanel,
    fit: &WeightFit,
    tau_u_star: f64,
    tau_v_star: f64,
) -> Result<DscEstimate> {
    for tau in [tau_u_star, tau_v_star] {
        crate::quantile::check_probability(tau)?;
    }
    let w = &fit.weights;
    if w.groups.as_slice() != panel.controls() {
        return Err(Error::Validation("weights do not match the panel's control groups".into()));
    }
    let counterfactual = w
        .lambda
        .iter()
        .enumerate()
        .filter(|(_, &l)| l > 0.0)
        .map(|(c, &l)| l * panel.value(c + 1, Regime::Post, tau_u_star, tau_v_star))
        .sum();
    let observed = panel.value(0, Regime::Post, tau_u_star, tau_v_star);
    Ok(DscEstimate {
        tau_u_star,
        tau_v_star,
        counterfactual,
        observed,
        gap: observed - counterfactual,
        weights: w.clone(),
        fit_residual: fit.fit_residual,
    })
}

/// Same-period matching: weights that reproduce the treated group's realized
/// pre-period values `y_1t(tau_u)` from the controls' values in the same
/// period. Only periods where every group is observed are used.
pub fn baseline_same_period_weights(cq: &CellQuantiles, t0: i64, grid_u: &QuantileGrid) -> Result<WeightFit> {
    let treated = single_treated(cq)?;
    let controls: Vec<usize> = cq.groups_in(Role::Control).collect();
    if controls.is_empty() {
        return Err(Error::Validation("synthetic control needs at least one control group".into()));
    }
    let mut notes = Vec::new();
    let periods: Vec<i64> = cq
        .periods()
        .iter()
        .copied()
        .filter(|&t| t <= t0)
        .filter(|&t| std::iter::once(treated).chain(controls.iter().copied()).all(|g| cq.curve(g, t).is_some()))
        .collect();
    let skipped = cq.periods().iter().filter(|&&t| t <= t0).count() - periods.len();
    if skipped > 0 {
        notes.push(format!("{skipped} pre-period(s) skipped: not every group observed"));
    }
    if periods.is_empty() {
        return Err(Error::Estimation("no pre-period observes every group".into()));
    }
    let m = grid_u.len();
    let n = periods.len() * m;
    let target = DVector::from_iterator(
        n,
        periods.iter().flat_map(|&t| {
            let c = cq.curve(treated, t).expect("filtered");
            grid_u.points().iter().map(move |&u| c.eval(u))
        }),
    );
    let design = DMatrix::from_fn(n, controls.len(), |r, c| {
        cq.curve(controls[c], periods[r / m]).expect("filtered").eval(grid_u.points()[r % m])
    });
    let names = controls.iter().map(|&g| cq.groups()[g].clone()).collect();
    let mut fit = solve(names, design, target)?;
    fit.notes.extend(notes);
    Ok(fit)
}

/// Long-format dump of target and fitted pre-period curves:
/// `tau_u, tau_v, target, fitted`.
pub fn write_fit_long<W: Write>(panel: &TsQuantilePanel, fit: &WeightFit, out: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(out);
    w.write_record(["tau_u", "tau_v", "target", "fitted"])?;
    let pre = Regime::Pre.index();
    for (m, &tau_u) in panel.grid_u.points().iter().enumerate() {
        for (s, &tau_v) in panel.grid_v.points().iter().enumerate() {
            let target = panel.tables[0][pre][m].values()[s];
            let fitted: f64 = fit
                .weights
                .lambda
                .iter()
                .enumerate()
                .map(|(c, l)| l * panel.tables[c + 1][pre][m].values()[s])
                .sum();
            w.write_record(&[tau_u.to_string(), tau_v.to_string(), target.to_string(), fitted.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use statrs::distribution::{ContinuousCDF, Normal};
    use std::collections::BTreeMap;

    fn grid(m: usize) -> QuantileGrid {
        QuantileGrid::new(m, 0.05, 0.95).unwrap()
    }

    /// Cells `a(tau_u) + v_t` with `v` drawn per group and period.
    fn panel_from(
        groups: &[(&str, Role)],
        periods: i64,
        mut v: impl FnMut(usize, i64) -> f64,
        cell_grid: &QuantileGrid,
    ) -> CellQuantiles {
        let mut by_cell = BTreeMap::new();
        for g in 0..groups.len() {
            for t in 1..=periods {
                let vt = v(g, t);
                by_cell.insert((g, t), QuantileCurve::new(cell_grid, cell_grid.points().iter().map(|&u| u + vt).collect()).unwrap());
            }
        }
        let groups = groups.iter().map(|(n, r)| (n.to_string(), *r)).collect();
        CellQuantiles::from_curves(cell_grid.clone(), groups, periods / 2, by_cell).unwrap()
    }

    const GROUPS: [(&str, Role); 4] = [("a", Role::Treated), ("b", Role::Control), ("c", Role::Control), ("d", Role::Control)];

    #[test]
    fn constant_series_gives_constant_curve() {
        let g = grid(9);
        let cq = panel_from(&GROUPS[..2], 40, |_, _| 3.0, &g);
        let p = build_ts_panel(&cq, 20, &g, &g, 20).unwrap();
        let c = p.curve(1, Regime::Post, 0.5);
        assert!(c.values().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn short_regime_is_named() {
        let g = grid(9);
        let cq = panel_from(&GROUPS[..2], 30, |_, _| 0.0, &g);
        let err = build_ts_panel(&cq, 15, &g, &g, 20).unwrap_err().to_string();
        assert!(err.contains("`a`") && err.contains("pre"), "{err}");
        assert!(build_ts_panel(&cq, 30, &g, &g, 1).is_err());
    }

    #[test]
    fn time_series_curve_tracks_normal() {
        let g = grid(9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cq = panel_from(&GROUPS[..2], 20_000, |_, _| rng.sample(StandardNormal), &g);
        let gv = QuantileGrid::new(81, 0.1, 0.9).unwrap();
        let p = build_ts_panel(&cq, 10_000, &grid(5), &gv, 20).unwrap();
        let normal = Normal::standard();
        for tau_u in [0.2, 0.5, 0.8] {
            let c = p.curve(0, Regime::Pre, tau_u);
            let sup = gv.points().iter().map(|&tv| (c.eval(tv) - tau_u - normal.inverse_cdf(tv)).abs()).fold(0.0, f64::max);
            assert!(sup < 0.05, "tau_u={tau_u} sup={sup}");
        }
    }

    #[test]
    fn reversing_time_leaves_curves_unchanged() {
        let g = grid(9);
        let draws: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            (0..200).map(|_| rng.random::<f64>()).collect()
        };
        let fwd = panel_from(&GROUPS[..2], 100, |gr, t| draws[gr * 100 + t as usize - 1], &g);
        // periods 1..=50 and 51..=100 reversed within each regime
        let rev = panel_from(&GROUPS[..2], 100, |gr, t| {
            let t = if t <= 50 { 51 - t } else { 151 - t };
            draws[gr * 100 + t as usize - 1]
        }, &g);
        let a = build_ts_panel(&fwd, 50, &g, &g, 20).unwrap();
        let b = build_ts_panel(&rev, 50, &g, &g, 20).unwrap();
        for gr in 0..2 {
            for r in [Regime::Pre, Regime::Post] {
                assert_eq!(a.table(gr, r), b.table(gr, r));
            }
        }
    }

    /// Panel whose treated group at period `t` equals a fixed mix of the
    /// controls' quantile levels, so its time-series curves are exact mixtures.
    fn mixture_panel(lambda: &[f64], shift: f64) -> CellQuantiles {
        let g = grid(9);
        let n = 200i64;
        // control effects are distinct increasing functions of a common rank r_t
        panel_from(&GROUPS, n, |gr, t| {
            let r = ((t - 1) % (n / 2)) as f64 / (n / 2) as f64;
            let q = |c: usize| [r, 1.0 + 3.0 * r * r, 5.0 + 2.0 * r.sqrt()][c];
            if gr == 0 {
                let mix: f64 = lambda.iter().enumerate().map(|(c, l)| l * q(c)).sum();
                mix + if t > n / 2 { shift } else { 0.0 }
            } else {
                q(gr - 1)
            }
        }, &g)
    }

    #[test]
    fn exact_mixture_is_recovered_with_zero_gap() {
        let cq = mixture_panel(&[0.3, 0.5, 0.2], 0.0);
        let g = grid(9);
        let p = build_ts_panel(&cq, 100, &g, &g, 20).unwrap();
        let fit = fit_weights(&p).unwrap();
        for (w, t) in fit.weights.lambda.iter().zip([0.3, 0.5, 0.2]) {
            assert!((w - t).abs() < 1e-6, "{:?}", fit.weights);
        }
        assert!(fit.fit_residual < 1e-12);
        assert!(fit.kkt_residual < 1e-6);
        let est = dsc_counterfactual(&p, &fit, 0.5, 0.5).unwrap();
        assert!(est.gap.abs() < 1e-6, "{est:?}");
        assert_eq!(est.gap, est.observed - est.counterfactual);

        let shifted = mixture_panel(&[0.3, 0.5, 0.2], 1.0);
        let p = build_ts_panel(&shifted, 100, &g, &g, 20).unwrap();
        let est = dsc_counterfactual(&p, &fit_weights(&p).unwrap(), 0.3, 0.7).unwrap();
        assert!((est.gap - 1.0).abs() < 1e-6, "{est:?}");
    }

    #[test]
    fn vertex_and_interior_representations() {
        let g = grid(9);
        let p = build_ts_panel(&mixture_panel(&[1.0, 0.0, 0.0], 0.0), 100, &g, &g, 20).unwrap();
        let fit = fit_weights(&p).unwrap();
        assert!((fit.weights.lambda[0] - 1.0).abs() < 1e-6);
        let est = dsc_counterfactual(&p, &fit, 0.5, 0.5).unwrap();
        let control = p.value(1, Regime::Post, 0.5, 0.5);
        assert!((est.counterfactual - control).abs() < 1e-6);

        let p = build_ts_panel(&mixture_panel(&[0.5, 0.5, 0.0], 0.0), 100, &g, &g, 20).unwrap();
        let fit = fit_weights(&p).unwrap();
        assert!((fit.weights.lambda[0] - 0.5).abs() < 1e-6 && (fit.weights.lambda[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn outside_hull_matches_brute_force_grid() {
        let g = grid(7);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let groups = [("a", Role::Treated), ("b", Role::Control), ("c", Role::Control), ("d", Role::Control), ("e", Role::Control)];
        let scale = [4.0, 1.0, 2.0, 0.5, 3.0];
        let loc = [-1.0, 0.0, 2.0, 1.0, -0.5];
        let cq = panel_from(&groups, 60, |gr, _| loc[gr] + scale[gr] * rng.sample::<f64, _>(StandardNormal), &g);
        let p = build_ts_panel(&cq, 30, &g, &g, 20).unwrap();
        let fit = fit_weights(&p).unwrap();
        assert!(fit.fit_residual > 1e-3);

        let rows: Vec<usize> = (0..g.len()).collect();
        let (a, b) = pre_system(&p, &rows);
        let problem = SimplexLsProblem::new(a, b).unwrap();
        let mut best = (f64::INFINITY, vec![]);
        for i in 0..=100 {
            for j in 0..=100 - i {
                for k in 0..=100 - i - j {
                    let w = [i as f64 / 100.0, j as f64 / 100.0, k as f64 / 100.0, (100 - i - j - k) as f64 / 100.0];
                    let f = problem.objective(&w);
                    if f < best.0 {
                        best = (f, w.to_vec());
                    }
                }
            }
        }
        for (x, y) in fit.weights.lambda.iter().zip(&best.1) {
            assert!((x - y).abs() < 0.02, "{:?} vs {:?}", fit.weights.lambda, best.1);
        }
        assert!(fit.fit_residual <= best.0 + 1e-9);
    }

    #[test]
    fn permuting_controls_permutes_weights() {
        let g = grid(9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<f64> = (0..4 * 60).map(|_| rng.sample(StandardNormal)).collect();
        let scale = [1.5, 1.0, 2.0, 0.5];
        let v = |gr: usize, t: i64| scale[gr] * draws[gr * 60 + t as usize - 1];
        let cq = panel_from(&GROUPS, 60, v, &g);
        let swapped = [("a", Role::Treated), ("d", Role::Control), ("c", Role::Control), ("b", Role::Control)];
        let perm = [0, 3, 2, 1];
        let cq2 = panel_from(&swapped, 60, |gr, t| v(perm[gr], t), &g);
        let w1 = fit_weights(&build_ts_panel(&cq, 30, &g, &g, 20).unwrap()).unwrap().weights;
        let w2 = fit_weights(&build_ts_panel(&cq2, 30, &g, &g, 20).unwrap()).unwrap().weights;
        // from_curves keeps insertion order, so names identify the columns
        for name in ["b", "c", "d"] {
            assert!((w1.get(name).unwrap() - w2.get(name).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn common_shift_moves_counterfactual() {
        let g = grid(9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws: Vec<f64> = (0..4 * 60).map(|_| rng.sample(StandardNormal)).collect();
        let v = |gr: usize, t: i64| (gr as f64 + 1.0) * draws[gr * 60 + t as usize - 1];
        let a = panel_from(&GROUPS, 60, v, &g);
        let b = panel_from(&GROUPS, 60, |gr, t| v(gr, t) + 2.5, &g);
        let ea = {
            let p = build_ts_panel(&a, 30, &g, &g, 20).unwrap();
            dsc_counterfactual(&p, &fit_weights(&p).unwrap(), 0.4, 0.6).unwrap()
        };
        let eb = {
            let p = build_ts_panel(&b, 30, &g, &g, 20).unwrap();
            dsc_counterfactual(&p, &fit_weights(&p).unwrap(), 0.4, 0.6).unwrap()
        };
        assert!((eb.counterfactual - ea.counterfactual - 2.5).abs() < 1e-6);
    }

    #[test]
    fn baseline_agrees_when_group_effects_coincide() {
        let g = grid(9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let common: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
        let cq = panel_from(&GROUPS[..3], 60, |gr, t| common[t as usize - 1] + if gr == 2 { 1.0 } else { 0.0 }, &g);
        let p = build_ts_panel(&cq, 30, &g, &g, 20).unwrap();
        let fit = fit_weights(&p).unwrap();
        let base = baseline_same_period_weights(&cq, 30, &g).unwrap();
        for (x, y) in fit.weights.lambda.iter().zip(&base.weights.lambda) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((fit.weights.lambda[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn single_control_gets_full_weight() {
        let g = grid(9);
        let cq = panel_from(&GROUPS[..2], 40, |gr, t| gr as f64 * t as f64, &g);
        let p = build_ts_panel(&cq, 20, &g, &g, 20).unwrap();
        assert_eq!(fit_weights(&p).unwrap().weights.lambda, vec![1.0]);
        assert_eq!(baseline_same_period_weights(&cq, 20, &g).unwrap().weights.lambda, vec![1.0]);
    }

    #[test]
    fn weights_validate() {
        assert!(SimplexWeights::new(vec!["a".into()], vec![0.5]).is_err());
        assert!(SimplexWeights::new(vec!["a".into(), "b".into()], vec![1.5, -0.5]).is_err());
        assert!(SimplexWeights::new(vec!["a".into(), "b".into()], vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn per_tau_u_fits_agree_under_location_model() {
        let cq = mixture_panel(&[0.3, 0.5, 0.2], 0.0);
        let g = grid(9);
        let p = build_ts_panel(&cq, 100, &g, &g, 20).unwrap();
        let fits = per_tau_u_weights(&p).unwrap();
        assert_eq!(fits.len(), 9);
        assert!(weight_spread(&fits) < 1e-6);
    }

    #[test]
    fn fit_dump_has_one_row_per_grid_cell() {
        let g = grid(5);
        let cq = mixture_panel(&[0.3, 0.5, 0.2], 0.0);
        let p = build_ts_panel(&cq, 100, &g, &g, 20).unwrap();
        let mut out = Vec::new();
        write_fit_long(&p, &fit_weights(&p).unwrap(), &mut out, b',').unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("tau_u,tau_v,target,fitted\n"));
        assert_eq!(text.lines().count(), 1 + 25);
    }
}
